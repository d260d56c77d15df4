//! Windowing and window-selection rules used to turn event recordings into
//! single evaluation frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::representations::TimeWindow;

pub const SECOND_US: u64 = 1_000_000;
/// Accumulation length of each E-SIE style frame.
pub const ESIE_FRAME_US: u64 = 40_000;
/// Length of the centred interval taken from each half of a recording.
pub const ESIE_CENTER_US: u64 = 5 * SECOND_US;
pub const ESIE_SEGMENTS_PER_HALF: u64 = 5;
pub const ESIE_MIN_DURATION_US: u64 = 10 * SECOND_US;

/// Consecutive, non-overlapping windows with their event counts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WindowIndex {
    pub windows: Vec<TimeWindow>,
    pub counts: Vec<usize>,
}

impl WindowIndex {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn from_counts(windows: Vec<TimeWindow>, counts: Vec<usize>) -> Result<Self> {
        if windows.len() != counts.len() {
            return Err(Error::Shape(format!(
                "{} windows but {} counts",
                windows.len(),
                counts.len()
            )));
        }
        Ok(Self { windows, counts })
    }
}

/// Window length for a frame rate, rounded to whole microseconds.
pub fn frame_period_us(fps: f64) -> Result<u64> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::Parameter(format!("fps must be positive, got {fps}")));
    }
    let dt = (1e6 / fps).round();
    if dt < 1.0 {
        return Err(Error::Parameter(format!(
            "fps {fps} gives a sub-microsecond window"
        )));
    }
    Ok(dt as u64)
}

/// Splits `[t_first, t_last]` into windows of `1e6 / fps` microseconds aligned
/// to the first event. The last window may extend past `t_last`.
pub fn segment_stream(stream: &EventStream, fps: f64) -> Result<WindowIndex> {
    let dt = frame_period_us(fps)?;
    let (first, last) = match (stream.first_t(), stream.last_t()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Ok(WindowIndex::default()),
    };
    let n = (last - first) / dt + 1;
    let windows: Vec<TimeWindow> = (0..n)
        .map(|i| TimeWindow::new(first + i * dt, dt))
        .collect();
    let counts = windows
        .iter()
        .map(|w| stream.count_in_window(w.t0, w.dt))
        .collect();
    Ok(WindowIndex { windows, counts })
}

/// Index of the window with the most events; ties go to the earliest window.
pub fn select_max_event_segment(index: &WindowIndex) -> Result<usize> {
    top_k_order(index)
        .first()
        .copied()
        .ok_or_else(|| Error::Parameter("cannot select from an empty window index".into()))
}

/// The `k` busiest windows, most events first, ties by earlier start.
pub fn select_top_k_segments(index: &WindowIndex, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    let mut order = top_k_order(index);
    order.truncate(k);
    Ok(order)
}

fn top_k_order(index: &WindowIndex) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..index.len()).collect();
    ids.sort_by(|&a, &b| {
        index.counts[b]
            .cmp(&index.counts[a])
            .then(index.windows[a].t0.cmp(&index.windows[b].t0))
    });
    ids
}

/// Start times of the ten 40 ms windows taken from a recording spanning
/// `[first, last]`: the recording is halved, the centred 5 s of each half is
/// cut into five 1 s segments, and the first 40 ms of each segment is kept.
pub fn esie_windows(first: u64, last: u64) -> Result<Vec<TimeWindow>> {
    let duration = last.saturating_sub(first);
    if duration < ESIE_MIN_DURATION_US {
        return Err(Error::Protocol(format!(
            "recording spans {:.6} s, at least 10 s required",
            duration as f64 / 1e6
        )));
    }
    let half = duration / 2;
    let margin = (half - ESIE_CENTER_US) / 2;
    let segment = ESIE_CENTER_US / ESIE_SEGMENTS_PER_HALF;
    let mut out = Vec::with_capacity(10);
    for h in 0..2 {
        let start = first + h * half + margin;
        for s in 0..ESIE_SEGMENTS_PER_HALF {
            out.push(TimeWindow::new(start + s * segment, ESIE_FRAME_US));
        }
    }
    Ok(out)
}

/// Applies [`esie_windows`] to a stream and slices out the ten windows.
pub fn esie_protocol(stream: &EventStream) -> Result<Vec<EventStream>> {
    let (first, last) = match (stream.first_t(), stream.last_t()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Protocol("empty recording".into())),
    };
    Ok(esie_windows(first, last)?
        .into_iter()
        .map(|w| stream.slice_window(w.t0, w.dt))
        .collect())
}

/// One selected window as written to a selection manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub t0: u64,
    pub dt: u64,
    pub count: usize,
}

/// Selection manifest: the source event file and its chosen windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub events: String,
    pub fps: f64,
    pub windows: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn from_selection(events: String, fps: f64, index: &WindowIndex, ids: &[usize]) -> Self {
        let windows = ids
            .iter()
            .map(|&i| ManifestEntry {
                t0: index.windows[i].t0,
                dt: index.windows[i].dt,
                count: index.counts[i],
            })
            .collect();
        Self {
            events,
            fps,
            windows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, Polarity, SensorGeometry};

    fn stream_at(ts: &[u64]) -> EventStream {
        let events = ts
            .iter()
            .map(|&t| Event::new(t, 0, 0, Polarity::Positive))
            .collect();
        EventStream::new(SensorGeometry::new(2, 2).unwrap(), events).unwrap()
    }

    fn index_of(counts: &[usize]) -> WindowIndex {
        let windows = (0..counts.len() as u64)
            .map(|i| TimeWindow::new(i * 10, 10))
            .collect();
        WindowIndex::from_counts(windows, counts.to_vec()).unwrap()
    }

    #[test]
    fn hundred_ms_at_25fps_gives_three_windows() {
        let s = stream_at(&[0, 10_000, 45_000, 79_999, 80_000, 100_000]);
        let idx = segment_stream(&s, 25.0).unwrap();
        assert_eq!(idx.len(), 3);
        assert!(idx.windows.iter().all(|w| w.dt == 40_000));
        assert_eq!(idx.counts, vec![2, 2, 2]);
        assert_eq!(idx.counts.iter().sum::<usize>(), s.len());
    }

    #[test]
    fn windows_align_to_first_event() {
        let s = stream_at(&[5_000, 50_000]);
        let idx = segment_stream(&s, 25.0).unwrap();
        assert_eq!(idx.windows[0].t0, 5_000);
        assert_eq!(idx.windows[1].t0, 45_000);
    }

    #[test]
    fn empty_stream_empty_index() {
        assert!(segment_stream(&stream_at(&[]), 25.0).unwrap().is_empty());
        assert!(segment_stream(&stream_at(&[1]), 0.0).is_err());
    }

    #[test]
    fn max_selection_prefers_earliest_tie() {
        assert_eq!(
            select_max_event_segment(&index_of(&[3, 9, 9, 1])).unwrap(),
            1
        );
        assert_eq!(select_max_event_segment(&index_of(&[7])).unwrap(), 0);
        assert!(select_max_event_segment(&index_of(&[])).is_err());
    }

    #[test]
    fn top_k() {
        assert_eq!(
            select_top_k_segments(&index_of(&[5, 2, 8, 8]), 2).unwrap(),
            vec![2, 3]
        );
        assert_eq!(
            select_top_k_segments(&index_of(&[5, 2]), 9).unwrap(),
            vec![0, 1]
        );
        assert!(select_top_k_segments(&index_of(&[5]), 0).is_err());
    }

    #[test]
    fn esie_ten_point_four_seconds() {
        let ws = esie_windows(0, 10_400_000).unwrap();
        let starts: Vec<u64> = ws.iter().map(|w| w.t0).collect();
        assert_eq!(
            starts,
            vec![
                100_000, 1_100_000, 2_100_000, 3_100_000, 4_100_000, 5_300_000, 6_300_000,
                7_300_000, 8_300_000, 9_300_000
            ]
        );
        assert!(ws.iter().all(|w| w.dt == 40_000));
    }

    #[test]
    fn esie_exact_ten_seconds_has_no_margin() {
        let ws = esie_windows(7, 10_000_007).unwrap();
        assert_eq!(ws[0].t0, 7);
        assert_eq!(ws[5].t0, 5_000_007);
    }

    #[test]
    fn esie_rejects_short_recordings() {
        assert!(matches!(
            esie_windows(0, 9_000_000),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            esie_protocol(&stream_at(&[0, 9_000_000])),
            Err(Error::Protocol(_))
        ));
    }
}
