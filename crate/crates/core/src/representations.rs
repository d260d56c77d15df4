//! Dense event representations: per-polarity count frame, temporally
//! bilinear voxel grid and exponential-decay time surface.
//!
//! Builders accumulate in stream order, so identical windows always produce
//! bit-identical grids. Scaling for network input is a separate step
//! ([`normalize_max_abs`]) so that the mass invariants stay checkable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::tensor::Tensor;

pub const DEFAULT_VOXEL_BINS: usize = 5;

/// Half-open time span `[t0, t0 + dt)` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TimeWindow {
    pub t0: u64,
    pub dt: u64,
}

impl TimeWindow {
    pub fn new(t0: u64, dt: u64) -> Self {
        Self { t0, dt }
    }

    /// Smallest window holding every event of the stream; zero-length when empty.
    pub fn covering(stream: &EventStream) -> Self {
        match (stream.first_t(), stream.last_t()) {
            (Some(a), Some(b)) => Self {
                t0: a,
                dt: b - a + 1,
            },
            _ => Self::default(),
        }
    }

    pub fn end(&self) -> u64 {
        self.t0 + self.dt
    }
}

/// Channel-major `C x H x W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Grid<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::default(); channels * height * width],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

impl<T: Copy + Into<f64>> Grid<T> {
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v.into() as f32).collect();
        Tensor::new(vec![self.channels, self.height, self.width], data)
            .expect("grid shape matches data")
    }

    pub fn to_f64(&self) -> Grid<f64> {
        Grid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v.into()).collect(),
        }
    }
}

/// Per-polarity event counts; channel 0 holds ON events, channel 1 OFF events.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRep {
    pub grid: Grid<u32>,
    pub window: TimeWindow,
}

impl FrameRep {
    pub fn total(&self) -> u64 {
        self.grid.data.iter().map(|&c| u64::from(c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelRep {
    /// `bins x H x W`, accumulated in double precision.
    pub grid: Grid<f64>,
    pub window: TimeWindow,
}

impl VoxelRep {
    pub fn bins(&self) -> usize {
        self.grid.channels
    }

    pub fn total(&self) -> f64 {
        self.grid.data.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSurfaceRep {
    /// `2 x H x W`, channel layout as in [`FrameRep`]; values in `[0, 1]`.
    pub grid: Grid<f64>,
    pub t_ref: u64,
    pub tau: f64,
}

fn geometry_dims(window: &EventStream) -> (usize, usize) {
    let g = window.geometry();
    (g.height as usize, g.width as usize)
}

pub fn build_frame(window: &EventStream) -> FrameRep {
    let (h, w) = geometry_dims(window);
    let mut grid = Grid::<u32>::zeros(2, h, w);
    for e in window.events() {
        let i = grid.index(e.polarity.channel(), e.y as usize, e.x as usize);
        grid.data[i] += 1;
    }
    FrameRep {
        grid,
        window: TimeWindow::covering(window),
    }
}

/// Signed voxel grid. Each event lands at normalized time
/// `t* = (B-1)(t - t_first)/(t_last - t_first)` and adds
/// `polarity * max(0, 1 - |b - t*|)` to every bin `b`. A window whose events
/// all share one timestamp puts all mass into bin 0.
pub fn build_voxel(window: &EventStream, bins: usize) -> Result<VoxelRep> {
    if bins == 0 {
        return Err(Error::Parameter(
            "voxel bin count must be at least 1".into(),
        ));
    }
    let (h, w) = geometry_dims(window);
    let mut grid = Grid::<f64>::zeros(bins, h, w);
    let (first, last) = match (window.first_t(), window.last_t()) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Ok(VoxelRep {
                grid,
                window: TimeWindow::default(),
            })
        }
    };
    let span = (last - first) as f64;
    let scale = if last > first {
        (bins - 1) as f64 / span
    } else {
        0.0
    };
    for e in window.events() {
        let polarity = f64::from(e.polarity.sign());
        let t_norm = (e.t - first) as f64 * scale;
        let lower = t_norm.floor();
        let frac = t_norm - lower;
        let b0 = lower as usize;
        let (y, x) = (e.y as usize, e.x as usize);
        let i0 = grid.index(b0.min(bins - 1), y, x);
        if frac == 0.0 || b0 + 1 >= bins {
            grid.data[i0] += polarity;
        } else {
            let i1 = grid.index(b0 + 1, y, x);
            grid.data[i0] += polarity * (1.0 - frac);
            grid.data[i1] += polarity * frac;
        }
    }
    Ok(VoxelRep {
        grid,
        window: TimeWindow::covering(window),
    })
}

/// Default decay constant: a third of the window length.
pub fn default_tau(dt: u64) -> f64 {
    (dt as f64 / 3.0).max(1.0)
}

/// Exponential-decay surface `exp(-(t_ref - t_last)/tau)` of the most recent
/// event per pixel and polarity; pixels without events stay exactly 0.
pub fn build_timesurface(window: &EventStream, t_ref: u64, tau: f64) -> Result<TimeSurfaceRep> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("tau must be positive, got {tau}")));
    }
    if let Some(last) = window.last_t() {
        if t_ref < last {
            return Err(Error::Parameter(format!(
                "reference time {t_ref} precedes event at {last}"
            )));
        }
    }
    let (h, w) = geometry_dims(window);
    let mut latest: Vec<Option<u64>> = vec![None; 2 * h * w];
    for e in window.events() {
        let i = (e.polarity.channel() * h + e.y as usize) * w + e.x as usize;
        latest[i] = Some(e.t);
    }
    let mut grid = Grid::<f64>::zeros(2, h, w);
    for (v, t) in grid.data.iter_mut().zip(&latest) {
        if let Some(t) = t {
            *v = (-((t_ref - t) as f64) / tau).exp();
        }
    }
    Ok(TimeSurfaceRep { grid, t_ref, tau })
}

/// Divides by the largest absolute entry; non-negative grids land in `[0, 1]`,
/// signed grids in `[-1, 1]`. All-zero grids are returned unchanged.
pub fn normalize_max_abs(values: &[f64]) -> Vec<f64> {
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return values.to_vec();
    }
    values.iter().map(|v| v / peak).collect()
}

/// Sum of event polarities (`#ON - #OFF`).
pub fn signed_sum(window: &EventStream) -> i64 {
    window
        .events()
        .iter()
        .map(|e| i64::from(e.polarity.sign()))
        .sum()
}

/// Which of the three representations a grid holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RepKind {
    Frame,
    Voxel,
    TimeSurface,
}

impl RepKind {
    pub const ALL: [RepKind; 3] = [RepKind::Frame, RepKind::Voxel, RepKind::TimeSurface];

    pub fn name(self) -> &'static str {
        match self {
            RepKind::Frame => "frame",
            RepKind::Voxel => "voxel",
            RepKind::TimeSurface => "timesurface",
        }
    }

    pub fn channels(self, bins: usize) -> usize {
        match self {
            RepKind::Voxel => bins,
            _ => 2,
        }
    }
}

impl std::str::FromStr for RepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(RepKind::Frame),
            "voxel" => Ok(RepKind::Voxel),
            "timesurface" | "time_surface" | "ts" => Ok(RepKind::TimeSurface),
            other => Err(Error::Parameter(format!(
                "unknown representation `{other}`"
            ))),
        }
    }
}

/// Builds one representation over a window; the time surface references the
/// window end (last microsecond) and uses `tau` or the default.
pub fn build_any(
    window: &EventStream,
    span: TimeWindow,
    kind: RepKind,
    bins: usize,
    tau: Option<f64>,
) -> Result<Grid<f64>> {
    match kind {
        RepKind::Frame => Ok(build_frame(window).grid.to_f64()),
        RepKind::Voxel => Ok(build_voxel(window, bins)?.grid),
        RepKind::TimeSurface => {
            let t_ref = span
                .end()
                .saturating_sub(1)
                .max(window.last_t().unwrap_or(0));
            let tau = tau.unwrap_or_else(|| default_tau(span.dt));
            Ok(build_timesurface(window, t_ref, tau)?.grid)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, Polarity, SensorGeometry};

    fn geometry() -> SensorGeometry {
        SensorGeometry::new(6, 5).unwrap()
    }

    fn stream(events: Vec<Event>) -> EventStream {
        EventStream::new(geometry(), events).unwrap()
    }

    #[test]
    fn single_event_frame() {
        let f = build_frame(&stream(vec![Event::new(0, 2, 3, Polarity::Positive)]));
        assert_eq!(f.grid.get(0, 3, 2), 1);
        assert_eq!(f.total(), 1);
    }

    #[test]
    fn empty_window_is_zero() {
        let s = stream(vec![]);
        assert!(build_frame(&s).grid.data.iter().all(|&v| v == 0));
        assert!(build_voxel(&s, 3)
            .unwrap()
            .grid
            .data
            .iter()
            .all(|&v| v == 0.0));
        assert!(build_timesurface(&s, 10, 1.0)
            .unwrap()
            .grid
            .data
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn frame_channel_sums_match_brute_force() {
        let evs = vec![
            Event::new(0, 0, 0, Polarity::Positive),
            Event::new(1, 1, 0, Polarity::Negative),
            Event::new(2, 0, 0, Polarity::Positive),
            Event::new(3, 5, 4, Polarity::Negative),
            Event::new(4, 2, 2, Polarity::Negative),
        ];
        let on = evs
            .iter()
            .filter(|e| e.polarity == Polarity::Positive)
            .count() as u32;
        let off = evs.len() as u32 - on;
        let f = build_frame(&stream(evs));
        let plane = 6 * 5;
        assert_eq!(f.grid.data[..plane].iter().sum::<u32>(), on);
        assert_eq!(f.grid.data[plane..].iter().sum::<u32>(), off);
        assert_eq!(f.grid.get(0, 0, 0), 2);
    }

    #[test]
    fn voxel_bilinear_split() {
        // t* = 2 * (t - 0) / 4 -> event at t=3 has t* = 1.5
        let s = stream(vec![
            Event::new(0, 0, 0, Polarity::Negative),
            Event::new(3, 1, 1, Polarity::Positive),
            Event::new(4, 0, 0, Polarity::Negative),
        ]);
        let v = build_voxel(&s, 3).unwrap();
        assert_eq!(v.grid.get(1, 1, 1), 0.5);
        assert_eq!(v.grid.get(2, 1, 1), 0.5);
        assert_eq!(v.grid.get(0, 1, 1), 0.0);
        assert_eq!(v.grid.get(0, 0, 0), -1.0);
        assert_eq!(v.grid.get(2, 0, 0), -1.0);
        assert!((v.total() - -1.0).abs() < 1e-12);
    }

    #[test]
    fn voxel_degenerate_duration_goes_to_bin_zero() {
        let s = stream(vec![
            Event::new(7, 0, 0, Polarity::Positive),
            Event::new(7, 1, 0, Polarity::Positive),
            Event::new(7, 1, 0, Polarity::Negative),
        ]);
        let v = build_voxel(&s, 4).unwrap();
        let plane = 30;
        assert_eq!(v.grid.data[..plane].iter().sum::<f64>(), 1.0);
        assert!(v.grid.data[plane..].iter().all(|&x| x == 0.0));
        assert!(matches!(build_voxel(&s, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn timesurface_values() {
        let s = stream(vec![
            Event::new(0, 0, 0, Polarity::Positive),
            Event::new(100, 1, 0, Polarity::Negative),
        ]);
        let ts = build_timesurface(&s, 100, 100.0).unwrap();
        assert_eq!(ts.grid.get(1, 0, 1), 1.0);
        assert!((ts.grid.get(0, 0, 0) - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(ts.grid.get(1, 0, 0), 0.0);
        assert_eq!(ts.grid.get(0, 4, 5), 0.0);
        assert!(matches!(
            build_timesurface(&s, 99, 1.0),
            Err(Error::Parameter(_))
        ));
        assert!(build_timesurface(&s, 200, 0.0).is_err());
    }

    #[test]
    fn timesurface_uses_most_recent_event() {
        let s = stream(vec![
            Event::new(0, 0, 0, Polarity::Positive),
            Event::new(50, 0, 0, Polarity::Positive),
        ]);
        let ts = build_timesurface(&s, 100, 50.0).unwrap();
        assert!((ts.grid.get(0, 0, 0) - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn timesurface_decreases_with_reference() {
        let s = stream(vec![Event::new(10, 3, 3, Polarity::Negative)]);
        let mut prev = f64::INFINITY;
        for t_ref in [10u64, 11, 20, 100, 1000] {
            let v = build_timesurface(&s, t_ref, 40.0)
                .unwrap()
                .grid
                .get(1, 3, 3);
            assert!(v < prev && v > 0.0);
            prev = v;
        }
    }

    #[test]
    fn normalization_is_separate() {
        assert_eq!(normalize_max_abs(&[0.0, 2.0, -4.0]), vec![0.0, 0.5, -1.0]);
        assert_eq!(normalize_max_abs(&[0.0, 0.0]), vec![0.0, 0.0]);
    }
}
