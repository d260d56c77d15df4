//! Ideal-threshold frames-to-events conversion.
//!
//! Each pixel tracks a log-luminance reference. Log luminance is linear in
//! time between consecutive frames, and every time it moves a full contrast
//! step `C` away from the reference an event fires at the exact crossing
//! time and the reference moves by `C` toward the signal. Noise, refractory
//! and bandwidth effects of real sensors are not modelled.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Polarity, SensorGeometry};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const DEFAULT_LOG_EPS: f64 = 1e-3;

/// Relative tolerance (in units of the threshold) for a level to count as reached.
const CROSSING_SLACK: f64 = 1e-9;

/// Ordered luminance frames, values in `[0, 1]`, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    height: usize,
    width: usize,
    frames: Vec<Vec<f64>>,
    fps: f64,
}

impl FrameSequence {
    pub fn new(height: usize, width: usize, frames: Vec<Vec<f64>>, fps: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Parameter(format!(
                "need at least 2 frames, got {}",
                frames.len()
            )));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Parameter(format!("fps must be positive, got {fps}")));
        }
        if height == 0 || width == 0 || height > 1 << 16 || width > 1 << 16 {
            return Err(Error::Parameter(format!(
                "unsupported frame size {width}x{height}"
            )));
        }
        for (k, f) in frames.iter().enumerate() {
            if f.len() != height * width {
                return Err(Error::Shape(format!(
                    "frame {k} has {} pixels, expected {}",
                    f.len(),
                    height * width
                )));
            }
            if let Some(v) = f.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Parameter(format!(
                    "frame {k} has luminance {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            frames,
            fps,
        })
    }

    /// Builds a sequence from rank-2 tensors sharing one shape.
    pub fn from_tensors(tensors: &[Tensor], fps: f64) -> Result<Self> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::Parameter("no frames given".into()))?;
        if first.rank() != 2 {
            return Err(Error::Shape(format!(
                "luminance frames must be H x W, got {:?}",
                first.shape()
            )));
        }
        let (h, w) = (first.shape()[0], first.shape()[1]);
        let mut frames = Vec::with_capacity(tensors.len());
        for (k, t) in tensors.iter().enumerate() {
            if t.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "frame {k} has shape {:?}, expected {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            frames.push(t.data().iter().map(|&v| f64::from(v)).collect());
        }
        Self::new(h, w, frames, fps)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    /// Frame period in microseconds.
    pub fn period_us(&self) -> f64 {
        1e6 / self.fps
    }

    /// Time of the last frame in microseconds.
    pub fn duration_us(&self) -> f64 {
        (self.frames.len() - 1) as f64 * self.period_us()
    }

    pub fn geometry(&self) -> SensorGeometry {
        SensorGeometry {
            width: self.width as u32,
            height: self.height as u32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulatorConfig {
    /// Log-intensity contrast step `C`.
    pub threshold: f64,
    /// Floor added before taking the log so black pixels stay finite.
    pub log_eps: f64,
    pub interpolation_factor: usize,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            log_eps: DEFAULT_LOG_EPS,
            interpolation_factor: 1,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Parameter(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if !(self.log_eps > 0.0 && self.log_eps.is_finite()) {
            return Err(Error::Parameter(format!(
                "log_eps must be positive, got {}",
                self.log_eps
            )));
        }
        if self.interpolation_factor == 0 {
            return Err(Error::Parameter("interpolation factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// Inserts `factor - 1` linearly blended frames into every gap and scales
/// the frame rate by `factor`.
pub fn interpolate_frames(seq: &FrameSequence, factor: usize) -> Result<FrameSequence> {
    if factor == 0 {
        return Err(Error::Parameter("interpolation factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(seq.clone());
    }
    let mut frames = Vec::with_capacity((seq.frames.len() - 1) * factor + 1);
    for pair in seq.frames.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        frames.push(a.clone());
        for j in 1..factor {
            let w = j as f64 / factor as f64;
            frames.push(a.iter().zip(b).map(|(&u, &v)| u + (v - u) * w).collect());
        }
    }
    frames.push(seq.frames.last().expect("at least two frames").clone());
    Ok(FrameSequence {
        height: seq.height,
        width: seq.width,
        frames,
        fps: seq.fps * factor as f64,
    })
}

/// A threshold crossing of one pixel: time in microseconds (unrounded) and sign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub t: f64,
    pub polarity: Polarity,
}

/// Crossings of a piecewise-linear log-luminance trace sampled at `times`.
///
/// The reference starts at `levels[0]` and moves by exactly `threshold` per
/// event, so a monotone run from `a` to `b` fires `floor(|b - a'| / C)`
/// events where `a'` is the reference at the start of the run.
pub fn pixel_crossings(levels: &[f64], times: &[f64], threshold: f64) -> Vec<Crossing> {
    debug_assert_eq!(levels.len(), times.len());
    let mut out = Vec::new();
    let Some(&start) = levels.first() else {
        return out;
    };
    // Reference = start + step * threshold, kept on the integer lattice so
    // returning exactly to an earlier level does not drift by rounding.
    let mut step: i64 = 0;
    let level_of = |step: i64| start + step as f64 * threshold;
    let slack = CROSSING_SLACK * threshold;
    for k in 0..levels.len().saturating_sub(1) {
        let (l0, l1) = (levels[k], levels[k + 1]);
        let (t0, t1) = (times[k], times[k + 1]);
        let slope = l1 - l0;
        if slope == 0.0 {
            continue;
        }
        let at = |level: f64| t0 + (t1 - t0) * ((level - l0) / slope).clamp(0.0, 1.0);
        if slope > 0.0 {
            while l1 - level_of(step + 1) >= -slack {
                step += 1;
                out.push(Crossing {
                    t: at(level_of(step)),
                    polarity: Polarity::Positive,
                });
            }
        } else {
            while level_of(step - 1) - l1 >= -slack {
                step -= 1;
                out.push(Crossing {
                    t: at(level_of(step)),
                    polarity: Polarity::Negative,
                });
            }
        }
    }
    out
}

/// Converts a frame sequence into a globally time-sorted event stream.
/// Events sharing a timestamp are ordered by `(y, x, polarity)`.
pub fn frames_to_events(seq: &FrameSequence, cfg: &SimulatorConfig) -> Result<EventStream> {
    cfg.validate()?;
    let seq = interpolate_frames(seq, cfg.interpolation_factor)?;
    let period = seq.period_us();
    let times: Vec<f64> = (0..seq.frames.len()).map(|k| k as f64 * period).collect();
    let duration = seq.duration_us();
    let width = seq.width;

    let mut events: Vec<Event> = (0..seq.height * seq.width)
        .into_par_iter()
        .flat_map_iter(|pixel| {
            let levels: Vec<f64> = seq
                .frames
                .iter()
                .map(|f| (f[pixel] + cfg.log_eps).ln())
                .collect();
            let (x, y) = ((pixel % width) as u16, (pixel / width) as u16);
            pixel_crossings(&levels, &times, cfg.threshold)
                .into_iter()
                .map(move |c| Event {
                    t: c.t.round().clamp(0.0, duration.floor()) as u64,
                    x,
                    y,
                    polarity: c.polarity,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    events.par_sort_by_key(|e| (e.t, e.y, e.x, e.polarity));
    EventStream::new(seq.geometry(), events)
}
