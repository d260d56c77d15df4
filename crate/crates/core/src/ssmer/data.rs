//! Toy representation datasets and view augmentations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::representations::{build_any, normalize_max_abs, Grid, RepKind, TimeWindow};
use crate::simulator::{frames_to_events, FrameSequence, SimulatorConfig};

/// Side length of toy grids.
pub const TOY_RESOLUTION: usize = 16;

const TOY_FPS: f64 = 100.0;
const TOY_FRAMES: usize = 5;
const TOY_WINDOW_US: u64 = 40_000;

/// Frame, voxel grid and time surface of one event window, each resampled
/// to a square grid and scaled by its largest absolute entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RepSample {
    pub grids: [Grid<f64>; 3],
}

impl RepSample {
    pub fn grid(&self, kind: RepKind) -> &Grid<f64> {
        &self.grids[kind_index(kind)]
    }
}

pub(crate) fn kind_index(kind: RepKind) -> usize {
    match kind {
        RepKind::Frame => 0,
        RepKind::Voxel => 1,
        RepKind::TimeSurface => 2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationDataset {
    pub samples: Vec<RepSample>,
    pub bins: usize,
    pub resolution: usize,
}

impl RepresentationDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Flattened input width per representation, in [`RepKind::ALL`] order.
    pub fn input_dims(&self) -> [usize; 3] {
        let area = self.resolution * self.resolution;
        RepKind::ALL.map(|k| k.channels(self.bins) * area)
    }

    /// Builds samples for every manifest window of `stream`.
    pub fn from_manifest(
        manifest: &Manifest,
        stream: &EventStream,
        bins: usize,
        resolution: usize,
    ) -> Result<Self> {
        let samples = manifest
            .windows
            .iter()
            .map(|w| {
                let span = TimeWindow::new(w.t0, w.dt);
                sample_from_window(&stream.slice_window(w.t0, w.dt), span, bins, resolution)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            bins,
            resolution,
        })
    }
}

pub fn sample_from_window(
    window: &EventStream,
    span: TimeWindow,
    bins: usize,
    resolution: usize,
) -> Result<RepSample> {
    if resolution == 0 {
        return Err(Error::Parameter("resolution must be positive".into()));
    }
    let build = |kind| -> Result<Grid<f64>> {
        let g = resample_area(
            &build_any(window, span, kind, bins, None)?,
            resolution,
            resolution,
        );
        Ok(Grid {
            data: normalize_max_abs(&g.data),
            ..g
        })
    };
    Ok(RepSample {
        grids: [
            build(RepKind::Frame)?,
            build(RepKind::Voxel)?,
            build(RepKind::TimeSurface)?,
        ],
    })
}

/// Box-filter downsampling; sizes that do not shrink fall back to bilinear.
pub fn resample_area(grid: &Grid<f64>, height: usize, width: usize) -> Grid<f64> {
    if (grid.height, grid.width) == (height, width) {
        return grid.clone();
    }
    if grid.height < height || grid.width < width {
        return resize_bilinear(grid, height, width);
    }
    let mut out = Grid::zeros(grid.channels, height, width);
    for c in 0..grid.channels {
        for oy in 0..height {
            let (y0, y1) = (oy * grid.height / height, (oy + 1) * grid.height / height);
            for ox in 0..width {
                let (x0, x1) = (ox * grid.width / width, (ox + 1) * grid.width / width);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += grid.get(c, y, x);
                    }
                }
                let i = out.index(c, oy, ox);
                out.data[i] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(grid: &Grid<f64>, height: usize, width: usize) -> Grid<f64> {
    let mut out = Grid::zeros(grid.channels, height, width);
    let coord = |o: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, s - lo as f64)
    };
    for oy in 0..height {
        let (ya, yb, fy) = coord(oy, grid.height, height);
        for ox in 0..width {
            let (xa, xb, fx) = coord(ox, grid.width, width);
            for c in 0..grid.channels {
                let top = grid.get(c, ya, xa) * (1.0 - fx) + grid.get(c, ya, xb) * fx;
                let bottom = grid.get(c, yb, xa) * (1.0 - fx) + grid.get(c, yb, xb) * fx;
                let i = out.index(c, oy, ox);
                out.data[i] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Smallest crop side as a fraction of the grid side.
    pub crop_min: f64,
    pub flip_prob: f64,
    /// Grid values are multiplied by a factor drawn from `1 +- jitter`.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_min: 0.6,
            flip_prob: 0.5,
            jitter: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_min > 0.0 && self.crop_min <= 1.0)
            || !(0.0..=1.0).contains(&self.flip_prob)
            || !(0.0..1.0).contains(&self.jitter)
        {
            return Err(Error::Parameter(format!(
                "invalid augmentation settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Random square crop resized back to full size, horizontal flip and
/// scaling jitter, shared across the channels of one grid.
pub fn augment<R: Rng>(grid: &Grid<f64>, cfg: &AugmentConfig, rng: &mut R) -> Grid<f64> {
    let side = grid.height.min(grid.width);
    let frac = rng.random_range(cfg.crop_min..=1.0);
    let crop = ((frac * side as f64).round() as usize).clamp(1, side);
    let y0 = rng.random_range(0..=grid.height - crop);
    let x0 = rng.random_range(0..=grid.width - crop);
    let flip = rng.random_bool(cfg.flip_prob);
    let scale = 1.0 + rng.random_range(-cfg.jitter..=cfg.jitter);

    let mut cropped = Grid::zeros(grid.channels, crop, crop);
    for c in 0..grid.channels {
        for y in 0..crop {
            for x in 0..crop {
                let sx = if flip { x0 + crop - 1 - x } else { x0 + x };
                let i = cropped.index(c, y, x);
                cropped.data[i] = grid.get(c, y0 + y, sx);
            }
        }
    }
    let mut out = resize_bilinear(&cropped, grid.height, grid.width);
    out.data.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Renders a moving soft disc or bar and converts it to events with the
/// default simulator. Returns each window with its 40 ms span.
pub fn synthetic_windows(
    count: usize,
    resolution: usize,
    seed: u64,
) -> Result<Vec<(EventStream, TimeWindow)>> {
    if resolution < 4 {
        return Err(Error::Parameter(format!(
            "resolution {resolution} is below 4"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = TimeWindow::new(0, TOY_WINDOW_US);
    let cfg = SimulatorConfig::default();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let seq = render_shape(resolution, &mut rng)?;
        let stream = frames_to_events(&seq, &cfg)?.slice_window(span.t0, span.dt);
        if !stream.is_empty() {
            out.push((stream, span));
        }
    }
    Ok(out)
}

fn render_shape<R: Rng>(n: usize, rng: &mut R) -> Result<FrameSequence> {
    let size = n as f64;
    let background = rng.random_range(0.15..0.45);
    let amplitude = rng.random_range(0.25..0.5) * if rng.random_bool(0.5) { 1.0 } else { -0.6 };
    let bar = rng.random_bool(0.5);
    let (mut cx, mut cy) = (
        rng.random_range(0.25..0.75) * size,
        rng.random_range(0.25..0.75) * size,
    );
    let (vx, vy) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let radius = rng.random_range(0.12..0.3) * size;
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (nx, ny) = (angle.cos(), angle.sin());
    let soft = |d: f64| 1.0 / (1.0 + (-d / 0.5).exp());
    let mut frames = Vec::with_capacity(TOY_FRAMES);
    for _ in 0..TOY_FRAMES {
        let mut f = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if bar {
                    soft(radius * 0.35 - (dx * nx + dy * ny).abs())
                } else {
                    soft(radius - (dx * dx + dy * dy).sqrt())
                };
                f.push((background + amplitude * inside).clamp(0.0, 1.0));
            }
        }
        frames.push(f);
        cx += vx;
        cy += vy;
    }
    FrameSequence::new(n, n, frames, TOY_FPS)
}

pub fn synthetic_dataset(
    count: usize,
    resolution: usize,
    bins: usize,
    seed: u64,
) -> Result<RepresentationDataset> {
    let samples = synthetic_windows(count, resolution, seed)?
        .iter()
        .map(|(w, span)| sample_from_window(w, *span, bins, resolution))
        .collect::<Result<Vec<_>>>()?;
    Ok(RepresentationDataset {
        samples,
        bins,
        resolution,
    })
}
