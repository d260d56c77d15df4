//! Multi-representation self-supervised learning on event windows.
//!
//! Each of the three ordered representation pairs (frame, voxel),
//! (voxel, time surface) and (time surface, frame) is encoded into projector
//! outputs `z1, z2` and predictor outputs `p1, p2`. The pair loss is
//!
//! ```text
//! D(p, z)  = -(p / |p|) . (z / |z|)
//! L_cos    = D(p1, z2) / 2 + D(p2, z1) / 2
//! L_MR     = L_cos(frame, voxel) + L_cos(voxel, ts) + L_cos(ts, frame)
//! ```
//!
//! averaged over the batch. The `z` arguments are targets: their gradient is
//! cut (stop-gradient) unless the trainer is told otherwise.

mod data;
mod gradcheck;
mod heads;
pub mod nn;
mod train;


use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::representations::RepKind;

pub use data::{
    augment, resample_area, resize_bilinear, sample_from_window, synthetic_dataset,
    synthetic_windows, AugmentConfig, RepSample, RepresentationDataset, TOY_RESOLUTION,
};
pub use gradcheck::{heads_grad_check, loss_grad_check, LossGradReport};
pub use heads::{heads_forward, HeadsConfig, HeadsOutput, SsmerHeads};
pub use nn::Mode;
pub use train::{
    embedding_spread, train_toy, EncoderConfig, EpochRecord, ToyConfig, ToyModel, TrainTrace,
};

/// The three ordered representation pairs.
pub const REPRESENTATION_PAIRS: [(RepKind, RepKind); 3] = [
    (RepKind::Frame, RepKind::Voxel),
    (RepKind::Voxel, RepKind::TimeSurface),
    (RepKind::TimeSurface, RepKind::Frame),
];

/// Negative cosine similarity; a zero or non-finite vector is an error.
pub fn cosine_distance(p: ArrayView1<f64>, z: ArrayView1<f64>) -> Result<f64> {
    if p.len() != z.len() {
        return Err(Error::Shape(format!(
            "cosine of {} and {} dims",
            p.len(),
            z.len()
        )));
    }
    let (np, nz) = (norm(p)?, norm(z)?);
    Ok(-p.dot(&z) / (np * nz))
}

/// Gradient of [`cosine_distance`] with respect to `p`:
/// `-(z_hat - (p_hat . z_hat) p_hat) / |p|`.
pub fn cosine_distance_grad(p: ArrayView1<f64>, z: ArrayView1<f64>) -> Result<Array1<f64>> {
    let (np, nz) = (norm(p)?, norm(z)?);
    let p_hat = &p / np;
    let z_hat = &z / nz;
    let c = p_hat.dot(&z_hat);
    Ok((&p_hat * c - z_hat) / np)
}

fn norm(v: ArrayView1<f64>) -> Result<f64> {
    let n = v.dot(&v).sqrt();
    if !n.is_finite() || n == 0.0 {
        return Err(Error::Numeric(format!(
            "cannot normalize a vector of norm {n}"
        )));
    }
    Ok(n)
}

/// Projector and predictor outputs of the two views, each `batch x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub z1: Array2<f64>,
    pub z2: Array2<f64>,
    pub p1: Array2<f64>,
    pub p2: Array2<f64>,
}

impl BranchOutputs {
    /// Single-sample outputs from plain vectors.
    pub fn single(z1: &[f64], z2: &[f64], p1: &[f64], p2: &[f64]) -> Result<Self> {
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector");
        let b = Self {
            z1: row(z1),
            z2: row(z2),
            p1: row(p1),
            p2: row(p2),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn batch(&self) -> usize {
        self.z1.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.z1.dim();
        for (name, a) in [
            ("z1", &self.z1),
            ("z2", &self.z2),
            ("p1", &self.p1),
            ("p2", &self.p2),
        ] {
            if a.dim() != dim {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, z1 is {dim:?}",
                    a.dim()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("{name} has non-finite entries")));
            }
        }
        if dim.0 == 0 || dim.1 == 0 {
            return Err(Error::Shape("empty branch outputs".into()));
        }
        Ok(())
    }
}

/// Batch mean of `D(p1, z2) / 2 + D(p2, z1) / 2`.
pub fn symmetric_pair_loss(b: &BranchOutputs) -> Result<f64> {
    b.validate()?;
    let mut total = 0.0;
    for i in 0..b.batch() {
        total += 0.5 * cosine_distance(b.p1.row(i), b.z2.row(i))?
            + 0.5 * cosine_distance(b.p2.row(i), b.z1.row(i))?;
    }
    Ok(total / b.batch() as f64)
}

/// Gradients of [`symmetric_pair_loss`]. With `stop_gradient` the `z`
/// gradients are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGradients {
    pub z1: Array2<f64>,
    pub z2: Array2<f64>,
    pub p1: Array2<f64>,
    pub p2: Array2<f64>,
}

pub fn symmetric_pair_loss_backward(
    b: &BranchOutputs,
    stop_gradient: bool,
) -> Result<PairGradients> {
    b.validate()?;
    let scale = 0.5 / b.batch() as f64;
    let mut g = PairGradients {
        z1: Array2::zeros(b.z1.raw_dim()),
        z2: Array2::zeros(b.z2.raw_dim()),
        p1: Array2::zeros(b.p1.raw_dim()),
        p2: Array2::zeros(b.p2.raw_dim()),
    };
    for i in 0..b.batch() {
        g.p1.row_mut(i)
            .assign(&(cosine_distance_grad(b.p1.row(i), b.z2.row(i))? * scale));
        g.p2.row_mut(i)
            .assign(&(cosine_distance_grad(b.p2.row(i), b.z1.row(i))? * scale));
        if !stop_gradient {
            g.z2.row_mut(i)
                .assign(&(cosine_distance_grad(b.z2.row(i), b.p1.row(i))? * scale));
            g.z1.row_mut(i)
                .assign(&(cosine_distance_grad(b.z1.row(i), b.p2.row(i))? * scale));
        }
    }
    Ok(g)
}

/// The three pair losses in [`REPRESENTATION_PAIRS`] order.
pub fn pair_losses(pairs: &[BranchOutputs]) -> Result<[f64; 3]> {
    if pairs.len() != 3 {
        return Err(Error::Shape(format!(
            "expected 3 representation pairs, got {}",
            pairs.len()
        )));
    }
    Ok([
        symmetric_pair_loss(&pairs[0])?,
        symmetric_pair_loss(&pairs[1])?,
        symmetric_pair_loss(&pairs[2])?,
    ])
}

/// Sum of the three pair losses, in `[-3, 3]`.
pub fn multi_rep_loss(pairs: &[BranchOutputs]) -> Result<f64> {
    Ok(pair_losses(pairs)?.iter().sum())
}
