//! Central finite-difference checks of the loss and predictor gradients.
//!
//! Targets `z` stay fixed while `p` (or the predictor input that produces
//! `p`) is perturbed, which is the stop-gradient contract.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::heads::{HeadsConfig, SsmerHeads};
use super::nn::{Mlp, Mode};
use super::{multi_rep_loss, symmetric_pair_loss_backward, BranchOutputs};
use crate::attention::{relative_error, RELATIVE_ERROR_FLOOR, STRICT_RELATIVE_ERROR_FLOOR};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct LossGradReport {
    pub seed: u64,
    pub max_relative_error: f64,
    pub max_strict_relative_error: f64,
    pub checked: usize,
}

impl LossGradReport {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            max_relative_error: 0.0,
            max_strict_relative_error: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_relative_error =
            self.max_relative_error
                .max(relative_error(analytic, numeric, RELATIVE_ERROR_FLOOR));
        self.max_strict_relative_error = self.max_strict_relative_error.max(relative_error(
            analytic,
            numeric,
            STRICT_RELATIVE_ERROR_FLOOR,
        ));
        self.checked += 1;
    }
}

const BATCH: usize = 4;
const DIM: usize = 16;

fn normal(rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((BATCH, DIM), |_| StandardNormal.sample(rng))
}

fn central<F: FnMut(f64) -> Result<f64>>(x: f64, mut f: F) -> Result<f64> {
    Ok((f(x + FD_STEP)? - f(x - FD_STEP)?) / (2.0 * FD_STEP))
}

/// `L_MR` with respect to every `p` entry of three random pairs.
pub fn loss_grad_check(seed: u64) -> Result<LossGradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<BranchOutputs> = (0..3)
        .map(|_| BranchOutputs {
            z1: normal(&mut rng),
            z2: normal(&mut rng),
            p1: normal(&mut rng),
            p2: normal(&mut rng),
        })
        .collect();
    let mut report = LossGradReport::new(seed);
    for k in 0..3 {
        let g = symmetric_pair_loss_backward(&pairs[k], true)?;
        for (which, analytic) in [(0, &g.p1), (1, &g.p2)] {
            for (idx, &a) in analytic.indexed_iter() {
                let original = pick(&pairs[k], which)[idx];
                let numeric = central(original, |v| {
                    pick_mut(&mut pairs[k], which)[idx] = v;
                    multi_rep_loss(&pairs)
                })?;
                pick_mut(&mut pairs[k], which)[idx] = original;
                report.record(a, numeric);
            }
        }
    }
    Ok(report)
}

fn pick(b: &BranchOutputs, which: usize) -> &Array2<f64> {
    if which == 0 {
        &b.p1
    } else {
        &b.p2
    }
}

fn pick_mut(b: &mut BranchOutputs, which: usize) -> &mut Array2<f64> {
    if which == 0 {
        &mut b.p1
    } else {
        &mut b.p2
    }
}

/// `L_MR` through a train-mode predictor, with respect to the predictor
/// inputs and parameters. Targets are copies of the unperturbed inputs.
pub fn heads_grad_check(seed: u64) -> Result<LossGradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = HeadsConfig {
        input_dim: DIM,
        projector_hidden: DIM,
        embed_dim: DIM,
        predictor_hidden: 6,
    };
    let mut predictor = SsmerHeads::random(&cfg, &mut rng)?.predictor;
    let targets: Vec<[Array2<f64>; 2]> = (0..3)
        .map(|_| [normal(&mut rng), normal(&mut rng)])
        .collect();
    let mut inputs = targets.clone();

    let objective = |predictor: &Mlp, inputs: &[[Array2<f64>; 2]]| -> Result<f64> {
        let pairs = outputs(predictor, inputs, &targets)?;
        multi_rep_loss(&pairs)
    };

    let mut grads = predictor.zeros_like();
    let mut input_grads = Vec::new();
    for (k, [u1, u2]) in inputs.iter().enumerate() {
        let (p1, c1) = predictor.forward(u1, Mode::Train)?;
        let (p2, c2) = predictor.forward(u2, Mode::Train)?;
        let b = BranchOutputs {
            z1: targets[k][0].clone(),
            z2: targets[k][1].clone(),
            p1,
            p2,
        };
        let g = symmetric_pair_loss_backward(&b, true)?;
        let (d1, g1) = predictor.backward(&c1, &g.p1);
        let (d2, g2) = predictor.backward(&c2, &g.p2);
        grads.add_assign(&g1);
        grads.add_assign(&g2);
        input_grads.push([d1, d2]);
    }

    let mut report = LossGradReport::new(seed);
    for k in 0..3 {
        for side in 0..2 {
            for (idx, &a) in input_grads[k][side].indexed_iter() {
                let original = inputs[k][side][idx];
                let numeric = central(original, |v| {
                    inputs[k][side][idx] = v;
                    objective(&predictor, &inputs)
                })?;
                inputs[k][side][idx] = original;
                report.record(a, numeric);
            }
        }
    }
    let analytic: Vec<Vec<f64>> = grads.params().iter().map(|p| p.to_vec()).collect();
    for (t, values) in analytic.iter().enumerate() {
        for (i, &a) in values.iter().enumerate() {
            let original = predictor.params()[t][i];
            let numeric = central(original, |v| {
                predictor.params_mut()[t][i] = v;
                objective(&predictor, &inputs)
            })?;
            predictor.params_mut()[t][i] = original;
            report.record(a, numeric);
        }
    }
    Ok(report)
}

fn outputs(
    predictor: &Mlp,
    inputs: &[[Array2<f64>; 2]],
    targets: &[[Array2<f64>; 2]],
) -> Result<Vec<BranchOutputs>> {
    inputs
        .iter()
        .zip(targets)
        .map(|([u1, u2], [z1, z2])| {
            Ok(BranchOutputs {
                z1: z1.clone(),
                z2: z2.clone(),
                p1: predictor.forward(u1, Mode::Train)?.0,
                p2: predictor.forward(u2, Mode::Train)?.0,
            })
        })
        .collect()
}
