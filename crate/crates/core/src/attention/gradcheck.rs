//! Central finite-difference verification of the analytic backward passes.
//!
//! The checked scalar is `sum(G * Y)` for a fixed random upstream gradient
//! `G` and forward output `Y`. Every scalar of every checked tensor is
//! perturbed by `±FD_STEP` and the difference quotient is compared with the
//! analytic gradient.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{
    cmfa_block, cmfa_block_backward, cmfa_forward, cmfa_forward_backward, layer_backward,
    layer_forward, ops, AttentionConfig, Embeddings, LayerGradients, LayerParams, ValueSource,
};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-4;

/// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`:
/// gradients below 1 in magnitude are compared absolutely, where central
/// differences are limited by rounding in the objective.
pub const RELATIVE_ERROR_FLOOR: f64 = 1.0;

/// Floor of the strict variant, which stays relative down to tiny gradients.
pub const STRICT_RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    /// Only the CMFA output projection, through which the output is linear.
    OutputProjection,
    CmfaForward,
    CmfaBlock,
    LayerForward,
}

impl GradTarget {
    fn checks(self, name: &str) -> bool {
        match self {
            GradTarget::OutputProjection => name == "params.cmfa.w_p",
            GradTarget::CmfaForward => {
                (name.starts_with("params.cmfa.") && !name.contains(".ln_"))
                    || matches!(
                        name,
                        "emb.tokens" | "emb.query" | "emb.rgb_features" | "emb.rgb_structure"
                    )
            }
            GradTarget::CmfaBlock => {
                name.starts_with("params.cmfa.")
                    || matches!(
                        name,
                        "t_prev" | "emb.query" | "emb.rgb_features" | "emb.rgb_structure"
                    )
            }
            GradTarget::LayerForward => name != "emb.tokens",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradCheckSpec {
    pub tokens: usize,
    pub patches: usize,
    pub channels: usize,
    pub heads: usize,
    pub value_source: ValueSource,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self {
            tokens: 3,
            patches: 4,
            channels: 8,
            heads: 2,
            value_source: ValueSource::RgbFeatures,
        }
    }
}

/// A random evaluation point: inputs, parameters and upstream gradient.
#[derive(Debug, Clone)]
pub struct GradPoint {
    pub cfg: AttentionConfig,
    pub t_prev: Array2<f64>,
    pub emb: Embeddings,
    pub params: LayerParams,
    pub upstream: Array2<f64>,
}

impl GradPoint {
    pub fn random(spec: &GradCheckSpec, seed: u64) -> Result<Self> {
        let cfg = AttentionConfig::new(spec.channels, spec.heads, spec.value_source)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Embeddings::random(spec.tokens, spec.patches, spec.channels, &mut rng);
        let params = LayerParams::random(&cfg, &mut rng);
        let mut normal = |r, c| Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng));
        let t_prev = normal(spec.tokens, spec.channels);
        let upstream = normal(spec.tokens, spec.channels);
        Ok(Self {
            cfg,
            t_prev,
            emb,
            params,
            upstream,
        })
    }

    pub fn output(&self, target: GradTarget) -> Result<Array2<f64>> {
        match target {
            GradTarget::OutputProjection | GradTarget::CmfaForward => {
                cmfa_forward(&self.emb, &self.params.cmfa, &self.cfg)
            }
            GradTarget::CmfaBlock => {
                cmfa_block(&self.t_prev, &self.emb, &self.params.cmfa, &self.cfg)
            }
            GradTarget::LayerForward => {
                Ok(layer_forward(&self.t_prev, &self.emb, &self.params, &self.cfg)?.tokens)
            }
        }
    }

    pub fn objective(&self, target: GradTarget) -> Result<f64> {
        Ok((&self.output(target)? * &self.upstream).sum())
    }

    pub fn analytic(&self, target: GradTarget) -> Result<LayerGradients> {
        match target {
            GradTarget::OutputProjection | GradTarget::CmfaForward => {
                cmfa_forward_backward(&self.emb, &self.params.cmfa, &self.cfg, &self.upstream)
            }
            GradTarget::CmfaBlock => cmfa_block_backward(
                &self.t_prev,
                &self.emb,
                &self.params.cmfa,
                &self.cfg,
                &self.upstream,
            ),
            GradTarget::LayerForward => layer_backward(
                &self.t_prev,
                &self.emb,
                &self.params,
                &self.cfg,
                &self.upstream,
            ),
        }
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![(
            "t_prev".to_string(),
            self.t_prev.as_slice_mut().expect("contiguous"),
        )];
        out.extend(
            self.emb
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("emb.{n}"), t)),
        );
        out.extend(
            self.params
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("params.{n}"), t)),
        );
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub target: GradTarget,
    pub seed: u64,
    pub max_relative_error: f64,
    /// Same comparison with [`STRICT_RELATIVE_ERROR_FLOOR`].
    pub max_strict_relative_error: f64,
    pub max_abs_error: f64,
    /// `name[index]` of the scalar with the largest relative error.
    pub worst: String,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic and central-difference gradients at a random point.
pub fn grad_check(target: GradTarget, spec: &GradCheckSpec, seed: u64) -> Result<GradCheckReport> {
    let point = GradPoint::random(spec, seed)?;
    check_point(&point, target, seed)
}

pub fn check_point(point: &GradPoint, target: GradTarget, seed: u64) -> Result<GradCheckReport> {
    let grads = point.analytic(target)?;
    let mut analytic = GradPoint {
        cfg: point.cfg,
        t_prev: grads.t_prev,
        emb: grads.embeddings,
        params: grads.params,
        upstream: point.upstream.clone(),
    };
    let analytic_tensors: Vec<(String, Vec<f64>)> = analytic
        .tensors_mut()
        .into_iter()
        .map(|(n, t)| (n, t.to_vec()))
        .collect();

    let mut report = GradCheckReport {
        target,
        seed,
        max_relative_error: 0.0,
        max_strict_relative_error: 0.0,
        max_abs_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut probe = point.clone();
    for (ti, (name, values)) in analytic_tensors.iter().enumerate() {
        if !target.checks(name) {
            continue;
        }
        for (i, &a) in values.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite analytic gradient {name}[{i}]"
                )));
            }
            let original = probe.tensors_mut()[ti].1[i];
            probe.tensors_mut()[ti].1[i] = original + FD_STEP;
            let plus = probe.objective(target)?;
            probe.tensors_mut()[ti].1[i] = original - FD_STEP;
            let minus = probe.objective(target)?;
            probe.tensors_mut()[ti].1[i] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite numeric gradient {name}[{i}]"
                )));
            }
            let err = relative_error(a, numeric, RELATIVE_ERROR_FLOOR);
            report.max_strict_relative_error = report
                .max_strict_relative_error
                .max(relative_error(a, numeric, STRICT_RELATIVE_ERROR_FLOOR));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_empty() {
                report.max_relative_error = err.max(report.max_relative_error);
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

/// Largest absolute difference between the closed-form softmax Jacobian and
/// its central-difference estimate on random logits.
pub fn softmax_jacobian_check(len: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits: Array1<f64> = Array1::from_shape_fn(len, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        2.0 * z
    });
    let softmax = |z: &Array1<f64>| -> Array1<f64> {
        let row = z.clone().insert_axis(ndarray::Axis(0));
        ops::softmax_rows(row.view()).row(0).to_owned()
    };
    let a = softmax(&logits);
    let closed = ops::softmax_jacobian(&a);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..len {
        let mut up = logits.clone();
        up[j] += h;
        let mut down = logits.clone();
        down[j] -= h;
        let col = (softmax(&up) - softmax(&down)) / (2.0 * h);
        for i in 0..len {
            worst = worst.max((col[i] - closed[[i, j]]).abs());
        }
    }
    worst
}
