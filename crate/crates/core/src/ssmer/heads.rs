//! Projector and predictor heads.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{BatchNorm, Layer, Linear, Mlp, MlpCache, Mode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadsConfig {
    pub input_dim: usize,
    pub projector_hidden: usize,
    /// Embedding width `D` of `z` and `p`.
    pub embed_dim: usize,
    pub predictor_hidden: usize,
}

impl HeadsConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            projector_hidden: 64,
            embed_dim: 32,
            predictor_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.projector_hidden == 0
            || self.embed_dim == 0
            || self.predictor_hidden == 0
        {
            return Err(Error::Parameter(format!(
                "head widths must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Projector: two (linear, batch norm, rectifier) layers and a final linear
/// map to `D`. Predictor: two (linear, batch norm, rectifier) layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmerHeads {
    pub projector: Mlp,
    pub predictor: Mlp,
}

impl SsmerHeads {
    pub fn random<R: Rng>(cfg: &HeadsConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (i, h, d, q) = (
            cfg.input_dim,
            cfg.projector_hidden,
            cfg.embed_dim,
            cfg.predictor_hidden,
        );
        let projector = Mlp::new(vec![
            Layer::Linear(Linear::random(i, h, rng)),
            Layer::BatchNorm(BatchNorm::new(h)),
            Layer::Relu,
            Layer::Linear(Linear::random(h, h, rng)),
            Layer::BatchNorm(BatchNorm::new(h)),
            Layer::Relu,
            Layer::Linear(Linear::random(h, d, rng)),
        ]);
        let predictor = Mlp::new(vec![
            Layer::Linear(Linear::random(d, q, rng)),
            Layer::BatchNorm(BatchNorm::new(q)),
            Layer::Relu,
            Layer::Linear(Linear::random(q, d, rng)),
            Layer::BatchNorm(BatchNorm::new(d)),
            Layer::Relu,
        ]);
        Ok(Self {
            projector,
            predictor,
        })
    }

    /// Identity linear maps of width `dim`, default batch norms.
    pub fn identity(dim: usize) -> Self {
        let block = || {
            vec![
                Layer::Linear(Linear::identity(dim)),
                Layer::BatchNorm(BatchNorm::new(dim)),
                Layer::Relu,
            ]
        };
        let mut projector = block();
        projector.extend(block());
        projector.push(Layer::Linear(Linear::identity(dim)));
        let mut predictor = block();
        predictor.extend(block());
        Self {
            projector: Mlp::new(projector),
            predictor: Mlp::new(predictor),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.output_dim().unwrap_or(0)
    }
}

/// Outputs and caches of one heads forward.
#[derive(Debug, Clone)]
pub struct HeadsOutput {
    pub z: Array2<f64>,
    pub p: Array2<f64>,
    pub projector_cache: MlpCache,
    pub predictor_cache: MlpCache,
}

/// `z = projector(x)`, `p = predictor(z)`.
pub fn heads_forward(
    x: &Array2<f64>,
    heads: &SsmerHeads,
    mode: Mode,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let out = heads.forward(x, mode)?;
    Ok((out.z, out.p))
}

impl SsmerHeads {
    pub fn forward(&self, x: &Array2<f64>, mode: Mode) -> Result<HeadsOutput> {
        let (z, projector_cache) = self.projector.forward(x, mode)?;
        let (p, predictor_cache) = self.predictor.forward(&z, mode)?;
        Ok(HeadsOutput {
            z,
            p,
            projector_cache,
            predictor_cache,
        })
    }

    /// Backpropagates `d_p` through the predictor and `d_p`'s contribution
    /// plus the direct `d_z` through the projector. Returns the input
    /// gradient and the head gradients.
    pub fn backward(
        &self,
        out: &HeadsOutput,
        d_z: &Array2<f64>,
        d_p: &Array2<f64>,
    ) -> (Array2<f64>, SsmerHeads) {
        let (d_z_pred, predictor) = self.predictor.backward(&out.predictor_cache, d_p);
        let (d_x, projector) = self
            .projector
            .backward(&out.projector_cache, &(d_z_pred + d_z));
        (
            d_x,
            SsmerHeads {
                projector,
                predictor,
            },
        )
    }

    pub fn update_running_stats(&mut self, out: &HeadsOutput) {
        self.projector.update_running_stats(&out.projector_cache);
        self.predictor.update_running_stats(&out.predictor_cache);
    }

    pub fn zeros_like(&self) -> SsmerHeads {
        SsmerHeads {
            projector: self.projector.zeros_like(),
            predictor: self.predictor.zeros_like(),
        }
    }
}
