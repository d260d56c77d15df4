//! Dense layers, batch normalization and rectifiers with hand-written
//! backward passes, composed into small sequential perceptrons.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch normalization uses batch statistics.
    Train,
    /// Batch normalization uses running statistics.
    Eval,
}

/// Affine map `x W + b` with `W` of shape `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn random<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((inputs, outputs), |_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            }),
            b: Array1::zeros(outputs),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w: Array2::eye(dim),
            b: Array1::zeros(dim),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    /// Unit scale, zero shift, zero running mean and unit running variance.
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    BatchNorm(BatchNorm),
    Relu,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Linear {
        input: Array2<f64>,
    },
    BatchNorm {
        normalized: Array2<f64>,
        inv_std: Array1<f64>,
        /// Batch mean and unbiased variance in train mode.
        batch_stats: Option<(Array1<f64>, Array1<f64>)>,
    },
    Relu {
        output: Array2<f64>,
    },
}

/// Values saved by [`Mlp::forward`] for [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    layers: Vec<LayerCache>,
    mode: Mode,
}

/// Sequential stack of layers. Gradients are returned as an `Mlp` of the
/// same shape whose running statistics are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Linear(lin) => Some(lin.inputs()),
            _ => None,
        })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Linear(lin) => Some(lin.outputs()),
            _ => None,
        })
    }

    pub fn forward(&self, x: &Array2<f64>, mode: Mode) -> Result<(Array2<f64>, MlpCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(lin) => {
                    if h.ncols() != lin.inputs() {
                        return Err(Error::Shape(format!(
                            "layer {i} expects {} inputs, got {}",
                            lin.inputs(),
                            h.ncols()
                        )));
                    }
                    let out = h.dot(&lin.w) + &lin.b;
                    caches.push(LayerCache::Linear { input: h });
                    h = out;
                }
                Layer::BatchNorm(bn) => {
                    let (out, cache) = batch_norm_forward(&h, bn, mode)?;
                    caches.push(cache);
                    h = out;
                }
                Layer::Relu => {
                    h.mapv_inplace(|v| v.max(0.0));
                    caches.push(LayerCache::Relu { output: h.clone() });
                }
            }
        }
        Ok((
            h,
            MlpCache {
                layers: caches,
                mode,
            },
        ))
    }

    /// Returns the input gradient and the parameter gradients.
    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>) -> (Array2<f64>, Mlp) {
        let mut grads = self.zeros_like();
        let mut g = d_out.clone();
        for ((layer, lc), grad) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            match (layer, lc, grad) {
                (Layer::Linear(lin), LayerCache::Linear { input }, Layer::Linear(gl)) => {
                    gl.w = input.t().dot(&g);
                    gl.b = g.sum_axis(Axis(0));
                    g = g.dot(&lin.w.t());
                }
                (
                    Layer::BatchNorm(bn),
                    LayerCache::BatchNorm {
                        normalized,
                        inv_std,
                        ..
                    },
                    Layer::BatchNorm(gb),
                ) => {
                    gb.gamma = (&g * normalized).sum_axis(Axis(0));
                    gb.beta = g.sum_axis(Axis(0));
                    let d_norm = &g * &bn.gamma;
                    g = match cache.mode {
                        Mode::Eval => d_norm * inv_std,
                        Mode::Train => batch_norm_input_grad(&d_norm, normalized, inv_std),
                    };
                }
                (Layer::Relu, LayerCache::Relu { output }, _) => {
                    g.zip_mut_with(output, |d, &o| {
                        if o <= 0.0 {
                            *d = 0.0
                        }
                    });
                }
                _ => unreachable!("cache built by forward of the same stack"),
            }
        }
        (g, grads)
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// statistics.
    pub fn update_running_stats(&mut self, cache: &MlpCache) {
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if let (
                Layer::BatchNorm(bn),
                LayerCache::BatchNorm {
                    batch_stats: Some((mean, var)),
                    ..
                },
            ) = (layer, lc)
            {
                bn.running_mean = &bn.running_mean * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM;
                bn.running_var = &bn.running_var * (1.0 - BN_MOMENTUM) + var * BN_MOMENTUM;
            }
        }
    }

    pub fn zeros_like(&self) -> Mlp {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Linear(lin) => Layer::Linear(Linear {
                    w: Array2::zeros(lin.w.raw_dim()),
                    b: Array1::zeros(lin.b.len()),
                }),
                Layer::BatchNorm(bn) => {
                    let n = bn.gamma.len();
                    Layer::BatchNorm(BatchNorm {
                        gamma: Array1::zeros(n),
                        beta: Array1::zeros(n),
                        running_mean: Array1::zeros(n),
                        running_var: Array1::zeros(n),
                    })
                }
                Layer::Relu => Layer::Relu,
            })
            .collect();
        Mlp { layers }
    }

    /// Trainable tensors in a fixed order: weights, biases, scales, shifts.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(lin) => {
                    out.push(lin.w.as_slice_mut().expect("contiguous"));
                    out.push(lin.b.as_slice_mut().expect("contiguous"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice_mut().expect("contiguous"));
                    out.push(bn.beta.as_slice_mut().expect("contiguous"));
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(lin) => {
                    out.push(lin.w.as_slice().expect("contiguous"));
                    out.push(lin.b.as_slice().expect("contiguous"));
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_slice().expect("contiguous"));
                    out.push(bn.beta.as_slice().expect("contiguous"));
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// `v = momentum * v + g; w -= lr * v`.
    pub fn momentum_step(&mut self, grads: &Mlp, velocity: &mut Mlp, lr: f64, momentum: f64) {
        for ((w, g), v) in self
            .params_mut()
            .into_iter()
            .zip(grads.params())
            .zip(velocity.params_mut())
        {
            for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = momentum * *vi + gi;
                *wi -= lr * *vi;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }
}

fn batch_norm_forward(
    x: &Array2<f64>,
    bn: &BatchNorm,
    mode: Mode,
) -> Result<(Array2<f64>, LayerCache)> {
    if x.ncols() != bn.gamma.len() {
        return Err(Error::Shape(format!(
            "batch norm over {} features, got {}",
            bn.gamma.len(),
            x.ncols()
        )));
    }
    let n = x.nrows();
    let (mean, var, batch_stats) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::Shape(format!(
                    "train-mode batch normalization needs at least 2 samples, got {n}"
                )));
            }
            let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
            let var = x.var_axis(Axis(0), 0.0);
            let unbiased = &var * (n as f64 / (n as f64 - 1.0));
            (mean.clone(), var, Some((mean, unbiased)))
        }
        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone(), None),
    };
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let mut normalized = Array2::zeros(x.raw_dim());
    for (j, col) in x.columns().into_iter().enumerate() {
        let constant = mode == Mode::Train && col.iter().all(|&v| v == col[0]);
        for (i, &v) in col.iter().enumerate() {
            normalized[[i, j]] = if constant {
                0.0
            } else {
                (v - mean[j]) * inv_std[j]
            };
        }
    }
    let out = &normalized * &bn.gamma + &bn.beta;
    Ok((
        out,
        LayerCache::BatchNorm {
            normalized,
            inv_std,
            batch_stats,
        },
    ))
}

fn batch_norm_input_grad(
    d_norm: &Array2<f64>,
    normalized: &Array2<f64>,
    inv_std: &Array1<f64>,
) -> Array2<f64> {
    let n = d_norm.nrows() as f64;
    let mean_g = d_norm.sum_axis(Axis(0)) / n;
    let mean_gx = (d_norm * normalized).sum_axis(Axis(0)) / n;
    (d_norm - &mean_g - &(normalized * &mean_gx)) * inv_std
}
