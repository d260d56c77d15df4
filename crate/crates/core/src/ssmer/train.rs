//! Toy encoder and momentum-SGD trainer on the multi-representation loss.

use std::io::Write;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{augment, kind_index, AugmentConfig, RepresentationDataset};
use super::heads::{HeadsConfig, HeadsOutput, SsmerHeads};
use super::nn::{Layer, Linear, Mlp, MlpCache, Mode};
use super::{pair_losses, symmetric_pair_loss_backward, BranchOutputs, REPRESENTATION_PAIRS};
use crate::error::{Error, Result};
use crate::representations::RepKind;

/// Seed offset of the fixed monitor views.
const MONITOR_SEED_SALT: u64 = 0x006d_6f6e_6974_6f72;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Width of each representation's input adapter.
    pub hidden: usize,
    /// Encoder output width fed to the projector.
    pub features: usize,
    /// One trunk shared by all representations, or one per representation.
    pub shared_trunk: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            features: 32,
            shared_trunk: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
    pub stop_gradient: bool,
    pub encoder: EncoderConfig,
    pub projector_hidden: usize,
    pub embed_dim: usize,
    pub predictor_hidden: usize,
    pub augment: AugmentConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let heads = HeadsConfig::new(1);
        Self {
            epochs: 50,
            lr: 0.05,
            momentum: 0.9,
            batch: 16,
            seed: 3,
            stop_gradient: true,
            encoder: EncoderConfig::default(),
            projector_hidden: heads.projector_hidden,
            embed_dim: heads.embed_dim,
            predictor_hidden: heads.predictor_hidden,
            augment: AugmentConfig::default(),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Parameter(format!(
                "batch must be at least 2, got {}",
                self.batch
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.encoder.hidden == 0 || self.encoder.features == 0 {
            return Err(Error::Parameter("encoder widths must be positive".into()));
        }
        self.heads().validate()?;
        self.augment.validate()
    }

    pub fn heads(&self) -> HeadsConfig {
        HeadsConfig {
            input_dim: self.encoder.features,
            projector_hidden: self.projector_hidden,
            embed_dim: self.embed_dim,
            predictor_hidden: self.predictor_hidden,
        }
    }
}

/// Per-representation input adapters, shared or separate trunks, and the
/// projector/predictor heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub adapters: Vec<Mlp>,
    pub trunks: Vec<Mlp>,
    pub heads: SsmerHeads,
}

struct ViewForward {
    kind: RepKind,
    adapter: MlpCache,
    trunk: MlpCache,
    heads: HeadsOutput,
}

impl ToyModel {
    pub fn random<R: Rng>(input_dims: [usize; 3], cfg: &ToyConfig, rng: &mut R) -> Result<Self> {
        let enc = cfg.encoder;
        let adapters = input_dims
            .iter()
            .map(|&d| {
                Mlp::new(vec![
                    Layer::Linear(Linear::random(d, enc.hidden, rng)),
                    Layer::Relu,
                ])
            })
            .collect();
        let trunk_count = if enc.shared_trunk { 1 } else { 3 };
        let trunks = (0..trunk_count)
            .map(|_| {
                Mlp::new(vec![
                    Layer::Linear(Linear::random(enc.hidden, enc.features, rng)),
                    Layer::Relu,
                ])
            })
            .collect();
        let heads = SsmerHeads::random(&cfg.heads(), rng)?;
        Ok(Self {
            adapters,
            trunks,
            heads,
        })
    }

    fn trunk_index(&self, kind: RepKind) -> usize {
        if self.trunks.len() == 1 {
            0
        } else {
            kind_index(kind)
        }
    }

    fn forward(&self, kind: RepKind, x: &Array2<f64>, mode: Mode) -> Result<ViewForward> {
        let (h, adapter) = self.adapters[kind_index(kind)].forward(x, mode)?;
        let (f, trunk) = self.trunks[self.trunk_index(kind)].forward(&h, mode)?;
        let heads = self.heads.forward(&f, mode)?;
        Ok(ViewForward {
            kind,
            adapter,
            trunk,
            heads,
        })
    }

    fn backward(
        &self,
        view: &ViewForward,
        d_z: &Array2<f64>,
        d_p: &Array2<f64>,
        grads: &mut ToyModel,
    ) {
        let (d_f, heads) = self.heads.backward(&view.heads, d_z, d_p);
        let t = self.trunk_index(view.kind);
        let (d_h, trunk) = self.trunks[t].backward(&view.trunk, &d_f);
        let a = kind_index(view.kind);
        let (_, adapter) = self.adapters[a].backward(&view.adapter, &d_h);
        grads.heads.projector.add_assign(&heads.projector);
        grads.heads.predictor.add_assign(&heads.predictor);
        grads.trunks[t].add_assign(&trunk);
        grads.adapters[a].add_assign(&adapter);
    }

    fn update_running_stats(&mut self, view: &ViewForward) {
        let t = self.trunk_index(view.kind);
        self.adapters[kind_index(view.kind)].update_running_stats(&view.adapter);
        self.trunks[t].update_running_stats(&view.trunk);
        self.heads.update_running_stats(&view.heads);
    }

    fn zeros_like(&self) -> ToyModel {
        ToyModel {
            adapters: self.adapters.iter().map(Mlp::zeros_like).collect(),
            trunks: self.trunks.iter().map(Mlp::zeros_like).collect(),
            heads: self.heads.zeros_like(),
        }
    }

    fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        let mut out: Vec<&mut Mlp> = self.adapters.iter_mut().collect();
        out.extend(self.trunks.iter_mut());
        out.push(&mut self.heads.projector);
        out.push(&mut self.heads.predictor);
        out
    }

    fn is_finite(&self) -> bool {
        self.adapters.iter().chain(&self.trunks).all(Mlp::is_finite)
            && self.heads.projector.is_finite()
            && self.heads.predictor.is_finite()
    }
}

/// Monitor values after one epoch; epoch 0 is the untrained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub pair_losses: [f64; 3],
    /// Mean over dimensions of the batch standard deviation of
    /// L2-normalized `z`, averaged over the six views.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn initial(&self) -> &EpochRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("trace holds the initial record")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "epoch,l_mr,l_frame_voxel,l_voxel_timesurface,l_timesurface_frame,embedding_spread"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch, r.loss, r.pair_losses[0], r.pair_losses[1], r.pair_losses[2], r.spread
            )?;
        }
        Ok(())
    }
}

/// Mean over columns of the population standard deviation of the
/// row-normalized embeddings. Collapsed embeddings give 0.
pub fn embedding_spread(z: &Array2<f64>) -> Result<f64> {
    let mut normalized = z.clone();
    for mut row in normalized.rows_mut() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Numeric(format!("embedding of norm {n}")));
        }
        row /= n;
    }
    Ok(normalized.std_axis(Axis(0), 0.0).mean().unwrap_or(0.0))
}

type PairInputs = [(Array2<f64>, Array2<f64>); 3];

fn stack_views<R: Rng>(
    data: &RepresentationDataset,
    ids: &[usize],
    kind: RepKind,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Array2<f64> {
    let width = data.input_dims()[kind_index(kind)];
    let mut out = Array2::zeros((ids.len(), width));
    for (row, &i) in ids.iter().enumerate() {
        let view = augment(data.samples[i].grid(kind), cfg, rng);
        out.row_mut(row)
            .as_slice_mut()
            .expect("contiguous row")
            .copy_from_slice(&view.data);
    }
    out
}

fn draw_pair_inputs<R: Rng>(
    data: &RepresentationDataset,
    ids: &[usize],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> PairInputs {
    REPRESENTATION_PAIRS.map(|(a, b)| {
        let x1 = stack_views(data, ids, a, cfg, rng);
        let x2 = stack_views(data, ids, b, cfg, rng);
        (x1, x2)
    })
}

struct PairForward {
    views: [ViewForward; 2],
    outputs: BranchOutputs,
}

fn forward_pairs(model: &ToyModel, inputs: &PairInputs) -> Result<Vec<PairForward>> {
    REPRESENTATION_PAIRS
        .iter()
        .zip(inputs)
        .map(|(&(a, b), (x1, x2))| {
            let v1 = model.forward(a, x1, Mode::Train)?;
            let v2 = model.forward(b, x2, Mode::Train)?;
            let outputs = BranchOutputs {
                z1: v1.heads.z.clone(),
                z2: v2.heads.z.clone(),
                p1: v1.heads.p.clone(),
                p2: v2.heads.p.clone(),
            };
            Ok(PairForward {
                views: [v1, v2],
                outputs,
            })
        })
        .collect()
}

fn monitor(model: &ToyModel, inputs: &PairInputs, epoch: usize) -> Result<EpochRecord> {
    let pairs = forward_pairs(model, inputs)?;
    let outputs: Vec<BranchOutputs> = pairs.iter().map(|p| p.outputs.clone()).collect();
    let pair_losses = pair_losses(&outputs)?;
    let mut spread = 0.0;
    for o in &outputs {
        spread += embedding_spread(&o.z1)? + embedding_spread(&o.z2)?;
    }
    Ok(EpochRecord {
        epoch,
        loss: pair_losses.iter().sum(),
        pair_losses,
        spread: spread / 6.0,
    })
}

/// Trains a fresh model with momentum SGD and returns the monitor trace.
///
/// The monitor pass evaluates the whole dataset on one fixed set of
/// augmented views (batch statistics, no parameter update), so a zero
/// learning rate yields a flat trajectory.
pub fn train_toy(data: &RepresentationDataset, cfg: &ToyConfig) -> Result<(TrainTrace, ToyModel)> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 windows, got {}",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ToyModel::random(data.input_dims(), cfg, &mut rng)?;
    let mut velocity = model.zeros_like();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut monitor_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MONITOR_SEED_SALT);
    let monitor_inputs = draw_pair_inputs(data, &all, &cfg.augment, &mut monitor_rng);

    let training_error = |epoch: usize, e: Error| Error::Training {
        epoch,
        message: e.to_string(),
    };
    let mut records = vec![monitor(&model, &monitor_inputs, 0).map_err(|e| training_error(0, e))?];
    let batch = cfg.batch.min(data.len());
    let mut order = all.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for ids in order.chunks(batch).filter(|c| c.len() >= 2) {
            let inputs = draw_pair_inputs(data, ids, &cfg.augment, &mut rng);
            let pairs = forward_pairs(&model, &inputs).map_err(|e| training_error(epoch, e))?;
            let mut grads = model.zeros_like();
            for pair in &pairs {
                let g = symmetric_pair_loss_backward(&pair.outputs, cfg.stop_gradient)
                    .map_err(|e| training_error(epoch, e))?;
                model.backward(&pair.views[0], &g.z1, &g.p1, &mut grads);
                model.backward(&pair.views[1], &g.z2, &g.p2, &mut grads);
            }
            for pair in &pairs {
                for view in &pair.views {
                    model.update_running_stats(view);
                }
            }
            for ((w, g), v) in model
                .mlps_mut()
                .into_iter()
                .zip(grads.mlps_mut())
                .zip(velocity.mlps_mut())
            {
                w.momentum_step(g, v, cfg.lr, cfg.momentum);
            }
            if !model.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "parameters became non-finite".into(),
                });
            }
        }
        let record =
            monitor(&model, &monitor_inputs, epoch).map_err(|e| training_error(epoch, e))?;
        if !record.loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("loss is {}", record.loss),
            });
        }
        records.push(record);
    }
    Ok((TrainTrace { records }, model))
}
