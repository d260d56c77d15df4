//! Cross-modal fusion attention (CMFA) followed by self-attention (MSA) and
//! event cross-attention (MCA), as one alignment layer.
//!
//! For head `h` with per-head width `C_h = C / H` (contiguous channel slices):
//!
//! ```text
//! A_h    = softmax((T_h + Q_h) Wq_h ((F_h + P_h) Wk_h)^T / sqrt(C_h))
//! CMFA   = [A_1 V_1 Wv_1; ...; A_H V_H Wv_H] W_P
//! T      = T_prev + CMFA(LN(T_prev))
//! T'     = T + MSA(LN(T)) + MCA(LN(T + MSA(LN(T))))
//! ```
//!
//! CMFA keys come from RGB features plus structure encoding, MCA keys from
//! event features plus structure encoding, and MSA attends over the landmark
//! tokens themselves. Every block adds the landmark query to its queries.
//! The value tensor `V` of the two cross blocks is selected by
//! [`ValueSource`]: the normalized input embedding, or the feature tensor of
//! that block's modality (which allows `M != N`).

mod gradcheck;
mod ops;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{
    grad_check, relative_error, softmax_jacobian_check, GradCheckReport, GradCheckSpec, GradPoint,
    GradTarget, RELATIVE_ERROR_FLOOR, STRICT_RELATIVE_ERROR_FLOOR,
};
pub use ops::{
    layer_norm, layer_norm_backward, softmax_jacobian, softmax_rows, softmax_rows_backward,
    LayerNormCache, LN_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    /// Values are the (normalized) landmark embeddings; requires `M == N`.
    #[default]
    InputEmbedding,
    /// Values are the RGB features in CMFA and the event features in MCA.
    RgbFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    #[serde(default)]
    pub value_source: ValueSource,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize, value_source: ValueSource) -> Result<Self> {
        let cfg = Self {
            channels,
            heads,
            value_source,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Shape(format!(
                "{} channels cannot be split across {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Token and feature matrices for one alignment layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    /// `N x C` landmark embeddings.
    pub tokens: Array2<f64>,
    /// `N x C` landmark query.
    pub query: Array2<f64>,
    /// `M x C` RGB patch features and their structure encoding.
    pub rgb_features: Array2<f64>,
    pub rgb_structure: Array2<f64>,
    /// `M x C` event patch features and their structure encoding.
    pub event_features: Array2<f64>,
    pub event_structure: Array2<f64>,
}

impl Embeddings {
    pub fn zeros(n: usize, m: usize, c: usize) -> Self {
        Self {
            tokens: Array2::zeros((n, c)),
            query: Array2::zeros((n, c)),
            rgb_features: Array2::zeros((m, c)),
            rgb_structure: Array2::zeros((m, c)),
            event_features: Array2::zeros((m, c)),
            event_structure: Array2::zeros((m, c)),
        }
    }

    /// Standard-normal entries.
    pub fn random<R: Rng>(n: usize, m: usize, c: usize, rng: &mut R) -> Self {
        Self {
            tokens: random_matrix(rng, n, c, 1.0),
            query: random_matrix(rng, n, c, 1.0),
            rgb_features: random_matrix(rng, m, c, 1.0),
            rgb_structure: random_matrix(rng, m, c, 1.0),
            event_features: random_matrix(rng, m, c, 1.0),
            event_structure: random_matrix(rng, m, c, 1.0),
        }
    }

    pub fn tokens_len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn patches_len(&self) -> usize {
        self.rgb_features.nrows()
    }

    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        let (n, m, c) = (self.tokens.nrows(), self.rgb_features.nrows(), cfg.channels);
        let expect = [
            ("tokens", &self.tokens, n),
            ("query", &self.query, n),
            ("rgb_features", &self.rgb_features, m),
            ("rgb_structure", &self.rgb_structure, m),
            ("event_features", &self.event_features, m),
            ("event_structure", &self.event_structure, m),
        ];
        for (name, a, rows) in expect {
            if a.dim() != (rows, c) {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, expected ({rows}, {c})",
                    a.dim()
                )));
            }
            check_finite(name, a)?;
        }
        if n == 0 || m == 0 {
            return Err(Error::Shape("need at least one token and one patch".into()));
        }
        Ok(())
    }

    /// Row-stacked `[T; Q; F_rgb; P_rgb; F_evt; P_evt]`, shape `(2N + 4M) x C`.
    pub fn to_tensor(&self) -> Tensor {
        let stacked = concatenate(
            Axis(0),
            &[
                self.tokens.view(),
                self.query.view(),
                self.rgb_features.view(),
                self.rgb_structure.view(),
                self.event_features.view(),
                self.event_structure.view(),
            ],
        )
        .expect("embeddings share a channel count");
        Tensor::from_array2(&stacked)
    }

    /// Inverse of [`Embeddings::to_tensor`] given the token count `n`.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let a = t.to_array2()?;
        let rows = a.nrows();
        if rows < 2 * n || !(rows - 2 * n).is_multiple_of(4) || rows == 2 * n {
            return Err(Error::Shape(format!(
                "{rows} stacked rows cannot hold 2x{n} token rows plus 4 equal feature blocks"
            )));
        }
        let m = (rows - 2 * n) / 4;
        let block = |start: usize, len: usize| a.slice(s![start..start + len, ..]).to_owned();
        Ok(Self {
            tokens: block(0, n),
            query: block(n, n),
            rgb_features: block(2 * n, m),
            rgb_structure: block(2 * n + m, m),
            event_features: block(2 * n + 2 * m, m),
            event_structure: block(2 * n + 3 * m, m),
        })
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("tokens", as_slice_mut(&mut self.tokens)),
            ("query", as_slice_mut(&mut self.query)),
            ("rgb_features", as_slice_mut(&mut self.rgb_features)),
            ("rgb_structure", as_slice_mut(&mut self.rgb_structure)),
            ("event_features", as_slice_mut(&mut self.event_features)),
            ("event_structure", as_slice_mut(&mut self.event_structure)),
        ]
    }
}

/// Per-head projections, each `C_h x C_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

/// Parameters of one attention block (CMFA, MSA or MCA) including the layer
/// norm applied to its input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    /// `C x C` output projection.
    pub w_p: Array2<f64>,
    pub ln_scale: Array1<f64>,
    pub ln_shift: Array1<f64>,
}

impl AttentionParams {
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        let ch = cfg.head_dim();
        Self {
            heads: (0..cfg.heads)
                .map(|_| HeadParams {
                    w_q: Array2::zeros((ch, ch)),
                    w_k: Array2::zeros((ch, ch)),
                    w_v: Array2::zeros((ch, ch)),
                })
                .collect(),
            w_p: Array2::zeros((cfg.channels, cfg.channels)),
            ln_scale: Array1::zeros(cfg.channels),
            ln_shift: Array1::zeros(cfg.channels),
        }
    }

    /// Identity projections, unit scale, zero shift.
    pub fn identity(cfg: &AttentionConfig) -> Self {
        let ch = cfg.head_dim();
        Self {
            heads: (0..cfg.heads)
                .map(|_| HeadParams {
                    w_q: Array2::eye(ch),
                    w_k: Array2::eye(ch),
                    w_v: Array2::eye(ch),
                })
                .collect(),
            w_p: Array2::eye(cfg.channels),
            ln_scale: Array1::ones(cfg.channels),
            ln_shift: Array1::zeros(cfg.channels),
        }
    }

    /// Gaussian projections scaled by `1/sqrt(fan_in)`; scale and shift are
    /// jittered around 1 and 0 so no parameter sits at a special value.
    pub fn random<R: Rng>(cfg: &AttentionConfig, rng: &mut R) -> Self {
        let ch = cfg.head_dim();
        let c = cfg.channels;
        let head_std = 1.0 / (ch as f64).sqrt();
        let heads = (0..cfg.heads)
            .map(|_| HeadParams {
                w_q: random_matrix(rng, ch, ch, head_std),
                w_k: random_matrix(rng, ch, ch, head_std),
                w_v: random_matrix(rng, ch, ch, head_std),
            })
            .collect();
        let w_p = random_matrix(rng, c, c, 1.0 / (c as f64).sqrt());
        let ln_scale =
            Array1::from_shape_fn(c, |_| 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal));
        let ln_shift = Array1::from_shape_fn(c, |_| 0.1 * rng.sample::<f64, _>(StandardNormal));
        Self {
            heads,
            w_p,
            ln_scale,
            ln_shift,
        }
    }

    /// Same parameters with the output projection zeroed, so the block
    /// contributes nothing beyond its residual path.
    pub fn with_zero_output(mut self) -> Self {
        self.w_p.fill(0.0);
        self
    }

    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        let ch = cfg.head_dim();
        let c = cfg.channels;
        if self.heads.len() != cfg.heads {
            return Err(Error::Shape(format!(
                "{} head parameter sets for {} heads",
                self.heads.len(),
                cfg.heads
            )));
        }
        for (h, hp) in self.heads.iter().enumerate() {
            for (name, w) in [("w_q", &hp.w_q), ("w_k", &hp.w_k), ("w_v", &hp.w_v)] {
                if w.dim() != (ch, ch) {
                    return Err(Error::Shape(format!(
                        "head {h} {name} is {:?}, expected ({ch}, {ch})",
                        w.dim()
                    )));
                }
                check_finite(name, w)?;
            }
        }
        if self.w_p.dim() != (c, c) {
            return Err(Error::Shape(format!(
                "w_p is {:?}, expected ({c}, {c})",
                self.w_p.dim()
            )));
        }
        check_finite("w_p", &self.w_p)?;
        if self.ln_scale.len() != c || self.ln_shift.len() != c {
            return Err(Error::Shape(
                "layer-norm parameters must have C entries".into(),
            ));
        }
        if self
            .ln_scale
            .iter()
            .chain(self.ln_shift.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("non-finite layer-norm parameter".into()));
        }
        Ok(())
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (h, hp) in self.heads.iter_mut().enumerate() {
            out.push((format!("w_q[{h}]"), as_slice_mut(&mut hp.w_q)));
            out.push((format!("w_k[{h}]"), as_slice_mut(&mut hp.w_k)));
            out.push((format!("w_v[{h}]"), as_slice_mut(&mut hp.w_v)));
        }
        out.push(("w_p".to_string(), as_slice_mut(&mut self.w_p)));
        out.push((
            "ln_scale".to_string(),
            self.ln_scale.as_slice_mut().expect("contiguous"),
        ));
        out.push((
            "ln_shift".to_string(),
            self.ln_shift.as_slice_mut().expect("contiguous"),
        ));
        out
    }
}

/// The three blocks of one alignment layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub cmfa: AttentionParams,
    pub msa: AttentionParams,
    pub mca: AttentionParams,
}

impl LayerParams {
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        Self {
            cmfa: AttentionParams::zeros(cfg),
            msa: AttentionParams::zeros(cfg),
            mca: AttentionParams::zeros(cfg),
        }
    }

    pub fn random<R: Rng>(cfg: &AttentionConfig, rng: &mut R) -> Self {
        Self {
            cmfa: AttentionParams::random(cfg, rng),
            msa: AttentionParams::random(cfg, rng),
            mca: AttentionParams::random(cfg, rng),
        }
    }

    pub fn block(&self, kind: BlockKind) -> &AttentionParams {
        match kind {
            BlockKind::Cmfa => &self.cmfa,
            BlockKind::Msa => &self.msa,
            BlockKind::Mca => &self.mca,
        }
    }

    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        self.cmfa.validate(cfg)?;
        self.msa.validate(cfg)?;
        self.mca.validate(cfg)
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (prefix, block) in [
            ("cmfa", &mut self.cmfa),
            ("msa", &mut self.msa),
            ("mca", &mut self.mca),
        ] {
            out.extend(
                block
                    .tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("{prefix}.{n}"), t)),
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Cmfa,
    Msa,
    Mca,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [BlockKind::Cmfa, BlockKind::Msa, BlockKind::Mca];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Cmfa => "cmfa",
            BlockKind::Msa => "msa",
            BlockKind::Mca => "mca",
        }
    }
}

/// Attention weights of every head of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMaps {
    pub block: BlockKind,
    pub heads: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    /// `N x C` layer output.
    pub tokens: Array2<f64>,
    pub attention_maps: Vec<BlockMaps>,
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

fn as_slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut()
        .expect("parameters are stored contiguously")
}

fn check_finite(name: &str, a: &Array2<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} contains non-finite values")))
    }
}

/// Cached intermediates of one multi-head attention evaluation.
#[derive(Debug, Clone)]
struct AttendCache {
    queries: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    q: Vec<Array2<f64>>,
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

/// Gradients of an attention evaluation with respect to its three inputs.
struct AttendGrads {
    queries: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
}

fn head_weights(
    p: &AttentionParams,
    cfg: &AttentionConfig,
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    head: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let ch = cfg.head_dim();
    let hp = &p.heads[head];
    let q = ops::head_slice(queries, head, ch).dot(&hp.w_q);
    let k = ops::head_slice(keys, head, ch).dot(&hp.w_k);
    let logits = q.dot(&k.t()) / (ch as f64).sqrt();
    (ops::softmax_rows(logits.view()), q, k)
}

fn attend(
    p: &AttentionParams,
    cfg: &AttentionConfig,
    queries: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
) -> Result<(Array2<f64>, AttendCache)> {
    if keys.nrows() != values.nrows() {
        return Err(Error::Shape(format!(
            "{} key rows but {} value rows; the input-embedding value source needs as many patches as tokens",
            keys.nrows(),
            values.nrows()
        )));
    }
    let ch = cfg.head_dim();
    let n = queries.nrows();
    let mut cache = AttendCache {
        concat: Array2::zeros((n, cfg.channels)),
        q: Vec::with_capacity(cfg.heads),
        k: Vec::with_capacity(cfg.heads),
        v: Vec::with_capacity(cfg.heads),
        weights: Vec::with_capacity(cfg.heads),
        queries,
        keys,
        values,
    };
    for h in 0..cfg.heads {
        let (a, q, k) = head_weights(p, cfg, &cache.queries, &cache.keys, h);
        let v = ops::head_slice(&cache.values, h, ch).dot(&p.heads[h].w_v);
        let out = a.dot(&v);
        cache
            .concat
            .slice_mut(s![.., h * ch..(h + 1) * ch])
            .assign(&out);
        cache.q.push(q);
        cache.k.push(k);
        cache.v.push(v);
        cache.weights.push(a);
    }
    let y = cache.concat.dot(&p.w_p);
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("attention output is not finite".into()));
    }
    Ok((y, cache))
}

fn attend_backward(
    p: &AttentionParams,
    cfg: &AttentionConfig,
    cache: &AttendCache,
    d_y: &Array2<f64>,
    grads: &mut AttentionParams,
) -> AttendGrads {
    let ch = cfg.head_dim();
    let scale = 1.0 / (ch as f64).sqrt();
    grads.w_p += &cache.concat.t().dot(d_y);
    let d_concat = d_y.dot(&p.w_p.t());
    let mut out = AttendGrads {
        queries: Array2::zeros(cache.queries.raw_dim()),
        keys: Array2::zeros(cache.keys.raw_dim()),
        values: Array2::zeros(cache.values.raw_dim()),
    };
    for h in 0..cfg.heads {
        let hp = &p.heads[h];
        let a = &cache.weights[h];
        let d_out = ops::head_slice(&d_concat, h, ch);
        let d_a = d_out.dot(&cache.v[h].t());
        let d_v = a.t().dot(&d_out);
        let d_logits = ops::softmax_rows_backward(a, &d_a) * scale;
        let d_q = d_logits.dot(&cache.k[h]);
        let d_k = d_logits.t().dot(&cache.q[h]);

        let gh = &mut grads.heads[h];
        gh.w_q += &ops::head_slice(&cache.queries, h, ch).t().dot(&d_q);
        gh.w_k += &ops::head_slice(&cache.keys, h, ch).t().dot(&d_k);
        gh.w_v += &ops::head_slice(&cache.values, h, ch).t().dot(&d_v);

        let sl = s![.., h * ch..(h + 1) * ch];
        out.queries.slice_mut(sl).assign(&d_q.dot(&hp.w_q.t()));
        out.keys.slice_mut(sl).assign(&d_k.dot(&hp.w_k.t()));
        out.values.slice_mut(sl).assign(&d_v.dot(&hp.w_v.t()));
    }
    out
}

fn check_inputs(emb: &Embeddings, p: &AttentionParams, cfg: &AttentionConfig) -> Result<()> {
    cfg.validate()?;
    emb.validate(cfg)?;
    p.validate(cfg)
}

/// Attention weights `A_h` of CMFA head `head`, using `emb.tokens` as `T`.
pub fn cmfa_weights(
    emb: &Embeddings,
    params: &AttentionParams,
    cfg: &AttentionConfig,
    head: usize,
) -> Result<Array2<f64>> {
    check_inputs(emb, params, cfg)?;
    if head >= cfg.heads {
        return Err(Error::Shape(format!(
            "head {head} out of range for {} heads",
            cfg.heads
        )));
    }
    let queries = &emb.tokens + &emb.query;
    let keys = &emb.rgb_features + &emb.rgb_structure;
    Ok(head_weights(params, cfg, &queries, &keys, head).0)
}

/// CMFA output `[A_1 V_1 Wv_1; ...] W_P` with `emb.tokens` as `T`.
pub fn cmfa_forward(
    emb: &Embeddings,
    params: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<Array2<f64>> {
    check_inputs(emb, params, cfg)?;
    Ok(cmfa_attend(&emb.tokens, emb, params, cfg)?.0)
}

fn cmfa_attend(
    tokens: &Array2<f64>,
    emb: &Embeddings,
    p: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<(Array2<f64>, AttendCache)> {
    let values = match cfg.value_source {
        ValueSource::InputEmbedding => tokens.clone(),
        ValueSource::RgbFeatures => emb.rgb_features.clone(),
    };
    attend(
        p,
        cfg,
        tokens + &emb.query,
        &emb.rgb_features + &emb.rgb_structure,
        values,
    )
}

/// Intermediates of one residual block `T_prev + Attn(LN(T_prev))`.
#[derive(Debug, Clone)]
struct BlockCache {
    ln: LayerNormCache,
    attend: AttendCache,
}

fn block_forward(
    kind: BlockKind,
    t_prev: &Array2<f64>,
    emb: &Embeddings,
    p: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<(Array2<f64>, BlockCache)> {
    let (normed, ln) = ops::layer_norm(t_prev, &p.ln_scale, &p.ln_shift);
    let queries = &normed + &emb.query;
    let (y, attend_cache) = match kind {
        BlockKind::Cmfa => cmfa_attend(&normed, emb, p, cfg)?,
        BlockKind::Msa => attend(p, cfg, queries.clone(), queries, normed)?,
        BlockKind::Mca => {
            let values = match cfg.value_source {
                ValueSource::InputEmbedding => normed,
                ValueSource::RgbFeatures => emb.event_features.clone(),
            };
            attend(
                p,
                cfg,
                queries,
                &emb.event_features + &emb.event_structure,
                values,
            )?
        }
    };
    Ok((
        t_prev + &y,
        BlockCache {
            ln,
            attend: attend_cache,
        },
    ))
}

/// Accumulates parameter and embedding gradients; returns `dL/dT_prev`.
fn block_backward(
    kind: BlockKind,
    cache: &BlockCache,
    p: &AttentionParams,
    cfg: &AttentionConfig,
    d_out: &Array2<f64>,
    grads: &mut AttentionParams,
    d_emb: &mut Embeddings,
) -> Array2<f64> {
    let g = attend_backward(p, cfg, &cache.attend, d_out, grads);
    let mut d_normed = g.queries.clone();
    d_emb.query += &g.queries;
    match kind {
        BlockKind::Cmfa => {
            d_emb.rgb_features += &g.keys;
            d_emb.rgb_structure += &g.keys;
            match cfg.value_source {
                ValueSource::InputEmbedding => d_normed += &g.values,
                ValueSource::RgbFeatures => d_emb.rgb_features += &g.values,
            }
        }
        BlockKind::Msa => {
            d_normed += &g.keys;
            d_emb.query += &g.keys;
            d_normed += &g.values;
        }
        BlockKind::Mca => {
            d_emb.event_features += &g.keys;
            d_emb.event_structure += &g.keys;
            match cfg.value_source {
                ValueSource::InputEmbedding => d_normed += &g.values,
                ValueSource::RgbFeatures => d_emb.event_features += &g.values,
            }
        }
    }
    let (d_x, d_scale, d_shift) = ops::layer_norm_backward(&cache.ln, &p.ln_scale, &d_normed);
    grads.ln_scale += &d_scale;
    grads.ln_shift += &d_shift;
    d_out + &d_x
}

/// `T_prev + CMFA(LN(T_prev))`.
pub fn cmfa_block(
    t_prev: &Array2<f64>,
    emb: &Embeddings,
    params: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<Array2<f64>> {
    check_inputs(emb, params, cfg)?;
    check_tokens(t_prev, emb)?;
    Ok(block_forward(BlockKind::Cmfa, t_prev, emb, params, cfg)?.0)
}

fn check_tokens(t_prev: &Array2<f64>, emb: &Embeddings) -> Result<()> {
    if t_prev.dim() != emb.tokens.dim() {
        return Err(Error::Shape(format!(
            "input tokens are {:?}, expected {:?}",
            t_prev.dim(),
            emb.tokens.dim()
        )));
    }
    check_finite("input tokens", t_prev)
}

#[derive(Debug, Clone)]
struct LayerCache {
    cmfa: BlockCache,
    msa: BlockCache,
    mca: BlockCache,
}

fn layer_forward_cached(
    t_prev: &Array2<f64>,
    emb: &Embeddings,
    params: &LayerParams,
    cfg: &AttentionConfig,
) -> Result<(Array2<f64>, LayerCache)> {
    let (t, cmfa) = block_forward(BlockKind::Cmfa, t_prev, emb, &params.cmfa, cfg)?;
    let (t, msa) = block_forward(BlockKind::Msa, &t, emb, &params.msa, cfg)?;
    let (t, mca) = block_forward(BlockKind::Mca, &t, emb, &params.mca, cfg)?;
    Ok((t, LayerCache { cmfa, msa, mca }))
}

/// One full alignment layer: CMFA block, then MSA and MCA residual blocks.
pub fn layer_forward(
    t_prev: &Array2<f64>,
    emb: &Embeddings,
    params: &LayerParams,
    cfg: &AttentionConfig,
) -> Result<LayerOutput> {
    check_inputs(emb, &params.cmfa, cfg)?;
    params.validate(cfg)?;
    check_tokens(t_prev, emb)?;
    let (tokens, cache) = layer_forward_cached(t_prev, emb, params, cfg)?;
    let attention_maps = [
        (BlockKind::Cmfa, cache.cmfa),
        (BlockKind::Msa, cache.msa),
        (BlockKind::Mca, cache.mca),
    ]
    .into_iter()
    .map(|(block, c)| BlockMaps {
        block,
        heads: c.attend.weights,
    })
    .collect();
    Ok(LayerOutput {
        tokens,
        attention_maps,
    })
}

/// Applies `layers` alignment layers with shared parameters, starting from
/// `emb.tokens`. Returns the final tokens and the last layer's maps.
pub fn stack_forward(
    emb: &Embeddings,
    params: &LayerParams,
    cfg: &AttentionConfig,
    layers: usize,
) -> Result<LayerOutput> {
    let mut out = LayerOutput {
        tokens: emb.tokens.clone(),
        attention_maps: Vec::new(),
    };
    for _ in 0..layers {
        out = layer_forward(&out.tokens, emb, params, cfg)?;
    }
    Ok(out)
}

/// Gradients of `sum(d_out * output)` for every parameter and input.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub params: LayerParams,
    pub embeddings: Embeddings,
    pub t_prev: Array2<f64>,
}

/// Analytic backward pass of [`layer_forward`] for upstream gradient `d_out`.
pub fn layer_backward(
    t_prev: &Array2<f64>,
    emb: &Embeddings,
    params: &LayerParams,
    cfg: &AttentionConfig,
    d_out: &Array2<f64>,
) -> Result<LayerGradients> {
    params.validate(cfg)?;
    emb.validate(cfg)?;
    check_tokens(t_prev, emb)?;
    let (_, cache) = layer_forward_cached(t_prev, emb, params, cfg)?;
    let mut grads = LayerParams::zeros(cfg);
    let mut d_emb = Embeddings::zeros(emb.tokens_len(), emb.patches_len(), cfg.channels);
    let d = block_backward(
        BlockKind::Mca,
        &cache.mca,
        &params.mca,
        cfg,
        d_out,
        &mut grads.mca,
        &mut d_emb,
    );
    let d = block_backward(
        BlockKind::Msa,
        &cache.msa,
        &params.msa,
        cfg,
        &d,
        &mut grads.msa,
        &mut d_emb,
    );
    let d = block_backward(
        BlockKind::Cmfa,
        &cache.cmfa,
        &params.cmfa,
        cfg,
        &d,
        &mut grads.cmfa,
        &mut d_emb,
    );
    finish_grads(grads, d_emb, d)
}

/// Analytic backward pass of [`cmfa_block`].
pub fn cmfa_block_backward(
    t_prev: &Array2<f64>,
    emb: &Embeddings,
    params: &AttentionParams,
    cfg: &AttentionConfig,
    d_out: &Array2<f64>,
) -> Result<LayerGradients> {
    check_inputs(emb, params, cfg)?;
    check_tokens(t_prev, emb)?;
    let (_, cache) = block_forward(BlockKind::Cmfa, t_prev, emb, params, cfg)?;
    let mut grads = LayerParams::zeros(cfg);
    let mut d_emb = Embeddings::zeros(emb.tokens_len(), emb.patches_len(), cfg.channels);
    let d = block_backward(
        BlockKind::Cmfa,
        &cache,
        params,
        cfg,
        d_out,
        &mut grads.cmfa,
        &mut d_emb,
    );
    finish_grads(grads, d_emb, d)
}

/// Analytic backward pass of [`cmfa_forward`]; the token gradient is
/// reported in `embeddings.tokens`.
pub fn cmfa_forward_backward(
    emb: &Embeddings,
    params: &AttentionParams,
    cfg: &AttentionConfig,
    d_out: &Array2<f64>,
) -> Result<LayerGradients> {
    check_inputs(emb, params, cfg)?;
    let (_, cache) = cmfa_attend(&emb.tokens, emb, params, cfg)?;
    let mut grads = LayerParams::zeros(cfg);
    let mut d_emb = Embeddings::zeros(emb.tokens_len(), emb.patches_len(), cfg.channels);
    let g = attend_backward(params, cfg, &cache, d_out, &mut grads.cmfa);
    d_emb.tokens += &g.queries;
    d_emb.query += &g.queries;
    d_emb.rgb_features += &g.keys;
    d_emb.rgb_structure += &g.keys;
    match cfg.value_source {
        ValueSource::InputEmbedding => d_emb.tokens += &g.values,
        ValueSource::RgbFeatures => d_emb.rgb_features += &g.values,
    }
    let t_prev = Array2::zeros(emb.tokens.raw_dim());
    finish_grads(grads, d_emb, t_prev)
}

fn finish_grads(
    params: LayerParams,
    embeddings: Embeddings,
    t_prev: Array2<f64>,
) -> Result<LayerGradients> {
    let finite = |a: &Array2<f64>| a.iter().all(|v| v.is_finite());
    if !finite(&t_prev) || !finite(&embeddings.query) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(LayerGradients {
        params,
        embeddings,
        t_prev,
    })
}

/// Per-row sums of an attention map; each should be 1.
pub fn row_sums(a: &Array2<f64>) -> Array1<f64> {
    a.sum_axis(Axis(1))
}

#[cfg(test)]
mod tests;
