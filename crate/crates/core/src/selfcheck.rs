//! Quick invariant suite run by the `selfcheck` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    cmfa_block, cmfa_weights, grad_check, layer_forward, AttentionConfig, AttentionParams,
    Embeddings, GradCheckSpec, GradTarget, LayerParams, ValueSource,
};
use crate::dataset::{esie_protocol, segment_stream, select_max_event_segment, ESIE_FRAME_US};
use crate::error::Result;
use crate::events::{Event, EventStream, Polarity, SensorGeometry};
use crate::metrics::{auc, failure_rate};
use crate::representations::{build_frame, build_voxel, signed_sum};
use crate::simulator::{
    frames_to_events, FrameSequence, SimulatorConfig, DEFAULT_LOG_EPS, DEFAULT_THRESHOLD,
};
use crate::ssmer::{
    heads_grad_check, loss_grad_check, multi_rep_loss, synthetic_dataset, train_toy, BranchOutputs,
    ToyConfig,
};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(u64) -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 9] = [
    ("representation mass", mass_conservation),
    ("simulator crossing counts", simulator_counts),
    ("attention rows and residuals", attention_structure),
    ("attention gradients", attention_gradients),
    ("loss gradients", loss_gradients),
    ("loss identities", loss_identities),
    ("toy training", toy_training),
    ("metric examples", metric_examples),
    ("recording protocol", recording_protocol),
];

/// Runs every check; errors count as failures.
pub fn run(seed: u64) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, check)| match check(seed) {
            Ok((passed, detail)) => CheckOutcome {
                name,
                passed,
                detail,
            },
            Err(e) => CheckOutcome {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

fn random_stream(rng: &mut ChaCha8Rng) -> Result<EventStream> {
    let g = SensorGeometry::new(rng.random_range(1..=32), rng.random_range(1..=32))?;
    let n = rng.random_range(1..=2000);
    let mut t = 0u64;
    let events = (0..n)
        .map(|_| {
            t += rng.random_range(0..50);
            Event::new(
                t,
                rng.random_range(0..g.width) as u16,
                rng.random_range(0..g.height) as u16,
                Polarity::from_bit(rng.random_range(0..2)).expect("bit"),
            )
        })
        .collect();
    EventStream::new(g, events)
}

fn mass_conservation(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut frames_ok = true;
    for _ in 0..100 {
        let s = random_stream(&mut rng)?;
        frames_ok &= build_frame(&s).total() == s.len() as u64;
        let v = build_voxel(&s, rng.random_range(1..=8))?;
        worst = worst.max((v.total() - signed_sum(&s) as f64).abs() / s.len() as f64);
    }
    Ok((
        frames_ok && worst <= 1e-9,
        format!("frames exact: {frames_ok}, voxel error/count {worst:.2e}"),
    ))
}

/// Lattice-crossing count of a piecewise-linear trace.
fn closed_form_count(levels: &[f64], c: f64) -> u64 {
    let mut k: i64 = 0;
    let mut total = 0;
    for w in levels.windows(2) {
        let r = (w[1] - levels[0]) / c;
        let next = if w[1] > w[0] {
            k.max(r.floor() as i64)
        } else {
            k.min(r.ceil() as i64)
        };
        total += (next - k).unsigned_abs();
        k = next;
    }
    total
}

fn simulator_counts(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..20 {
        let frames = rng.random_range(2..8);
        let levels: Vec<f64> = (0..frames).map(|_| rng.random_range(-4.0..0.0)).collect();
        let intensity: Vec<Vec<f64>> = levels
            .iter()
            .map(|l| vec![(l.exp() - DEFAULT_LOG_EPS).max(0.0)])
            .collect();
        let seq = FrameSequence::new(1, 1, intensity, 25.0)?;
        let events = frames_to_events(&seq, &SimulatorConfig::default())?;
        let logged: Vec<f64> = seq
            .frames()
            .iter()
            .map(|f| (f[0] + DEFAULT_LOG_EPS).ln())
            .collect();
        if events.len() as u64 != closed_form_count(&logged, DEFAULT_THRESHOLD) {
            mismatches += 1;
        }
    }
    let flat = FrameSequence::new(4, 4, vec![vec![0.3; 16]; 4], 25.0)?;
    let silent = frames_to_events(&flat, &SimulatorConfig::default())?.is_empty();
    Ok((
        mismatches == 0 && silent,
        format!("{mismatches} mismatching ramps, constant input silent: {silent}"),
    ))
}

fn attention_structure(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AttentionConfig::new(8, 2, ValueSource::RgbFeatures)?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let emb = Embeddings::random(3, 5, 8, &mut rng);
        let p = AttentionParams::random(&cfg, &mut rng);
        for h in 0..cfg.heads {
            for row in cmfa_weights(&emb, &p, &cfg, h)?.rows() {
                worst = worst.max((row.sum() - 1.0).abs());
            }
        }
    }
    let emb = Embeddings::random(3, 5, 8, &mut rng);
    let t = Embeddings::random(3, 1, 8, &mut rng).tokens;
    let zero = LayerParams::random(&cfg, &mut rng);
    let zero = LayerParams {
        cmfa: zero.cmfa.with_zero_output(),
        msa: zero.msa.with_zero_output(),
        mca: zero.mca.with_zero_output(),
    };
    let block_id = cmfa_block(&t, &emb, &zero.cmfa, &cfg)? == t;
    let layer_id = layer_forward(&t, &emb, &zero, &cfg)?.tokens == t;
    Ok((
        worst < 1e-12 && block_id && layer_id,
        format!(
            "max |row sum - 1| {worst:.1e}, zero-projection identity: {}",
            block_id && layer_id
        ),
    ))
}

fn attention_gradients(seed: u64) -> Result<(bool, String)> {
    let spec = GradCheckSpec::default();
    let mut worst: f64 = 0.0;
    for target in [GradTarget::CmfaBlock, GradTarget::LayerForward] {
        for s in seed..seed + 2 {
            let r = grad_check(target, &spec, s)?;
            worst = worst
                .max(r.max_relative_error)
                .max(r.max_strict_relative_error);
        }
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn loss_gradients(seed: u64) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for s in seed..seed + 2 {
        worst = worst
            .max(loss_grad_check(s)?.max_strict_relative_error)
            .max(heads_grad_check(s)?.max_relative_error);
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn loss_identities(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let aligned = BranchOutputs::single(&v, &w, &w, &v)?;
    let total = multi_rep_loss(&[aligned.clone(), aligned.clone(), aligned])?;
    Ok(((total + 3.0).abs() < 1e-12, format!("aligned L_MR {total}")))
}

fn toy_training(seed: u64) -> Result<(bool, String)> {
    let data = synthetic_dataset(32, 8, 3, seed)?;
    let cfg = ToyConfig {
        epochs: 10,
        batch: 8,
        seed,
        ..Default::default()
    };
    let trace = train_toy(&data, &cfg)?.0;
    let (first, last) = (trace.initial(), trace.last());
    Ok((
        last.loss < first.loss && last.spread > 0.01,
        format!(
            "L_MR {:.4} -> {:.4}, spread {:.4}",
            first.loss, last.loss, last.spread
        ),
    ))
}

fn metric_examples(_seed: u64) -> Result<(bool, String)> {
    let a = auc(&[0.05], 0.1)?;
    let fr = failure_rate(&[0.05, 0.1, 0.15], 0.1)?;
    Ok((
        a == 0.5 && (fr - 100.0 / 3.0).abs() < 1e-12,
        format!("AUC {{0.05}} = {a}, FR = {fr:.4}%"),
    ))
}

fn recording_protocol(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = SensorGeometry::new(4, 4)?;
    let mut t = 0;
    let mut events = Vec::new();
    while t <= 10_400_000 {
        events.push(Event::new(t, 0, 0, Polarity::Positive));
        t += rng.random_range(1..5000);
    }
    events.push(Event::new(10_400_000, 1, 1, Polarity::Negative));
    let stream = EventStream::new(g, events)?;
    let windows = esie_protocol(&stream)?;
    let spans_ok = windows.iter().all(|w| {
        w.events().iter().all(|e| {
            let last = w.last_t().unwrap_or(e.t);
            last - w.first_t().unwrap_or(last) < ESIE_FRAME_US
        })
    });
    let index = segment_stream(&stream, 25.0)?;
    let best = select_max_event_segment(&index)?;
    let scan = (0..index.len()).fold(0, |b, i| {
        if index.counts[i] > index.counts[b] {
            i
        } else {
            b
        }
    });
    let ok = windows.len() == 10 && spans_ok && index.windows[0].dt == 40_000 && best == scan;
    Ok((
        ok,
        format!(
            "{} windows, 25 fps dt {} us",
            windows.len(),
            index.windows[0].dt
        ),
    ))
}
