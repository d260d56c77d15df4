use ndarray::{array, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cfg(c: usize, h: usize, vs: ValueSource) -> AttentionConfig {
    AttentionConfig::new(c, h, vs).unwrap()
}

fn scalar_head(w_q: f64, w_k: f64, w_v: f64, w_p: f64, shift: f64) -> AttentionParams {
    AttentionParams {
        heads: vec![HeadParams {
            w_q: array![[w_q]],
            w_k: array![[w_k]],
            w_v: array![[w_v]],
        }],
        w_p: array![[w_p]],
        ln_scale: array![1.3],
        ln_shift: array![shift],
    }
}

fn col(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
}

/// Plain-loop evaluation of the CMFA output, independent of the ndarray path.
#[allow(clippy::needless_range_loop)]
fn naive_cmfa(emb: &Embeddings, p: &AttentionParams, cfg: &AttentionConfig) -> Vec<Vec<f64>> {
    let (n, m, c, ch) = (
        emb.tokens.nrows(),
        emb.rgb_features.nrows(),
        cfg.channels,
        cfg.head_dim(),
    );
    let values = match cfg.value_source {
        ValueSource::InputEmbedding => &emb.tokens,
        ValueSource::RgbFeatures => &emb.rgb_features,
    };
    let mut concat = vec![vec![0.0; c]; n];
    for h in 0..cfg.heads {
        let hp = &p.heads[h];
        let off = h * ch;
        let proj = |src: &dyn Fn(usize, usize) -> f64, rows: usize, w: &Array2<f64>| {
            let mut out = vec![vec![0.0; ch]; rows];
            for r in 0..rows {
                for j in 0..ch {
                    let mut acc = 0.0;
                    for i in 0..ch {
                        acc += src(r, off + i) * w[[i, j]];
                    }
                    out[r][j] = acc;
                }
            }
            out
        };
        let q = proj(&|r, i| emb.tokens[[r, i]] + emb.query[[r, i]], n, &hp.w_q);
        let k = proj(
            &|r, i| emb.rgb_features[[r, i]] + emb.rgb_structure[[r, i]],
            m,
            &hp.w_k,
        );
        let v = proj(&|r, i| values[[r, i]], m, &hp.w_v);
        for r in 0..n {
            let logits: Vec<f64> = (0..m)
                .map(|s| (0..ch).map(|j| q[r][j] * k[s][j]).sum::<f64>() / (ch as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..ch {
                concat[r][off + j] = (0..m).map(|s| exps[s] / z * v[s][j]).sum();
            }
        }
    }
    (0..n)
        .map(|r| {
            (0..c)
                .map(|j| (0..c).map(|i| concat[r][i] * p.w_p[[i, j]]).sum())
                .collect()
        })
        .collect()
}

fn naive_layer_norm(x: &Array2<f64>, scale: &Array1<f64>, shift: &Array1<f64>) -> Array2<f64> {
    let c = x.ncols();
    let mut out = x.clone();
    for r in 0..x.nrows() {
        let mean: f64 = (0..c).map(|j| x[[r, j]]).sum::<f64>() / c as f64;
        let var: f64 = (0..c).map(|j| (x[[r, j]] - mean).powi(2)).sum::<f64>() / c as f64;
        for j in 0..c {
            out[[r, j]] = (x[[r, j]] - mean) / (var + LN_EPS).sqrt() * scale[j] + shift[j];
        }
    }
    out
}

#[test]
fn identical_keys_give_uniform_rows() {
    let c = cfg(8, 2, ValueSource::RgbFeatures);
    let mut emb = Embeddings::random(3, 5, 8, &mut rng(1));
    let row = emb.rgb_features.row(0).to_owned();
    for mut r in emb.rgb_features.rows_mut() {
        r.assign(&row);
    }
    emb.rgb_structure.fill(0.25);
    let p = AttentionParams::random(&c, &mut rng(2));
    for h in 0..2 {
        let a = cmfa_weights(&emb, &p, &c, h).unwrap();
        assert!(a.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }
}

#[test]
fn single_key_weight_is_one() {
    let c = cfg(1, 1, ValueSource::InputEmbedding);
    let mut emb = Embeddings::zeros(1, 1, 1);
    emb.tokens[[0, 0]] = 12.5;
    emb.rgb_features[[0, 0]] = -3.0;
    let a = cmfa_weights(&emb, &scalar_head(4.0, -7.0, 1.0, 1.0, 0.0), &c, 0).unwrap();
    assert_eq!(a, array![[1.0]]);
}

#[test]
fn two_by_two_scalar_head_matches_hand_softmax() {
    // q = (T + Q) * 2 = [3, 2], k = (F + P) * 0.5 = [0.5, -0.25]
    // logits row 0 = [1.5, -0.75] -> sigmoid(2.25); row 1 = [1.0, -0.5] -> sigmoid(1.5)
    let c = cfg(1, 1, ValueSource::InputEmbedding);
    let emb = Embeddings {
        tokens: col(&[1.0, 2.0]),
        query: col(&[0.5, -1.0]),
        rgb_features: col(&[1.0, -1.0]),
        rgb_structure: col(&[0.0, 0.5]),
        event_features: col(&[0.0, 0.0]),
        event_structure: col(&[0.0, 0.0]),
    };
    let a = cmfa_weights(&emb, &scalar_head(2.0, 0.5, 1.0, 1.0, 0.0), &c, 0).unwrap();
    assert!((a[[0, 0]] - 0.9046505351008906).abs() < 1e-15);
    assert!((a[[1, 0]] - 0.8175744761936437).abs() < 1e-15);
    assert!((a[[0, 1]] - (1.0 - 0.9046505351008906)).abs() < 1e-15);
}

#[test]
fn identity_projections_and_uniform_weights_average_values() {
    let c = cfg(4, 2, ValueSource::RgbFeatures);
    let mut emb = Embeddings::random(2, 3, 4, &mut rng(5));
    emb.rgb_structure.fill(0.0);
    let key = emb.rgb_features.row(0).to_owned();
    // Identical keys, distinct values: route keys through the structure encoding.
    for (mut s, f) in emb
        .rgb_structure
        .rows_mut()
        .into_iter()
        .zip(emb.rgb_features.rows())
    {
        s.assign(&(&key - &f));
    }
    let y = cmfa_forward(&emb, &AttentionParams::identity(&c), &c).unwrap();
    let mean = emb.rgb_features.mean_axis(ndarray::Axis(0)).unwrap();
    for row in y.rows() {
        for (a, b) in row.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_head_is_the_plain_formula() {
    let c = cfg(3, 1, ValueSource::InputEmbedding);
    let emb = Embeddings::random(4, 4, 3, &mut rng(9));
    let p = AttentionParams::random(&c, &mut rng(10));
    let hp = &p.heads[0];
    let q = (&emb.tokens + &emb.query).dot(&hp.w_q);
    let k = (&emb.rgb_features + &emb.rgb_structure).dot(&hp.w_k);
    let a = softmax_rows((q.dot(&k.t()) / 3f64.sqrt()).view());
    let expected = a.dot(&emb.tokens.dot(&hp.w_v)).dot(&p.w_p);
    let y = cmfa_forward(&emb, &p, &c).unwrap();
    assert!((&y - &expected).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn forward_matches_naive_loops() {
    for (seed, vs, n, m) in [
        (1, ValueSource::RgbFeatures, 3, 7),
        (2, ValueSource::InputEmbedding, 5, 5),
        (3, ValueSource::RgbFeatures, 1, 2),
    ] {
        let c = cfg(12, 3, vs);
        let emb = Embeddings::random(n, m, 12, &mut rng(seed));
        let p = AttentionParams::random(&c, &mut rng(seed + 100));
        let y = cmfa_forward(&emb, &p, &c).unwrap();
        let oracle = naive_cmfa(&emb, &p, &c);
        for r in 0..n {
            for j in 0..12 {
                assert!((y[[r, j]] - oracle[r][j]).abs() < 1e-10, "seed {seed}");
            }
        }
    }
}

#[test]
fn zero_output_block_is_identity() {
    let c = cfg(8, 2, ValueSource::RgbFeatures);
    let emb = Embeddings::random(3, 4, 8, &mut rng(3));
    let p = AttentionParams::random(&c, &mut rng(4)).with_zero_output();
    let t = Embeddings::random(3, 1, 8, &mut rng(6)).tokens;
    assert_eq!(cmfa_block(&t, &emb, &p, &c).unwrap(), t);
}

#[test]
fn cmfa_block_matches_step_by_step_composition() {
    let c = cfg(8, 4, ValueSource::InputEmbedding);
    let emb = Embeddings::random(5, 5, 8, &mut rng(11));
    let p = AttentionParams::random(&c, &mut rng(12));
    let t_prev = Embeddings::random(5, 1, 8, &mut rng(13)).tokens;
    let normed = naive_layer_norm(&t_prev, &p.ln_scale, &p.ln_shift);
    let mut inner = emb.clone();
    inner.tokens = normed;
    let attn = naive_cmfa(&inner, &p, &c);
    let out = cmfa_block(&t_prev, &emb, &p, &c).unwrap();
    for r in 0..5 {
        for j in 0..8 {
            assert!((out[[r, j]] - (t_prev[[r, j]] + attn[r][j])).abs() < 1e-10);
        }
    }
}

#[test]
fn zero_projection_layer_is_identity() {
    for vs in [ValueSource::InputEmbedding, ValueSource::RgbFeatures] {
        let c = cfg(8, 2, vs);
        let emb = Embeddings::random(4, 4, 8, &mut rng(21));
        let mut params = LayerParams::random(&c, &mut rng(22));
        for b in [&mut params.cmfa, &mut params.msa, &mut params.mca] {
            for h in &mut b.heads {
                h.w_q.fill(0.0);
                h.w_k.fill(0.0);
                h.w_v.fill(0.0);
            }
            b.w_p.fill(0.0);
        }
        let t = Embeddings::random(4, 1, 8, &mut rng(23)).tokens;
        let out = layer_forward(&t, &emb, &params, &c).unwrap();
        assert_eq!(out.tokens, t);
    }
}

#[test]
fn scalar_layer_matches_hand_evaluation() {
    let c = cfg(1, 1, ValueSource::RgbFeatures);
    let emb = Embeddings {
        tokens: col(&[0.0, 0.0]),
        query: col(&[0.5, -0.4]),
        rgb_features: col(&[1.0, -0.5]),
        rgb_structure: col(&[0.2, 0.1]),
        event_features: col(&[-0.7, 0.9]),
        event_structure: col(&[0.3, -0.2]),
    };
    let params = LayerParams {
        cmfa: scalar_head(1.5, -0.8, 1.1, 0.9, 0.25),
        msa: scalar_head(0.7, 1.2, -0.6, 1.4, -0.35),
        mca: scalar_head(-1.1, 0.6, 0.8, 1.2, 0.45),
    };
    let t_prev = col(&[0.3, -1.2]);
    let out = layer_forward(&t_prev, &emb, &params, &c).unwrap();
    assert!((out.tokens[[0, 0]] - 0.22462215548073933).abs() < 1e-14);
    assert!((out.tokens[[1, 0]] - -0.47025062181363775).abs() < 1e-14);
    let cmfa = &out.attention_maps[0].heads[0];
    assert!((cmfa[[0, 0]] - 0.19154534856146746).abs() < 1e-15);
    assert!((cmfa[[1, 1]] - 0.4284935705324441).abs() < 1e-15);
    let after_cmfa = cmfa_block(&t_prev, &emb, &params.cmfa, &c).unwrap();
    assert!((after_cmfa[[0, 0]] - 0.08944484261377911).abs() < 1e-14);
}

#[test]
fn stacked_layers_are_repeatable() {
    let c = cfg(8, 2, ValueSource::RgbFeatures);
    let emb = Embeddings::random(5, 6, 8, &mut rng(30));
    let params = LayerParams::random(&c, &mut rng(31));
    let a = stack_forward(&emb, &params, &c, 4).unwrap();
    let b = stack_forward(&emb, &params, &c, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.attention_maps.len(), 3);
    assert_eq!(a.attention_maps[1].heads[0].dim(), (5, 5));
    assert_eq!(a.attention_maps[2].heads[1].dim(), (5, 6));
}

#[test]
fn rows_are_probability_vectors() {
    let c = cfg(8, 4, ValueSource::RgbFeatures);
    for seed in 0..20 {
        let emb = Embeddings::random(5, 9, 8, &mut rng(seed));
        let params = LayerParams::random(&c, &mut rng(seed + 50));
        let out = layer_forward(&emb.tokens, &emb, &params, &c).unwrap();
        for maps in &out.attention_maps {
            for a in &maps.heads {
                assert!(a.iter().all(|&v| v >= 0.0));
                for s in row_sums(a) {
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn softmax_shift_invariance() {
    let mut r = rng(40);
    let logits = Embeddings::random(4, 1, 6, &mut r).tokens;
    let a = softmax_rows(logits.view());
    let b = softmax_rows((&logits + 37.25).view());
    assert!((&a - &b).iter().all(|d| d.abs() < 1e-9));
}

#[test]
fn joint_key_value_permutation_keeps_output() {
    let c = cfg(8, 2, ValueSource::RgbFeatures);
    let emb = Embeddings::random(3, 5, 8, &mut rng(41));
    let p = AttentionParams::random(&c, &mut rng(42));
    let perm = [3usize, 0, 4, 1, 2];
    let mut shuffled = emb.clone();
    for (dst, &src) in perm.iter().enumerate() {
        shuffled
            .rgb_features
            .row_mut(dst)
            .assign(&emb.rgb_features.row(src));
        shuffled
            .rgb_structure
            .row_mut(dst)
            .assign(&emb.rgb_structure.row(src));
    }
    let a = cmfa_weights(&emb, &p, &c, 1).unwrap();
    let b = cmfa_weights(&shuffled, &p, &c, 1).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        for r in 0..3 {
            assert!((a[[r, src]] - b[[r, dst]]).abs() < 1e-15);
        }
    }
    let ya = cmfa_forward(&emb, &p, &c).unwrap();
    let yb = cmfa_forward(&shuffled, &p, &c).unwrap();
    assert!((&ya - &yb).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn weights_ignore_value_source() {
    let emb = Embeddings::random(4, 4, 8, &mut rng(43));
    let a_cfg = cfg(8, 2, ValueSource::InputEmbedding);
    let b_cfg = cfg(8, 2, ValueSource::RgbFeatures);
    let p = AttentionParams::random(&a_cfg, &mut rng(44));
    for h in 0..2 {
        assert_eq!(
            cmfa_weights(&emb, &p, &a_cfg, h).unwrap(),
            cmfa_weights(&emb, &p, &b_cfg, h).unwrap()
        );
    }
}

#[test]
fn shape_and_numeric_errors() {
    assert!(AttentionConfig::new(10, 4, ValueSource::InputEmbedding).is_err());
    let c = cfg(8, 2, ValueSource::InputEmbedding);
    let emb = Embeddings::random(3, 4, 8, &mut rng(45));
    let p = AttentionParams::random(&c, &mut rng(46));
    // input-embedding values need as many patches as tokens
    assert!(matches!(cmfa_forward(&emb, &p, &c), Err(Error::Shape(_))));
    let mut bad = Embeddings::random(3, 3, 8, &mut rng(47));
    bad.rgb_structure[[0, 0]] = f64::NAN;
    assert!(matches!(
        cmfa_weights(&bad, &p, &c, 0),
        Err(Error::Numeric(_))
    ));
    let short = Embeddings::random(3, 3, 6, &mut rng(48));
    assert!(matches!(
        cmfa_weights(&short, &p, &c, 0),
        Err(Error::Shape(_))
    ));
    assert!(cmfa_weights(&Embeddings::random(3, 3, 8, &mut rng(49)), &p, &c, 2).is_err());
}

#[test]
fn embeddings_tensor_round_trip() {
    let emb = Embeddings::random(3, 4, 8, &mut rng(50));
    let t = emb.to_tensor();
    assert_eq!(t.shape(), &[2 * 3 + 4 * 4, 8]);
    let back = Embeddings::from_tensor(&t, 3).unwrap();
    assert_eq!(back.patches_len(), 4);
    assert!((&back.event_structure - &emb.event_structure)
        .iter()
        .all(|d| d.abs() < 1e-6));
    assert!(Embeddings::from_tensor(&t, 4).is_err());
}

#[test]
fn output_projection_gradient_is_exact() {
    for seed in 0..3 {
        let r = grad_check(
            GradTarget::OutputProjection,
            &GradCheckSpec::default(),
            seed,
        )
        .unwrap();
        assert_eq!(r.checked, 64);
        assert!(r.max_relative_error < 1e-9, "{r:?}");
    }
}

#[test]
fn block_and_layer_gradients_match_finite_differences() {
    for target in [
        GradTarget::CmfaForward,
        GradTarget::CmfaBlock,
        GradTarget::LayerForward,
    ] {
        for vs in [ValueSource::RgbFeatures, ValueSource::InputEmbedding] {
            let spec = GradCheckSpec {
                patches: if vs == ValueSource::InputEmbedding {
                    3
                } else {
                    4
                },
                value_source: vs,
                ..GradCheckSpec::default()
            };
            let r = grad_check(target, &spec, 7).unwrap();
            assert!(r.max_relative_error < 1e-4, "{target:?} {vs:?}: {r:?}");
            assert!(
                r.max_strict_relative_error < 1e-4,
                "{target:?} {vs:?}: {r:?}"
            );
        }
    }
}

#[test]
fn softmax_jacobian_closed_form() {
    for seed in 0..5 {
        assert!(softmax_jacobian_check(6, seed) < 1e-8);
    }
    let a = softmax_rows(array![[0.3, -1.0, 2.0]].view())
        .row(0)
        .to_owned();
    let j = softmax_jacobian(&a);
    let d = array![[0.5, -2.0, 1.0]];
    let back = softmax_rows_backward(&a.clone().insert_axis(ndarray::Axis(0)), &d);
    let expect = j.t().dot(&d.row(0));
    for i in 0..3 {
        assert!((back[[0, i]] - expect[i]).abs() < 1e-15);
    }
}
