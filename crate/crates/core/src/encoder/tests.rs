use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::compute::finite_diff_check;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        model_dim: 8,
        inner_dim: 16,
        heads: 2,
        layers_speech: 1,
        layers_text: 1,
        layers_shared: 1,
        layers_char: 1,
        conv_pos_kernel: 3,
        conv_pos_groups: 2,
        rel_bias_buckets: 8,
        rel_bias_max_distance: 16,
        speech_feature_dim: 5,
        phoneme_vocab: 6,
        char_vocab: 4,
        codewords: 3,
        codeword_dim: 4,
        ..ModelConfig::default()
    }
}

fn features(frames: usize, dim: usize, seed: u64) -> Tensor {
    normal(&mut rng(seed), &[frames, dim], 1.0)
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let mut c = ModelConfig::default();
    c.heads = 5;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    c.conv_pos_groups = 5;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    assert!(c.set("bogus", "1").is_err());
    assert!(c.set("dim", "x").is_err());
    c.set("dim", "64").unwrap();
    assert_eq!(c.model_dim, 64);
}

#[test]
fn bucket_zero_offset_and_sign_symmetry() {
    assert_eq!(relative_bucket(5, 5, 32, 128), 0);
    let half = 16;
    let fwd = relative_bucket(3, 4, 32, 128);
    let back = relative_bucket(4, 3, 32, 128);
    assert_ne!(fwd, back);
    assert_eq!(fwd % half, back % half);
}

#[test]
fn bucket_magnitude_is_monotone_exhaustively() {
    for buckets in [2, 3, 8, 32, 64] {
        let half = (buckets / 2).max(1);
        let mut prev = 0;
        for d in 0..=512 {
            let b = bucket_magnitude(d, half, 128);
            assert!(b >= prev, "buckets {buckets} distance {d}");
            assert!(b < half);
            prev = b;
            assert_eq!(relative_bucket(600, 600 - d, buckets, 128), b);
            if d > 0 {
                assert_eq!(relative_bucket(0, d, buckets, 128), half + b);
            }
        }
    }
}

#[test]
fn conv_pos_zero_kernel_is_identity() {
    let cfg = small_config();
    let mut model = Model::new(cfg.clone(), &mut rng(1)).unwrap();
    let w = model.params.get("speech.conv_pos.weight").unwrap().shape().to_vec();
    model.params.insert("speech.conv_pos.weight", Tensor::zeros(&w));
    let mut b = Binder::new(&model.params, false);
    let x0 = b.graph_mut().constant(Tensor::zeros(&[4, cfg.model_dim]));
    let y0 = model.conv_positional_embed(&mut b, "speech", x0).unwrap();
    assert!(b.graph().value(y0).data().iter().all(|&v| v == 0.0));
    let x = features(4, cfg.model_dim, 2);
    let xi = b.graph_mut().constant(x.clone());
    let y = model.conv_positional_embed(&mut b, "speech", xi).unwrap();
    assert_eq!(b.graph().value(y), &x);
}

#[test]
fn conv_pos_single_frame() {
    let cfg = small_config();
    let model = Model::new(cfg.clone(), &mut rng(1)).unwrap();
    let mut b = Binder::new(&model.params, false);
    let x = b.graph_mut().constant(features(1, cfg.model_dim, 3));
    let y = model.conv_positional_embed(&mut b, "speech", x).unwrap();
    assert_eq!(b.graph().value(y).shape(), &[1, cfg.model_dim]);
    assert!(b.graph().value(y).is_finite());
}

/// Direct grouped convolution used as an oracle.
fn direct_conv(x: &Tensor, w: &Tensor, groups: usize) -> Vec<Vec<f64>> {
    let (t, ch) = (x.rows(), x.cols());
    let (per, k) = (w.shape()[1], w.shape()[2]);
    let pad = k as i64 / 2;
    let _ = groups;
    let mut out = vec![vec![0.0; ch]; t];
    for (ti, row) in out.iter_mut().enumerate() {
        for (o, cell) in row.iter_mut().enumerate() {
            let g0 = (o / per) * per;
            for il in 0..per {
                for kk in 0..k {
                    let s = ti as i64 + kk as i64 - pad;
                    if s >= 0 && (s as usize) < t {
                        *cell += w.data()[(o * per + il) * k + kk] * x.get(s as usize, g0 + il);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_oracle_and_shifts() {
    let cfg = small_config();
    let model = Model::new(cfg.clone(), &mut rng(4)).unwrap();
    let w = model.params.get("speech.conv_pos.weight").unwrap().clone();
    let t_len = 9;
    let x = features(t_len, cfg.model_dim, 5);
    // the same content shifted by two frames, zero-padded in front
    let mut shifted = Tensor::zeros(&[t_len, cfg.model_dim]);
    for i in 2..t_len {
        shifted.row_mut(i).copy_from_slice(x.row(i - 2));
    }
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let si = g.constant(shifted.clone());
    let wi = g.constant(w.clone());
    let y = g.conv1d(xi, wi, cfg.conv_pos_groups).unwrap();
    let ys = g.conv1d(si, wi, cfg.conv_pos_groups).unwrap();
    let oracle = direct_conv(&x, &w, cfg.conv_pos_groups);
    for (i, row) in oracle.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((g.value(y).get(i, j) - v).abs() < 1e-12);
        }
    }
    // interior frames (away from both padded edges) shift with the input
    let pad = cfg.conv_pos_kernel / 2;
    for i in (2 + pad)..(t_len - pad) {
        for j in 0..cfg.model_dim {
            assert!((g.value(ys).get(i, j) - g.value(y).get(i - 2, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_layers_gives_projected_input() {
    let mut cfg = small_config();
    cfg.layers_speech = 0;
    cfg.layers_shared = 0;
    cfg.conv_pos = false;
    let model = Model::new(cfg.clone(), &mut rng(6)).unwrap();
    let x = features(5, cfg.speech_feature_dim, 7);
    let hs = model.hidden_states(&EncoderInput::Speech(&x), &Mask::empty(5)).unwrap();
    let w = model.params.get("speech.proj.w").unwrap();
    let expected = crate::compute::matmul_nn(x.data(), w.data(), 5, cfg.speech_feature_dim, cfg.model_dim);
    let out = hs.per_layer.last().unwrap();
    assert_eq!(hs.per_layer.len(), 1);
    for (a, b) in out.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn permutation_equivariance_without_positions() {
    let mut cfg = small_config();
    cfg.conv_pos = false;
    cfg.rel_bias = false;
    let model = Model::new(cfg.clone(), &mut rng(8)).unwrap();
    let x = features(6, cfg.speech_feature_dim, 9);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut px = Tensor::zeros(&[6, cfg.speech_feature_dim]);
    for (i, &p) in perm.iter().enumerate() {
        px.row_mut(i).copy_from_slice(x.row(p));
    }
    let a = model.hidden_states(&EncoderInput::Speech(&x), &Mask::empty(6)).unwrap();
    let b = model.hidden_states(&EncoderInput::Speech(&px), &Mask::empty(6)).unwrap();
    let (ha, hb) = (a.per_layer.last().unwrap(), b.per_layer.last().unwrap());
    for (i, &p) in perm.iter().enumerate() {
        for j in 0..cfg.model_dim {
            assert!((hb.get(i, j) - ha.get(p, j)).abs() < 1e-10);
        }
    }
}

#[test]
fn single_frame_attention_is_one() {
    let cfg = small_config();
    let model = Model::new(cfg.clone(), &mut rng(10)).unwrap();
    let x = features(1, cfg.speech_feature_dim, 11);
    let mut b = Binder::new(&model.params, false);
    let enc = model.encode(&mut b, &EncoderInput::Speech(&x), &Mask::empty(1)).unwrap();
    assert!(!enc.attention.is_empty());
    for &a in &enc.attention {
        assert_eq!(b.graph().value(a).data(), &[1.0]);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = small_config();
    let model = Model::new(cfg.clone(), &mut rng(12)).unwrap();
    let ids = [0, 1, 2, 3, 3, 4, 5, 1];
    let mut b = Binder::new(&model.params, false);
    let enc = model.encode(&mut b, &EncoderInput::Text(&ids), &Mask::empty(8)).unwrap();
    for &a in &enc.attention {
        let p = b.graph().value(a);
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn mask_rows_become_mask_embedding_before_encoder() {
    let cfg = small_config();
    let model = Model::new(cfg.clone(), &mut rng(13)).unwrap();
    let x = features(4, cfg.speech_feature_dim, 14);
    let mask = Mask::from_indices(4, &[1, 2]).unwrap();
    let mut b = Binder::new(&model.params, false);
    let e = model.embed(&mut b, &EncoderInput::Speech(&x), &mask).unwrap();
    let m = model.params.get("mask.speech").unwrap();
    assert_eq!(b.graph().value(e).row(1), m.data());
    assert_eq!(b.graph().value(e).row(2), m.data());
    assert_ne!(b.graph().value(e).row(0), m.data());
}

#[test]
fn char_layer_paths() {
    let cfg = small_config();
    let mut model = Model::new(cfg.clone(), &mut rng(15)).unwrap();
    let ids = [1, 2, 3, 4];
    let mut b = Binder::new(&model.params, false);
    let enc = model.encode(&mut b, &EncoderInput::Text(&ids), &Mask::empty(4)).unwrap();
    let direct = model.char_logits(&mut b, enc.shared_out, false).unwrap();
    let layered = model.char_logits(&mut b, enc.shared_out, true).unwrap();
    // disabled path is exactly the linear head on the shared output
    let h = b.graph().value(enc.shared_out).clone();
    let w = model.params.get("char.head.w").unwrap();
    let expected = crate::compute::matmul_nn(h.data(), w.data(), 4, cfg.model_dim, cfg.char_vocab + 1);
    for (a, e) in b.graph().value(direct).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
    assert!(b.graph().value(direct).max_abs_diff(b.graph().value(layered)) > 1e-6);

    // a zero head gives uniform character posteriors
    let v = cfg.char_vocab + 1;
    model.params.insert("char.head.w", Tensor::zeros(&[cfg.model_dim, v]));
    let mut b = Binder::new(&model.params, false);
    let enc = model.encode(&mut b, &EncoderInput::Text(&ids), &Mask::empty(4)).unwrap();
    let logits = model.char_logits(&mut b, enc.shared_out, true).unwrap();
    let probs = b.graph_mut().softmax(logits).unwrap();
    for p in b.graph().value(probs).data() {
        assert!((p - 1.0 / v as f64).abs() < 1e-12);
    }
}

#[test]
fn char_layer_disabled_by_config() {
    let mut cfg = small_config();
    cfg.layers_char = 0;
    let model = Model::new(cfg.clone(), &mut rng(16)).unwrap();
    assert!(!model.params.contains("char.layers.0.attn.q.w"));
    let mut b = Binder::new(&model.params, false);
    let h = b.graph_mut().constant(features(3, cfg.model_dim, 1));
    let a = model.char_logits(&mut b, h, true).unwrap();
    let c = model.char_logits(&mut b, h, false).unwrap();
    assert_eq!(b.graph().value(a), b.graph().value(c));
}

#[test]
fn encode_errors() {
    let cfg = small_config();
    let model = Model::new(cfg.clone(), &mut rng(17)).unwrap();
    let empty: [usize; 0] = [];
    assert!(matches!(
        model.hidden_states(&EncoderInput::Text(&empty), &Mask::empty(0)),
        Err(ModelError::EmptyInput)
    ));
    let x = features(3, cfg.speech_feature_dim + 1, 1);
    assert!(model.hidden_states(&EncoderInput::Speech(&x), &Mask::empty(3)).is_err());
    assert!(model.hidden_states(&EncoderInput::Text(&[99]), &Mask::empty(1)).is_err());
}

#[test]
fn deterministic_given_seed() {
    let cfg = small_config();
    let a = Model::new(cfg.clone(), &mut rng(18)).unwrap();
    let b = Model::new(cfg.clone(), &mut rng(18)).unwrap();
    assert_eq!(a, b);
    let x = features(7, cfg.speech_feature_dim, 19);
    let ha = a.hidden_states(&EncoderInput::Speech(&x), &Mask::empty(7)).unwrap();
    let hb = b.hidden_states(&EncoderInput::Speech(&x), &Mask::empty(7)).unwrap();
    assert_eq!(ha.per_layer, hb.per_layer);
}

#[test]
fn stack_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        layers_speech: 1,
        layers_shared: 1,
        ..small_config()
    };
    let model = Model::new(cfg.clone(), &mut rng(20)).unwrap();
    let x = features(4, cfg.speech_feature_dim, 21);
    let mut b = Binder::new(&model.params, true);
    let enc = model
        .encode(&mut b, &EncoderInput::Speech(&x), &Mask::from_indices(4, &[2]).unwrap())
        .unwrap();
    let g = b.graph_mut();
    let w = g.constant(normal(&mut rng(22), &[4, cfg.model_dim], 1.0));
    let p = g.mul(enc.shared_out, w).unwrap();
    let loss = g.sum(p).unwrap();
    let mut graph = b.into_graph();
    let report = finite_diff_check(&mut graph, loss, 1e-4, 1e-3).unwrap();
    assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let model = Model::new(small_config(), &mut rng(23)).unwrap();
    let bytes = model.to_bytes();
    let back = Model::from_bytes(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.to_bytes(), bytes);
    assert!(matches!(Model::from_bytes(b"NOTACKPT"), Err(CheckpointError::BadMagic) | Err(CheckpointError::Io(_))));
}
