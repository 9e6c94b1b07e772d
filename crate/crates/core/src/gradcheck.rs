//! Finite-difference gradient suites for the training objectives and a
//! small encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compute::{finite_diff_check, ComputeError, GradCheckReport, Graph, NodeId, Tensor};
use crate::encoder::{Binder, EncoderInput, Model, ModelConfig, ModelError};
use crate::losses::{ce_alignment_loss, ctc_loss, hubert_loss, mlm_loss, LossError};
use crate::masking::Mask;

pub const EPSILON: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape")
        .with_grad()
}

fn check(mut g: Graph, loss: NodeId) -> Result<GradCheckReport, SuiteError> {
    Ok(finite_diff_check(&mut g, loss, EPSILON, TOLERANCE)?)
}

/// Two-block, width-8 encoder used by the encoder suite.
pub fn small_encoder_config() -> ModelConfig {
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

pub fn hubert_suite(seed: u64) -> Result<GradCheckReport, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let h = g.input("h", uniform(&mut rng, 6, 4))?;
    let w = g.input("proj", uniform(&mut rng, 4, 3))?;
    let e = g.input("codewords", uniform(&mut rng, 3, 3))?;
    let mask = Mask::from_indices(6, &[0, 2, 3, 5]).expect("in range");
    let out = hubert_loss(&mut g, h, w, e, 0.1, &[0, 1, 2, 1, 0, 2], &mask)?;
    check(g, out.term.node)
}

pub fn mlm_suite(seed: u64) -> Result<GradCheckReport, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let l = g.input("logits", uniform(&mut rng, 6, 5))?;
    let mask = Mask::from_indices(6, &[1, 2, 4]).expect("in range");
    let t = mlm_loss(&mut g, l, &[3, 1, 2, 0, 4, 1], &mask)?;
    check(g, t.node)
}

pub fn ctc_suite(seed: u64) -> Result<GradCheckReport, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let l = g.input("logits", uniform(&mut rng, 7, 4))?;
    let t = ctc_loss(&mut g, l, &[1, 3, 3, 2])?;
    check(g, t.node)
}

pub fn ce_alignment_suite(seed: u64) -> Result<GradCheckReport, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let s = g.input("speech", uniform(&mut rng, 5, 4))?;
    let t = g.input("text", uniform(&mut rng, 5, 4))?;
    let out = ce_alignment_loss(&mut g, s, t, &[0, 1, 4])?;
    check(g, out.node)
}

/// Every encoder parameter against a fixed random projection of the
/// shared output.
pub fn encoder_suite(seed: u64) -> Result<GradCheckReport, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_encoder_config();
    let model = Model::new(cfg.clone(), &mut rng)?;
    let x = Tensor::matrix(5, cfg.speech_feature_dim, (0..5 * cfg.speech_feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape");
    let mut b = Binder::new(&model.params, true);
    let mask = Mask::from_indices(5, &[2, 3]).expect("in range");
    let enc = model.encode(&mut b, &EncoderInput::Speech(&x), &mask)?;
    let probe = Tensor::matrix(5, cfg.model_dim, (0..5 * cfg.model_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape");
    let g = b.graph_mut();
    let w = g.constant(probe);
    let p = g.mul(enc.shared_out, w)?;
    let loss = g.sum(p)?;
    check(b.into_graph(), loss)
}

/// All suites, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>, SuiteError> {
    Ok(vec![
        ("hubert", hubert_suite(seed)?),
        ("mlm", mlm_suite(seed + 1)?),
        ("ctc", ctc_suite(seed + 2)?),
        ("ce_alignment", ce_alignment_suite(seed + 3)?),
        ("encoder", encoder_suite(seed + 4)?),
    ])
}
