//! End-to-end runs on a synthetic corpus: labels, durations, pre-training,
//! fine-tuning and evaluation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compute::Tensor;
use crate::diagnostics::{alignment_score, AlignedPair, DiagError, Tap};
use crate::encoder::{Model, ModelError};
use crate::labeler::{fit_and_label, LabelError, LabelSet};
use crate::losses::LossBundle;
use crate::paired::Alignment;
use crate::synth::{make_synthetic, SynthCorpus, SynthError, SynthUtterance};
use crate::textpipe::{estimate_duration_model, CharVocab, DurationModel, TextError};
use crate::trainer::{
    evaluate_pretrain, greedy_wer, prepare_text, Config, Finetuner, LabeledUtt, LogLine, PretrainData, SpeechUtt, TrainError, Trainer,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diag(#[from] DiagError),
}

/// Independent generator streams derived from one seed.
pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

pub const STREAM_LABELS: u64 = 1;
pub const STREAM_MODEL: u64 = 2;
pub const STREAM_TRAIN: u64 = 3;
pub const STREAM_FINETUNE: u64 = 4;
pub const STREAM_EVAL: u64 = 5;

/// A model sized for the given phoneme inventory and label classes.
pub fn new_model(config: &Config, phonemes: usize, classes: usize, seed: u64) -> Result<Model, PipelineError> {
    let mut mc = config.model.clone();
    if phonemes > mc.phoneme_vocab {
        return Err(TrainError::Config(format!("{phonemes} phonemes exceed model.phoneme_vocab = {}", mc.phoneme_vocab)).into());
    }
    mc.codewords = classes;
    mc.char_vocab = CharVocab::default().len();
    Ok(Model::new(mc, &mut stream(seed, STREAM_MODEL))?)
}

/// Corpus plus everything derived from it before training.
pub struct Prepared {
    pub corpus: SynthCorpus,
    pub labels: LabelSet,
    pub alignments: BTreeMap<String, Alignment>,
    pub durations: DurationModel,
    pub pretrain: PretrainData,
    pub train: Vec<LabeledUtt>,
    pub heldout: Vec<LabeledUtt>,
}

impl Prepared {
    pub fn aligned_pairs(&self) -> Vec<(Tensor, Alignment)> {
        self.corpus
            .train
            .iter()
            .map(|u| (u.features.clone(), self.alignments[&u.id].clone()))
            .collect()
    }
}

fn labeled(utts: &[SynthUtterance]) -> Result<Vec<LabeledUtt>, TrainError> {
    utts.iter().map(|u| LabeledUtt::new(&u.id, u.features.clone(), &u.transcript)).collect()
}

/// Synthesizes the corpus, clusters its features into pseudo-labels and
/// estimates phoneme durations from the reference alignments.
pub fn prepare(config: &Config, seed: u64) -> Result<Prepared, PipelineError> {
    let corpus = make_synthetic(&config.synth.spec(seed))?;
    let features: BTreeMap<String, Tensor> = corpus.train.iter().map(|u| (u.id.clone(), u.features.clone())).collect();
    let (_, labels) = fit_and_label(&features, config.labels.classes, config.labels.iterations, &mut stream(seed, STREAM_LABELS))?;
    let alignments: Vec<Vec<usize>> = corpus.train.iter().map(|u| u.alignment.clone()).collect();
    let durations = estimate_duration_model(&alignments, corpus.lexicon.inventory().len(), config.text.duration_cutoff)?;
    let reference = corpus.alignments();
    let speech = corpus
        .train
        .iter()
        .map(|u| SpeechUtt {
            id: u.id.clone(),
            features: u.features.clone(),
            labels: labels[&u.id].clone(),
            alignment: Some(reference[&u.id].clone()),
            transcript: Some(u.transcript.clone()),
        })
        .collect();
    let (text, _) = prepare_text(&corpus.text, &corpus.lexicon, config);
    let pretrain = PretrainData::new(speech, text, durations.clone(), config.paired.hours)?;
    Ok(Prepared {
        train: labeled(&corpus.train)?,
        heldout: labeled(&corpus.heldout)?,
        corpus,
        labels,
        alignments: reference,
        durations,
        pretrain,
    })
}

/// Outcome of pre-training on a prepared corpus.
pub struct PretrainRun {
    pub initial: Model,
    pub model: Model,
    pub before: LossBundle,
    pub after: LossBundle,
    pub log: Vec<LogLine>,
}

impl PretrainRun {
    /// Relative drop of the combined objective.
    pub fn reduction(&self) -> f64 {
        1.0 - self.after.total() / self.before.total()
    }
}

/// Number of text sentences used when evaluating the text objectives.
pub const EVAL_TEXT_ITEMS: usize = 20;

pub fn pretrain(config: &Config, data: &Prepared, seed: u64) -> Result<PretrainRun, PipelineError> {
    let initial = new_model(config, data.corpus.lexicon.inventory().len(), config.labels.classes, seed)?;
    let eval_seed = seed ^ STREAM_EVAL;
    let before = evaluate_pretrain(&initial, config, &data.pretrain, EVAL_TEXT_ITEMS, eval_seed)?;
    let mut trainer = Trainer::new(config.clone(), initial.clone(), seed ^ STREAM_TRAIN)?;
    trainer.pretrain(&data.pretrain, |_| {})?;
    let after = evaluate_pretrain(&trainer.model, config, &data.pretrain, EVAL_TEXT_ITEMS, eval_seed)?;
    Ok(PretrainRun {
        initial,
        model: trainer.model,
        before,
        after,
        log: trainer.log,
    })
}

pub struct FinetuneRun {
    pub model: Model,
    pub train_wer: f64,
    pub heldout_wer: f64,
    pub log: Vec<LogLine>,
}

pub fn finetune(config: &Config, model: Model, data: &Prepared, seed: u64) -> Result<FinetuneRun, PipelineError> {
    let mut ft = Finetuner::new(config.clone(), model, seed ^ STREAM_FINETUNE)?;
    ft.finetune(&data.train, |_| {})?;
    let layer = config.finetune.char_layer;
    Ok(FinetuneRun {
        train_wer: greedy_wer(&ft.model, &data.train, layer)?,
        heldout_wer: greedy_wer(&ft.model, &data.heldout, layer)?,
        model: ft.model,
        log: ft.log,
    })
}

/// Diagonal dominance of the aggregated speech-text map at `tap`.
pub fn alignment(config: &Config, model: &Model, data: &Prepared, tap: Tap) -> Result<f64, PipelineError> {
    let owned = data.aligned_pairs();
    let pairs: Vec<AlignedPair> = owned
        .iter()
        .map(|(f, a)| AlignedPair {
            features: f,
            alignment: a,
        })
        .collect();
    Ok(alignment_score(model, &pairs, tap, config.diag.size, config.diag.band)?)
}
