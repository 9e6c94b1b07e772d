//! Pre-training and fine-tuning loops.

pub mod config;
pub mod optim;
pub mod schedule;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compute::{ComputeError, Graph, NodeId, Tensor};
use crate::decode::{corpus_wer, greedy_decode};
use crate::encoder::{Binder, EncoderInput, Modality, Model, ModelError};
use crate::losses::{self, LossBundle, LossError, LossTerm};
use crate::masking::{sample_mask, Mask};
use crate::paired::{frame_phonemes, plan_swap, swap_nodes, Alignment, PairedError};
use crate::textpipe::{insert_sil, phonemize, upsample, CharVocab, DurationModel, Lexicon, PhonemizedText, TextError};

pub use config::{AlignMode, Config, LayerChoice};
pub use optim::{Adam, AdamConfig};
pub use schedule::{lr_linear, lr_tristage, schedule_tasks, select_paired, Batch, Task, TaskSources, TriStage};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss at step {step}: {dump}")]
    NonFinite { step: usize, dump: String },
    #[error("alignment mode `{0}` is not supported")]
    Unsupported(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Paired(#[from] PairedError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// A speech utterance with pseudo-labels, optionally aligned and transcribed.
#[derive(Clone, Debug)]
pub struct SpeechUtt {
    pub id: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub alignment: Option<Alignment>,
    pub transcript: Option<String>,
}

/// A text-only sentence ready for up-sampling.
#[derive(Clone, Debug)]
pub struct TextItem {
    pub phonemes: PhonemizedText,
    pub chars: Vec<usize>,
}

/// Everything pre-training draws from.
#[derive(Clone, Debug)]
pub struct PretrainData {
    pub speech: Vec<SpeechUtt>,
    pub text: Vec<TextItem>,
    /// Indices into `speech` of utterances used as paired data.
    pub paired: Vec<usize>,
    pub durations: DurationModel,
}

/// Phonemizes and character-encodes every sentence; sentences failing the
/// OOV policy or the character vocabulary are dropped.
pub fn prepare_text(lines: &[String], lexicon: &Lexicon, config: &Config) -> (Vec<TextItem>, usize) {
    let vocab = CharVocab::default();
    let mut dropped = 0;
    let items = lines
        .iter()
        .filter_map(|line| {
            let item = phonemize(line, lexicon, config.text.oov)
                .ok()
                .zip(vocab.encode(line).ok())
                .map(|(phonemes, chars)| TextItem { phonemes, chars });
            if item.is_none() {
                dropped += 1;
            }
            item
        })
        .collect();
    (items, dropped)
}

impl PretrainData {
    pub fn new(speech: Vec<SpeechUtt>, text: Vec<TextItem>, durations: DurationModel, paired_hours: f64) -> Result<Self, TrainError> {
        for u in &speech {
            if u.labels.len() != u.features.rows() {
                return Err(TrainError::Data(format!(
                    "{}: {} labels for {} frames",
                    u.id,
                    u.labels.len(),
                    u.features.rows()
                )));
            }
            if let Some(a) = &u.alignment {
                if a.frames() != u.features.rows() {
                    return Err(TrainError::Data(format!("{}: alignment covers {} of {} frames", u.id, a.frames(), u.features.rows())));
                }
            }
        }
        let aligned: Vec<usize> = (0..speech.len()).filter(|&i| speech[i].alignment.is_some()).collect();
        let frames: Vec<usize> = aligned.iter().map(|&i| speech[i].features.rows()).collect();
        let paired = select_paired(&frames, paired_hours).into_iter().map(|k| aligned[k]).collect();
        Ok(Self {
            speech,
            text,
            paired,
            durations,
        })
    }

    pub fn sources(&self, config: &Config) -> TaskSources {
        let speech_frames: Vec<usize> = self.speech.iter().map(|u| u.features.rows()).collect();
        let mean = speech_frames.iter().sum::<usize>() as f64 / speech_frames.len().max(1) as f64;
        let per_batch = (config.train.batch_frames as f64 / mean.max(1.0)).round().max(1.0) as usize;
        TaskSources {
            paired_frames: self.paired.iter().map(|&i| speech_frames[i]).collect(),
            speech_frames,
            text_count: self.text.len(),
            text_batch: per_batch,
            batch_frames: config.train.batch_frames,
            text_enabled: config.train.mlm || config.train.ctc,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub lr: f64,
}

impl LogLine {
    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.step, self.task, self.loss, self.lr)
    }
}

pub fn format_log(lines: &[LogLine]) -> String {
    lines.iter().map(|l| l.to_tsv() + "\n").collect()
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: usize,
    pub task: Task,
    pub bundle: LossBundle,
    pub lr: f64,
    pub grad_norm: f64,
    /// False when no item contributed a loss and the update was skipped.
    pub updated: bool,
}

impl StepReport {
    pub fn log_line(&self) -> LogLine {
        let mut parts = Vec::new();
        if self.bundle.hubert.is_some() {
            parts.push("hubert");
        }
        if self.bundle.mlm.is_some() {
            parts.push("mlm");
        }
        if self.bundle.ctc.is_some() {
            parts.push("ctc");
        }
        if self.bundle.alignment.is_some() {
            parts.push("ce");
        }
        LogLine {
            step: self.step,
            task: format!("{}/{}", self.task.as_str(), parts.join("+")),
            loss: self.bundle.total(),
            lr: self.lr,
        }
    }
}

/// Per-component sums used to build a [`LossBundle`].
#[derive(Default)]
struct Accum {
    terms: Vec<(NodeId, f64)>,
    hubert: Vec<(NodeId, usize)>,
    mlm: Vec<(NodeId, usize)>,
    ctc: Vec<(NodeId, usize)>,
    ce: Vec<(NodeId, usize)>,
}

impl Accum {
    fn add(&mut self, slot: Slot, term: LossTerm, weight: f64) {
        if term.count == 0 {
            return;
        }
        let list = match slot {
            Slot::Hubert => &mut self.hubert,
            Slot::Mlm => &mut self.mlm,
            Slot::Ctc => &mut self.ctc,
            Slot::Ce => &mut self.ce,
        };
        list.push((term.node, term.count));
        self.terms.push((term.node, weight));
    }

    fn bundle(&self, g: &Graph) -> LossBundle {
        let mean = |xs: &[(NodeId, usize)]| {
            (!xs.is_empty()).then(|| xs.iter().map(|(n, _)| g.value(*n).data()[0]).sum::<f64>() / xs.len() as f64)
        };
        let count = |xs: &[(NodeId, usize)]| xs.iter().map(|x| x.1).sum();
        LossBundle {
            hubert: mean(&self.hubert),
            mlm: mean(&self.mlm),
            ctc: mean(&self.ctc),
            alignment: mean(&self.ce),
            hubert_count: count(&self.hubert),
            mlm_count: count(&self.mlm),
            ctc_count: count(&self.ctc),
            alignment_count: count(&self.ce),
        }
    }

    /// Weighted sum of all terms divided by the number of items.
    fn loss(&self, g: &mut Graph, items: usize) -> Result<Option<NodeId>, ComputeError> {
        let mut total: Option<NodeId> = None;
        for &(node, w) in &self.terms {
            let t = if w == 1.0 { node } else { g.scale(node, w)? };
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t)?,
            });
        }
        total.map(|t| g.scale(t, 1.0 / items as f64)).transpose()
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Hubert,
    Mlm,
    Ctc,
    Ce,
}

/// Model, optimizer state and step counter for pre-training.
pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    pub log: Vec<LogLine>,
    rng: ChaCha8Rng,
}

fn adam_config(config: &Config) -> AdamConfig {
    AdamConfig {
        beta1: config.train.adam_beta1,
        beta2: config.train.adam_beta2,
        eps: config.train.adam_eps,
        weight_decay: config.train.weight_decay,
        clip_norm: config.train.clip_norm,
    }
}

impl Trainer {
    pub fn new(config: Config, model: Model, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        if config.paired.align == AlignMode::CrossAttention {
            return Err(TrainError::Unsupported(AlignMode::CrossAttention.to_string()));
        }
        Ok(Self {
            adam: Adam::new(adam_config(&config)),
            config,
            model,
            step: 0,
            log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn lr(&self, step: usize) -> f64 {
        let t = &self.config.train;
        lr_linear(step, t.warmup_steps, t.steps, t.peak_lr)
    }

    fn ctc_active(&self, step: usize) -> bool {
        self.config.train.ctc && step >= self.config.train.ctc_start_step
    }

    /// Forward pass of one batch; returns the graph, loss components and the
    /// mean loss node (if anything contributed).
    fn batch_graph(
        &self,
        binder: &mut Binder,
        batch: &Batch,
        data: &PretrainData,
        ctc_active: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Accum, TrainError> {
        let cfg = &self.config;
        let model = &self.model;
        let mut acc = Accum::default();
        let speech_spec = cfg.speech_mask()?;
        for &i in &batch.items {
            match batch.task {
                Task::Speech => {
                    let u = &data.speech[i];
                    let mask = sample_mask(u.features.rows(), &speech_spec, rng);
                    let term = speech_hubert(model, binder, &u.features, &u.labels, &mask)?;
                    acc.add(Slot::Hubert, term, 1.0);
                }
                Task::Text => {
                    let item = &data.text[i];
                    let with_sil = insert_sil(&item.phonemes, cfg.text.sil_rate, rng)?;
                    let up = upsample(&with_sil, &data.durations, rng);
                    let mask = sample_mask(up.frames.len(), &cfg.text_mask()?, rng);
                    let x = model.embed(binder, &EncoderInput::Text(&up.frames), &mask)?;
                    let (_, private) = model.private_encoder(binder, x, Modality::Text)?;
                    let shared = model.shared_encoder(binder, private.output)?;
                    if cfg.train.mlm {
                        let logits = model.mlm_logits(binder, shared.output)?;
                        let term = losses::mlm_loss(binder.graph_mut(), logits, &up.frames, &mask)?;
                        acc.add(Slot::Mlm, term, cfg.train.mlm_weight);
                    }
                    if ctc_active && losses::ctc_feasible(&item.chars, up.frames.len()) {
                        let term = char_ctc(model, binder, shared.output, &item.chars, cfg.train.char_layer)?;
                        acc.add(Slot::Ctc, term, cfg.train.ctc_weight);
                    }
                }
                Task::Paired => {
                    let u = &data.speech[i];
                    let alignment = u
                        .alignment
                        .as_ref()
                        .ok_or_else(|| TrainError::Data(format!("{} has no alignment", u.id)))?;
                    let mask = sample_mask(u.features.rows(), &speech_spec, rng);
                    let xs = model.embed(binder, &EncoderInput::Speech(&u.features), &mask)?;
                    let (_, sp) = model.private_encoder(binder, xs, Modality::Speech)?;
                    let phones = frame_phonemes(alignment);
                    let empty = Mask::empty(phones.len());
                    let xt = model.embed(binder, &EncoderInput::Text(&phones), &empty)?;
                    let (_, tp) = model.private_encoder(binder, xt, Modality::Text)?;
                    let shared_in = match cfg.paired.align {
                        AlignMode::Swap => {
                            let plan = plan_swap(alignment, &mask, cfg.paired.swap_prob, rng)?;
                            debug_assert!(plan.from_text.iter().zip(mask.flags()).all(|(s, m)| !(*s && *m)));
                            swap_nodes(binder.graph_mut(), sp.output, tp.output, &plan)?
                        }
                        AlignMode::CeLoss => {
                            let term = losses::ce_alignment_loss(binder.graph_mut(), sp.output, tp.output, &mask.unmasked_indices())?;
                            acc.add(Slot::Ce, term, 1.0);
                            sp.output
                        }
                        AlignMode::CrossAttention => return Err(TrainError::Unsupported(AlignMode::CrossAttention.to_string())),
                    };
                    let shared = model.shared_encoder(binder, shared_in)?;
                    let term = hubert_on(model, binder, shared.output, &u.labels, &mask)?;
                    acc.add(Slot::Hubert, term, 1.0);
                }
            }
        }
        Ok(acc)
    }

    /// One optimizer update on one batch.
    pub fn pretrain_step(&mut self, batch: &Batch, data: &PretrainData) -> Result<StepReport, TrainError> {
        let step = self.step;
        let lr = self.lr(step);
        let mut rng = self.rng.clone();
        let mut binder = Binder::new(&self.model.params, true);
        let acc = self.batch_graph(&mut binder, batch, data, self.ctc_active(step), &mut rng)?;
        self.rng = rng;
        let bundle = acc.bundle(binder.graph());
        if !bundle.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                dump: format!("task {} items {:?} losses {:?}", batch.task.as_str(), batch.items, bundle),
            });
        }
        let loss = acc.loss(binder.graph_mut(), batch.items.len())?;
        let (grad_norm, updated) = match loss {
            Some(node) => {
                let grads = binder.graph().backward(node)?.named(binder.graph());
                drop(binder);
                (self.adam.step(&mut self.model.params, &grads, lr), true)
            }
            None => (0.0, false),
        };
        self.step += 1;
        let report = StepReport {
            step,
            task: batch.task,
            bundle,
            lr,
            grad_norm,
            updated,
        };
        self.log.push(report.log_line());
        Ok(report)
    }

    /// Runs until `config.train.steps` updates, epoch after epoch.
    pub fn pretrain(&mut self, data: &PretrainData, mut on_step: impl FnMut(&StepReport)) -> Result<(), TrainError> {
        let sources = data.sources(&self.config);
        let seed = self.config.train.seed;
        let mut epoch = 0u64;
        while self.step < self.config.train.steps {
            for batch in schedule_tasks(&sources, epoch, seed)? {
                if self.step >= self.config.train.steps {
                    break;
                }
                let report = self.pretrain_step(&batch, data)?;
                on_step(&report);
            }
            epoch += 1;
        }
        Ok(())
    }
}

fn hubert_on(model: &Model, b: &mut Binder, h: NodeId, labels: &[usize], mask: &Mask) -> Result<LossTerm, TrainError> {
    let proj = b.param("hubert.proj")?;
    let codewords = b.param("hubert.codewords")?;
    let out = losses::hubert_loss(b.graph_mut(), h, proj, codewords, model.config.temperature, labels, mask)?;
    Ok(out.term)
}

fn speech_hubert(model: &Model, b: &mut Binder, features: &Tensor, labels: &[usize], mask: &Mask) -> Result<LossTerm, TrainError> {
    let enc = model.encode(b, &EncoderInput::Speech(features), mask)?;
    hubert_on(model, b, enc.shared_out, labels, mask)
}

/// CTC over characters, normalized by target length.
fn char_ctc(model: &Model, b: &mut Binder, shared: NodeId, chars: &[usize], use_char_layer: bool) -> Result<LossTerm, TrainError> {
    let logits = model.char_logits(b, shared, use_char_layer)?;
    let term = losses::ctc_loss(b.graph_mut(), logits, chars)?;
    let node = b.graph_mut().scale(term.node, 1.0 / chars.len().max(1) as f64)?;
    Ok(LossTerm { node, count: term.count })
}

/// Objective values on fixed masks, without updating anything. CTC is always
/// included so values before and after training are comparable.
pub fn evaluate_pretrain(model: &Model, config: &Config, data: &PretrainData, text_items: usize, seed: u64) -> Result<LossBundle, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speech_spec = config.speech_mask()?;
    let text_spec = config.text_mask()?;
    let mut hubert = Vec::new();
    for u in &data.speech {
        let mask = sample_mask(u.features.rows(), &speech_spec, &mut rng);
        let mut b = Binder::new(&model.params, false);
        let term = speech_hubert(model, &mut b, &u.features, &u.labels, &mask)?;
        if term.count > 0 {
            hubert.push(b.graph().value(term.node).data()[0]);
        }
    }
    let (mut mlm, mut ctc) = (Vec::new(), Vec::new());
    for item in data.text.iter().take(text_items) {
        let with_sil = insert_sil(&item.phonemes, config.text.sil_rate, &mut rng)?;
        let up = upsample(&with_sil, &data.durations, &mut rng);
        let mask = sample_mask(up.frames.len(), &text_spec, &mut rng);
        let mut b = Binder::new(&model.params, false);
        let x = model.embed(&mut b, &EncoderInput::Text(&up.frames), &mask)?;
        let (_, private) = model.private_encoder(&mut b, x, Modality::Text)?;
        let shared = model.shared_encoder(&mut b, private.output)?;
        if config.train.mlm {
            let logits = model.mlm_logits(&mut b, shared.output)?;
            let term = losses::mlm_loss(b.graph_mut(), logits, &up.frames, &mask)?;
            if term.count > 0 {
                mlm.push(b.graph().value(term.node).data()[0]);
            }
        }
        if config.train.ctc && losses::ctc_feasible(&item.chars, up.frames.len()) {
            let term = char_ctc(model, &mut b, shared.output, &item.chars, config.train.char_layer)?;
            ctc.push(b.graph().value(term.node).data()[0]);
        }
    }
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    Ok(LossBundle {
        hubert: mean(&hubert),
        mlm: mean(&mlm),
        ctc: mean(&ctc),
        alignment: None,
        hubert_count: hubert.len(),
        mlm_count: mlm.len(),
        ctc_count: ctc.len(),
        alignment_count: 0,
    })
}

/// Labeled utterance for fine-tuning.
#[derive(Clone, Debug)]
pub struct LabeledUtt {
    pub id: String,
    pub features: Tensor,
    pub transcript: String,
    pub chars: Vec<usize>,
}

impl LabeledUtt {
    pub fn new(id: &str, features: Tensor, transcript: &str) -> Result<Self, TrainError> {
        let chars = CharVocab::default().encode(transcript)?;
        Ok(Self {
            id: id.to_string(),
            features,
            transcript: transcript.to_string(),
            chars,
        })
    }
}

/// Supervised CTC fine-tuning on the speech path.
pub struct Finetuner {
    pub config: Config,
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    pub log: Vec<LogLine>,
    rng: ChaCha8Rng,
}

impl Finetuner {
    /// Re-initializes the character head unless `finetune.char_head` is set.
    pub fn new(config: Config, mut model: Model, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if !config.finetune.char_head {
            model.reset_char_head(&mut rng);
        }
        Ok(Self {
            adam: Adam::new(adam_config(&config)),
            config,
            model,
            step: 0,
            log: Vec::new(),
            rng,
        })
    }

    pub fn lr(&self, step: usize) -> f64 {
        let f = &self.config.finetune;
        let stages = TriStage {
            warm: f.warm,
            hold: f.hold,
            decay: f.decay,
        };
        lr_tristage(step, f.steps, stages, f.peak_lr, f.floor_ratio)
    }

    pub fn finetune_step(&mut self, items: &[&LabeledUtt]) -> Result<StepReport, TrainError> {
        let step = self.step;
        let lr = self.lr(step);
        let mut binder = Binder::new(&self.model.params, true);
        let mut acc = Accum::default();
        for u in items {
            if !losses::ctc_feasible(&u.chars, u.features.rows()) {
                continue;
            }
            let enc = self
                .model
                .encode(&mut binder, &EncoderInput::Speech(&u.features), &Mask::empty(u.features.rows()))?;
            let term = char_ctc(&self.model, &mut binder, enc.shared_out, &u.chars, self.config.finetune.char_layer)?;
            acc.add(Slot::Ctc, term, 1.0);
        }
        let bundle = acc.bundle(binder.graph());
        if !bundle.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                dump: format!("finetune items {:?} losses {:?}", items.iter().map(|u| &u.id).collect::<Vec<_>>(), bundle),
            });
        }
        let loss = acc.loss(binder.graph_mut(), items.len())?;
        let (grad_norm, updated) = match loss {
            Some(node) => {
                let grads = binder.graph().backward(node)?.named(binder.graph());
                drop(binder);
                (self.adam.step(&mut self.model.params, &grads, lr), true)
            }
            None => (0.0, false),
        };
        self.step += 1;
        let report = StepReport {
            step,
            task: Task::Speech,
            bundle,
            lr,
            grad_norm,
            updated,
        };
        let mut line = report.log_line();
        line.task = "finetune/ctc".into();
        self.log.push(line);
        Ok(report)
    }

    pub fn finetune(&mut self, data: &[LabeledUtt], mut on_step: impl FnMut(&StepReport)) -> Result<(), TrainError> {
        if data.is_empty() {
            return Err(TrainError::Data("no labeled utterances".into()));
        }
        let frames: Vec<usize> = data.iter().map(|u| u.features.rows()).collect();
        let mut epoch = 0u64;
        while self.step < self.config.finetune.steps {
            use rand::seq::SliceRandom;
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut self.rng);
            for batch in schedule::pack(&order, &frames, self.config.finetune.batch_frames) {
                if self.step >= self.config.finetune.steps {
                    break;
                }
                let items: Vec<&LabeledUtt> = batch.iter().map(|&i| &data[i]).collect();
                let report = self.finetune_step(&items)?;
                on_step(&report);
            }
            epoch += 1;
        }
        let _ = epoch;
        Ok(())
    }
}

/// Per-frame character log-probabilities `[T, char_vocab + 1]` for speech.
pub fn char_log_probs(model: &Model, features: &Tensor, use_char_layer: bool) -> Result<Tensor, TrainError> {
    let mut b = Binder::new(&model.params, false);
    let enc = model.encode(&mut b, &EncoderInput::Speech(features), &Mask::empty(features.rows()))?;
    let logits = model.char_logits(&mut b, enc.shared_out, use_char_layer)?;
    let lp = b.graph_mut().log_softmax(logits)?;
    Ok(b.graph().value(lp).clone())
}

/// Greedy transcript of one utterance.
pub fn transcribe(model: &Model, features: &Tensor, use_char_layer: bool) -> Result<String, TrainError> {
    let lp = char_log_probs(model, features, use_char_layer)?;
    Ok(CharVocab::default().decode(&greedy_decode(&lp)))
}

/// Greedy transcripts of `data`, in order.
pub fn transcribe_all(model: &Model, data: &[LabeledUtt], use_char_layer: bool) -> Result<Vec<String>, TrainError> {
    data.iter().map(|u| transcribe(model, &u.features, use_char_layer)).collect()
}

/// Corpus word error rate of greedy transcripts over `data`.
pub fn greedy_wer(model: &Model, data: &[LabeledUtt], use_char_layer: bool) -> Result<f64, TrainError> {
    let hyps = transcribe_all(model, data, use_char_layer)?;
    corpus_wer(hyps.iter().map(String::as_str).zip(data.iter().map(|u| u.transcript.as_str())))
        .map_err(|e| TrainError::Data(e.to_string()))
}

/// Renders a bundle as `name=value` pairs for diagnostics.
pub fn describe(bundle: &LossBundle) -> String {
    let mut out = String::new();
    for (name, v) in [("hubert", bundle.hubert), ("mlm", bundle.mlm), ("ctc", bundle.ctc), ("ce", bundle.alignment)] {
        if let Some(v) = v {
            let _ = write!(out, "{name}={v:.4} ");
        }
    }
    out.trim_end().to_string()
}

/// Groups labels by utterance id.
pub fn by_id<T: Clone>(items: &[(String, T)]) -> BTreeMap<String, T> {
    items.iter().cloned().collect()
}
