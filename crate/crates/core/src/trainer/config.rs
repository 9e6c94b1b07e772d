//! Namespaced `key = value` configuration.
//!
//! Lines are `section.key = value`; `#` starts a comment. Unknown keys are
//! errors. Later assignments win, so command-line overrides are applied by
//! calling [`Config::set`] after loading the file.

use std::fmt;
use std::str::FromStr;

use crate::encoder::ModelConfig;
use crate::masking::MaskSpec;
use crate::synth::SynthSpec;
use crate::textpipe::OovPolicy;

use super::TrainError;

/// How paired representations meet before the shared encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AlignMode {
    #[default]
    Swap,
    CeLoss,
    /// Recognized but not implemented.
    CrossAttention,
}

impl FromStr for AlignMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "swap" => Ok(AlignMode::Swap),
            "ce_loss" => Ok(AlignMode::CeLoss),
            "cross_attention" => Ok(AlignMode::CrossAttention),
            other => Err(format!("unknown alignment mode `{other}` (swap | ce_loss | cross_attention)")),
        }
    }
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignMode::Swap => "swap",
            AlignMode::CeLoss => "ce_loss",
            AlignMode::CrossAttention => "cross_attention",
        })
    }
}

/// Hidden layer used for relabeling; `auto` is the last speech-encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LayerChoice {
    #[default]
    Auto,
    Index(usize),
}

impl LayerChoice {
    pub fn resolve(self, model: &ModelConfig) -> usize {
        match self {
            LayerChoice::Auto => model.layers_speech,
            LayerChoice::Index(i) => i,
        }
    }
}

impl FromStr for LayerChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(LayerChoice::Auto);
        }
        s.parse().map(LayerChoice::Index).map_err(|_| format!("expected `auto` or a layer index, got `{s}`"))
    }
}

impl fmt::Display for LayerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerChoice::Auto => f.write_str("auto"),
            LayerChoice::Index(i) => write!(f, "{i}"),
        }
    }
}

macro_rules! section {
    ($name:ident, $prefix:literal, { $($key:literal => $field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $(pub $field: $ty,)*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl $name {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
                match key {
                    $($key => {
                        self.$field = value.trim().parse::<$ty>().map_err(|e| {
                            TrainError::Config(format!("{}.{}: cannot parse `{}`: {}", $prefix, key, value.trim(), e))
                        })?
                    })*
                    _ => return Err(TrainError::Config(format!("unknown key `{}.{}`", $prefix, key))),
                }
                Ok(())
            }

            pub fn to_pairs(&self) -> Vec<(String, String)> {
                vec![$((format!("{}.{}", $prefix, $key), self.$field.to_string())),*]
            }
        }
    };
}

section!(MaskConfig, "mask", {
    "speech_prob" => speech_prob: f64 = MaskSpec::SPEECH.start_probability,
    "speech_span" => speech_span: usize = MaskSpec::SPEECH.span_length,
    "text_prob" => text_prob: f64 = 0.04,
    "text_span" => text_span: usize = 8,
});

section!(TextConfig, "text", {
    "sil_rate" => sil_rate: f64 = 0.25,
    "duration_cutoff" => duration_cutoff: f64 = 0.98,
    "oov" => oov: OovPolicy = OovPolicy::Skip,
});

section!(PairedConfig, "paired", {
    "swap_prob" => swap_prob: f64 = crate::paired::DEFAULT_SWAP_PROBABILITY,
    "hours" => hours: f64 = 1.0,
    "align" => align: AlignMode = AlignMode::Swap,
});

section!(TrainSection, "train", {
    "steps" => steps: usize = 500,
    "warmup_steps" => warmup_steps: usize = 50,
    "peak_lr" => peak_lr: f64 = 2e-3,
    "batch_frames" => batch_frames: usize = 300,
    "ctc_start_step" => ctc_start_step: usize = 100,
    "mlm" => mlm: bool = true,
    "ctc" => ctc: bool = true,
    "char_layer" => char_layer: bool = true,
    "mlm_weight" => mlm_weight: f64 = 1.0,
    "ctc_weight" => ctc_weight: f64 = 1.0,
    "adam_beta1" => adam_beta1: f64 = 0.9,
    "adam_beta2" => adam_beta2: f64 = 0.98,
    "adam_eps" => adam_eps: f64 = 1e-6,
    "clip_norm" => clip_norm: f64 = 10.0,
    "weight_decay" => weight_decay: f64 = 0.0,
    "seed" => seed: u64 = 0,
});

section!(FinetuneSection, "finetune", {
    "steps" => steps: usize = 300,
    "peak_lr" => peak_lr: f64 = 2e-3,
    "batch_frames" => batch_frames: usize = 300,
    "warm" => warm: f64 = 0.1,
    "hold" => hold: f64 = 0.4,
    "decay" => decay: f64 = 0.5,
    "floor_ratio" => floor_ratio: f64 = 0.05,
    "char_layer" => char_layer: bool = true,
    "char_head" => char_head: bool = true,
});

section!(LabelsConfig, "labels", {
    "classes" => classes: usize = 16,
    "classes_iter2" => classes_iter2: usize = 32,
    "iterations" => iterations: usize = 50,
    "layer" => layer: LayerChoice = LayerChoice::Auto,
});

section!(DecodeSection, "decode", {
    "beam" => beam: usize = 16,
    "w1" => w1: f64 = 0.0,
    "w2" => w2: f64 = 0.0,
    "lm_order" => lm_order: usize = 4,
    "lm_k" => lm_k: f64 = 0.1,
});

section!(DiagConfig, "diag", {
    "size" => size: usize = 32,
    "band" => band: f64 = 0.1,
});

section!(SynthSection, "synth", {
    "phonemes" => phonemes: usize = SynthSpec::default().phonemes,
    "words" => words: usize = SynthSpec::default().words,
    "min_word_len" => min_word_len: usize = SynthSpec::default().min_word_len,
    "max_word_len" => max_word_len: usize = SynthSpec::default().max_word_len,
    "train_utterances" => train_utterances: usize = SynthSpec::default().train_utterances,
    "heldout_utterances" => heldout_utterances: usize = SynthSpec::default().heldout_utterances,
    "text_sentences" => text_sentences: usize = SynthSpec::default().text_sentences,
    "min_words" => min_words: usize = SynthSpec::default().min_words,
    "max_words" => max_words: usize = SynthSpec::default().max_words,
    "min_duration" => min_duration: usize = SynthSpec::default().min_duration,
    "max_duration" => max_duration: usize = SynthSpec::default().max_duration,
    "sil_min_duration" => sil_min_duration: usize = SynthSpec::default().sil_min_duration,
    "sil_max_duration" => sil_max_duration: usize = SynthSpec::default().sil_max_duration,
    "sil_rate" => sil_rate: f64 = SynthSpec::default().sil_rate,
    "noise" => noise: f64 = SynthSpec::default().noise,
    "feature_dim" => feature_dim: usize = SynthSpec::default().feature_dim,
});

impl SynthSection {
    pub fn spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            phonemes: self.phonemes,
            words: self.words,
            min_word_len: self.min_word_len,
            max_word_len: self.max_word_len,
            train_utterances: self.train_utterances,
            heldout_utterances: self.heldout_utterances,
            text_sentences: self.text_sentences,
            min_words: self.min_words,
            max_words: self.max_words,
            min_duration: self.min_duration,
            max_duration: self.max_duration,
            sil_min_duration: self.sil_min_duration,
            sil_max_duration: self.sil_max_duration,
            sil_rate: self.sil_rate,
            noise: self.noise,
            feature_dim: self.feature_dim,
            seed,
        }
    }
}

/// Every configurable value of the pipeline.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub text: TextConfig,
    pub paired: PairedConfig,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
    pub labels: LabelsConfig,
    pub decode: DecodeSection,
    pub diag: DiagConfig,
    pub synth: SynthSection,
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let (section, rest) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| TrainError::Config(format!("key `{key}` has no section prefix")))?;
        match section {
            "model" => self.model.set(rest, value).map_err(|e| TrainError::Config(e.to_string())),
            "mask" => self.mask.set(rest, value),
            "text" => self.text.set(rest, value),
            "paired" => self.paired.set(rest, value),
            "train" => self.train.set(rest, value),
            "finetune" => self.finetune.set(rest, value),
            "labels" => self.labels.set(rest, value),
            "decode" => self.decode.set(rest, value),
            "diag" => self.diag.set(rest, value),
            "synth" => self.synth.set(rest, value),
            _ => Err(TrainError::Config(format!("unknown key `{key}`"))),
        }
    }

    /// Applies `key=value` (or `key = value`) assignments.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), TrainError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = Config::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies every assignment in `text` on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<(), TrainError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_override(line)
                .map_err(|e| TrainError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .model
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v))
            .collect();
        out.extend(self.mask.to_pairs());
        out.extend(self.text.to_pairs());
        out.extend(self.paired.to_pairs());
        out.extend(self.train.to_pairs());
        out.extend(self.finetune.to_pairs());
        out.extend(self.labels.to_pairs());
        out.extend(self.decode.to_pairs());
        out.extend(self.diag.to_pairs());
        out.extend(self.synth.to_pairs());
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn speech_mask(&self) -> Result<MaskSpec, TrainError> {
        MaskSpec::new(self.mask.speech_prob, self.mask.speech_span).map_err(|e| TrainError::Config(format!("mask.speech: {e}")))
    }

    pub fn text_mask(&self) -> Result<MaskSpec, TrainError> {
        MaskSpec::new(self.mask.text_prob, self.mask.text_span).map_err(|e| TrainError::Config(format!("mask.text: {e}")))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.speech_mask()?;
        self.text_mask()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.train.warmup_steps > self.train.steps {
            return bad("train.warmup_steps exceeds train.steps");
        }
        if !(self.train.peak_lr > 0.0) || !(self.finetune.peak_lr > 0.0) {
            return bad("peak learning rates must be positive");
        }
        let fractions = self.finetune.warm + self.finetune.hold + self.finetune.decay;
        if (fractions - 1.0).abs() > 1e-9 || [self.finetune.warm, self.finetune.hold, self.finetune.decay].iter().any(|f| *f < 0.0) {
            return bad("finetune.warm + hold + decay must be non-negative and sum to 1");
        }
        if !(0.0..=1.0).contains(&self.paired.swap_prob) {
            return bad("paired.swap_prob outside [0, 1]");
        }
        if !(self.paired.hours >= 0.0) {
            return bad("paired.hours must be >= 0");
        }
        if self.decode.beam == 0 {
            return bad("decode.beam must be at least 1");
        }
        if self.decode.lm_order == 0 {
            return bad("decode.lm_order must be at least 1");
        }
        if !(self.diag.band > 0.0 && self.diag.band < 1.0) {
            return bad("diag.band outside (0, 1)");
        }
        if self.train.batch_frames == 0 || self.finetune.batch_frames == 0 {
            return bad("batch_frames must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_overrides() {
        let mut cfg = Config::default();
        cfg.set("train.steps", "42").unwrap();
        cfg.set("model.dim", "16").unwrap();
        cfg.set("paired.align", "ce_loss").unwrap();
        cfg.set("labels.layer", "3").unwrap();
        let back = Config::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        let mut other = Config::parse("# comment\ntrain.steps = 10  # trailing\n\ntrain.steps=11\n").unwrap();
        assert_eq!(other.train.steps, 11);
        other.apply_override("train.steps=12").unwrap();
        assert_eq!(other.train.steps, 12);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(Config::parse("train.stepz = 3\n").is_err());
        assert!(Config::parse("model.dimm = 3\n").is_err());
        assert!(Config::parse("nosection = 3\n").is_err());
        assert!(Config::parse("bogus.key = 3\n").is_err());
        assert!(Config::parse("train.steps = many\n").is_err());
        assert!(Config::default().apply_override("train.steps").is_err());
    }

    #[test]
    fn validation() {
        assert!(Config::default().validate().is_ok());
        let mut c = Config::default();
        c.train.warmup_steps = c.train.steps + 1;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.finetune.hold = 0.3;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.mask.speech_prob = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn layer_choice() {
        let m = ModelConfig::default();
        assert_eq!(LayerChoice::Auto.resolve(&m), m.layers_speech);
        assert_eq!("4".parse::<LayerChoice>().unwrap().resolve(&m), 4);
        assert!("x".parse::<LayerChoice>().is_err());
    }
}
