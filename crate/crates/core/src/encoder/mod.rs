//! Speech encoder, text encoder, shared encoder and character layer.
//!
//! Both private encoders start with an embedding (a linear projection of
//! frame features, or a phoneme lookup), replace masked positions with the
//! modality's learned mask embedding, add a grouped convolutional positional
//! term and run pre-norm transformer blocks with a bucketed relative
//! position bias. Their outputs feed one shared stack.

mod checkpoint;
mod params;

use rand::Rng;
use thiserror::Error;

use crate::compute::{ComputeError, Graph, NodeId, Tensor};
use crate::masking::Mask;

pub use checkpoint::{CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{Binder, ParamStore};
pub(crate) use params::normal;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("input width {got} does not match configured {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("mask covers {mask} positions but input has {input}")]
    MaskLength { mask: usize, input: usize },
    #[error("layer {layer} not captured (have {available})")]
    LayerOutOfRange { layer: usize, available: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Speech,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Speech => "speech",
            Modality::Text => "text",
        }
    }
}

/// Architecture hyperparameters. Defaults are the desk-scale geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub inner_dim: usize,
    pub heads: usize,
    pub layers_speech: usize,
    pub layers_text: usize,
    pub layers_shared: usize,
    pub layers_char: usize,
    pub conv_pos: bool,
    /// Apply the convolutional positional layer to text embeddings too.
    pub conv_pos_text: bool,
    pub conv_pos_kernel: usize,
    pub conv_pos_groups: usize,
    pub rel_bias: bool,
    pub rel_bias_buckets: usize,
    pub rel_bias_max_distance: usize,
    pub speech_feature_dim: usize,
    pub phoneme_vocab: usize,
    /// Characters excluding the CTC blank.
    pub char_vocab: usize,
    pub codewords: usize,
    pub codeword_dim: usize,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 32,
            inner_dim: 64,
            heads: 4,
            layers_speech: 2,
            layers_text: 2,
            layers_shared: 2,
            layers_char: 1,
            conv_pos: true,
            conv_pos_text: true,
            conv_pos_kernel: 8,
            conv_pos_groups: 4,
            rel_bias: true,
            rel_bias_buckets: 32,
            rel_bias_max_distance: 128,
            speech_feature_dim: 39,
            phoneme_vocab: 16,
            char_vocab: 28,
            codewords: 16,
            codeword_dim: 16,
            temperature: 0.1,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:ident),* $(,)?) => {
        impl ModelConfig {
            /// Keys understood by [`ModelConfig::set`], without the `model.` prefix.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
                match key {
                    $($key => self.$field = config_keys!(@parse $kind, key, value),)*
                    _ => return Err(ModelError::InvalidConfig(format!("unknown key `model.{key}`"))),
                }
                Ok(())
            }

            pub fn to_pairs(&self) -> Vec<(String, String)> {
                vec![$(($key.to_string(), self.$field.to_string())),*]
            }
        }
    };
    (@parse $kind:ident, $key:expr, $value:expr) => {
        $value.trim().parse::<$kind>().map_err(|e| {
            ModelError::InvalidConfig(format!("model.{}: cannot parse `{}`: {e}", $key, $value))
        })?
    };
}

config_keys! {
    "dim" => model_dim: usize,
    "inner_dim" => inner_dim: usize,
    "heads" => heads: usize,
    "layers_speech" => layers_speech: usize,
    "layers_text" => layers_text: usize,
    "layers_shared" => layers_shared: usize,
    "layers_char" => layers_char: usize,
    "conv_pos" => conv_pos: bool,
    "conv_pos_text" => conv_pos_text: bool,
    "conv_pos_kernel" => conv_pos_kernel: usize,
    "conv_pos_groups" => conv_pos_groups: usize,
    "rel_bias" => rel_bias: bool,
    "rel_bias_buckets" => rel_bias_buckets: usize,
    "rel_bias_max_distance" => rel_bias_max_distance: usize,
    "speech_feature_dim" => speech_feature_dim: usize,
    "phoneme_vocab" => phoneme_vocab: usize,
    "char_vocab" => char_vocab: usize,
    "codewords" => codewords: usize,
    "codeword_dim" => codeword_dim: usize,
    "temperature" => temperature: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        let positive = [
            ("dim", self.model_dim),
            ("inner_dim", self.inner_dim),
            ("heads", self.heads),
            ("conv_pos_kernel", self.conv_pos_kernel),
            ("conv_pos_groups", self.conv_pos_groups),
            ("rel_bias_buckets", self.rel_bias_buckets),
            ("speech_feature_dim", self.speech_feature_dim),
            ("phoneme_vocab", self.phoneme_vocab),
            ("char_vocab", self.char_vocab),
            ("codewords", self.codewords),
            ("codeword_dim", self.codeword_dim),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("model.{k} must be positive"));
        }
        if self.model_dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.model_dim, self.heads));
        }
        if self.model_dim % self.conv_pos_groups != 0 {
            return bad(format!(
                "{} conv groups do not divide dim {}",
                self.conv_pos_groups, self.model_dim
            ));
        }
        if self.rel_bias_buckets < 2 {
            return bad("rel_bias_buckets must be at least 2".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        Ok(())
    }

    pub fn private_layers(&self, modality: Modality) -> usize {
        match modality {
            Modality::Speech => self.layers_speech,
            Modality::Text => self.layers_text,
        }
    }
}

/// Bucket for the offset `key_pos - query_pos`.
///
/// The lower half of the buckets holds non-positive offsets and the upper
/// half positive ones. Within a half, small distances get their own bucket
/// and larger ones are log-spaced up to `max_distance`.
pub fn relative_bucket(query_pos: usize, key_pos: usize, buckets: usize, max_distance: usize) -> usize {
    let rel = key_pos as i64 - query_pos as i64;
    let half = (buckets / 2).max(1);
    let sign = if rel > 0 { half } else { 0 };
    sign + bucket_magnitude(rel.unsigned_abs() as usize, half, max_distance)
}

/// Magnitude class of a distance within one sign half of `half` buckets.
pub fn bucket_magnitude(distance: usize, half: usize, max_distance: usize) -> usize {
    let exact = half / 2;
    if distance < exact {
        return distance;
    }
    if exact == 0 || max_distance <= exact {
        return (half - 1).min(distance);
    }
    let ratio = (distance as f64 / exact as f64).ln() / (max_distance as f64 / exact as f64).ln();
    let b = exact + (ratio * (half - exact) as f64) as usize;
    b.min(half - 1)
}

/// Input to one private encoder.
#[derive(Clone, Copy, Debug)]
pub enum EncoderInput<'a> {
    /// Frame features `[T, speech_feature_dim]`.
    Speech(&'a Tensor),
    /// Frame-level phoneme ids.
    Text(&'a [usize]),
}

impl EncoderInput<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            EncoderInput::Speech(_) => Modality::Speech,
            EncoderInput::Text(_) => Modality::Text,
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            EncoderInput::Speech(t) => t.rows(),
            EncoderInput::Text(ids) => ids.len(),
        }
    }
}

/// Nodes produced by one stack of transformer blocks.
#[derive(Clone, Debug)]
pub struct StackOutput {
    pub output: NodeId,
    /// Output of each block; the last entry is the normalized stack output.
    pub layers: Vec<NodeId>,
    /// Attention probabilities, one `[T, T]` node per head per block.
    pub attention: Vec<NodeId>,
}

/// Graph nodes of a full private + shared pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub modality: Modality,
    /// Entry 0 is the embedded input after masking and positional
    /// convolution; entry `k` is the output of block `k`, counting private
    /// blocks first.
    pub per_layer: Vec<NodeId>,
    pub private_out: NodeId,
    pub shared_out: NodeId,
    pub attention: Vec<NodeId>,
}

/// Materialized per-layer representations of one sequence.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    pub modality: Modality,
    pub per_layer: Vec<Tensor>,
    pub mask_positions: Vec<usize>,
}

impl HiddenStates {
    pub fn frames(&self) -> usize {
        self.per_layer.first().map_or(0, Tensor::rows)
    }

    pub fn layer(&self, index: usize) -> Result<&Tensor, ModelError> {
        self.per_layer.get(index).ok_or(ModelError::LayerOutOfRange {
            layer: index,
            available: self.per_layer.len(),
        })
    }
}

impl Encoded {
    pub fn hidden_states(&self, graph: &Graph, mask: &Mask) -> HiddenStates {
        HiddenStates {
            modality: self.modality,
            per_layer: self.per_layer.iter().map(|&id| graph.value(id).clone()).collect(),
            mask_positions: mask.indices(),
        }
    }
}

/// Model body plus prediction heads, all held in one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

pub(crate) fn stack_name(modality: Modality) -> &'static str {
    modality.as_str()
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let c = &config;
        let d = c.model_dim;
        let mut p = ParamStore::new();
        let lin = |p: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize| {
            p.insert(format!("{name}.w"), normal(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()));
            p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        };
        lin(&mut p, rng, "speech.proj", c.speech_feature_dim, d);
        p.insert("text.embed", normal(rng, &[c.phoneme_vocab, d], 1.0));
        p.insert("mask.speech", normal(rng, &[1, d], 1.0));
        p.insert("mask.text", normal(rng, &[1, d], 1.0));
        let stacks = [
            ("speech", c.layers_speech, true),
            ("text", c.layers_text, true),
            ("shared", c.layers_shared, false),
            ("char", c.layers_char, false),
        ];
        for (stack, layers, has_conv) in stacks {
            if has_conv {
                let per = d / c.conv_pos_groups;
                let std = 1.0 / ((per * c.conv_pos_kernel) as f64).sqrt();
                p.insert(
                    format!("{stack}.conv_pos.weight"),
                    normal(rng, &[d, per, c.conv_pos_kernel], std),
                );
                p.insert(format!("{stack}.conv_pos.bias"), Tensor::zeros(&[d]));
            }
            if layers > 0 {
                p.insert(format!("{stack}.rel_bias"), Tensor::zeros(&[c.rel_bias_buckets, c.heads]));
                p.insert(format!("{stack}.ln_out.g"), Tensor::filled(&[d], 1.0));
                p.insert(format!("{stack}.ln_out.b"), Tensor::zeros(&[d]));
            }
            for l in 0..layers {
                let pre = format!("{stack}.layers.{l}");
                for ln in ["ln1", "ln2"] {
                    p.insert(format!("{pre}.{ln}.g"), Tensor::filled(&[d], 1.0));
                    p.insert(format!("{pre}.{ln}.b"), Tensor::zeros(&[d]));
                }
                for proj in ["q", "k", "v", "o"] {
                    lin(&mut p, rng, &format!("{pre}.attn.{proj}"), d, d);
                }
                // a key bias shifts every score in a row equally and cannot affect attention
                p.remove(&format!("{pre}.attn.k.b"));
                lin(&mut p, rng, &format!("{pre}.ffn.in"), d, c.inner_dim);
                lin(&mut p, rng, &format!("{pre}.ffn.out"), c.inner_dim, d);
            }
        }
        lin(&mut p, rng, "char.head", d, c.char_vocab + 1);
        lin(&mut p, rng, "mlm.head", d, c.phoneme_vocab);
        p.insert("hubert.proj", normal(rng, &[d, c.codeword_dim], 1.0 / (d as f64).sqrt()));
        p.insert("hubert.codewords", normal(rng, &[c.codewords, c.codeword_dim], 1.0));
        Ok(Self { config, params: p })
    }

    /// Fresh character head drawn from `rng`.
    pub fn reset_char_head<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let d = self.config.model_dim;
        let v = self.config.char_vocab + 1;
        self.params.insert("char.head.w", normal(rng, &[d, v], 1.0 / (d as f64).sqrt()));
        self.params.insert("char.head.b", Tensor::zeros(&[v]));
    }

    /// Replaces the codeword table, e.g. when a new label set has a
    /// different class count.
    pub fn reset_codewords<R: Rng + ?Sized>(&mut self, codewords: usize, rng: &mut R) {
        self.config.codewords = codewords;
        self.params.insert(
            "hubert.codewords",
            normal(rng, &[codewords, self.config.codeword_dim], 1.0),
        );
    }

    fn linear(&self, b: &mut Binder, name: &str, x: NodeId) -> Result<NodeId, ModelError> {
        let w = b.param(&format!("{name}.w"))?;
        let bias = b.param(&format!("{name}.b"))?;
        let g = b.graph_mut();
        let y = g.matmul(x, w)?;
        Ok(g.add(y, bias)?)
    }

    fn norm(&self, b: &mut Binder, name: &str, x: NodeId) -> Result<NodeId, ModelError> {
        let gain = b.param(&format!("{name}.g"))?;
        let bias = b.param(&format!("{name}.b"))?;
        let g = b.graph_mut();
        let n = g.layer_norm(x, LN_EPS)?;
        let s = g.mul(n, gain)?;
        Ok(g.add(s, bias)?)
    }

    /// Projects or looks up the input and swaps masked rows for the
    /// modality's mask embedding.
    pub fn embed(&self, b: &mut Binder, input: &EncoderInput, mask: &Mask) -> Result<NodeId, ModelError> {
        let frames = input.frames();
        if frames == 0 {
            return Err(ModelError::EmptyInput);
        }
        if mask.len() != frames {
            return Err(ModelError::MaskLength {
                mask: mask.len(),
                input: frames,
            });
        }
        let (x, mask_name) = match input {
            EncoderInput::Speech(features) => {
                if features.cols() != self.config.speech_feature_dim || features.rank() != 2 {
                    return Err(ModelError::DimensionMismatch {
                        expected: self.config.speech_feature_dim,
                        got: features.cols(),
                    });
                }
                let f = b.graph_mut().constant((*features).clone());
                (self.linear(b, "speech.proj", f)?, "mask.speech")
            }
            EncoderInput::Text(ids) => {
                let vocab = self.config.phoneme_vocab;
                if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
                    return Err(ModelError::TokenOutOfRange { token: bad, vocab });
                }
                let table = b.param("text.embed")?;
                (b.graph_mut().gather_rows(table, ids)?, "mask.text")
            }
        };
        if mask.is_empty() {
            return Ok(x);
        }
        let m = b.param(mask_name)?;
        Ok(b.graph_mut().select_rows(x, m, mask.flags().to_vec())?)
    }

    /// `x + gelu(conv(x) + bias)` with same-length grouped convolution.
    pub fn conv_positional_embed(&self, b: &mut Binder, stack: &str, x: NodeId) -> Result<NodeId, ModelError> {
        let w = b.param(&format!("{stack}.conv_pos.weight"))?;
        let bias = b.param(&format!("{stack}.conv_pos.bias"))?;
        let groups = self.config.conv_pos_groups;
        let g = b.graph_mut();
        let c = g.conv1d(x, w, groups)?;
        let c = g.add(c, bias)?;
        let c = g.gelu(c)?;
        Ok(g.add(x, c)?)
    }

    fn bias_indices(&self, frames: usize, head: usize) -> Vec<usize> {
        let c = &self.config;
        let mut idx = Vec::with_capacity(frames * frames);
        for i in 0..frames {
            for j in 0..frames {
                idx.push(relative_bucket(i, j, c.rel_bias_buckets, c.rel_bias_max_distance) * c.heads + head);
            }
        }
        idx
    }

    fn attention(
        &self,
        b: &mut Binder,
        stack: &str,
        prefix: &str,
        x: NodeId,
        attention: &mut Vec<NodeId>,
    ) -> Result<NodeId, ModelError> {
        let c = &self.config;
        let frames = b.graph().value(x).rows();
        let dh = c.model_dim / c.heads;
        let q = self.linear(b, &format!("{prefix}.q"), x)?;
        let kw = b.param(&format!("{prefix}.k.w"))?;
        let k = b.graph_mut().matmul(x, kw)?;
        let v = self.linear(b, &format!("{prefix}.v"), x)?;
        let table = if c.rel_bias {
            Some(b.param(&format!("{stack}.rel_bias"))?)
        } else {
            None
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let idx = table.map(|_| self.bias_indices(frames, h));
            let g = b.graph_mut();
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(scores, scale)?;
            if let (Some(table), Some(idx)) = (table, idx) {
                let bias = g.gather(table, idx, vec![frames, frames])?;
                scores = g.add(scores, bias)?;
            }
            let probs = g.softmax(scores)?;
            attention.push(probs);
            heads.push(g.matmul(probs, vh)?);
        }
        let ctx = b.graph_mut().concat(&heads, 1)?;
        self.linear(b, &format!("{prefix}.o"), ctx)
    }

    fn block(
        &self,
        b: &mut Binder,
        stack: &str,
        layer: usize,
        x: NodeId,
        attention: &mut Vec<NodeId>,
    ) -> Result<NodeId, ModelError> {
        let pre = format!("{stack}.layers.{layer}");
        let h = self.norm(b, &format!("{pre}.ln1"), x)?;
        let a = self.attention(b, stack, &format!("{pre}.attn"), h, attention)?;
        let x = b.graph_mut().add(x, a)?;
        let h = self.norm(b, &format!("{pre}.ln2"), x)?;
        let f = self.linear(b, &format!("{pre}.ffn.in"), h)?;
        let f = b.graph_mut().gelu(f)?;
        let f = self.linear(b, &format!("{pre}.ffn.out"), f)?;
        Ok(b.graph_mut().add(x, f)?)
    }

    fn stack(&self, b: &mut Binder, stack: &str, layers: usize, x: NodeId) -> Result<StackOutput, ModelError> {
        let mut attention = Vec::new();
        let mut outs = Vec::with_capacity(layers);
        let mut h = x;
        for l in 0..layers {
            h = self.block(b, stack, l, h, &mut attention)?;
            outs.push(h);
        }
        if layers > 0 {
            h = self.norm(b, &format!("{stack}.ln_out"), h)?;
            *outs.last_mut().expect("non-empty") = h;
        }
        Ok(StackOutput {
            output: h,
            layers: outs,
            attention,
        })
    }

    /// Positional convolution (when enabled for the modality) followed by
    /// the private transformer blocks. `x` is the embedded input.
    pub fn private_encoder(&self, b: &mut Binder, x: NodeId, modality: Modality) -> Result<(NodeId, StackOutput), ModelError> {
        let stack = stack_name(modality);
        let use_conv = self.config.conv_pos && (modality == Modality::Speech || self.config.conv_pos_text);
        let x = if use_conv {
            self.conv_positional_embed(b, stack, x)?
        } else {
            x
        };
        let out = self.stack(b, stack, self.config.private_layers(modality), x)?;
        Ok((x, out))
    }

    pub fn shared_encoder(&self, b: &mut Binder, x: NodeId) -> Result<StackOutput, ModelError> {
        self.stack(b, "shared", self.config.layers_shared, x)
    }

    /// Full pass through one private encoder and the shared encoder.
    pub fn encode(&self, b: &mut Binder, input: &EncoderInput, mask: &Mask) -> Result<Encoded, ModelError> {
        let x = self.embed(b, input, mask)?;
        let (pos, private) = self.private_encoder(b, x, input.modality())?;
        let shared = self.shared_encoder(b, private.output)?;
        let mut per_layer = vec![pos];
        per_layer.extend(&private.layers);
        per_layer.extend(&shared.layers);
        let mut attention = private.attention;
        attention.extend(shared.attention);
        Ok(Encoded {
            modality: input.modality(),
            per_layer,
            private_out: private.output,
            shared_out: shared.output,
            attention,
        })
    }

    /// Character logits `[T, char_vocab + 1]`, blank at index 0. With
    /// `use_char_layer` false (or no char layer configured) the head reads
    /// the shared output directly.
    pub fn char_logits(&self, b: &mut Binder, h_shared: NodeId, use_char_layer: bool) -> Result<NodeId, ModelError> {
        let h = if use_char_layer && self.config.layers_char > 0 {
            self.stack(b, "char", self.config.layers_char, h_shared)?.output
        } else {
            h_shared
        };
        self.linear(b, "char.head", h)
    }

    /// Phoneme logits from the MLM head.
    pub fn mlm_logits(&self, b: &mut Binder, h_shared: NodeId) -> Result<NodeId, ModelError> {
        self.linear(b, "mlm.head", h_shared)
    }

    /// Evaluates [`Model::encode`] without gradients and materializes
    /// every layer.
    pub fn hidden_states(&self, input: &EncoderInput, mask: &Mask) -> Result<HiddenStates, ModelError> {
        let mut b = Binder::new(&self.params, false);
        let enc = self.encode(&mut b, input, mask)?;
        Ok(enc.hidden_states(b.graph(), mask))
    }

    /// Total blocks on the private + shared path of `modality`.
    pub fn depth(&self, modality: Modality) -> usize {
        self.config.private_layers(modality) + self.config.layers_shared
    }
}

#[cfg(test)]
mod tests;
