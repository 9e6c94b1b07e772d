//! Frame-level pseudo-labels: MFCC features, k-means codebooks, relabeling
//! from encoder hidden states, and the feature/label/manifest files.

pub mod kmeans;
pub mod mfcc;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::compute::Tensor;
use crate::encoder::{EncoderInput, Model, ModelError};
use crate::masking::Mask;

pub use kmeans::{kmeans_fit, kmeans_from_seeds, Codebook, KMeansFit};
pub use mfcc::{compute_mfcc, MfccConfig};

pub const FEATURE_MAGIC: &[u8; 8] = b"TESSPFEA";

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("sample rate {0} Hz cannot cover the analysis band")]
    SampleRate(u32),
    #[error("{samples} samples is shorter than one {frame}-sample frame")]
    TooShort { samples: usize, frame: usize },
    #[error("{rows} distinct rows cannot support {classes} classes")]
    TooFewRows { rows: usize, classes: usize },
    #[error("feature width {got} does not match {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{0}")]
    Config(String),
    #[error("{file} line {line}: {detail}")]
    Format { file: String, line: usize, detail: String },
    #[error("feature file: {0}")]
    FeatureFile(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Frame labels per utterance id.
pub type LabelSet = BTreeMap<String, Vec<usize>>;

/// `utt<TAB>z1 z2 z3 ...` per utterance in id order.
pub fn write_labels(labels: &LabelSet) -> String {
    let mut out = String::new();
    for (utt, z) in labels {
        let z: Vec<String> = z.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{utt}\t{}", z.join(" "));
    }
    out
}

pub fn parse_labels(text: &str) -> Result<LabelSet, LabelError> {
    let mut out = LabelSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: &str| LabelError::Format {
            file: "labels".into(),
            line: n + 1,
            detail: detail.into(),
        };
        let (utt, body) = line.split_once('\t').ok_or_else(|| err("expected utt<TAB>labels"))?;
        let z = body
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|_| err("non-integer label")))
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(utt.to_string(), z);
    }
    Ok(out)
}

/// Binary `[frames, dim]` matrix: magic, u32 frames, u32 dim, f64 LE values.
pub fn write_features(w: &mut impl Write, features: &Tensor) -> io::Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(features.rows() as u32).to_le_bytes())?;
    w.write_all(&(features.cols() as u32).to_le_bytes())?;
    for v in features.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features(r: &mut impl Read) -> Result<Tensor, LabelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(LabelError::FeatureFile("bad magic".into()));
    }
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    let frames = u32::from_le_bytes(b) as usize;
    r.read_exact(&mut b)?;
    let dim = u32::from_le_bytes(b) as usize;
    let mut bytes = vec![0u8; frames * dim * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::matrix(frames, dim, data).map_err(|e| LabelError::FeatureFile(e.to_string()))
}

pub fn save_features(path: &Path, features: &Tensor) -> Result<(), LabelError> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write_features(&mut f, features)?;
    f.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Tensor, LabelError> {
    read_features(&mut io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt: String,
    pub features: PathBuf,
    pub frames: usize,
    pub transcript: Option<String>,
}

/// `utt<TAB>feature_path<TAB>frames[<TAB>transcript]` lines.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, LabelError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: &str| LabelError::Format {
            file: "manifest".into(),
            line: n + 1,
            detail: detail.into(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(err("expected 3 or 4 tab-separated fields"));
        }
        out.push(ManifestEntry {
            utt: fields[0].to_string(),
            features: PathBuf::from(fields[1]),
            frames: fields[2].parse().map_err(|_| err("bad frame count"))?,
            transcript: fields.get(3).map(|s| s.to_string()),
        });
    }
    Ok(out)
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = write!(out, "{}\t{}\t{}", e.utt, e.features.display(), e.frames);
        if let Some(t) = &e.transcript {
            let _ = write!(out, "\t{t}");
        }
        out.push('\n');
    }
    out
}

/// Stacks the rows of several matrices.
pub fn stack_rows<'a>(parts: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor, LabelError> {
    let mut dim = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for t in parts {
        match dim {
            None => dim = Some(t.cols()),
            Some(d) if d != t.cols() => return Err(LabelError::DimensionMismatch { expected: d, got: t.cols() }),
            _ => {}
        }
        rows += t.rows();
        data.extend_from_slice(t.data());
    }
    let dim = dim.ok_or_else(|| LabelError::Config("no feature rows".into()))?;
    Tensor::matrix(rows, dim, data).map_err(|e| LabelError::Config(e.to_string()))
}

/// Fits a codebook over all utterances and labels every frame.
pub fn fit_and_label<R: Rng + ?Sized>(
    features: &BTreeMap<String, Tensor>,
    classes: usize,
    iterations: usize,
    rng: &mut R,
) -> Result<(KMeansFit, LabelSet), LabelError> {
    let all = stack_rows(features.values())?;
    let fit = kmeans_fit(&all, classes, iterations, rng)?;
    let labels = features
        .iter()
        .map(|(utt, f)| Ok((utt.clone(), fit.codebook.assign(f)?)))
        .collect::<Result<LabelSet, LabelError>>()?;
    Ok((fit, labels))
}

/// Unmasked hidden states of `layer` for every utterance.
pub fn hidden_features(model: &Model, features: &BTreeMap<String, Tensor>, layer: usize) -> Result<BTreeMap<String, Tensor>, LabelError> {
    features
        .iter()
        .map(|(utt, f)| {
            let states = model.hidden_states(&EncoderInput::Speech(f), &Mask::empty(f.rows()))?;
            Ok((utt.clone(), states.layer(layer)?.clone()))
        })
        .collect()
}

/// Second-iteration labels from a trained model's hidden states.
pub fn relabel_from_hidden<R: Rng + ?Sized>(
    model: &Model,
    features: &BTreeMap<String, Tensor>,
    layer: usize,
    classes: usize,
    iterations: usize,
    rng: &mut R,
) -> Result<(KMeansFit, LabelSet), LabelError> {
    let hidden = hidden_features(model, features, layer)?;
    fit_and_label(&hidden, classes, iterations, rng)
}
