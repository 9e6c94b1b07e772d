//! Span masking shared by the speech and text inputs.

use rand::Rng;
use thiserror::Error;

use crate::compute::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("mask index {index} outside sequence of length {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("invalid mask spec: {0}")]
    InvalidSpec(String),
    #[error("mask embedding has {got} values, rows have {expected}")]
    EmbeddingWidth { expected: usize, got: usize },
}

/// Span-start probability and span length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub start_probability: f64,
    pub span_length: usize,
}

impl MaskSpec {
    pub const SPEECH: MaskSpec = MaskSpec {
        start_probability: 0.08,
        span_length: 10,
    };
    pub const TEXT: MaskSpec = MaskSpec {
        start_probability: 0.15,
        span_length: 40,
    };

    pub fn new(start_probability: f64, span_length: usize) -> Result<Self, MaskError> {
        let spec = Self {
            start_probability,
            span_length,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        if !(0.0..=1.0).contains(&self.start_probability) {
            return Err(MaskError::InvalidSpec(format!(
                "start probability {} outside [0, 1]",
                self.start_probability
            )));
        }
        if self.span_length == 0 {
            return Err(MaskError::InvalidSpec("span length must be at least 1".into()));
        }
        Ok(())
    }

    /// Expected masked fraction ignoring the sequence end: `1 - (1 - p)^span`.
    pub fn expected_fraction(&self) -> f64 {
        1.0 - (1.0 - self.start_probability).powi(self.span_length as i32)
    }
}

/// A set of masked positions within a sequence of known length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    flags: Vec<bool>,
    starts: Vec<usize>,
}

impl Mask {
    pub fn empty(len: usize) -> Self {
        Self {
            flags: vec![false; len],
            starts: Vec::new(),
        }
    }

    pub fn full(len: usize) -> Self {
        Self {
            flags: vec![true; len],
            starts: Vec::new(),
        }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Result<Self, MaskError> {
        let mut flags = vec![false; len];
        for &i in indices {
            *flags.get_mut(i).ok_or(MaskError::OutOfRange { index: i, len })? = true;
        }
        Ok(Self {
            flags,
            starts: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.flags.get(i).copied().unwrap_or(false)
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// Sampled span starts; empty for masks built from explicit indices.
    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| self.flags[i]).collect()
    }

    pub fn unmasked_indices(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| !self.flags[i]).collect()
    }
}

/// Marks each position as a span start with probability `p` and masks the
/// following `span_length` positions, clipped at the end. Spans may overlap.
pub fn sample_mask<R: Rng + ?Sized>(length: usize, spec: &MaskSpec, rng: &mut R) -> Mask {
    let mut mask = Mask::empty(length);
    for i in 0..length {
        if rng.random::<f64>() < spec.start_probability {
            mask.starts.push(i);
            let end = (i + spec.span_length).min(length);
            mask.flags[i..end].iter_mut().for_each(|f| *f = true);
        }
    }
    mask
}

/// Replaces masked rows by `embedding`; other rows are copied unchanged.
pub fn apply_mask(frames: &Tensor, mask: &Mask, embedding: &[f64]) -> Result<Tensor, MaskError> {
    if mask.len() != frames.rows() {
        return Err(MaskError::OutOfRange {
            index: mask.len().saturating_sub(1),
            len: frames.rows(),
        });
    }
    if embedding.len() != frames.cols() {
        return Err(MaskError::EmbeddingWidth {
            expected: frames.cols(),
            got: embedding.len(),
        });
    }
    let mut out = frames.clone();
    for i in mask.indices() {
        out.row_mut(i).copy_from_slice(embedding);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_probability_masks_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MaskSpec::new(0.0, 10).unwrap();
        assert!(sample_mask(500, &spec, &mut rng).is_empty());
    }

    #[test]
    fn saturated_probability_masks_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MaskSpec::new(1.0, 10).unwrap();
        let m = sample_mask(5, &spec, &mut rng);
        assert_eq!(m.count(), 5);
    }

    #[test]
    fn speech_spec_fraction_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = sample_mask(100_000, &MaskSpec::SPEECH, &mut rng);
        let frac = m.count() as f64 / 1e5;
        let expected = 1.0 - 0.92f64.powi(10);
        assert!((expected - 0.5656).abs() < 1e-4);
        assert!((frac - expected).abs() < 0.01, "{frac}");
    }

    #[test]
    fn mask_is_union_of_spans_from_starts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = MaskSpec::new(0.05, 7).unwrap();
        for len in [1, 13, 200] {
            let m = sample_mask(len, &spec, &mut rng);
            let mut rebuilt = vec![false; len];
            for &s in m.starts() {
                for f in rebuilt.iter_mut().take((s + 7).min(len)).skip(s) {
                    *f = true;
                }
            }
            assert_eq!(rebuilt, m.flags());
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MaskSpec::new(1.5, 3).is_err());
        assert!(MaskSpec::new(0.1, 0).is_err());
        assert!(Mask::from_indices(3, &[3]).is_err());
    }

    #[test]
    fn apply_mask_cases() {
        let frames = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let m = [9.0, -9.0];
        assert_eq!(apply_mask(&frames, &Mask::empty(3), &m).unwrap(), frames);
        let full = apply_mask(&frames, &Mask::full(3), &m).unwrap();
        assert!((0..3).all(|i| full.row(i) == m));
        let first = apply_mask(&frames, &Mask::from_indices(3, &[0]).unwrap(), &m).unwrap();
        assert_eq!(first.row(0), &m);
        assert_eq!(first.row(1), frames.row(1));
        assert_eq!(first.row(2), frames.row(2));
        assert!(apply_mask(&frames, &Mask::empty(2), &m).is_err());
    }
}
