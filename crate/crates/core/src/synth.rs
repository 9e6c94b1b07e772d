//! Seeded synthetic corpus: a random lexicon, utterances whose features are
//! noisy per-phoneme prototypes, exact alignments and a text-only corpus.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::compute::Tensor;
use crate::labeler::{save_features, write_manifest, LabelError, ManifestEntry};
use crate::paired::{write_alignments, Alignment};
use crate::textpipe::{Lexicon, SIL_ID};

const PHONEME_NAMES: &[&str] = &[
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH", "IY", "JH", "K", "L",
    "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Phonemes excluding SIL; at most 26 so every phoneme gets its own letter.
    pub phonemes: usize,
    /// Minimum lexicon size; more words are drawn if some phoneme is unused.
    pub words: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub train_utterances: usize,
    pub heldout_utterances: usize,
    pub text_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub sil_min_duration: usize,
    pub sil_max_duration: usize,
    pub sil_rate: f64,
    pub noise: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            phonemes: 12,
            words: 20,
            min_word_len: 2,
            max_word_len: 4,
            train_utterances: 20,
            heldout_utterances: 10,
            text_sentences: 200,
            min_words: 3,
            max_words: 5,
            min_duration: 2,
            max_duration: 5,
            sil_min_duration: 2,
            sil_max_duration: 6,
            sil_rate: 0.25,
            noise: 0.2,
            feature_dim: 39,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic corpus spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        if self.phonemes == 0 || self.phonemes > 26 {
            return bad("phonemes must be in 1..=26");
        }
        if self.words == 0 || self.train_utterances == 0 || self.feature_dim == 0 {
            return bad("word, utterance and feature counts must be positive");
        }
        if self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            return bad("word length range is empty");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("words-per-utterance range is empty");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("phoneme duration range is empty");
        }
        if self.sil_min_duration == 0 || self.sil_min_duration > self.sil_max_duration {
            return bad("SIL duration range is empty");
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.sil_rate) {
            return bad("noise must be >= 0 and sil_rate in [0, 1]");
        }
        let possible: f64 = (self.min_word_len..=self.max_word_len)
            .map(|l| (self.phonemes as f64).powi(l as i32))
            .sum();
        if possible < self.words as f64 {
            return bad("too few phoneme strings for the requested word count");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub transcript: String,
    /// Phoneme tokens including SIL.
    pub tokens: Vec<usize>,
    /// Phoneme id per frame.
    pub alignment: Vec<usize>,
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub lexicon: Lexicon,
    /// Prototype feature vector per phoneme id (SIL first).
    pub prototypes: Tensor,
    pub train: Vec<SynthUtterance>,
    pub heldout: Vec<SynthUtterance>,
    pub text: Vec<String>,
}

fn random_word<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Vec<usize> {
    let len = rng.random_range(spec.min_word_len..=spec.max_word_len);
    (0..len).map(|_| rng.random_range(1..=spec.phonemes)).collect()
}

pub fn make_synthetic(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut names: Vec<&str> = PHONEME_NAMES.to_vec();
    names.shuffle(&mut rng);
    let mut names: Vec<&str> = names[..spec.phonemes].to_vec();
    names.sort_unstable();
    let mut letters: Vec<char> = ('A'..='Z').collect();
    letters.shuffle(&mut rng);

    // ids 1..=phonemes follow sorted names, matching the lexicon inventory
    let mut words: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    // extra words are drawn until every phoneme occurs, since the lexicon
    // inventory only knows phonemes that appear in some pronunciation
    let covered = |words: &BTreeMap<String, Vec<usize>>| {
        let used: std::collections::BTreeSet<usize> = words.values().flatten().copied().collect();
        used.len() == spec.phonemes
    };
    while words.len() < spec.words || !covered(&words) {
        let w = random_word(spec, &mut rng);
        let spelling: String = w.iter().map(|&p| letters[p - 1]).collect();
        words.entry(spelling).or_insert(w);
    }
    let lexicon = Lexicon::from_entries(
        words
            .iter()
            .map(|(s, w)| (s.clone(), w.iter().map(|&p| names[p - 1].to_string()).collect::<Vec<_>>())),
    )
    .map_err(|e| SynthError::Spec(e.to_string()))?;
    debug_assert!(words.iter().all(|(s, w)| lexicon.get(s) == Some(&w[..])));

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let classes = spec.phonemes + 1;
    let prototypes = Tensor::matrix(
        classes,
        spec.feature_dim,
        (0..classes * spec.feature_dim).map(|_| unit.sample(&mut rng)).collect(),
    )
    .expect("prototype shape");
    let vocabulary: Vec<&String> = words.keys().collect();

    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.random_range(spec.min_words..=spec.max_words);
        (0..n).map(|_| vocabulary[rng.random_range(0..vocabulary.len())].clone()).collect()
    };

    let utterance = |id: String, rng: &mut ChaCha8Rng| -> SynthUtterance {
        let ws = sentence(rng);
        let mut tokens = vec![SIL_ID];
        for (i, w) in ws.iter().enumerate() {
            tokens.extend_from_slice(&words[w]);
            if i + 1 < ws.len() && rng.random::<f64>() < spec.sil_rate {
                tokens.push(SIL_ID);
            }
        }
        tokens.push(SIL_ID);
        let mut alignment = Vec::new();
        for &p in &tokens {
            let n = if p == SIL_ID {
                rng.random_range(spec.sil_min_duration..=spec.sil_max_duration)
            } else {
                rng.random_range(spec.min_duration..=spec.max_duration)
            };
            alignment.extend(std::iter::repeat_n(p, n));
        }
        let mut data = Vec::with_capacity(alignment.len() * spec.feature_dim);
        for &p in &alignment {
            for &v in prototypes.row(p) {
                data.push(if spec.noise > 0.0 { v + spec.noise * unit.sample(rng) } else { v });
            }
        }
        SynthUtterance {
            id,
            transcript: ws.join(" "),
            tokens,
            features: Tensor::matrix(alignment.len(), spec.feature_dim, data).expect("feature shape"),
            alignment,
        }
    };

    let train = (0..spec.train_utterances)
        .map(|i| utterance(format!("train{i:03}"), &mut rng))
        .collect();
    let heldout = (0..spec.heldout_utterances)
        .map(|i| utterance(format!("heldout{i:03}"), &mut rng))
        .collect();
    let text = (0..spec.text_sentences).map(|_| sentence(&mut rng).join(" ")).collect();
    Ok(SynthCorpus {
        lexicon,
        prototypes,
        train,
        heldout,
        text,
    })
}

/// Standard file names written by [`SynthCorpus::write`].
pub mod files {
    pub const LEXICON: &str = "lexicon.txt";
    pub const TRAIN_MANIFEST: &str = "train.tsv";
    pub const HELDOUT_MANIFEST: &str = "heldout.tsv";
    pub const TEXT: &str = "text.txt";
    pub const ALIGNMENTS: &str = "alignments.txt";
    pub const FEATURE_DIR: &str = "feats";
}

impl SynthCorpus {
    pub fn alignments(&self) -> BTreeMap<String, Alignment> {
        self.train
            .iter()
            .chain(&self.heldout)
            .map(|u| (u.id.clone(), Alignment::from_frames(&u.alignment).expect("non-empty")))
            .collect()
    }

    /// Writes lexicon, manifests, features, alignments and text corpus into
    /// `dir`. Feature paths in the manifests are relative to `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        use files::*;
        std::fs::create_dir_all(dir.join(FEATURE_DIR))?;
        std::fs::write(dir.join(LEXICON), self.lexicon.to_text())?;
        for (name, utts) in [(TRAIN_MANIFEST, &self.train), (HELDOUT_MANIFEST, &self.heldout)] {
            let mut entries = Vec::new();
            for u in utts {
                let rel = Path::new(FEATURE_DIR).join(format!("{}.fea", u.id));
                save_features(&dir.join(&rel), &u.features)?;
                entries.push(ManifestEntry {
                    utt: u.id.clone(),
                    features: rel,
                    frames: u.features.rows(),
                    transcript: Some(u.transcript.clone()),
                });
            }
            std::fs::write(dir.join(name), write_manifest(&entries))?;
        }
        std::fs::write(dir.join(ALIGNMENTS), write_alignments(&self.alignments(), self.lexicon.inventory()))?;
        let mut text = self.text.join("\n");
        text.push('\n');
        std::fs::write(dir.join(TEXT), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textpipe::{phonemize, OovPolicy};

    #[test]
    fn corpus_is_consistent() {
        let c = make_synthetic(&SynthSpec::default()).unwrap();
        assert_eq!(c.train.len(), 20);
        assert_eq!(c.lexicon.inventory().len(), 13);
        for u in &c.train {
            assert_eq!(u.features.rows(), u.alignment.len());
            assert_eq!(u.tokens.first(), Some(&SIL_ID));
            assert_eq!(u.tokens.last(), Some(&SIL_ID));
            let lexical: Vec<usize> = u.tokens.iter().copied().filter(|&p| p != SIL_ID).collect();
            assert_eq!(phonemize(&u.transcript, &c.lexicon, OovPolicy::Skip).unwrap().phonemes, lexical);
            let spans = Alignment::from_frames(&u.alignment).unwrap();
            assert!(spans.spans().len() <= u.tokens.len());
        }
        assert!(c.text.iter().all(|s| phonemize(s, &c.lexicon, OovPolicy::Skip).is_ok()));
    }

    #[test]
    fn noise_free_frames_repeat_prototypes() {
        let c = make_synthetic(&SynthSpec {
            noise: 0.0,
            ..SynthSpec::default()
        })
        .unwrap();
        for u in &c.train {
            for (t, &p) in u.alignment.iter().enumerate() {
                assert_eq!(u.features.row(t), c.prototypes.row(p));
            }
        }
    }

    #[test]
    fn lexicon_ids_match_alignment_ids() {
        for seed in 0..40 {
            let c = make_synthetic(&SynthSpec { seed, words: 4, ..SynthSpec::default() }).unwrap();
            assert_eq!(c.lexicon.inventory().len(), SynthSpec::default().phonemes + 1, "seed {seed}");
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SynthSpec::default();
        assert_eq!(make_synthetic(&spec).unwrap(), make_synthetic(&spec).unwrap());
        let other = make_synthetic(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(other.train[0].features, make_synthetic(&SynthSpec::default()).unwrap().train[0].features);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(make_synthetic(&SynthSpec {
            phonemes: 30,
            ..SynthSpec::default()
        })
        .is_err());
        assert!(make_synthetic(&SynthSpec {
            phonemes: 1,
            max_word_len: 1,
            min_word_len: 1,
            words: 3,
            ..SynthSpec::default()
        })
        .is_err());
    }
}
