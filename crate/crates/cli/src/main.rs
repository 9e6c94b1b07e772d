use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tessp::decode::{beam_decode, corpus_wer, parse_hypotheses, write_hypotheses, DecodeConfig, NGramLM};
use tessp::diagnostics::{self, AlignedPair, Tap};
use tessp::encoder::{Model, Modality};
use tessp::gradcheck;
use tessp::labeler::{self, compute_mfcc, fit_and_label, relabel_from_hidden, LabelSet, ManifestEntry, MfccConfig};
use tessp::paired::{frame_phonemes, parse_alignments};
use tessp::pipeline::{new_model, stream, STREAM_FINETUNE, STREAM_LABELS, STREAM_TRAIN};
use tessp::synth::make_synthetic;
use tessp::textpipe::{estimate_duration_model, insert_sil, phonemize, upsample, CharVocab, DurationModel, Lexicon};
use tessp::trainer::{char_log_probs, format_log, prepare_text, Config, Finetuner, LabeledUtt, PretrainData, SpeechUtt, Trainer};

#[derive(Parser)]
#[command(name = "tessp", version, about = "Joint speech-text pre-training on small corpora")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value config file applied on top of the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=200`. Repeatable; later wins.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Master seed; replaces `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth,
    /// MFCC features from a list of `utt<TAB>wav[<TAB>transcript]` lines.
    Features {
        #[arg(long)]
        wavs: PathBuf,
    },
    /// K-means pseudo-labels over manifest features.
    Labels {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Phoneme duration statistics from frame alignments.
    DurationModel {
        #[arg(long)]
        alignments: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
    },
    /// Frame-rate phoneme sequences for a text corpus.
    Upsample {
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        durations: PathBuf,
    },
    /// Joint pre-training.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        durations: PathBuf,
        /// Frame alignments of the paired utterances.
        #[arg(long)]
        alignments: Option<PathBuf>,
        /// Continue from a checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Second-iteration labels from a pre-trained model's hidden states.
    Relabel {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// CTC fine-tuning on transcribed utterances.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Transcribe a manifest.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Character LM file; trained from `--lm-text` when absent.
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        lm_text: Option<PathBuf>,
    },
    /// Word error rate of a hypothesis file against manifest transcripts.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Similarity heat maps and projections.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        alignments: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck,
}

fn load_config(common: &Common) -> Result<Config> {
    let mut config = Config::default();
    if let Some(path) = &common.config {
        let text = read(path)?;
        config.apply(&text).with_context(|| format!("config {}", path.display()))?;
    }
    for assignment in &common.set {
        config.apply_override(assignment)?;
    }
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

struct Utterance {
    entry: ManifestEntry,
    features: tessp::compute::Tensor,
}

/// Manifest entries with features loaded; relative paths resolve against
/// the manifest's directory.
fn load_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = labeler::parse_manifest(&read(path)?).with_context(|| format!("manifest {}", path.display()))?;
    if entries.is_empty() {
        bail!("manifest {} is empty", path.display());
    }
    entries
        .into_iter()
        .map(|entry| {
            let file = if entry.features.is_absolute() {
                entry.features.clone()
            } else {
                base.join(&entry.features)
            };
            let features = labeler::load_features(&file).with_context(|| format!("features of {}", entry.utt))?;
            if features.rows() != entry.frames {
                bail!("{}: manifest says {} frames, file has {}", entry.utt, entry.frames, features.rows());
            }
            Ok(Utterance { entry, features })
        })
        .collect()
}

fn feature_map(utts: &[Utterance]) -> BTreeMap<String, tessp::compute::Tensor> {
    utts.iter().map(|u| (u.entry.utt.clone(), u.features.clone())).collect()
}

fn labeled(utts: &[Utterance]) -> Result<Vec<LabeledUtt>> {
    utts.iter()
        .map(|u| {
            let t = u.entry.transcript.as_deref().with_context(|| format!("{} has no transcript", u.entry.utt))?;
            Ok(LabeledUtt::new(&u.entry.utt, u.features.clone(), t)?)
        })
        .collect()
}

fn load_lexicon(path: &Path) -> Result<Lexicon> {
    Lexicon::parse(&read(path)?).with_context(|| format!("lexicon {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("checkpoint {}", path.display()))
}

fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let spec = reader.spec();
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = f64::from(1u32 << (spec.bits_per_sample - 1));
            reader.samples::<i32>().map(|s| s.map(|v| f64::from(v) / scale)).collect::<Result<_, _>>()?
        }
    };
    let channels = usize::from(spec.channels);
    let mono = raw.chunks(channels).map(|c| c.iter().sum::<f64>() / channels as f64).collect();
    Ok((mono, spec.sample_rate))
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.common)?;
    let seed = config.train.seed;
    let out = &cli.common.out_dir;
    match cli.command {
        Command::Synth => {
            let corpus = make_synthetic(&config.synth.spec(seed))?;
            corpus.write(out)?;
            println!("wrote {} train, {} heldout, {} text sentences to {}", corpus.train.len(), corpus.heldout.len(), corpus.text.len(), out.display());
        }
        Command::Features { wavs } => {
            let base = wavs.parent().unwrap_or(Path::new("."));
            let mut entries = Vec::new();
            for (n, line) in read(&wavs)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                if !(2..=3).contains(&fields.len()) {
                    bail!("{} line {}: expected `utt<TAB>wav[<TAB>transcript]`", wavs.display(), n + 1);
                }
                let wav = base.join(fields[1]);
                let (samples, rate) = read_wav(&wav)?;
                let cfg = MfccConfig {
                    sample_rate: rate,
                    ..MfccConfig::default()
                };
                let feats = compute_mfcc(&samples, &cfg).with_context(|| format!("features of {}", fields[0]))?;
                let rel = Path::new("feats").join(format!("{}.fea", fields[0]));
                fs::create_dir_all(out.join("feats"))?;
                labeler::save_features(&out.join(&rel), &feats)?;
                entries.push(ManifestEntry {
                    utt: fields[0].to_string(),
                    features: rel,
                    frames: feats.rows(),
                    transcript: fields.get(2).map(|s| s.to_string()),
                });
            }
            write(out, "manifest.tsv", labeler::write_manifest(&entries))?;
            println!("wrote features for {} utterances", entries.len());
        }
        Command::Labels { manifest } => {
            let utts = load_manifest(&manifest)?;
            let mut rng = stream(seed, STREAM_LABELS);
            let (fit, labels) = fit_and_label(&feature_map(&utts), config.labels.classes, config.labels.iterations, &mut rng)?;
            write(out, "labels.txt", labeler::write_labels(&labels))?;
            println!("k-means: {} classes, {} iterations, inertia {}", fit.codebook.classes(), fit.iterations, fit.inertia.last().copied().unwrap_or(0.0));
        }
        Command::DurationModel { alignments, lexicon } => {
            let lex = load_lexicon(&lexicon)?;
            let aligned = parse_alignments(&read(&alignments)?, lex.inventory())?;
            let frames: Vec<Vec<usize>> = aligned.values().map(frame_phonemes).collect();
            let model = estimate_duration_model(&frames, lex.inventory().len(), config.text.duration_cutoff)?;
            write(out, "durations.txt", model.to_text(lex.inventory()))?;
            println!("duration model from {} utterances; longest retained run {}", frames.len(), model.max_retained_length());
        }
        Command::Upsample { text, lexicon, durations } => {
            let lex = load_lexicon(&lexicon)?;
            let model = DurationModel::parse(&read(&durations)?, lex.inventory())?;
            let mut rng = stream(seed, STREAM_TRAIN);
            let mut lines = String::new();
            for line in read(&text)?.lines().filter(|l| !l.trim().is_empty()) {
                let ph = phonemize(line, &lex, config.text.oov)?;
                let up = upsample(&insert_sil(&ph, config.text.sil_rate, &mut rng)?, &model, &mut rng);
                let names: Vec<&str> = up.frames.iter().map(|&p| lex.inventory().name(p).unwrap_or("?")).collect();
                lines.push_str(&names.join(" "));
                lines.push('\n');
            }
            write(out, "upsampled.txt", lines)?;
        }
        Command::Pretrain {
            manifest,
            labels,
            text,
            lexicon,
            durations,
            alignments,
            init,
        } => {
            let utts = load_manifest(&manifest)?;
            let lex = load_lexicon(&lexicon)?;
            let label_set: LabelSet = labeler::parse_labels(&read(&labels)?)?;
            let aligned = match &alignments {
                Some(p) => parse_alignments(&read(p)?, lex.inventory())?,
                None => BTreeMap::new(),
            };
            let classes = label_set.values().flatten().max().map_or(0, |m| m + 1);
            let classes = classes.max(config.labels.classes);
            let speech = utts
                .iter()
                .map(|u| {
                    Ok(SpeechUtt {
                        id: u.entry.utt.clone(),
                        features: u.features.clone(),
                        labels: label_set.get(&u.entry.utt).cloned().with_context(|| format!("no labels for {}", u.entry.utt))?,
                        alignment: aligned.get(&u.entry.utt).cloned(),
                        transcript: u.entry.transcript.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let lines: Vec<String> = read(&text)?.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
            let (items, dropped) = prepare_text(&lines, &lex, &config);
            if dropped > 0 {
                eprintln!("warning: dropped {dropped} text sentences (OOV or unsupported characters)");
            }
            let dur = DurationModel::parse(&read(&durations)?, lex.inventory())?;
            let data = PretrainData::new(speech, items, dur, config.paired.hours)?;
            let model = match &init {
                Some(p) => {
                    let mut m = load_model(p)?;
                    if m.config.codewords != classes {
                        m.reset_codewords(classes, &mut stream(seed, STREAM_TRAIN));
                    }
                    m
                }
                None => new_model(&config, lex.inventory().len(), classes, seed)?,
            };
            let mut trainer = Trainer::new(config.clone(), model, seed ^ STREAM_TRAIN)?;
            trainer.pretrain(&data, |_| {})?;
            write(out, "pretrain.log", format_log(&trainer.log))?;
            trainer.model.save(&out.join("model.ckpt"))?;
            let last = trainer.log.last().map_or(f64::NAN, |l| l.loss);
            println!("pre-trained {} steps on {} paired utterances; last loss {last:.4}", trainer.step, data.paired.len());
        }
        Command::Relabel { manifest, model } => {
            let utts = load_manifest(&manifest)?;
            let m = load_model(&model)?;
            let layer = config.labels.layer.resolve(&m.config);
            let mut rng = stream(seed, STREAM_LABELS);
            let (_, labels) = relabel_from_hidden(&m, &feature_map(&utts), layer, config.labels.classes_iter2, config.labels.iterations, &mut rng)?;
            write(out, "labels.txt", labeler::write_labels(&labels))?;
            println!("relabelled from layer {layer} into {} classes", config.labels.classes_iter2);
        }
        Command::Finetune { model, manifest } => {
            let data = labeled(&load_manifest(&manifest)?)?;
            let mut ft = Finetuner::new(config.clone(), load_model(&model)?, seed ^ STREAM_FINETUNE)?;
            ft.finetune(&data, |_| {})?;
            write(out, "finetune.log", format_log(&ft.log))?;
            ft.model.save(&out.join("finetuned.ckpt"))?;
            println!("fine-tuned {} steps", ft.step);
        }
        Command::Decode { model, manifest, lm, lm_text } => {
            let m = load_model(&model)?;
            let utts = load_manifest(&manifest)?;
            let chars = CharVocab::default();
            let lm = match (lm, lm_text) {
                (Some(p), _) => Some(NGramLM::parse(&read(&p)?, &chars)?),
                (None, Some(p)) => {
                    let corpus = read(&p)?
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .filter_map(|l| chars.encode(l).ok())
                        .collect::<Vec<_>>();
                    let lm = NGramLM::train(&corpus, chars.len(), config.decode.lm_order, config.decode.lm_k)?;
                    write(out, "lm.arpa", lm.to_text(&chars))?;
                    Some(lm)
                }
                (None, None) if config.decode.w1 != 0.0 => bail!("decode.w1 is non-zero but no --lm or --lm-text was given"),
                (None, None) => None,
            };
            let cfg = DecodeConfig {
                beam: config.decode.beam,
                w1: config.decode.w1,
                w2: config.decode.w2,
            };
            let mut hyps = Vec::new();
            for u in &utts {
                let lp = char_log_probs(&m, &u.features, config.finetune.char_layer)?;
                let best = beam_decode(&lp, lm.as_ref(), &cfg)?;
                hyps.push((u.entry.utt.clone(), chars.decode(&best.tokens)));
            }
            write(out, "hyp.txt", write_hypotheses(hyps.iter().map(|(u, h)| (u.as_str(), h.as_str()))))?;
            println!("decoded {} utterances", hyps.len());
        }
        Command::Score { hyp, manifest } => {
            let hyps = parse_hypotheses(&read(&hyp)?)?;
            let entries = labeler::parse_manifest(&read(&manifest)?)?;
            let mut pairs = Vec::new();
            for e in &entries {
                let reference = e.transcript.as_deref().with_context(|| format!("{} has no transcript", e.utt))?;
                let h = hyps.get(&e.utt).with_context(|| format!("no hypothesis for {}", e.utt))?;
                pairs.push((h.as_str(), reference));
            }
            let w = corpus_wer(pairs)?;
            write(out, "score.txt", format!("wer\t{w}\nutterances\t{}\n", entries.len()))?;
            println!("WER {:.2}% over {} utterances", 100.0 * w, entries.len());
        }
        Command::Diagnose {
            model,
            manifest,
            alignments,
            lexicon,
        } => {
            let m = load_model(&model)?;
            let utts = load_manifest(&manifest)?;
            let lex = load_lexicon(&lexicon)?;
            let aligned = parse_alignments(&read(&alignments)?, lex.inventory())?;
            let mut pairs = Vec::new();
            for u in &utts {
                if let Some(a) = aligned.get(&u.entry.utt) {
                    if a.frames() == u.features.rows() {
                        pairs.push(AlignedPair {
                            features: &u.features,
                            alignment: a,
                        });
                    }
                }
            }
            if pairs.is_empty() {
                bail!("no manifest utterance has a matching alignment");
            }
            for tap in Tap::ALL {
                let k = tap.index(&m, Modality::Speech);
                let maps = diagnostics::pair_heatmaps(&m, &pairs, tap)?;
                let agg = diagnostics::aggregate_heatmaps(&maps, config.diag.size, config.diag.size)?;
                write(out, &format!("heatmap_layer{k}.csv"), diagnostics::to_csv(&agg))?;
                write(out, &format!("heatmap_layer{k}.pgm"), diagnostics::to_pgm(&agg))?;
                let (states, labels) = diagnostics::modality_states(&m, &pairs, tap)?;
                let points = diagnostics::project_2d(&states, &labels)?;
                write(out, &format!("projection_layer{k}.csv"), diagnostics::projection_csv(&points))?;
                println!("layer {k} ({tap:?}): diagonal dominance {:.4}", diagnostics::diagonal_dominance(&agg, config.diag.band));
            }
        }
        Command::Gradcheck => {
            let mut ok = true;
            for (name, report) in gradcheck::run_all(seed)? {
                let status = if report.passed() { "pass" } else { "FAIL" };
                println!("{status}\t{name}\tmax relative error {:.3e}", report.max_rel_error());
                ok &= report.passed();
            }
            if !ok {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::FAILURE
        }
    }
}
