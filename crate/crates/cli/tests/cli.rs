use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tessp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tessp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tessp(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "synth.train_utterances=4",
    "--set",
    "synth.heldout_utterances=2",
    "--set",
    "synth.text_sentences=12",
    "--set",
    "train.steps=6",
    "--set",
    "train.warmup_steps=2",
    "--set",
    "train.ctc_start_step=3",
    "--set",
    "finetune.steps=4",
    "--set",
    "labels.classes=8",
    "--set",
    "labels.classes_iter2=6",
    "--set",
    "decode.beam=4",
    "--set",
    "diag.size=8",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("pass")).count(), 5, "{out}");
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tessp(dir.path(), &["synth", "--set", "train.stepz=3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));

    fs::write(dir.path().join("bad.cfg"), "# comment\nmask.speech_prob = 0.08\nmodel.widht = 3\n").unwrap();
    let out = tessp(dir.path(), &["synth", "--config", "bad.cfg"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn labels_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with_small(&["synth", "--seed", "3", "--out-dir", "corpus"]));
    ok(d, &with_small(&["labels", "--seed", "3", "--manifest", "corpus/train.tsv", "--out-dir", "a"]));
    ok(d, &with_small(&["labels", "--seed", "3", "--manifest", "corpus/train.tsv", "--out-dir", "b"]));
    let a = fs::read(d.join("a/labels.txt")).unwrap();
    assert_eq!(a, fs::read(d.join("b/labels.txt")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &with_small(&["synth", "--out-dir", "corpus"]));
    for f in ["lexicon.txt", "train.tsv", "heldout.tsv", "text.txt", "alignments.txt"] {
        assert!(d.join("corpus").join(f).exists(), "{f}");
    }
    ok(d, &with_small(&["labels", "--manifest", "corpus/train.tsv", "--out-dir", "run"]));
    ok(
        d,
        &with_small(&["duration-model", "--alignments", "corpus/alignments.txt", "--lexicon", "corpus/lexicon.txt", "--out-dir", "run"]),
    );
    ok(
        d,
        &with_small(&[
            "upsample",
            "--text",
            "corpus/text.txt",
            "--lexicon",
            "corpus/lexicon.txt",
            "--durations",
            "run/durations.txt",
            "--out-dir",
            "run",
        ]),
    );
    let up = fs::read_to_string(d.join("run/upsampled.txt")).unwrap();
    assert_eq!(up.lines().count(), 12);
    assert!(up.lines().all(|l| l.starts_with("SIL") && l.ends_with("SIL")));

    ok(
        d,
        &with_small(&[
            "pretrain",
            "--manifest",
            "corpus/train.tsv",
            "--labels",
            "run/labels.txt",
            "--text",
            "corpus/text.txt",
            "--lexicon",
            "corpus/lexicon.txt",
            "--durations",
            "run/durations.txt",
            "--alignments",
            "corpus/alignments.txt",
            "--out-dir",
            "run",
        ]),
    );
    let log = fs::read_to_string(d.join("run/pretrain.log")).unwrap();
    assert_eq!(log.lines().count(), 6);
    for line in log.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 4);
        let step: usize = f[0].parse().unwrap();
        if f[1].contains("ctc") {
            assert!(step >= 3, "{line}");
        }
    }

    ok(d, &with_small(&["relabel", "--manifest", "corpus/train.tsv", "--model", "run/model.ckpt", "--out-dir", "iter2"]));
    let relabels = fs::read_to_string(d.join("iter2/labels.txt")).unwrap();
    let max = relabels
        .lines()
        .flat_map(|l| l.split('\t').nth(1).unwrap().split(' ').map(|x| x.parse::<usize>().unwrap()))
        .max()
        .unwrap();
    assert!(max < 6);

    ok(d, &with_small(&["finetune", "--model", "run/model.ckpt", "--manifest", "corpus/train.tsv", "--out-dir", "run"]));
    assert_eq!(fs::read_to_string(d.join("run/finetune.log")).unwrap().lines().count(), 4);

    ok(d, &with_small(&["decode", "--model", "run/finetuned.ckpt", "--manifest", "corpus/heldout.tsv", "--out-dir", "run"]));
    let hyp = fs::read_to_string(d.join("run/hyp.txt")).unwrap();
    assert_eq!(hyp.lines().count(), 2);
    assert!(hyp.lines().all(|l| l.starts_with("heldout")));

    let mut lm_args = with_small(&[
        "decode",
        "--model",
        "run/finetuned.ckpt",
        "--manifest",
        "corpus/heldout.tsv",
        "--lm-text",
        "corpus/text.txt",
        "--out-dir",
        "lm",
    ]);
    lm_args.extend(["--set", "decode.w1=0.5", "--set", "decode.w2=0.2"]);
    ok(d, &lm_args);
    assert!(fs::read_to_string(d.join("lm/lm.arpa")).unwrap().starts_with("\\data\\"));

    let score = ok(d, &with_small(&["score", "--hyp", "run/hyp.txt", "--manifest", "corpus/heldout.tsv", "--out-dir", "run"]));
    assert!(score.starts_with("WER "));

    ok(
        d,
        &with_small(&[
            "diagnose",
            "--model",
            "run/model.ckpt",
            "--manifest",
            "corpus/train.tsv",
            "--alignments",
            "corpus/alignments.txt",
            "--lexicon",
            "corpus/lexicon.txt",
            "--out-dir",
            "diag",
        ]),
    );
    let names: Vec<String> = fs::read_dir(d.join("diag")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("heatmap_layer") && n.ends_with(".pgm")).count(), 3);
    assert_eq!(names.iter().filter(|n| n.starts_with("projection_layer")).count(), 3);
    let csv = fs::read_to_string(d.join("diag/projection_layer2.csv")).unwrap();
    assert!(csv.starts_with("x,y,modality\n") && csv.contains(",speech") && csv.contains(",text"));
}

#[test]
fn features_from_wav() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(d.join("tone.wav"), spec).unwrap();
    for n in 0..8000 {
        let v = (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16_000.0).sin();
        w.write_sample((v * 12_000.0) as i16).unwrap();
    }
    w.finalize().unwrap();
    fs::write(d.join("wavs.tsv"), "tone\ttone.wav\tA TONE\n").unwrap();
    ok(d, &["features", "--wavs", "wavs.tsv", "--out-dir", "feat"]);
    let manifest = fs::read_to_string(d.join("feat/manifest.tsv")).unwrap();
    let fields: Vec<&str> = manifest.trim_end().split('\t').collect();
    assert_eq!(fields[0], "tone");
    // 0.5 s at a 25 ms window and 10 ms hop.
    assert_eq!(fields[2], "48");
    assert_eq!(fields[3], "A TONE");
    assert!(d.join("feat/feats/tone.fea").exists());
}
