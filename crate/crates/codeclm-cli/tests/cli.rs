//! End-to-end runs of the `codeclm` binary: artifact reproducibility,
//! resume equivalence, flag mapping, and exit-code contracts.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use codeclm::align::read_corpus;
use codeclm::train::{lr_at, StepMetrics, TrainConfig};

/// Small enough that every command in here finishes in well under a
/// second; v=32 still fits the 8-symbol 2-speaker 2-codebook language.
const TINY: &str = r#"
[toy]
alphabet_size = 8
frames_per_symbol = 1
num_speakers = 2

[codec]
num_codebooks = 2
vocab_size = 32

[data]
train = 10
val = 3
test = 4
min_symbols = 2
max_symbols = 5

[model]
layers = 1
dim = 16
heads = 2
ffn_mult = 2
max_seq_len = 64

[train]
total_steps = 6
warmup_steps = 2
micro_batch_size = 2
codebook_weights = [1.0, 0.8]

[eval]
edit_items = 3

[ablation]
steps = 2
items = 2
"#;

struct Workbench {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Workbench {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        Workbench { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_codeclm"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.cmd(args);
        assert!(
            out.status.success(),
            "command {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn gen_data(&self) {
        self.ok(&["--out", "data", "gen-data"]);
    }

    fn train(&self, out: &str) {
        let data = self.path("data");
        self.ok(&["--out", out, "train", "--data", data.to_str().unwrap()]);
    }
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process was signalled")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn print_config_roundtrips_and_rejects_unknown_keys() {
    let wb = Workbench::new();
    let first = wb.ok(&["print-config"]);
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.contains("alphabet_size = 8"));
    assert!(text.contains("total_steps = 6"));

    // feeding the printed config back is a fixed point
    let echoed = wb.path("echoed.toml");
    fs::write(&echoed, &text).unwrap();
    let second = Command::new(env!("CARGO_BIN_EXE_codeclm"))
        .args(["--config", echoed.to_str().unwrap(), "print-config"])
        .output()
        .unwrap();
    assert_eq!(String::from_utf8(second.stdout).unwrap(), text);

    fs::write(wb.path("bad.toml"), "[toy]\nalphabett = 8\n").unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_codeclm"))
        .args(["--config", wb.path("bad.toml").to_str().unwrap(), "print-config"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&bad), 2);
}

#[test]
fn gen_data_reproducible_sized_and_disjoint() {
    let wb = Workbench::new();
    wb.ok(&["--out", "a", "gen-data"]);
    wb.ok(&["--out", "b", "gen-data"]);
    for name in ["train.corpus", "val.corpus", "test.corpus"] {
        let a = fs::read(wb.path("a").join(name)).unwrap();
        let b = fs::read(wb.path("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    let mut keys: HashSet<(u32, Vec<u32>)> = HashSet::new();
    let mut sizes = Vec::new();
    for name in ["train.corpus", "val.corpus", "test.corpus"] {
        let file = fs::File::open(wb.path("a").join(name)).unwrap();
        let corpus = read_corpus(&mut std::io::BufReader::new(file)).unwrap();
        sizes.push(corpus.utterances.len());
        for utt in &corpus.utterances {
            assert!(
                keys.insert((utt.speaker_id(), utt.symbols())),
                "duplicate utterance across splits"
            );
        }
    }
    assert_eq!(sizes, vec![10, 3, 4]);

    let manifest = read_json(&wb.path("a").join("data-manifest.json"));
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["config"]["data"]["seed"], 7);
    assert!(manifest["version"].is_string());

    // a different seed changes the draw
    wb.ok(&["--out", "c", "gen-data", "--seed", "8"]);
    let a = fs::read(wb.path("a/train.corpus")).unwrap();
    let c = fs::read(wb.path("c/train.corpus")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn train_metrics_match_schedule_and_reruns_are_byte_identical() {
    let wb = Workbench::new();
    wb.gen_data();
    wb.train("run1");
    wb.train("run2");
    assert_eq!(
        fs::read(wb.path("run1/checkpoint.clm")).unwrap(),
        fs::read(wb.path("run2/checkpoint.clm")).unwrap()
    );
    assert_eq!(
        fs::read(wb.path("run1/metrics.jsonl")).unwrap(),
        fs::read(wb.path("run2/metrics.jsonl")).unwrap()
    );

    let text = fs::read_to_string(wb.path("run1/metrics.jsonl")).unwrap();
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["kind"], "run-header");
    assert_eq!(header["config"]["train"]["total_steps"], 6);

    let cfg = TrainConfig {
        total_steps: 6,
        warmup_steps: 2,
        micro_batch_size: 2,
        codebook_weights: vec![1.0, 0.8],
        ..TrainConfig::default()
    };
    let steps: Vec<StepMetrics> =
        lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(steps.len(), 6);
    for (i, m) in steps.iter().enumerate() {
        assert_eq!(m.step, i as u64 + 1);
        assert_eq!(m.lr, lr_at(&cfg, m.step), "logged lr drifts from the schedule");
        assert!(m.loss.is_finite());
    }

    let manifest = read_json(&wb.path("run1/train-manifest.json"));
    assert_eq!(manifest["report"]["completed_steps"], 6);
    assert_eq!(manifest["report"]["finished"], true);
    assert_eq!(manifest["config"]["train"]["seed"], 0);
}

#[test]
fn interrupted_training_resumes_to_identical_artifacts() {
    let wb = Workbench::new();
    wb.gen_data();
    wb.train("straight");

    let data = wb.path("data");
    wb.ok(&["--out", "split", "train", "--data", data.to_str().unwrap(), "--until", "3"]);
    let manifest = read_json(&wb.path("split/train-manifest.json"));
    assert_eq!(manifest["report"]["completed_steps"], 3);
    assert_eq!(manifest["report"]["finished"], false);

    let ckpt = wb.path("split/checkpoint.clm");
    wb.ok(&[
        "--out",
        "split",
        "train",
        "--data",
        data.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(wb.path("straight/checkpoint.clm")).unwrap(),
        fs::read(wb.path("split/checkpoint.clm")).unwrap()
    );
    assert_eq!(
        fs::read(wb.path("straight/metrics.jsonl")).unwrap(),
        fs::read(wb.path("split/metrics.jsonl")).unwrap()
    );
}

#[test]
fn eval_reports_schema_and_near_total_error_for_barely_trained_model() {
    let wb = Workbench::new();
    wb.gen_data();
    wb.train("run");
    let out = wb.ok(&[
        "--out",
        "run",
        "eval",
        "--checkpoint",
        wb.path("run/checkpoint.clm").to_str().unwrap(),
        "--data",
        wb.path("data").to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("synthesis SER"));

    let report = read_json(&wb.path("run/eval-report.json"));
    let synth = &report["report"]["synthesis"];
    assert_eq!(synth["items"].as_array().unwrap().len(), 4);
    for key in ["symbol_error_rate", "speaker_match_rate"] {
        assert!(synth[key].is_number(), "missing {key}");
    }
    let stops = &synth["stops"];
    assert_eq!(
        stops["end_token"].as_u64().unwrap() + stops["max_columns"].as_u64().unwrap(),
        4
    );
    // six optimizer steps leave the model near chance
    assert!(synth["symbol_error_rate"].as_f64().unwrap() > 0.3);
    let editing = &report["report"]["editing"];
    assert!(editing["middle_symbol_error_rate"].is_number());
    assert_eq!(editing["context_intact_rate"], 1.0);
}

#[test]
fn tts_flags_map_onto_sampler_config() {
    let wb = Workbench::new();
    wb.gen_data();
    wb.train("run");
    let ckpt = wb.path("run/checkpoint.clm");
    wb.ok(&[
        "--out",
        "tts",
        "tts",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--text",
        "3,1,4",
        "--speaker",
        "1",
        "--top-k",
        "7",
        "--top-p",
        "0.9",
        "--temperature",
        "0.5",
        "--seed",
        "11",
        "--max-new-columns",
        "40",
    ]);
    let result = read_json(&wb.path("tts/tts-result.json"));
    let sampler = &result["config"]["sampler"];
    assert_eq!(sampler["top_k"], 7);
    assert_eq!(sampler["top_p"], 0.9);
    assert_eq!(sampler["temperature"], 0.5);
    assert_eq!(sampler["seed"], 11);
    assert_eq!(sampler["max_new_columns"], 40);
    assert_eq!(result["report"]["text"], serde_json::json!([3, 1, 4]));
    assert_eq!(result["report"]["speaker"]["id"], 1);
    assert!(result["report"]["decoded"]["symbols"].is_array());

    // invalid sampler values and unknown symbols are usage errors
    let bad_k = wb.cmd(&["--out", "x", "tts", "--checkpoint", ckpt.to_str().unwrap(), "--text", "1", "--top-k", "0"]);
    assert_eq!(exit_code(&bad_k), 2);
    let bad_sym = wb.cmd(&["--out", "x", "tts", "--checkpoint", ckpt.to_str().unwrap(), "--text", "99"]);
    assert_eq!(exit_code(&bad_sym), 2);
    let bad_flag = wb.cmd(&["--out", "x", "tts", "--checkpoint", ckpt.to_str().unwrap(), "--text", "1", "--nucleus", "0.4"]);
    assert_eq!(exit_code(&bad_flag), 2);
    let no_text = wb.cmd(&["--out", "x", "tts", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(exit_code(&no_text), 2);
}

#[test]
fn edit_splices_around_untouched_context() {
    let wb = Workbench::new();
    wb.gen_data();
    wb.train("run");
    let ckpt = wb.path("run/checkpoint.clm");
    let corpus = wb.path("data/test.corpus");

    wb.ok(&[
        "--out",
        "ins",
        "edit",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--index",
        "1",
        "--span",
        "1..1",
        "--new-text",
        "5,2",
    ]);
    let ins = read_json(&wb.path("ins/edit-result.json"));
    assert_eq!(ins["report"]["context_intact"], true);
    let source: Vec<u64> = ins["report"]["source_symbols"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    let edited: Vec<u64> = ins["report"]["edited_symbols"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    let mut expect = source.clone();
    expect.splice(1..1, [5, 2]);
    assert_eq!(edited, expect, "insertion reference is a splice of the source");

    // deleting the first unit, empty replacement text
    wb.ok(&[
        "--out",
        "del",
        "edit",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--span",
        "0..1",
        "--new-text",
        "",
    ]);
    let del = read_json(&wb.path("del/edit-result.json"));
    assert_eq!(del["report"]["context_intact"], true);

    let bad_span = wb.cmd(&[
        "--out",
        "x",
        "edit",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--span",
        "0..99",
    ]);
    assert_eq!(exit_code(&bad_span), 2);
}

#[test]
fn ablation_report_pairs_both_layouts() {
    let wb = Workbench::new();
    wb.gen_data();
    wb.ok(&["--out", "ab", "ablate-reordering", "--data", wb.path("data").to_str().unwrap()]);
    let report = read_json(&wb.path("ab/ablation-report.json"));
    let arms = &report["report"];
    assert_eq!(arms["reordered"]["layout"], "reordered");
    assert_eq!(arms["natural"]["layout"], "natural");
    assert_eq!(arms["reordered"]["steps"], 2);
    assert_eq!(arms["natural"]["steps"], 2);
    let shape_a = arms["reordered"]["layout_shape"].as_str().unwrap();
    let shape_b = arms["natural"]["layout_shape"].as_str().unwrap();
    assert_ne!(shape_a, shape_b);
    assert!(shape_a.contains("elem end"));
    assert!(!shape_b.contains("elem end"), "natural layout must not carry the end marker");
    assert_eq!(arms["item_count"], 2);
}

#[test]
fn runtime_failures_exit_3() {
    let wb = Workbench::new();
    wb.gen_data();
    let missing = wb.cmd(&[
        "--out",
        "x",
        "eval",
        "--checkpoint",
        "nope.clm",
        "--data",
        wb.path("data").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&missing), 3);

    let no_data = wb.cmd(&["--out", "x", "train", "--data", "absent-dir"]);
    assert_eq!(exit_code(&no_data), 3);
}
