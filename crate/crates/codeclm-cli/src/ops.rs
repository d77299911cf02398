//! Command implementations. Each writes its artifacts under one output
//! directory; progress chatter goes to stderr so the files themselves
//! stay byte-reproducible under a fixed seed.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde_json::json;

use codeclm::align::{read_corpus, write_corpus, Corpus};
use codeclm::codec::CodecSpec;
use codeclm::infer::{edit, tts, SamplerConfig};
use codeclm::layout::SpeakerInput;
use codeclm::model::{load_checkpoint, Model, Real};
use codeclm::pipeline::{
    eval_edits, eval_tts, gen_disjoint_corpora, make_edit_items, run_reordering_ablation,
    AblationSetup, DecodeSummary,
};
use codeclm::toy::decode;
use codeclm::train::{LayoutKind, TrainConfig, Trainer};

use crate::config::{config_err, runtime_err, CliError, Dtype, VariantName, WorkbenchConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Steps between stderr progress lines while training.
const PROGRESS_EVERY: u64 = 500;

/// Standard artifact envelope: every file a command writes records the
/// tool version and the full effective configuration (seeds included).
fn envelope(command: &str, cfg: &WorkbenchConfig, payload: serde_json::Value) -> serde_json::Value {
    json!({
        "tool": "codeclm",
        "version": TOOL_VERSION,
        "command": command,
        "config": cfg,
        "report": payload,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime_err)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn read_corpus_file(path: &Path) -> Result<Corpus, CliError> {
    let file =
        File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    read_corpus(&mut BufReader::new(file))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// The language, checkpoint, and corpus must all speak the same codec;
/// mixing artifacts from different configs is a config error.
fn check_spec(context: &str, expected: &CodecSpec, got: &CodecSpec) -> Result<(), CliError> {
    if expected != got {
        return Err(CliError::Config(format!(
            "{context} uses {}x{} codec tokens, configuration says {}x{}",
            got.num_codebooks, got.vocab_size, expected.num_codebooks, expected.vocab_size
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data

pub fn gen_data(cfg: &WorkbenchConfig, out: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    let toy = cfg.toy()?;
    let splits = gen_disjoint_corpora(&toy, &cfg.corpus_config(), cfg.split_sizes(), cfg.data.seed)
        .map_err(runtime_err)?;
    ensure_dir(out)?;
    for (name, corpus) in
        [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)]
    {
        let mut corpus = corpus.clone();
        if let Some(meta) = corpus.meta.as_object_mut() {
            meta.insert("tool_version".into(), json!(TOOL_VERSION));
        }
        let path = out.join(format!("{name}.corpus"));
        let file =
            File::create(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        write_corpus(&mut w, &corpus).map_err(runtime_err)?;
        w.flush().map_err(runtime_err)?;
    }
    write_json(
        &out.join("data-manifest.json"),
        &envelope(
            "gen-data",
            cfg,
            json!({
                "files": ["train.corpus", "val.corpus", "test.corpus"],
                "sizes": { "train": cfg.data.train, "val": cfg.data.val, "test": cfg.data.test },
                "seed": cfg.data.seed,
            }),
        ),
    )?;
    println!(
        "wrote {}/{}/{} train/val/test utterances under {}",
        cfg.data.train,
        cfg.data.val,
        cfg.data.test,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

pub struct TrainArgs {
    pub data: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop after this optimizer step even if the schedule continues;
    /// a later resume picks up exactly where this run left off.
    pub until: Option<u64>,
}

pub fn train(cfg: &WorkbenchConfig, out: &Path, args: &TrainArgs) -> Result<(), CliError> {
    match cfg.model.dtype {
        Dtype::F32 => train_t::<f32>(cfg, out, args),
        Dtype::F64 => train_t::<f64>(cfg, out, args),
    }
}

fn train_t<T: Real>(cfg: &WorkbenchConfig, out: &Path, args: &TrainArgs) -> Result<(), CliError> {
    cfg.validate()?;
    let corpus = read_corpus_file(&args.data.join("train.corpus"))?;
    check_spec("training corpus", &cfg.codec_spec()?, &corpus.spec)?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let file = File::open(path)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            Trainer::<T>::load(&mut BufReader::new(file)).map_err(runtime_err)?
        }
        None => {
            let model = Model::<T>::new(cfg.model_config()?).map_err(config_err)?;
            Trainer::new(model, cfg.train.clone()).map_err(config_err)?
        }
    };
    check_spec("checkpoint", &cfg.codec_spec()?, &trainer.model().config.codec)?;

    // A resumed run is governed by the checkpoint's embedded schedule;
    // artifacts record that schedule, not the file's.
    let effective = WorkbenchConfig { train: trainer.config().clone(), ..cfg.clone() };

    ensure_dir(out)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = if args.resume.is_some() && metrics_path.exists() {
        let file = OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", metrics_path.display())))?;
        BufWriter::new(file)
    } else {
        let file = File::create(&metrics_path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", metrics_path.display())))?;
        let mut w = BufWriter::new(file);
        let header = json!({
            "kind": "run-header",
            "tool": "codeclm",
            "version": TOOL_VERSION,
            "seed": effective.train.seed,
            "config": effective,
        });
        writeln!(w, "{}", serde_json::to_string(&header).map_err(runtime_err)?)
            .map_err(runtime_err)?;
        w
    };

    let start = std::time::Instant::now();
    let until = args.until.unwrap_or(u64::MAX);
    let mut last_loss = f64::NAN;
    let mut io_err: Option<std::io::Error> = None;
    let run = trainer.run_steps(&corpus.utterances, until, &mut |m| {
        last_loss = m.loss;
        if io_err.is_none() {
            if let Err(e) = serde_json::to_string(m)
                .map_err(std::io::Error::other)
                .and_then(|line| writeln!(metrics, "{line}"))
            {
                io_err = Some(e);
            }
        }
        if m.step % PROGRESS_EVERY == 0 {
            eprintln!("step {} loss {:.4} lr {:.6}", m.step, m.loss, m.lr);
        }
    });
    metrics.flush().map_err(runtime_err)?;
    run.map_err(runtime_err)?;
    if let Some(e) = io_err {
        return Err(CliError::Runtime(format!("{}: {e}", metrics_path.display())));
    }

    let ckpt_path = out.join("checkpoint.clm");
    let file = File::create(&ckpt_path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", ckpt_path.display())))?;
    let mut w = BufWriter::new(file);
    trainer.save(&mut w).map_err(runtime_err)?;
    w.flush().map_err(runtime_err)?;

    write_json(
        &out.join("train-manifest.json"),
        &envelope(
            "train",
            &effective,
            json!({
                "completed_steps": trainer.completed_steps(),
                "finished": trainer.is_finished(),
                "final_loss": last_loss,
                "resumed_from": args.resume.as_ref().map(|p| p.display().to_string()),
                "checkpoint": "checkpoint.clm",
                "metrics": "metrics.jsonl",
            }),
        ),
    )?;
    eprintln!("trained to step {} in {:.1}s", trainer.completed_steps(), start.elapsed().as_secs_f64());
    println!(
        "step {} loss {:.4}{}",
        trainer.completed_steps(),
        last_loss,
        if trainer.is_finished() { "" } else { " (schedule not finished)" }
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub split: String,
}

pub fn eval(cfg: &WorkbenchConfig, out: &Path, args: &EvalArgs) -> Result<(), CliError> {
    match cfg.model.dtype {
        Dtype::F32 => eval_t::<f32>(cfg, out, args),
        Dtype::F64 => eval_t::<f64>(cfg, out, args),
    }
}

/// A trainer checkpoint remembers which layout it was trained on; score
/// editing with the same layout unless the meta lacks one.
fn layout_from_meta(meta: &serde_json::Value, fallback: LayoutKind) -> LayoutKind {
    meta.get("train_config")
        .and_then(|c| c.get("layout_kind"))
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or(fallback)
}

fn eval_t<T: Real>(cfg: &WorkbenchConfig, out: &Path, args: &EvalArgs) -> Result<(), CliError> {
    cfg.validate()?;
    let toy = cfg.toy()?;
    let file = File::open(&args.checkpoint)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.checkpoint.display())))?;
    let (model, meta, _opt) =
        load_checkpoint::<T, _>(&mut BufReader::new(file)).map_err(runtime_err)?;
    check_spec("checkpoint", &toy.spec, &model.config.codec)?;
    let corpus = read_corpus_file(&args.data.join(format!("{}.corpus", args.split)))?;
    check_spec("eval corpus", &toy.spec, &corpus.spec)?;

    let synthesis = eval_tts(&model, &toy, &corpus, &cfg.tts_eval()).map_err(runtime_err)?;
    let editing = if cfg.eval.edit_items > 0 {
        let items = make_edit_items(&toy, &corpus, cfg.eval.edit_items, cfg.eval.item_seed)
            .map_err(runtime_err)?;
        let layout = layout_from_meta(&meta, cfg.train.layout_kind);
        Some(
            eval_edits(&model, &toy, &corpus, &items, &cfg.edit_eval(), layout)
                .map_err(runtime_err)?,
        )
    } else {
        None
    };

    ensure_dir(out)?;
    write_json(
        &out.join("eval-report.json"),
        &envelope(
            "eval",
            cfg,
            json!({
                "split": args.split,
                "items": corpus.utterances.len(),
                "synthesis": synthesis,
                "editing": editing,
            }),
        ),
    )?;
    println!(
        "synthesis SER {:.4} speaker-match {:.4} stops end={} cap={}",
        synthesis.symbol_error_rate,
        synthesis.speaker_match_rate,
        synthesis.stops.end_token,
        synthesis.stops.max_columns
    );
    if let Some(e) = &editing {
        println!(
            "editing SER {:.4} context-intact {:.4} stops end={} cap={}",
            e.middle_symbol_error_rate,
            e.context_intact_rate,
            e.stops.end_token,
            e.stops.max_columns
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// tts

pub struct TtsArgs {
    pub checkpoint: PathBuf,
    pub text: Vec<u32>,
    pub speaker: Option<u32>,
    pub variant: Option<VariantName>,
    pub prompt_corpus: Option<PathBuf>,
    pub prompt_index: usize,
    pub prompt_units: Option<usize>,
    pub sampler: SamplerConfig,
}

fn decode_json(summary: &DecodeSummary) -> serde_json::Value {
    json!({
        "symbols": summary.symbols,
        "speaker_id": summary.speaker_id,
        "valid_frames": summary.frame_valid.iter().filter(|v| **v).count(),
        "total_frames": summary.frame_valid.len(),
    })
}

fn speaker_payload(spk: &SpeakerInput) -> serde_json::Value {
    match spk {
        SpeakerInput::Id(id) => json!({ "id": id }),
        SpeakerInput::Vector(v) => json!({ "vector": v }),
    }
}

pub fn run_tts(cfg: &WorkbenchConfig, out: &Path, args: &TtsArgs) -> Result<(), CliError> {
    match cfg.model.dtype {
        Dtype::F32 => tts_t::<f32>(cfg, out, args),
        Dtype::F64 => tts_t::<f64>(cfg, out, args),
    }
}

fn tts_t<T: Real>(cfg: &WorkbenchConfig, out: &Path, args: &TtsArgs) -> Result<(), CliError> {
    let cfg = WorkbenchConfig { sampler: args.sampler.clone(), ..cfg.clone() };
    cfg.validate()?;
    let toy = cfg.toy()?;
    if args.text.is_empty() {
        return Err(CliError::Config("synthesis needs a non-empty text".into()));
    }
    if let Some(bad) = args.text.iter().find(|s| **s >= toy.alphabet_size) {
        return Err(CliError::Config(format!(
            "symbol {bad} outside the alphabet 0..{}",
            toy.alphabet_size
        )));
    }
    let file = File::open(&args.checkpoint)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.checkpoint.display())))?;
    let (model, _meta, _opt) =
        load_checkpoint::<T, _>(&mut BufReader::new(file)).map_err(runtime_err)?;
    check_spec("checkpoint", &toy.spec, &model.config.codec)?;

    let variant = args.variant.unwrap_or(cfg.eval.variant).to_variant();
    let prompt = match &args.prompt_corpus {
        None => None,
        Some(path) => {
            let corpus = read_corpus_file(path)?;
            check_spec("prompt corpus", &toy.spec, &corpus.spec)?;
            let n = corpus.utterances.len();
            let utt = corpus.utterances.get(args.prompt_index).ok_or_else(|| {
                CliError::Config(format!("prompt index {} out of 0..{n}", args.prompt_index))
            })?;
            let units = utt.units().len();
            let p = args.prompt_units.unwrap_or(cfg.eval.prompt_units).min(units);
            if p == 0 {
                return Err(CliError::Config("a prompt needs at least one unit".into()));
            }
            let grid = utt.grid().slice_cols(0, utt.units()[p - 1].end_frame);
            Some((utt.symbols()[..p].to_vec(), grid, utt.speaker_id()))
        }
    };
    // The prompt carries its own voice; an explicit flag still wins.
    let speaker = match (args.speaker, &prompt) {
        (Some(id), _) => {
            if id >= toy.num_speakers {
                return Err(CliError::Config(format!(
                    "speaker {id} outside 0..{}",
                    toy.num_speakers
                )));
            }
            Some(SpeakerInput::Id(id))
        }
        (None, Some((_, _, spk))) => Some(SpeakerInput::Id(*spk)),
        (None, None) => None,
    };

    let outcome = tts(
        &model,
        prompt.as_ref().map(|(syms, grid, _)| (syms.as_slice(), grid)),
        &args.text,
        speaker,
        &cfg.sampler,
        variant,
    )
    .map_err(runtime_err)?;

    let decoded = DecodeSummary::from(decode(&toy, &outcome.generated.grid));
    ensure_dir(out)?;
    write_json(
        &out.join("tts-result.json"),
        &envelope(
            "tts",
            &cfg,
            json!({
                "text": args.text,
                "variant": args.variant.unwrap_or(cfg.eval.variant),
                "prompt_units": prompt.as_ref().map(|(syms, _, _)| syms.len()),
                "speaker": speaker_payload(&outcome.speaker),
                "stop": outcome.generated.stop,
                "columns_emitted": outcome.generated.columns_emitted,
                "grid": outcome.generated.grid.rows(),
                "decoded": decode_json(&decoded),
            }),
        ),
    )?;
    println!("decoded {:?} stop {}", decoded.symbols, outcome.generated.stop.name());
    Ok(())
}

// ---------------------------------------------------------------------------
// edit

pub struct EditArgs {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub index: usize,
    pub span: (usize, usize),
    pub new_text: Vec<u32>,
    pub sampler: SamplerConfig,
}

pub fn run_edit(cfg: &WorkbenchConfig, out: &Path, args: &EditArgs) -> Result<(), CliError> {
    match cfg.model.dtype {
        Dtype::F32 => edit_t::<f32>(cfg, out, args),
        Dtype::F64 => edit_t::<f64>(cfg, out, args),
    }
}

fn edit_t<T: Real>(cfg: &WorkbenchConfig, out: &Path, args: &EditArgs) -> Result<(), CliError> {
    let cfg = WorkbenchConfig { sampler: args.sampler.clone(), ..cfg.clone() };
    cfg.validate()?;
    let toy = cfg.toy()?;
    if let Some(bad) = args.new_text.iter().find(|s| **s >= toy.alphabet_size) {
        return Err(CliError::Config(format!(
            "symbol {bad} outside the alphabet 0..{}",
            toy.alphabet_size
        )));
    }
    let file = File::open(&args.checkpoint)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.checkpoint.display())))?;
    let (model, _meta, _opt) =
        load_checkpoint::<T, _>(&mut BufReader::new(file)).map_err(runtime_err)?;
    check_spec("checkpoint", &toy.spec, &model.config.codec)?;
    let corpus = read_corpus_file(&args.corpus)?;
    check_spec("source corpus", &toy.spec, &corpus.spec)?;
    let n = corpus.utterances.len();
    let utt = corpus
        .utterances
        .get(args.index)
        .ok_or_else(|| CliError::Config(format!("index {} out of 0..{n}", args.index)))?;
    let (a, b) = args.span;
    let units = utt.units().len();
    if a > b || b > units {
        return Err(CliError::Config(format!("span {a}..{b} out of bounds for {units} units")));
    }
    if args.new_text.is_empty() && a == b {
        return Err(CliError::Config("empty span and empty text leave nothing to do".into()));
    }

    let outcome = edit(&model, utt, a..b, &args.new_text, &cfg.sampler).map_err(runtime_err)?;
    let src = utt.grid();
    let (p, s, w) = (outcome.prefix_frames, outcome.suffix_frames, outcome.spliced.width());
    let context_intact = outcome.spliced.slice_cols(0, p) == src.slice_cols(0, p)
        && outcome.spliced.slice_cols(w - s, w) == src.slice_cols(src.width() - s, src.width());

    let mut reference = utt.symbols();
    reference.splice(a..b, args.new_text.iter().copied());
    let decoded = DecodeSummary::from(decode(&toy, &outcome.spliced));
    ensure_dir(out)?;
    write_json(
        &out.join("edit-result.json"),
        &envelope(
            "edit",
            &cfg,
            json!({
                "index": args.index,
                "span": { "start": a, "end": b },
                "new_text": args.new_text,
                "source_symbols": utt.symbols(),
                "edited_symbols": reference,
                "speaker": utt.speaker_id(),
                "stop": outcome.generated.stop,
                "columns_emitted": outcome.generated.columns_emitted,
                "context_intact": context_intact,
                "spliced_grid": outcome.spliced.rows(),
                "decoded": decode_json(&decoded),
            }),
        ),
    )?;
    println!("decoded {:?} context intact: {context_intact}", decoded.symbols);
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate-reordering

pub struct AblateArgs {
    pub data: PathBuf,
    pub steps: Option<u64>,
    pub items: Option<usize>,
}

pub fn ablate(cfg: &WorkbenchConfig, out: &Path, args: &AblateArgs) -> Result<(), CliError> {
    match cfg.model.dtype {
        Dtype::F32 => ablate_t::<f32>(cfg, out, args),
        Dtype::F64 => ablate_t::<f64>(cfg, out, args),
    }
}

fn ablate_t<T: Real>(cfg: &WorkbenchConfig, out: &Path, args: &AblateArgs) -> Result<(), CliError> {
    cfg.validate()?;
    let toy = cfg.toy()?;
    let train_corpus = read_corpus_file(&args.data.join("train.corpus"))?;
    let eval_corpus = read_corpus_file(&args.data.join("test.corpus"))?;
    check_spec("training corpus", &toy.spec, &train_corpus.spec)?;
    check_spec("eval corpus", &toy.spec, &eval_corpus.spec)?;

    let setup = AblationSetup {
        model: cfg.model_config()?,
        train: TrainConfig {
            total_steps: args.steps.unwrap_or(cfg.ablation.steps),
            ..cfg.train.clone()
        },
        eval_items: args.items.unwrap_or(cfg.ablation.items),
        eval: codeclm::pipeline::EditEvalConfig {
            sampler: cfg.sampler.clone(),
            budget_slack: cfg.ablation.budget_slack,
        },
        item_seed: cfg.ablation.item_seed,
    };
    let report = run_reordering_ablation::<T>(
        &setup,
        &toy,
        &train_corpus,
        &eval_corpus,
        &mut |kind, m| {
            if m.step % PROGRESS_EVERY == 0 {
                eprintln!("{:?} arm: step {} loss {:.4}", kind, m.step, m.loss);
            }
        },
    )
    .map_err(runtime_err)?;

    ensure_dir(out)?;
    write_json(&out.join("ablation-report.json"), &envelope("ablate-reordering", cfg, json!(report)))?;
    println!(
        "reordered infill SER {:.4}, natural infill SER {:.4}, ratio {}",
        report.reordered_ser,
        report.natural_ser,
        report.ser_ratio.map(|r| format!("{r:.2}")).unwrap_or_else(|| "inf".into())
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// print-config

pub fn print_config(cfg: &WorkbenchConfig) -> Result<(), CliError> {
    cfg.validate()?;
    print!("{}", cfg.to_toml()?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_records_version_and_seeds() {
        let cfg = WorkbenchConfig::default();
        let v = envelope("train", &cfg, json!({"x": 1}));
        assert_eq!(v["version"], json!(TOOL_VERSION));
        assert_eq!(v["config"]["train"]["seed"], json!(cfg.train.seed));
        assert_eq!(v["config"]["data"]["seed"], json!(cfg.data.seed));
        assert_eq!(v["report"]["x"], json!(1));
    }

    #[test]
    fn spec_mismatch_is_a_config_error() {
        let a = CodecSpec::new(4, 256, 50).unwrap();
        let b = CodecSpec::new(2, 256, 50).unwrap();
        assert!(check_spec("checkpoint", &a, &b).is_err());
        assert!(check_spec("checkpoint", &a, &a.clone()).is_ok());
    }
}
