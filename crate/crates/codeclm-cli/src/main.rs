//! Experiment workbench for the codec language model: corpus generation,
//! training, evaluation, synthesis, editing, and the layout ablation, all
//! driven by one declarative config file.
//!
//! Exit codes: 0 success, 2 bad flags or config, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use codeclm::infer::SamplerConfig;

mod config;
mod ops;

use config::{CliError, VariantName, WorkbenchConfig};

#[derive(Parser)]
#[command(name = "codeclm", version, about = "Codec language-model workbench")]
struct Cli {
    /// Experiment file (TOML) merged over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory artifacts are written into.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

/// Sampler knobs shared by the synthesis-style subcommands; unset flags
/// fall back to the config's `[sampler]` table.
#[derive(Args)]
struct SamplerFlags {
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_new_columns: Option<usize>,
}

impl SamplerFlags {
    fn apply(&self, base: &SamplerConfig) -> SamplerConfig {
        SamplerConfig {
            top_k: self.top_k.unwrap_or(base.top_k),
            top_p: self.top_p.unwrap_or(base.top_p),
            temperature: self.temperature.unwrap_or(base.temperature),
            seed: self.seed.unwrap_or(base.seed),
            max_new_columns: self.max_new_columns.unwrap_or(base.max_new_columns),
        }
    }
}

/// Comma-separated symbol list; a newtype so clap takes the whole list
/// as one flag value.
#[derive(Clone, Debug)]
struct SymbolList(Vec<u32>);

fn parse_symbols(s: &str) -> Result<SymbolList, String> {
    if s.trim().is_empty() {
        return Ok(SymbolList(Vec::new()));
    }
    s.split(',')
        .map(|part| part.trim().parse::<u32>().map_err(|e| format!("symbol {part:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(SymbolList)
}

fn parse_span(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("span {s:?} is not of the form a..b"))?;
    let a = a.trim().parse::<usize>().map_err(|e| format!("span start {a:?}: {e}"))?;
    let b = b.trim().parse::<usize>().map_err(|e| format!("span end {b:?}: {e}"))?;
    if a > b {
        return Err(format!("span {a}..{b} runs backwards"));
    }
    Ok((a, b))
}

#[derive(Subcommand)]
enum Command {
    /// Sample disjoint train/val/test corpora from the synthetic language
    GenData {
        /// Overrides the config's data seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model, writing checkpoint.clm and metrics.jsonl
    Train {
        /// Directory holding train.corpus (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Continue from a saved checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Pause after this optimizer step; resume later to finish.
        #[arg(long)]
        until: Option<u64>,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint: synthesis and editing on a held-out corpus
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding the corpus files.
        #[arg(long)]
        data: PathBuf,
        /// Which corpus file to score against.
        #[arg(long, default_value = "test")]
        split: String,
        /// Overrides the config's eval item seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthesize codec tokens for a text, optionally voice-prompted
    Tts {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated symbols, e.g. "3,1,4".
        #[arg(long, value_parser = parse_symbols)]
        text: SymbolList,
        /// Condition on this speaker id instead of sampling one.
        #[arg(long)]
        speaker: Option<u32>,
        /// Where the prompt sits in the layout.
        #[arg(long, value_enum)]
        variant: Option<VariantName>,
        /// Corpus file supplying the voice prompt.
        #[arg(long)]
        prompt_corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        prompt_index: usize,
        #[arg(long)]
        prompt_units: Option<usize>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Regenerate a span of an utterance to match new text
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus file holding the source utterance.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Unit range "a..b" to replace ("2..2" inserts at unit 2).
        #[arg(long, value_parser = parse_span)]
        span: (usize, usize),
        /// Comma-separated replacement symbols; empty deletes the span.
        #[arg(long, default_value = "", value_parser = parse_symbols)]
        new_text: SymbolList,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Train reordered and natural layouts on identical budgets and
    /// compare their infilling error
    AblateReordering {
        /// Directory holding train.corpus and test.corpus.
        #[arg(long)]
        data: PathBuf,
        /// Overrides the config's per-arm step budget.
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides the config's eval item count.
        #[arg(long)]
        items: Option<usize>,
    },
    /// Print the full effective configuration as TOML
    PrintConfig,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = WorkbenchConfig::load(cli.config.as_deref())?;
    let out = &cli.out;
    match cli.command {
        Command::GenData { seed } => {
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            ops::gen_data(&cfg, out)
        }
        Command::Train { data, resume, until, seed } => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            ops::train(&cfg, out, &ops::TrainArgs { data, resume, until })
        }
        Command::Eval { checkpoint, data, split, seed } => {
            if let Some(s) = seed {
                cfg.eval.item_seed = s;
            }
            ops::eval(&cfg, out, &ops::EvalArgs { checkpoint, data, split })
        }
        Command::Tts {
            checkpoint,
            text,
            speaker,
            variant,
            prompt_corpus,
            prompt_index,
            prompt_units,
            sampler,
        } => {
            let sampler = sampler.apply(&cfg.sampler);
            ops::run_tts(
                &cfg,
                out,
                &ops::TtsArgs {
                    checkpoint,
                    text: text.0,
                    speaker,
                    variant,
                    prompt_corpus,
                    prompt_index,
                    prompt_units,
                    sampler,
                },
            )
        }
        Command::Edit { checkpoint, corpus, index, span, new_text, sampler } => {
            let sampler = sampler.apply(&cfg.sampler);
            ops::run_edit(
                &cfg,
                out,
                &ops::EditArgs { checkpoint, corpus, index, span, new_text: new_text.0, sampler },
            )
        }
        Command::AblateReordering { data, steps, items } => {
            ops::ablate(&cfg, out, &ops::AblateArgs { data, steps, items })
        }
        Command::PrintConfig => ops::print_config(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("{e}");
            ExitCode::from(3)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_lists_parse() {
        assert_eq!(parse_symbols("3,1,4").unwrap().0, vec![3, 1, 4]);
        assert_eq!(parse_symbols(" 7 , 0 ").unwrap().0, vec![7, 0]);
        assert_eq!(parse_symbols("").unwrap().0, Vec::<u32>::new());
        assert!(parse_symbols("3,x").is_err());
    }

    #[test]
    fn spans_parse() {
        assert_eq!(parse_span("2..4").unwrap(), (2, 4));
        assert_eq!(parse_span("0..0").unwrap(), (0, 0));
        assert!(parse_span("4..2").is_err());
        assert!(parse_span("7").is_err());
    }

    #[test]
    fn cli_declaration_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
