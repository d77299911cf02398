//! Experiment plumbing: disjoint corpus splits, exact-decode scoring of
//! synthesis and editing, and the paired layout-order study.
//!
//! Scoring uses the synthetic codec's exact inverse: generated grids are
//! decoded back to symbols and compared to the reference by edit distance,
//! so error rates measure the model alone. All item-level randomness is
//! derived from explicit seeds, making every report reproducible
//! byte-for-byte.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{AlignError, AlignedUtterance, Corpus, SegmentSplit};
use crate::codec::CodebookGrid;
use crate::infer::{
    edit, infill_natural, tts, InferError, SamplerConfig, StopReason,
};
use crate::layout::{
    build_natural_training_sequence, build_training_sequence, LayoutError, SpeakerInput,
    TtsVariant,
};
use crate::model::{Model, ModelConfig, ModelError, Real};
use crate::toy::{
    decode, encode, sample_utterance, CorpusConfig, ToyDecode, ToyError, ToyLanguageSpec,
};
use crate::train::{splitmix64, LayoutKind, StepMetrics, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid evaluation setup: {0}")]
    InvalidEval(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("could not draw {missing} more distinct utterances after {attempts} attempts")]
    CorpusExhausted { missing: usize, attempts: usize },
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn mix(seed: u64, i: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ i)
}

/// Edit distance between symbol sequences (insert/delete/substitute, all
/// cost 1).
pub fn levenshtein(a: &[u32], b: &[u32]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

// ---------------------------------------------------------------------------
// Corpus splits

/// Requested utterance counts per split, honored exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

/// Sample three corpora whose (speaker, symbols) keys are mutually
/// disjoint, by rejection while drawing. `sampling.size` is ignored in
/// favor of `sizes`. Errors when the language is too small to supply the
/// requested number of distinct utterances.
pub fn gen_disjoint_corpora(
    toy: &ToyLanguageSpec,
    sampling: &CorpusConfig,
    sizes: SplitSizes,
    seed: u64,
) -> Result<CorpusSplits, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<(u32, Vec<u32>)> = HashSet::new();
    let draw = |rng: &mut ChaCha8Rng,
                    seen: &mut HashSet<(u32, Vec<u32>)>,
                    count: usize|
     -> Result<Vec<AlignedUtterance>, PipelineError> {
        let mut out = Vec::with_capacity(count);
        let cap = count.saturating_mul(200) + 1000;
        let mut attempts = 0usize;
        while out.len() < count {
            attempts += 1;
            if attempts > cap {
                return Err(PipelineError::CorpusExhausted {
                    missing: count - out.len(),
                    attempts,
                });
            }
            let utt = sample_utterance(toy, rng, sampling);
            if seen.insert((utt.speaker_id(), utt.symbols())) {
                out.push(utt);
            }
        }
        Ok(out)
    };
    let make = |name: &str, count: usize, utterances: Vec<AlignedUtterance>| Corpus {
        spec: toy.spec.clone(),
        meta: serde_json::json!({
            "generator": "toy-language",
            "seed": seed,
            "split": name,
            "count": count,
            "toy": toy,
            "sampling": { "min_symbols": sampling.min_symbols, "max_symbols": sampling.max_symbols },
        }),
        utterances,
    };
    let train = draw(&mut rng, &mut seen, sizes.train)?;
    let val = draw(&mut rng, &mut seen, sizes.val)?;
    let test = draw(&mut rng, &mut seen, sizes.test)?;
    Ok(CorpusSplits {
        train: make("train", sizes.train, train),
        val: make("val", sizes.val, val),
        test: make("test", sizes.test, test),
    })
}

// ---------------------------------------------------------------------------
// Reports

/// Stop-reason histogram over one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopCounts {
    pub end_token: usize,
    pub max_columns: usize,
}

impl StopCounts {
    pub fn add(&mut self, stop: StopReason) {
        match stop {
            StopReason::EndToken => self.end_token += 1,
            StopReason::MaxColumns => self.max_columns += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.end_token + self.max_columns
    }
}

/// Decoder output in a serialization-friendly shape, for single-shot
/// command results.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub symbols: Vec<u32>,
    pub speaker_id: Option<u32>,
    pub frame_valid: Vec<bool>,
}

impl From<ToyDecode> for DecodeSummary {
    fn from(d: ToyDecode) -> Self {
        DecodeSummary { symbols: d.symbols, speaker_id: d.speaker_id, frame_valid: d.frame_valid }
    }
}

fn rate(num: usize, denom: usize) -> f64 {
    if denom == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}

// ---------------------------------------------------------------------------
// Synthesis evaluation

/// Continuation-style synthesis protocol: the first `prompt_units` units
/// of each held-out utterance become the voice prompt and the rest is the
/// target text; generation must reproduce the remaining symbols in the
/// prompt's voice. With `prompt_units` 0 the speaker slot alone carries
/// the voice.
#[derive(Debug, Clone)]
pub struct TtsEvalConfig {
    pub prompt_units: usize,
    pub variant: TtsVariant,
    pub sampler: SamplerConfig,
    /// Extra columns beyond the exact target length before truncation.
    pub budget_slack: usize,
    pub item_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsItemReport {
    pub index: usize,
    pub speaker: u32,
    pub prompt_symbols: Vec<u32>,
    pub reference_symbols: Vec<u32>,
    pub decoded_symbols: Vec<u32>,
    pub decoded_speaker: Option<u32>,
    pub valid_frames: usize,
    pub total_frames: usize,
    pub columns_emitted: usize,
    pub stop: StopReason,
    pub edit_distance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsEvalReport {
    pub variant: String,
    pub prompt_units: usize,
    pub sampler: SamplerConfig,
    pub items: Vec<TtsItemReport>,
    pub total_reference_symbols: usize,
    pub total_edit_distance: usize,
    /// Corpus-level edit distance over reference length.
    pub symbol_error_rate: f64,
    pub speaker_match_rate: f64,
    pub stops: StopCounts,
}

pub fn eval_tts<T: Real>(
    model: &Model<T>,
    toy: &ToyLanguageSpec,
    corpus: &Corpus,
    cfg: &TtsEvalConfig,
) -> Result<TtsEvalReport, PipelineError> {
    if corpus.utterances.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let d = toy.frames_per_symbol;
    let k = toy.spec.num_codebooks;
    let mut items = Vec::with_capacity(corpus.utterances.len());
    let mut stops = StopCounts::default();
    let (mut total_ref, mut total_dist, mut matches) = (0usize, 0usize, 0usize);
    for (i, utt) in corpus.utterances.iter().enumerate() {
        let n = utt.units().len();
        let p = cfg.prompt_units.min(n.saturating_sub(1));
        let syms = utt.symbols();
        let target = &syms[p..];
        let prompt_grid = if p > 0 {
            utt.grid().slice_cols(0, utt.units()[p - 1].end_frame)
        } else {
            CodebookGrid::empty(toy.spec.clone())
        };
        let budget = (target.len() * d + k - 1 + cfg.budget_slack).max(1);
        let item_cfg = SamplerConfig {
            seed: mix(cfg.item_seed, i as u64),
            max_new_columns: budget,
            ..cfg.sampler.clone()
        };
        let prompt = if p > 0 { Some((&syms[..p], &prompt_grid)) } else { None };
        let out = tts(
            model,
            prompt,
            target,
            Some(SpeakerInput::Id(utt.speaker_id())),
            &item_cfg,
            cfg.variant,
        )?;
        let dec = decode(toy, &out.generated.grid);
        let edit_distance = levenshtein(target, &dec.symbols);
        total_ref += target.len();
        total_dist += edit_distance;
        matches += usize::from(dec.speaker_id == Some(utt.speaker_id()));
        stops.add(out.generated.stop);
        items.push(TtsItemReport {
            index: i,
            speaker: utt.speaker_id(),
            prompt_symbols: syms[..p].to_vec(),
            reference_symbols: target.to_vec(),
            decoded_symbols: dec.symbols,
            decoded_speaker: dec.speaker_id,
            valid_frames: dec.frame_valid.iter().filter(|&&v| v).count(),
            total_frames: dec.frame_valid.len(),
            columns_emitted: out.generated.columns_emitted,
            stop: out.generated.stop,
            edit_distance,
        });
    }
    let n_items = items.len();
    Ok(TtsEvalReport {
        variant: cfg.variant.name().to_string(),
        prompt_units: cfg.prompt_units,
        sampler: cfg.sampler.clone(),
        items,
        total_reference_symbols: total_ref,
        total_edit_distance: total_dist,
        symbol_error_rate: rate(total_dist, total_ref),
        speaker_match_rate: rate(matches, n_items),
        stops,
    })
}

// ---------------------------------------------------------------------------
// Editing evaluation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Substitution,
    Insertion,
    Deletion,
}

impl EditKind {
    pub fn cycle(i: usize) -> EditKind {
        match i % 3 {
            0 => EditKind::Substitution,
            1 => EditKind::Insertion,
            _ => EditKind::Deletion,
        }
    }
}

/// One editing task: replace units `span_start..span_end` of an utterance
/// with `new_symbols`. Fully determined by `seed`, so paired runs share
/// identical tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditItemSpec {
    pub index: usize,
    pub utterance: usize,
    pub kind: EditKind,
    pub span_start: usize,
    pub span_end: usize,
    pub new_symbols: Vec<u32>,
    pub seed: u64,
}

/// Deterministic editing tasks cycling substitution, insertion, deletion
/// over the corpus. Substitutions always pick symbols that differ from the
/// original at each position. Deletions extend the regenerated span over
/// one kept neighbor so the middle stays non-empty (only a totally deleted
/// single-unit utterance leaves no room for the margin).
pub fn make_edit_items(
    toy: &ToyLanguageSpec,
    corpus: &Corpus,
    count: usize,
    seed: u64,
) -> Result<Vec<EditItemSpec>, PipelineError> {
    if corpus.utterances.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    if toy.alphabet_size < 2 {
        return Err(PipelineError::InvalidEval(
            "substitution items need an alphabet of at least 2".into(),
        ));
    }
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let utt_idx = i % corpus.utterances.len();
        let utt = &corpus.utterances[utt_idx];
        let n = utt.units().len();
        if n == 0 {
            return Err(PipelineError::InvalidEval(format!("utterance {utt_idx} has no units")));
        }
        let item_seed = mix(seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
        let kind = EditKind::cycle(i);
        let syms = utt.symbols();
        let (start, end, new_symbols) = match kind {
            EditKind::Substitution => {
                let len = if n >= 2 && rng.random_bool(0.5) { 2 } else { 1 };
                let start = rng.random_range(0..=n - len);
                let new: Vec<u32> = (0..len)
                    .map(|j| loop {
                        let s = rng.random_range(0..toy.alphabet_size);
                        if s != syms[start + j] {
                            break s;
                        }
                    })
                    .collect();
                (start, start + len, new)
            }
            EditKind::Insertion => {
                let pos = rng.random_range(0..=n);
                let len = if rng.random_bool(0.5) { 2 } else { 1 };
                let new: Vec<u32> =
                    (0..len).map(|_| rng.random_range(0..toy.alphabet_size)).collect();
                (pos, pos, new)
            }
            EditKind::Deletion => {
                let len = if n >= 3 && rng.random_bool(0.5) { 2 } else { 1 };
                let start = rng.random_range(0..=n - len);
                let end = start + len;
                // Regenerating an empty middle never occurs in training
                // (splits keep the middle non-empty), so a deletion keeps
                // one neighboring unit inside the regenerated span as a
                // margin; the net transcript change is still pure removal.
                if start > 0 {
                    (start - 1, end, vec![syms[start - 1]])
                } else if end < n {
                    (start, end + 1, vec![syms[end]])
                } else {
                    (start, end, Vec::new())
                }
            }
        };
        items.push(EditItemSpec {
            index: i,
            utterance: utt_idx,
            kind,
            span_start: start,
            span_end: end,
            new_symbols,
            seed: item_seed,
        });
    }
    Ok(items)
}

#[derive(Debug, Clone)]
pub struct EditEvalConfig {
    pub sampler: SamplerConfig,
    /// Extra columns beyond the exact replacement length before truncation.
    pub budget_slack: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditItemReport {
    pub spec: EditItemSpec,
    pub speaker: u32,
    pub source_symbols: Vec<u32>,
    /// Full edited transcript: prefix + replacement + suffix.
    pub reference_symbols: Vec<u32>,
    pub decoded_middle: Vec<u32>,
    pub decoded_full: Vec<u32>,
    pub decoded_speaker: Option<u32>,
    /// Distance between the replacement text and the decoded middle alone.
    pub middle_edit_distance: usize,
    pub full_edit_distance: usize,
    /// Prefix and suffix columns of the splice equal the source exactly.
    pub context_intact: bool,
    pub columns_emitted: usize,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditEvalReport {
    pub layout: LayoutKind,
    pub sampler: SamplerConfig,
    pub items: Vec<EditItemReport>,
    pub total_middle_reference: usize,
    pub total_middle_distance: usize,
    /// Edited-region error: distance over replacement length.
    pub middle_symbol_error_rate: f64,
    pub total_full_reference: usize,
    pub total_full_distance: usize,
    pub full_symbol_error_rate: f64,
    pub context_intact_rate: f64,
    pub stops: StopCounts,
}

/// Run the editing tasks against a model. `layout` picks the inference
/// path: `Reordered` uses the prefix-suffix-middle edit layout with its
/// stop signal; `Natural` uses in-place infilling, which has none and
/// always runs to the column budget.
pub fn eval_edits<T: Real>(
    model: &Model<T>,
    toy: &ToyLanguageSpec,
    corpus: &Corpus,
    items: &[EditItemSpec],
    cfg: &EditEvalConfig,
    layout: LayoutKind,
) -> Result<EditEvalReport, PipelineError> {
    if items.is_empty() {
        return Err(PipelineError::InvalidEval("no edit items".into()));
    }
    let d = toy.frames_per_symbol;
    let k = toy.spec.num_codebooks;
    let mut reports = Vec::with_capacity(items.len());
    let mut stops = StopCounts::default();
    let (mut mid_ref, mut mid_dist) = (0usize, 0usize);
    let (mut full_ref, mut full_dist) = (0usize, 0usize);
    let mut intact = 0usize;
    for item in items {
        let utt = corpus.utterances.get(item.utterance).ok_or_else(|| {
            PipelineError::InvalidEval(format!(
                "item {} references utterance {} outside the corpus",
                item.index, item.utterance
            ))
        })?;
        let budget = (item.new_symbols.len() * d + k - 1 + cfg.budget_slack).max(1);
        let item_cfg =
            SamplerConfig { seed: item.seed, max_new_columns: budget, ..cfg.sampler.clone() };
        let span = item.span_start..item.span_end;
        let out = match layout {
            LayoutKind::Reordered => edit(model, utt, span, &item.new_symbols, &item_cfg)?,
            LayoutKind::Natural => {
                infill_natural(model, utt, span, &item.new_symbols, &item_cfg)?
            }
        };
        let mid = decode(toy, &out.generated.grid);
        let full = decode(toy, &out.spliced);
        let syms = utt.symbols();
        let mut reference: Vec<u32> = syms[..item.span_start].to_vec();
        reference.extend(&item.new_symbols);
        reference.extend(&syms[item.span_end..]);
        let middle_edit_distance = levenshtein(&item.new_symbols, &mid.symbols);
        let full_edit_distance = levenshtein(&reference, &full.symbols);
        let src = utt.grid();
        let w = out.spliced.width();
        let (p, s) = (out.prefix_frames, out.suffix_frames);
        let context_intact = out.spliced.slice_cols(0, p) == src.slice_cols(0, p)
            && out.spliced.slice_cols(w - s, w) == src.slice_cols(src.width() - s, src.width());
        mid_ref += item.new_symbols.len();
        mid_dist += middle_edit_distance;
        full_ref += reference.len();
        full_dist += full_edit_distance;
        intact += usize::from(context_intact);
        stops.add(out.generated.stop);
        reports.push(EditItemReport {
            spec: item.clone(),
            speaker: utt.speaker_id(),
            source_symbols: syms,
            reference_symbols: reference,
            decoded_middle: mid.symbols,
            decoded_full: full.symbols,
            decoded_speaker: full.speaker_id,
            middle_edit_distance,
            full_edit_distance,
            context_intact,
            columns_emitted: out.generated.columns_emitted,
            stop: out.generated.stop,
        });
    }
    let n_items = reports.len();
    Ok(EditEvalReport {
        layout,
        sampler: cfg.sampler.clone(),
        items: reports,
        total_middle_reference: mid_ref,
        total_middle_distance: mid_dist,
        middle_symbol_error_rate: rate(mid_dist, mid_ref),
        total_full_reference: full_ref,
        total_full_distance: full_dist,
        full_symbol_error_rate: rate(full_dist, full_ref),
        context_intact_rate: rate(intact, n_items),
        stops,
    })
}

// ---------------------------------------------------------------------------
// Layout-order study

/// Everything the paired study needs beyond the data: one model recipe,
/// one training recipe (its layout kind is overridden per arm), and the
/// shared infill evaluation.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_items: usize,
    pub eval: EditEvalConfig,
    pub item_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArmReport {
    pub layout: LayoutKind,
    pub steps: u64,
    pub final_loss: f64,
    /// Rendering of this arm's training layout on a canonical 3-symbol
    /// example, so reports show the structural difference at a glance.
    pub layout_shape: String,
    pub infill: EditEvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub item_count: usize,
    pub reordered: AblationArmReport,
    pub natural: AblationArmReport,
    pub reordered_ser: f64,
    pub natural_ser: f64,
    /// natural over reordered; absent when the reordered arm is exact.
    pub ser_ratio: Option<f64>,
}

fn example_layout_shape(toy: &ToyLanguageSpec, kind: LayoutKind) -> Result<String, PipelineError> {
    let a = toy.alphabet_size;
    let syms = [0, 1 % a, 2 % a];
    let utt = encode(toy, &syms, 0)?;
    let split = SegmentSplit::from_cuts(1, 2, 3)?;
    let (texts, grids) = crate::align::slice(&utt, &split)?;
    let layout = match kind {
        LayoutKind::Reordered => build_training_sequence(&texts, &grids, 0)?,
        LayoutKind::Natural => build_natural_training_sequence(&texts, &grids, 0)?,
    };
    Ok(layout.fixture_string())
}

/// Train both arms from the same initialization on the same data, then
/// score them on identical infill tasks. Pure function of its seeds.
pub fn run_reordering_ablation<T: Real>(
    setup: &AblationSetup,
    toy: &ToyLanguageSpec,
    train_corpus: &Corpus,
    eval_corpus: &Corpus,
    on_step: &mut dyn FnMut(LayoutKind, &StepMetrics),
) -> Result<AblationReport, PipelineError> {
    let items = make_edit_items(toy, eval_corpus, setup.eval_items, setup.item_seed)?;
    let mut run_arm = |kind: LayoutKind| -> Result<AblationArmReport, PipelineError> {
        let model = Model::<T>::new(setup.model.clone())?;
        let cfg = TrainConfig { layout_kind: kind, ..setup.train.clone() };
        let mut trainer = Trainer::new(model, cfg)?;
        let mut final_loss = f64::NAN;
        trainer.run_to_completion(&train_corpus.utterances, &mut |m| {
            final_loss = m.loss;
            on_step(kind, m);
        })?;
        let steps = trainer.completed_steps();
        let model = trainer.into_model();
        let infill = eval_edits(&model, toy, eval_corpus, &items, &setup.eval, kind)?;
        Ok(AblationArmReport {
            layout: kind,
            steps,
            final_loss,
            layout_shape: example_layout_shape(toy, kind)?,
            infill,
        })
    };
    let reordered = run_arm(LayoutKind::Reordered)?;
    let natural = run_arm(LayoutKind::Natural)?;
    let reordered_ser = reordered.infill.middle_symbol_error_rate;
    let natural_ser = natural.infill.middle_symbol_error_rate;
    let ser_ratio = if reordered_ser > 0.0 { Some(natural_ser / reordered_ser) } else { None };
    Ok(AblationReport {
        item_count: items.len(),
        reordered,
        natural,
        reordered_ser,
        natural_ser,
        ser_ratio,
    })
}
