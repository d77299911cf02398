//! Autoregressive generation with nucleus sampling, plus the editing and
//! synthesis pipelines built on top of it.
//!
//! Generation emits delayed audio columns one position at a time. Within a
//! column, head 0 is sampled first; end-of-generation is its signal alone,
//! and a column that starts with it is discarded. Cells above the stream
//! head (column index < codebook index) are forced to the pad id rather
//! than sampled, mirroring the delay pattern's structure. The emitted
//! region is then read back leniently: each codebook row contributes its
//! longest run of codec ids along its own diagonal, and the output is the
//! largest rectangle all rows support.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::AlignedUtterance;
use crate::codec::{CodebookGrid, CodecError, CodecSpec, TokenId};
use crate::layout::{
    build_edit_inference, build_natural_infill_inference, build_tts_inference, splice_edit,
    LayoutElement, LayoutError, LayoutSequence, SpeakerInput, TtsVariant,
};
use crate::model::{GenSession, Model, ModelError, Real};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("layout codec spec does not match the model")]
    SpecMismatch,
    #[error("bad edit span: {0}")]
    BadSpan(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Keep the `top_k` most probable ids before the nucleus cut.
    pub top_k: usize,
    /// Smallest prefix of the survivors with at least this much mass.
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Hard cap on emitted columns per generation.
    pub max_new_columns: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { top_k: 20, top_p: 1.0, temperature: 1.0, seed: 0, max_new_columns: 512 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), InferError> {
        let bad = |msg: &str| Err(InferError::InvalidConfig(msg.into()));
        if self.top_k == 0 {
            return bad("top_k must be >= 1");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive and finite");
        }
        if self.max_new_columns == 0 {
            return bad("max_new_columns must be >= 1");
        }
        Ok(())
    }
}

/// Draw one token id. Logits are divided by the temperature and
/// softmaxed; the `top_k` most probable ids survive (ties to the lower
/// id); within the survivors, the smallest descending-order prefix whose
/// cumulative mass reaches `top_p` is renormalized and sampled. Entries at
/// negative infinity are effectively excluded.
pub fn sample_token<T: Real, R: Rng>(logits: &[T], cfg: &SamplerConfig, rng: &mut R) -> TokenId {
    debug_assert!(!logits.is_empty());
    let inv_temp = 1.0 / cfg.temperature;
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        let l = l.f64() * inv_temp;
        if l > max {
            max = l;
        }
    }
    let mut probs: Vec<(u32, f64)> = Vec::with_capacity(logits.len());
    let mut sum = 0.0f64;
    for (id, &l) in logits.iter().enumerate() {
        let p = (l.f64() * inv_temp - max).exp();
        sum += p;
        probs.push((id as u32, p));
    }
    for entry in &mut probs {
        entry.1 /= sum;
    }
    // descending probability, ties to the lower id
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    probs.truncate(cfg.top_k);
    let mut cut = probs.len();
    let mut cum = 0.0f64;
    for (i, &(_, p)) in probs.iter().enumerate() {
        cum += p;
        if cum >= cfg.top_p {
            cut = i + 1;
            break;
        }
    }
    // if the survivors' mass never reaches top_p, keep them all
    probs.truncate(cut);
    let total: f64 = probs.iter().map(|&(_, p)| p).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0f64;
    for &(id, p) in &probs {
        acc += p;
        if u < acc {
            return id;
        }
    }
    probs[0].0
}

fn sample_with_bans<T: Real, R: Rng>(
    logits: &[T],
    bans: &[TokenId],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> TokenId {
    let mut masked = logits.to_vec();
    for &b in bans {
        masked[b as usize] = T::neg_infinity();
    }
    sample_token(&masked, cfg, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EndToken,
    MaxColumns,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::EndToken => "end_token",
            StopReason::MaxColumns => "max_columns",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOutcome {
    /// Undelayed output, prompt frames dropped, truncated to the valid
    /// rectangle. Never contains special ids.
    pub grid: CodebookGrid,
    /// Sampled columns (prefill and the discarded stop column excluded).
    pub columns_emitted: usize,
    pub stop: StopReason,
    /// Set when the column cap cut generation short.
    pub truncated: bool,
    /// Raw delayed region: prefill columns followed by emitted ones.
    pub delayed: Vec<Vec<TokenId>>,
}

/// Autoregressive continuation of an inference layout.
pub fn generate<T: Real>(
    model: &Model<T>,
    layout: &LayoutSequence,
    cfg: &SamplerConfig,
) -> Result<GenerateOutcome, InferError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_with_rng(model, layout, cfg, &mut rng, true)
}

/// As [`generate`] but with the caller's rng and an explicit stop policy.
/// With `stop_on_end` false the end id is banned everywhere and generation
/// always runs to `max_new_columns` (the natural-order arm has no stop
/// signal to listen for).
pub fn generate_with_rng<T: Real, R: Rng>(
    model: &Model<T>,
    layout: &LayoutSequence,
    cfg: &SamplerConfig,
    rng: &mut R,
    stop_on_end: bool,
) -> Result<GenerateOutcome, InferError> {
    cfg.validate()?;
    let spec = &layout.spec;
    if *spec != model.config.codec {
        return Err(InferError::SpecMismatch);
    }
    let k_total = spec.num_codebooks;
    let mut session = GenSession::new(model);
    let mut hidden = Vec::new();
    for el in &layout.elements {
        hidden = session.push(el)?;
    }
    if layout.elements.is_empty() {
        return Err(InferError::Model(ModelError::EmptySequence));
    }

    let prefill: Vec<Vec<TokenId>> = layout.elements[layout.elements.len() - layout.middle_prefill..]
        .iter()
        .map(|el| match el {
            LayoutElement::AudioCol(ids) => ids.clone(),
            other => unreachable!("prefill tail must be audio columns, found {other:?}"),
        })
        .collect();

    let head0_bans: Vec<TokenId> =
        if stop_on_end { vec![spec.mask_id] } else { vec![spec.mask_id, spec.end_id] };
    let rest_bans = [spec.mask_id, spec.end_id];

    let mut region = prefill;
    let mut emitted = 0usize;
    let mut stop = StopReason::MaxColumns;
    while emitted < cfg.max_new_columns {
        let logits = session.head_logits(&hidden);
        let c = region.len();
        let id0 = sample_with_bans(&logits[0], &head0_bans, cfg, rng);
        if stop_on_end && id0 == spec.end_id {
            stop = StopReason::EndToken;
            break;
        }
        let mut column = vec![spec.pad_id; k_total];
        column[0] = id0;
        for (k, head) in logits.iter().enumerate().skip(1) {
            if c < k {
                continue; // structurally pad above the stream head
            }
            column[k] = sample_with_bans(head, &rest_bans, cfg, rng);
        }
        region.push(column.clone());
        emitted += 1;
        hidden = session.push(&LayoutElement::AudioCol(column))?;
    }

    let grid = extract_valid(spec, &region, layout.middle_prefill);
    let truncated = stop == StopReason::MaxColumns;
    Ok(GenerateOutcome { grid, columns_emitted: emitted, stop, truncated, delayed: region })
}

/// Undelay the emitted region leniently: row `k` of frame `t` lives at
/// column `t + k`; each row is read as its longest codec-id run starting
/// at its own head, and the frame count is the shortest such run. The
/// first `drop_frames` frames (re-encoded prompt) are stripped.
fn extract_valid(spec: &CodecSpec, region: &[Vec<TokenId>], drop_frames: usize) -> CodebookGrid {
    let k_total = spec.num_codebooks;
    let mut t_valid = usize::MAX;
    for k in 0..k_total {
        let mut run = 0usize;
        while k + run < region.len() && spec.is_codec_token(region[k + run][k]) {
            run += 1;
        }
        t_valid = t_valid.min(run);
    }
    if t_valid == usize::MAX || t_valid <= drop_frames {
        return CodebookGrid::empty(spec.clone());
    }
    let rows: Vec<Vec<TokenId>> = (0..k_total)
        .map(|k| (drop_frames..t_valid).map(|t| region[t + k][k]).collect())
        .collect();
    CodebookGrid::new(spec.clone(), rows).expect("extracted cells are codec ids")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    /// Source prefix, generated middle, and source suffix spliced back
    /// together.
    pub spliced: CodebookGrid,
    pub generated: GenerateOutcome,
    pub prefix_frames: usize,
    pub suffix_frames: usize,
}

/// Replace the units in `span` with audio matching `new_text`, keeping the
/// surrounding audio bit-identical. An empty span inserts; an empty
/// `new_text` with a non-empty span deletes.
pub fn edit<T: Real>(
    model: &Model<T>,
    source: &AlignedUtterance,
    span: Range<usize>,
    new_text: &[u32],
    cfg: &SamplerConfig,
) -> Result<EditOutcome, InferError> {
    let n = source.units().len();
    if span.start > span.end || span.end > n {
        return Err(InferError::BadSpan(format!("span {span:?} out of bounds for {n} units")));
    }
    let t_total = source.grid().width();
    let span_start = if span.start < n { source.units()[span.start].start_frame } else { t_total };
    let span_end =
        if span.is_empty() { span_start } else { source.units()[span.end - 1].end_frame };
    let syms = source.symbols();
    let a_p = source.grid().slice_cols(0, span_start);
    let a_s = source.grid().slice_cols(span_end, t_total);
    let layout = build_edit_inference(
        &syms[..span.start],
        &syms[span.end..],
        new_text,
        &a_p,
        &a_s,
        SpeakerInput::Id(source.speaker_id()),
    )?;
    let generated = generate(model, &layout, cfg)?;
    let spliced = splice_edit(&a_p, &generated.grid, &a_s)?;
    Ok(EditOutcome {
        spliced,
        generated,
        prefix_frames: span_start,
        suffix_frames: t_total - span_end,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtsOutcome {
    pub generated: GenerateOutcome,
    /// The speaker actually conditioned on (sampled when none was given).
    pub speaker: SpeakerInput,
}

/// Synthesize `target_text`, optionally voice-matched to a prompt. Without
/// an explicit speaker, one id is drawn uniformly from the sampler's rng
/// before generation.
pub fn tts<T: Real>(
    model: &Model<T>,
    prompt: Option<(&[u32], &CodebookGrid)>,
    target_text: &[u32],
    speaker: Option<SpeakerInput>,
    cfg: &SamplerConfig,
    variant: TtsVariant,
) -> Result<TtsOutcome, InferError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let speaker = match speaker {
        Some(s) => s,
        None => SpeakerInput::Id(rng.random_range(0..model.config.speaker_dim)),
    };
    let empty = CodebookGrid::empty(model.config.codec.clone());
    let (t_prompt, a_prompt) = match prompt {
        Some((t, a)) => (t, a),
        None => (&[][..], &empty),
    };
    let layout = build_tts_inference(t_prompt, target_text, a_prompt, speaker.clone(), variant)?;
    let generated = generate_with_rng(model, &layout, cfg, &mut rng, true)?;
    Ok(TtsOutcome { generated, speaker })
}

/// Natural-order infilling for the reordering ablation: the middle is
/// generated right after the prefix with no stop signal, so it always runs
/// to the column cap; the caller decides the budget.
pub fn infill_natural<T: Real>(
    model: &Model<T>,
    source: &AlignedUtterance,
    span: Range<usize>,
    new_text: &[u32],
    cfg: &SamplerConfig,
) -> Result<EditOutcome, InferError> {
    let n = source.units().len();
    if span.start > span.end || span.end > n {
        return Err(InferError::BadSpan(format!("span {span:?} out of bounds for {n} units")));
    }
    let t_total = source.grid().width();
    let span_start = if span.start < n { source.units()[span.start].start_frame } else { t_total };
    let span_end =
        if span.is_empty() { span_start } else { source.units()[span.end - 1].end_frame };
    let syms = source.symbols();
    let a_p = source.grid().slice_cols(0, span_start);
    let a_s = source.grid().slice_cols(span_end, t_total);
    let layout = build_natural_infill_inference(
        &syms[..span.start],
        new_text,
        &syms[span.end..],
        &a_p,
        SpeakerInput::Id(source.speaker_id()),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let generated = generate_with_rng(model, &layout, cfg, &mut rng, false)?;
    let spliced = splice_edit(&a_p, &generated.grid, &a_s)?;
    Ok(EditOutcome {
        spliced,
        generated,
        prefix_frames: span_start,
        suffix_frames: t_total - span_end,
    })
}
