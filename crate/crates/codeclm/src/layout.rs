//! Interleaved sequence layouts: text, speaker slot, masks, delayed audio.
//!
//! Training rearranges an utterance into prefix-suffix-middle order so the
//! middle (the part to generate) comes last and can condition on both
//! sides:
//!
//! ```text
//! T_P  T_S  T_M  <SPK>  delay(A_P)  <M>  delay(A_S)  <M>  delay(A_M)  <END>
//! ```
//!
//! Inference layouts stop right before the audio the model should produce.
//! Each audio segment is delayed independently; a single global delay would
//! put mask tokens inside a delay window.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::codec::{apply_delay, delayed_prefix_columns, CodebookGrid, CodecError, CodecSpec, TokenId};

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("grids disagree on codec spec")]
    SpecMismatch,
    #[error("unknown tts variant {0:?} (expected middle, prefix, or suffix)")]
    UnknownVariant(String),
}

/// Speaker-slot content: a speaker id (embedded as a one-hot) or an
/// arbitrary pre-sampled speaker vector for promptless generation.
#[derive(Debug, Clone, PartialEq)]
pub enum SpeakerInput {
    Id(u32),
    Vector(Vec<f64>),
}

/// One slot of a layout sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum LayoutElement {
    TextTok(u32),
    SpeakerSlot(SpeakerInput),
    MaskTok,
    /// One delayed-grid column: exactly K ids, possibly pad on the delay
    /// diagonals.
    AudioCol(Vec<TokenId>),
    EndTok,
}

/// Which source segment a predicted column belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentTag {
    Prefix,
    Suffix,
    Middle,
    NonAudio,
}

impl SegmentTag {
    pub fn name(self) -> &'static str {
        match self {
            SegmentTag::Prefix => "prefix",
            SegmentTag::Suffix => "suffix",
            SegmentTag::Middle => "middle",
            SegmentTag::NonAudio => "nonaudio",
        }
    }
}

/// Per-segment loss weights: prefix 1, suffix 1, middle 3.
pub fn segment_weight(tag: SegmentTag) -> f64 {
    match tag {
        SegmentTag::Prefix | SegmentTag::Suffix => 1.0,
        SegmentTag::Middle => 3.0,
        SegmentTag::NonAudio => 0.0,
    }
}

/// A teacher-forced training sequence with per-position targets.
///
/// `target[i]` is what the model must predict at position `i`: the K ids of
/// the next audio column, or `[end, pad, ..]` when the next element is the
/// end marker (the stop signal lives on the first codebook head only).
/// Positions whose successor is text, a mask, or the speaker slot carry no
/// target, zero weight, and the `NonAudio` tag. `segment_tag[i]` names the
/// segment of the predicted column, and `weight[i] = segment_weight` of it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLayout {
    pub spec: CodecSpec,
    pub elements: Vec<LayoutElement>,
    pub target: Vec<Option<Vec<TokenId>>>,
    pub weight: Vec<f64>,
    pub segment_tag: Vec<SegmentTag>,
}

impl TrainingLayout {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Structural consistency of elements, targets, weights, and tags.
    pub fn validate(&self) -> Result<(), LayoutError> {
        let k = self.spec.num_codebooks;
        let n = self.elements.len();
        assert!(self.target.len() == n && self.weight.len() == n && self.segment_tag.len() == n);
        for (i, el) in self.elements.iter().enumerate() {
            if let LayoutElement::AudioCol(ids) = el {
                if ids.len() != k {
                    return Err(CodecError::WrongRowCount { expected: k, got: ids.len() }.into());
                }
            }
            match (&self.target[i], self.segment_tag[i]) {
                (None, SegmentTag::NonAudio) => assert_eq!(self.weight[i], 0.0),
                (Some(ids), tag) if tag != SegmentTag::NonAudio => {
                    assert_eq!(ids.len(), k);
                    assert_eq!(self.weight[i], segment_weight(tag));
                }
                (t, tag) => panic!("position {i}: target {t:?} inconsistent with tag {tag:?}"),
            }
        }
        Ok(())
    }

    /// Weights of positions predicting an audio column (the end-marker
    /// straddle is excluded), in order.
    pub fn audio_target_weights(&self) -> Vec<f64> {
        self.elements
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, el)| matches!(el, LayoutElement::AudioCol(_)))
            .map(|(i, _)| self.weight[i - 1])
            .collect()
    }

    /// Human-readable dump, one element per line, used for golden fixtures.
    pub fn fixture_string(&self) -> String {
        let mut out = String::new();
        let s = &self.spec;
        let _ = writeln!(out, "training-layout v1");
        let _ = writeln!(out, "k={} v={} pad={} mask={} end={}", s.num_codebooks, s.vocab_size, s.pad_id, s.mask_id, s.end_id);
        for (i, el) in self.elements.iter().enumerate() {
            let target = match &self.target[i] {
                Some(ids) => ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","),
                None => "-".to_string(),
            };
            let _ = writeln!(
                out,
                "elem {} | target={} w={} tag={}",
                element_text(el),
                target,
                self.weight[i],
                self.segment_tag[i].name()
            );
        }
        out
    }
}

/// An inference-time context: everything the model sees before it starts
/// emitting audio columns. `middle_prefill` counts trailing `AudioCol`
/// elements that are the already-present head of the stream being
/// continued (prompt audio in continuation-style synthesis); generation
/// resumes at that column index.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutSequence {
    pub spec: CodecSpec,
    pub elements: Vec<LayoutElement>,
    pub middle_prefill: usize,
}

impl LayoutSequence {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn fixture_string(&self) -> String {
        let mut out = String::new();
        let s = &self.spec;
        let _ = writeln!(out, "layout v1");
        let _ = writeln!(out, "k={} v={} pad={} mask={} end={}", s.num_codebooks, s.vocab_size, s.pad_id, s.mask_id, s.end_id);
        let _ = writeln!(out, "prefill={}", self.middle_prefill);
        for el in &self.elements {
            let _ = writeln!(out, "elem {}", element_text(el));
        }
        out
    }
}

fn element_text(el: &LayoutElement) -> String {
    match el {
        LayoutElement::TextTok(id) => format!("text {id}"),
        LayoutElement::SpeakerSlot(SpeakerInput::Id(id)) => format!("spk id={id}"),
        LayoutElement::SpeakerSlot(SpeakerInput::Vector(v)) => {
            let joined = v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            format!("spk vec={joined}")
        }
        LayoutElement::MaskTok => "mask".to_string(),
        LayoutElement::AudioCol(ids) => {
            let joined = ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
            format!("audio {joined}")
        }
        LayoutElement::EndTok => "end".to_string(),
    }
}

fn push_text(elements: &mut Vec<LayoutElement>, ids: &[u32]) {
    elements.extend(ids.iter().map(|&id| LayoutElement::TextTok(id)));
}

/// Delayed columns of a segment; empty segments contribute none.
fn delayed_columns(grid: &CodebookGrid) -> Vec<Vec<TokenId>> {
    if grid.is_empty() {
        Vec::new()
    } else {
        apply_delay(grid).columns()
    }
}

fn check_specs(spec: &CodecSpec, grids: &[&CodebookGrid]) -> Result<(), LayoutError> {
    if grids.iter().any(|g| g.spec() != spec) {
        return Err(LayoutError::SpecMismatch);
    }
    Ok(())
}

/// Teacher-forced training sequence in reordered prefix-suffix-middle form.
///
/// `texts` and `grids` are the (prefix, middle, suffix) slices of one
/// utterance. Every audio column is the prediction target of exactly one
/// position (its predecessor); the position after the last middle column
/// targets the end marker with middle weight.
pub fn build_training_sequence(
    texts: &[Vec<u32>; 3],
    grids: &[CodebookGrid; 3],
    speaker_id: u32,
) -> Result<TrainingLayout, LayoutError> {
    let spec = grids[0].spec().clone();
    check_specs(&spec, &[&grids[1], &grids[2]])?;
    let (t_p, t_m, t_s) = (&texts[0], &texts[1], &texts[2]);
    let (a_p, a_m, a_s) = (&grids[0], &grids[1], &grids[2]);

    let mut elements = Vec::new();
    push_text(&mut elements, t_p);
    push_text(&mut elements, t_s);
    push_text(&mut elements, t_m);
    elements.push(LayoutElement::SpeakerSlot(SpeakerInput::Id(speaker_id)));
    let mut tags = vec![SegmentTag::NonAudio; elements.len()];
    for (grid, tag) in [(a_p, SegmentTag::Prefix), (a_s, SegmentTag::Suffix)] {
        for col in delayed_columns(grid) {
            elements.push(LayoutElement::AudioCol(col));
            tags.push(tag);
        }
        elements.push(LayoutElement::MaskTok);
        tags.push(SegmentTag::NonAudio);
    }
    for col in delayed_columns(a_m) {
        elements.push(LayoutElement::AudioCol(col));
        tags.push(SegmentTag::Middle);
    }
    elements.push(LayoutElement::EndTok);
    tags.push(SegmentTag::NonAudio);

    Ok(attach_targets(spec, elements, &tags, |_| true))
}

/// Natural-order counterpart used by the reordering ablation: text stays
/// prefix-middle-suffix, audio stays in place with the middle between the
/// two masks, targets cover only middle columns, and there is no end
/// marker (nothing after the middle is predicted).
pub fn build_natural_training_sequence(
    texts: &[Vec<u32>; 3],
    grids: &[CodebookGrid; 3],
    speaker_id: u32,
) -> Result<TrainingLayout, LayoutError> {
    let spec = grids[0].spec().clone();
    check_specs(&spec, &[&grids[1], &grids[2]])?;
    let (a_p, a_m, a_s) = (&grids[0], &grids[1], &grids[2]);

    let mut elements = Vec::new();
    for text in texts {
        push_text(&mut elements, text);
    }
    elements.push(LayoutElement::SpeakerSlot(SpeakerInput::Id(speaker_id)));
    let mut tags = vec![SegmentTag::NonAudio; elements.len()];
    for col in delayed_columns(a_p) {
        elements.push(LayoutElement::AudioCol(col));
        tags.push(SegmentTag::Prefix);
    }
    elements.push(LayoutElement::MaskTok);
    tags.push(SegmentTag::NonAudio);
    for col in delayed_columns(a_m) {
        elements.push(LayoutElement::AudioCol(col));
        tags.push(SegmentTag::Middle);
    }
    elements.push(LayoutElement::MaskTok);
    tags.push(SegmentTag::NonAudio);
    for col in delayed_columns(a_s) {
        elements.push(LayoutElement::AudioCol(col));
        tags.push(SegmentTag::Suffix);
    }

    Ok(attach_targets(spec, elements, &tags, |tag| tag == SegmentTag::Middle))
}

/// Attach per-position targets: position `i` predicts element `i + 1` when
/// that element is an audio column whose tag passes `predict` (or the end
/// marker, treated as middle).
fn attach_targets(
    spec: CodecSpec,
    elements: Vec<LayoutElement>,
    element_tags: &[SegmentTag],
    predict: impl Fn(SegmentTag) -> bool,
) -> TrainingLayout {
    let k = spec.num_codebooks;
    let n = elements.len();
    let mut target = vec![None; n];
    let mut weight = vec![0.0; n];
    let mut segment_tag = vec![SegmentTag::NonAudio; n];
    for i in 0..n.saturating_sub(1) {
        match &elements[i + 1] {
            LayoutElement::AudioCol(ids) if predict(element_tags[i + 1]) => {
                target[i] = Some(ids.clone());
                segment_tag[i] = element_tags[i + 1];
                weight[i] = segment_weight(element_tags[i + 1]);
            }
            LayoutElement::EndTok => {
                let mut ids = vec![spec.pad_id; k];
                ids[0] = spec.end_id;
                target[i] = Some(ids);
                segment_tag[i] = SegmentTag::Middle;
                weight[i] = segment_weight(SegmentTag::Middle);
            }
            _ => {}
        }
    }
    TrainingLayout { spec, elements, target, weight, segment_tag }
}

/// Editing context: new middle text replaces the old, prefix/suffix audio
/// is kept as context, and generation starts after the final mask.
pub fn build_edit_inference(
    t_p: &[u32],
    t_s: &[u32],
    t_m_new: &[u32],
    a_p: &CodebookGrid,
    a_s: &CodebookGrid,
    speaker: SpeakerInput,
) -> Result<LayoutSequence, LayoutError> {
    let spec = a_p.spec().clone();
    check_specs(&spec, &[a_s])?;
    let mut elements = Vec::new();
    push_text(&mut elements, t_p);
    push_text(&mut elements, t_s);
    push_text(&mut elements, t_m_new);
    elements.push(LayoutElement::SpeakerSlot(speaker));
    for grid in [a_p, a_s] {
        elements.extend(delayed_columns(grid).into_iter().map(LayoutElement::AudioCol));
        elements.push(LayoutElement::MaskTok);
    }
    Ok(LayoutSequence { spec, elements, middle_prefill: 0 })
}

/// Where prompt text and audio sit in a synthesis layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtsVariant {
    /// Prompt starts the middle segment; generation continues it.
    Middle,
    /// Prompt fills the prefix segment.
    Prefix,
    /// Prompt fills the suffix segment.
    Suffix,
}

impl TtsVariant {
    pub fn name(self) -> &'static str {
        match self {
            TtsVariant::Middle => "middle",
            TtsVariant::Prefix => "prefix",
            TtsVariant::Suffix => "suffix",
        }
    }
}

impl FromStr for TtsVariant {
    type Err = LayoutError;

    fn from_str(s: &str) -> Result<Self, LayoutError> {
        match s {
            "middle" => Ok(TtsVariant::Middle),
            "prefix" => Ok(TtsVariant::Prefix),
            "suffix" => Ok(TtsVariant::Suffix),
            other => Err(LayoutError::UnknownVariant(other.to_string())),
        }
    }
}

/// Synthesis context for `t_target`, optionally conditioned on a prompt.
///
/// The default `Middle` variant appends the prompt audio after the second
/// mask as the head of the middle stream (delayed view without the trailing
/// flush, since the stream keeps going; `middle_prefill` marks it).
/// `Prefix`/`Suffix` place the prompt as a complete context segment
/// instead. With no prompt the layout holds no audio columns and `speaker`
/// alone determines the voice.
pub fn build_tts_inference(
    t_prompt: &[u32],
    t_target: &[u32],
    a_prompt: &CodebookGrid,
    speaker: SpeakerInput,
    variant: TtsVariant,
) -> Result<LayoutSequence, LayoutError> {
    let spec = a_prompt.spec().clone();
    let mut elements = Vec::new();
    push_text(&mut elements, t_prompt);
    push_text(&mut elements, t_target);
    elements.push(LayoutElement::SpeakerSlot(speaker));
    let mut middle_prefill = 0;
    match variant {
        TtsVariant::Middle => {
            elements.push(LayoutElement::MaskTok);
            elements.push(LayoutElement::MaskTok);
            let cols = if a_prompt.is_empty() { Vec::new() } else { delayed_prefix_columns(a_prompt) };
            middle_prefill = cols.len();
            elements.extend(cols.into_iter().map(LayoutElement::AudioCol));
        }
        TtsVariant::Prefix => {
            elements.extend(delayed_columns(a_prompt).into_iter().map(LayoutElement::AudioCol));
            elements.push(LayoutElement::MaskTok);
            elements.push(LayoutElement::MaskTok);
        }
        TtsVariant::Suffix => {
            elements.push(LayoutElement::MaskTok);
            elements.extend(delayed_columns(a_prompt).into_iter().map(LayoutElement::AudioCol));
            elements.push(LayoutElement::MaskTok);
        }
    }
    Ok(LayoutSequence { spec, elements, middle_prefill })
}

/// Natural-order infilling context for the reordering ablation: generation
/// must produce the middle right after the first mask, without ever seeing
/// the suffix audio.
pub fn build_natural_infill_inference(
    t_p: &[u32],
    t_m_new: &[u32],
    t_s: &[u32],
    a_p: &CodebookGrid,
    speaker: SpeakerInput,
) -> Result<LayoutSequence, LayoutError> {
    let spec = a_p.spec().clone();
    let mut elements = Vec::new();
    push_text(&mut elements, t_p);
    push_text(&mut elements, t_m_new);
    push_text(&mut elements, t_s);
    elements.push(LayoutElement::SpeakerSlot(speaker));
    elements.extend(delayed_columns(a_p).into_iter().map(LayoutElement::AudioCol));
    elements.push(LayoutElement::MaskTok);
    Ok(LayoutSequence { spec, elements, middle_prefill: 0 })
}

/// Column-wise splice prefix ‖ middle ‖ suffix.
pub fn splice_edit(
    a_p: &CodebookGrid,
    a_m_generated: &CodebookGrid,
    a_s: &CodebookGrid,
) -> Result<CodebookGrid, LayoutError> {
    Ok(CodebookGrid::concat(&[a_p, a_m_generated, a_s])?)
}
