//! Time-aligned transcripts and the random prefix/middle/suffix split.
//!
//! Every utterance carries its transcript as symbol units with exact frame
//! spans. Training draws a random split over unit boundaries; the middle
//! becomes the generation target while prefix and suffix form the context.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodebookGrid, CodecError, CodecSpec, TokenId};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("invalid aligned units: {0}")]
    InvalidUnits(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("corpus meta json: {0}")]
    Meta(#[from] serde_json::Error),
}

/// One transcript symbol with its frame span (`end_frame` exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedUnit {
    pub symbol: u32,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// A transcript aligned to a codec grid, with the speaker that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedUtterance {
    units: Vec<AlignedUnit>,
    grid: CodebookGrid,
    speaker_id: u32,
}

impl AlignedUtterance {
    /// Units may be empty (an empty transcript with an empty grid).
    pub fn new(units: Vec<AlignedUnit>, grid: CodebookGrid, speaker_id: u32) -> Result<Self, AlignError> {
        for (i, u) in units.iter().enumerate() {
            if u.start_frame >= u.end_frame {
                return Err(AlignError::InvalidUnits(format!(
                    "unit {i} has empty span {}..{}",
                    u.start_frame, u.end_frame
                )));
            }
            if i > 0 && units[i - 1].end_frame > u.start_frame {
                return Err(AlignError::InvalidUnits(format!("unit {i} overlaps or precedes unit {}", i - 1)));
            }
        }
        if let Some(last) = units.last() {
            if last.end_frame > grid.width() {
                return Err(AlignError::InvalidUnits(format!(
                    "units extend to frame {} but grid has {} frames",
                    last.end_frame,
                    grid.width()
                )));
            }
        }
        Ok(AlignedUtterance { units, grid, speaker_id })
    }

    pub fn units(&self) -> &[AlignedUnit] {
        &self.units
    }

    pub fn grid(&self) -> &CodebookGrid {
        &self.grid
    }

    pub fn speaker_id(&self) -> u32 {
        self.speaker_id
    }

    pub fn symbols(&self) -> Vec<u32> {
        self.units.iter().map(|u| u.symbol).collect()
    }
}

/// Three contiguous unit ranges covering the whole transcript in order.
/// Prefix and suffix may be empty; the middle never is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSplit {
    pub prefix_units: Range<usize>,
    pub middle_units: Range<usize>,
    pub suffix_units: Range<usize>,
}

impl SegmentSplit {
    /// Split from cut points `a <= b`: prefix `[0, a)`, middle `[a, b)`,
    /// suffix `[b, n)`.
    pub fn from_cuts(a: usize, b: usize, n_units: usize) -> Result<Self, AlignError> {
        let split = SegmentSplit { prefix_units: 0..a, middle_units: a..b, suffix_units: b..n_units };
        split.validate(n_units)?;
        Ok(split)
    }

    pub fn validate(&self, n_units: usize) -> Result<(), AlignError> {
        let (p, m, s) = (&self.prefix_units, &self.middle_units, &self.suffix_units);
        if p.start != 0 || p.end != m.start || m.end != s.start || s.end != n_units {
            return Err(AlignError::InvalidSplit(format!(
                "ranges {p:?} {m:?} {s:?} do not tile 0..{n_units}"
            )));
        }
        if m.is_empty() {
            return Err(AlignError::InvalidSplit("middle segment is empty".into()));
        }
        Ok(())
    }

    pub fn is_whole_middle(&self) -> bool {
        self.prefix_units.is_empty() && self.suffix_units.is_empty()
    }
}

/// How [`sample_split`] draws cut points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitPolicy {
    /// Probability of the whole-utterance middle (empty prefix and suffix),
    /// the layout continuation-style inference uses.
    pub p_tts: f64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy { p_tts: 0.3 }
    }
}

/// Draw a random split: with probability `p_tts` the whole utterance is the
/// middle; otherwise two cut points are drawn uniformly over unit
/// boundaries, redrawn until the middle is non-empty and at least one of
/// prefix/suffix is non-empty. A unitless utterance (outside the usual
/// single-unit floor) collapses to three empty ranges.
pub fn sample_split<R: Rng>(utt: &AlignedUtterance, rng: &mut R, policy: SplitPolicy) -> SegmentSplit {
    let n = utt.units().len();
    if n == 0 {
        return SegmentSplit { prefix_units: 0..0, middle_units: 0..0, suffix_units: 0..0 };
    }
    if n == 1 {
        return SegmentSplit::from_cuts(0, 1, 1).unwrap();
    }
    if rng.random_bool(policy.p_tts.clamp(0.0, 1.0)) {
        return SegmentSplit::from_cuts(0, n, n).unwrap();
    }
    loop {
        let x = rng.random_range(0..=n);
        let y = rng.random_range(0..=n);
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        if a == b {
            continue;
        }
        if a == 0 && b == n {
            continue;
        }
        return SegmentSplit::from_cuts(a, b, n).unwrap();
    }
}

/// Cut the transcript and grid into (prefix, middle, suffix) parts. Grid
/// segments take whole unit spans, so concatenating them in prefix, middle,
/// suffix order reproduces the original grid.
pub fn slice(
    utt: &AlignedUtterance,
    split: &SegmentSplit,
) -> Result<([Vec<u32>; 3], [CodebookGrid; 3]), AlignError> {
    split.validate(utt.units().len())?;
    let part = |range: &Range<usize>| -> (Vec<u32>, CodebookGrid) {
        let units = &utt.units()[range.clone()];
        let text = units.iter().map(|u| u.symbol).collect();
        let grid = match (units.first(), units.last()) {
            (Some(first), Some(last)) => utt.grid().slice_cols(first.start_frame, last.end_frame),
            _ => CodebookGrid::empty(utt.grid().spec().clone()),
        };
        (text, grid)
    };
    let (tp, gp) = part(&split.prefix_units);
    let (tm, gm) = part(&split.middle_units);
    let (ts, gs) = part(&split.suffix_units);
    Ok(([tp, tm, ts], [gp, gm, gs]))
}

const CORPUS_MAGIC: &str = "codecorpus v1";

/// An utterance collection with its codec contract and origin metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CodecSpec,
    pub meta: serde_json::Value,
    pub utterances: Vec<AlignedUtterance>,
}

/// Write a corpus in the versioned text container format:
///
/// ```text
/// codecorpus v1
/// meta <one-line json>
/// spec <one-line json>
/// count=<N>
/// utt speaker=<id> units=<n>
/// unit <symbol> <start> <end>      (n lines)
/// row <tok> ...                    (K lines)
/// ```
pub fn write_corpus<W: Write>(w: &mut W, corpus: &Corpus) -> Result<(), AlignError> {
    let meta = serde_json::to_string(&corpus.meta)?;
    if meta.contains('\n') {
        return Err(AlignError::InvalidUnits("meta json must serialize to one line".into()));
    }
    writeln!(w, "{CORPUS_MAGIC}")?;
    writeln!(w, "meta {meta}")?;
    writeln!(w, "spec {}", serde_json::to_string(&corpus.spec)?)?;
    writeln!(w, "count={}", corpus.utterances.len())?;
    for utt in &corpus.utterances {
        if utt.grid().spec() != &corpus.spec {
            return Err(CodecError::SpecMismatch.into());
        }
        writeln!(w, "utt speaker={} units={}", utt.speaker_id(), utt.units().len())?;
        for u in utt.units() {
            writeln!(w, "unit {} {} {}", u.symbol, u.start_frame, u.end_frame)?;
        }
        for row in utt.grid().rows() {
            write!(w, "row")?;
            for tok in row {
                write!(w, " {tok}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: &mut R) -> Result<Corpus, AlignError> {
    let mut lines = r.lines().enumerate();
    let mut next_line = |what: &str| -> Result<(usize, String), AlignError> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(AlignError::Parse { line: i + 1, msg: e.to_string() }),
            None => Err(AlignError::Parse { line: 0, msg: format!("missing {what}") }),
        }
    };
    let (ln, magic) = next_line("magic")?;
    if magic.trim() != CORPUS_MAGIC {
        return Err(AlignError::Parse { line: ln, msg: format!("bad magic {magic:?}") });
    }
    let (ln, meta_line) = next_line("meta")?;
    let meta_json = meta_line
        .strip_prefix("meta ")
        .ok_or_else(|| AlignError::Parse { line: ln, msg: "expected meta line".into() })?;
    let meta: serde_json::Value = serde_json::from_str(meta_json)?;
    let (ln, spec_line) = next_line("spec")?;
    let spec_json = spec_line
        .strip_prefix("spec ")
        .ok_or_else(|| AlignError::Parse { line: ln, msg: "expected spec line".into() })?;
    let spec: CodecSpec = serde_json::from_str(spec_json)?;
    spec.validate()?;
    let (ln, count_line) = next_line("count")?;
    let count: usize = count_line
        .trim()
        .strip_prefix("count=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| AlignError::Parse { line: ln, msg: format!("bad count line {count_line:?}") })?;
    let mut utterances = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, utt_line) = next_line("utt header")?;
        let mut fields = HashMap::new();
        let mut parts = utt_line.split_whitespace();
        if parts.next() != Some("utt") {
            return Err(AlignError::Parse { line: ln, msg: format!("expected utt line, got {utt_line:?}") });
        }
        for part in parts {
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| AlignError::Parse { line: ln, msg: format!("bad field {part:?}") })?;
            let val: usize = val
                .parse()
                .map_err(|_| AlignError::Parse { line: ln, msg: format!("bad value in {part:?}") })?;
            fields.insert(key.to_string(), val);
        }
        let speaker = *fields
            .get("speaker")
            .ok_or_else(|| AlignError::Parse { line: ln, msg: "missing speaker".into() })? as u32;
        let n_units = *fields
            .get("units")
            .ok_or_else(|| AlignError::Parse { line: ln, msg: "missing units".into() })?;
        let mut units = Vec::with_capacity(n_units);
        for _ in 0..n_units {
            let (ln, unit_line) = next_line("unit")?;
            let nums: Vec<usize> = unit_line
                .split_whitespace()
                .skip(1)
                .map(|p| p.parse().map_err(|_| AlignError::Parse { line: ln, msg: format!("bad unit field {p:?}") }))
                .collect::<Result<_, _>>()?;
            if !unit_line.starts_with("unit ") || nums.len() != 3 {
                return Err(AlignError::Parse { line: ln, msg: format!("bad unit line {unit_line:?}") });
            }
            units.push(AlignedUnit { symbol: nums[0] as u32, start_frame: nums[1], end_frame: nums[2] });
        }
        let mut rows = Vec::with_capacity(spec.num_codebooks);
        for _ in 0..spec.num_codebooks {
            let (ln, row_line) = next_line("row")?;
            let mut parts = row_line.split_whitespace();
            if parts.next() != Some("row") {
                return Err(AlignError::Parse { line: ln, msg: format!("expected row line, got {row_line:?}") });
            }
            let row: Vec<TokenId> = parts
                .map(|p| p.parse().map_err(|_| AlignError::Parse { line: ln, msg: format!("bad token {p:?}") }))
                .collect::<Result<_, _>>()?;
            rows.push(row);
        }
        let grid = CodebookGrid::new(spec.clone(), rows)?;
        utterances.push(AlignedUtterance::new(units, grid, speaker)?);
    }
    Ok(Corpus { spec, meta, utterances })
}
