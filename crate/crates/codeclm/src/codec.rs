//! K-codebook token grids and the per-codebook delay pattern.
//!
//! A codec utterance is a `K x T` grid of discrete tokens: `K` parallel
//! codebook streams over `T` frames. Autoregressive modeling uses a delayed
//! view in which codebook `k` is shifted right by `k` steps, so the cell for
//! frame `t` at level `k` sits at column `t + k` and is predicted after the
//! cells of levels `0..k` for the same frame.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token id inside the (extended) audio vocabulary.
pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("grid rows are ragged: row {row} has length {len}, expected {expected}")]
    RaggedRows { row: usize, len: usize, expected: usize },
    #[error("expected {expected} codebook rows, got {got}")]
    WrongRowCount { expected: usize, got: usize },
    #[error("token {token} at row {row}, col {col} is outside the codec vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, row: usize, col: usize, vocab: u32 },
    #[error("malformed delay pattern at row {row}, col {col}: {reason}")]
    MalformedDelay { row: usize, col: usize, reason: &'static str },
    #[error("codec spec mismatch between grids")]
    SpecMismatch,
    #[error("invalid codec spec: {0}")]
    InvalidSpec(String),
    #[error("grid io: {0}")]
    Io(#[from] std::io::Error),
    #[error("grid parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Shape and vocabulary contract for a codec token stream.
///
/// The three special ids live directly above the codec vocabulary:
/// `pad = V`, `mask = V + 1`, `end = V + 2`. They never appear inside an
/// undelayed grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub num_codebooks: usize,
    pub vocab_size: u32,
    pub frame_rate_hz: u32,
    pub pad_id: TokenId,
    pub mask_id: TokenId,
    pub end_id: TokenId,
}

impl CodecSpec {
    /// Spec with specials appended after the `vocab_size` codec ids.
    pub fn new(num_codebooks: usize, vocab_size: u32, frame_rate_hz: u32) -> Result<Self, CodecError> {
        let spec = CodecSpec {
            num_codebooks,
            vocab_size,
            frame_rate_hz,
            pad_id: vocab_size,
            mask_id: vocab_size + 1,
            end_id: vocab_size + 2,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.num_codebooks == 0 {
            return Err(CodecError::InvalidSpec("num_codebooks must be >= 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(CodecError::InvalidSpec("vocab_size must be >= 2".into()));
        }
        if self.frame_rate_hz == 0 {
            return Err(CodecError::InvalidSpec("frame_rate_hz must be >= 1".into()));
        }
        let v = self.vocab_size;
        let ids = [self.pad_id, self.mask_id, self.end_id];
        if ids[0] < v || ids[1] < v || ids[2] < v {
            return Err(CodecError::InvalidSpec("special ids must sit outside the codec vocabulary".into()));
        }
        if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
            return Err(CodecError::InvalidSpec("special ids must be distinct".into()));
        }
        Ok(())
    }

    /// Full-scale contract: 4 codebooks, 2048 entries each, 50 Hz.
    pub fn full_scale() -> Self {
        CodecSpec::new(4, 2048, 50).expect("full-scale spec is valid")
    }

    /// Size of the extended vocabulary seen by embeddings and output heads.
    pub fn extended_vocab(&self) -> u32 {
        self.end_id.max(self.mask_id).max(self.pad_id) + 1
    }

    pub fn is_codec_token(&self, id: TokenId) -> bool {
        id < self.vocab_size
    }
}

/// Undelayed `K x T` grid of codec tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodebookGrid {
    spec: CodecSpec,
    tokens: Vec<Vec<TokenId>>,
}

impl CodebookGrid {
    pub fn new(spec: CodecSpec, tokens: Vec<Vec<TokenId>>) -> Result<Self, CodecError> {
        if tokens.len() != spec.num_codebooks {
            return Err(CodecError::WrongRowCount { expected: spec.num_codebooks, got: tokens.len() });
        }
        let width = tokens[0].len();
        for (row, r) in tokens.iter().enumerate() {
            if r.len() != width {
                return Err(CodecError::RaggedRows { row, len: r.len(), expected: width });
            }
            for (col, &tok) in r.iter().enumerate() {
                if !spec.is_codec_token(tok) {
                    return Err(CodecError::TokenOutOfRange { token: tok, row, col, vocab: spec.vocab_size });
                }
            }
        }
        Ok(CodebookGrid { spec, tokens })
    }

    pub fn empty(spec: CodecSpec) -> Self {
        let k = spec.num_codebooks;
        CodebookGrid { spec, tokens: vec![Vec::new(); k] }
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    pub fn rows(&self) -> &[Vec<TokenId>] {
        &self.tokens
    }

    /// Number of frames T.
    pub fn width(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0
    }

    pub fn column(&self, t: usize) -> Vec<TokenId> {
        self.tokens.iter().map(|r| r[t]).collect()
    }

    /// Copy of the frame range `[start, end)` across all codebooks.
    pub fn slice_cols(&self, start: usize, end: usize) -> CodebookGrid {
        let tokens = self.tokens.iter().map(|r| r[start..end].to_vec()).collect();
        CodebookGrid { spec: self.spec.clone(), tokens }
    }

    /// Column-wise concatenation. All grids must share one spec.
    pub fn concat(parts: &[&CodebookGrid]) -> Result<CodebookGrid, CodecError> {
        let first = parts.first().ok_or(CodecError::SpecMismatch)?;
        let spec = first.spec.clone();
        let mut tokens = vec![Vec::new(); spec.num_codebooks];
        for part in parts {
            if part.spec != spec {
                return Err(CodecError::SpecMismatch);
            }
            for (k, row) in part.tokens.iter().enumerate() {
                tokens[k].extend_from_slice(row);
            }
        }
        Ok(CodebookGrid { spec, tokens })
    }
}

/// Delayed `K x (T + K - 1)` view: row `k` is the source row shifted right by
/// `k`, with `pad` filling the vacated and overhanging cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayedGrid {
    spec: CodecSpec,
    tokens: Vec<Vec<TokenId>>,
}

impl DelayedGrid {
    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    pub fn rows(&self) -> &[Vec<TokenId>] {
        &self.tokens
    }

    pub fn width(&self) -> usize {
        self.tokens[0].len()
    }

    /// Source frame count.
    pub fn source_width(&self) -> usize {
        self.width() + 1 - self.spec.num_codebooks
    }

    pub fn column(&self, c: usize) -> Vec<TokenId> {
        self.tokens.iter().map(|r| r[c]).collect()
    }

    /// All columns, left to right.
    pub fn columns(&self) -> Vec<Vec<TokenId>> {
        (0..self.width()).map(|c| self.column(c)).collect()
    }
}

/// Shift row `k` right by `k` steps, padding the `K - 1` vacated cells.
pub fn apply_delay(grid: &CodebookGrid) -> DelayedGrid {
    let spec = grid.spec().clone();
    let k_total = spec.num_codebooks;
    let t = grid.width();
    let width = t + k_total - 1;
    let pad = spec.pad_id;
    let tokens = grid
        .rows()
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let mut out = Vec::with_capacity(width);
            out.extend(std::iter::repeat(pad).take(k));
            out.extend_from_slice(row);
            out.extend(std::iter::repeat(pad).take(k_total - 1 - k));
            out
        })
        .collect();
    DelayedGrid { spec, tokens }
}

/// Inverse of [`apply_delay`]. Rejects grids whose pads are anywhere other
/// than the delay diagonals.
pub fn remove_delay(delayed: &DelayedGrid) -> Result<CodebookGrid, CodecError> {
    let spec = delayed.spec.clone();
    let k_total = spec.num_codebooks;
    let width = delayed.width();
    if width < k_total - 1 {
        return Err(CodecError::MalformedDelay { row: 0, col: 0, reason: "grid narrower than the delay window" });
    }
    let t = width + 1 - k_total;
    let pad = spec.pad_id;
    let mut tokens = Vec::with_capacity(k_total);
    for (k, row) in delayed.tokens.iter().enumerate() {
        if row.len() != width {
            return Err(CodecError::RaggedRows { row: k, len: row.len(), expected: width });
        }
        for (c, &tok) in row.iter().enumerate() {
            let in_data = c >= k && c < k + t;
            if in_data && tok == pad {
                return Err(CodecError::MalformedDelay { row: k, col: c, reason: "pad id in a data cell" });
            }
            if !in_data && tok != pad {
                return Err(CodecError::MalformedDelay { row: k, col: c, reason: "data token in a pad cell" });
            }
        }
        tokens.push(row[k..k + t].to_vec());
    }
    CodebookGrid::new(spec, tokens)
}

/// First `T` columns of the delayed view of `grid`: the form a delayed
/// stream takes while it is still being continued, before the trailing
/// `K - 1` flush columns exist. Row `k` of column `c` holds frame `c - k`,
/// or pad when `c < k`.
pub fn delayed_prefix_columns(grid: &CodebookGrid) -> Vec<Vec<TokenId>> {
    let spec = grid.spec();
    let pad = spec.pad_id;
    (0..grid.width())
        .map(|c| {
            grid.rows()
                .iter()
                .enumerate()
                .map(|(k, row)| if c >= k { row[c - k] } else { pad })
                .collect()
        })
        .collect()
}

const GRID_FILE_MAGIC: &str = "codecgrid v1";

/// Write a grid in the text container format:
///
/// ```text
/// codecgrid v1
/// k=<K> v=<V> frame_rate=<Hz> pad=<id> mask=<id> end=<id>
/// t=<T>
/// row <tok> <tok> ...          (K lines, codebook 0 first)
/// ```
pub fn write_grid<W: Write>(w: &mut W, grid: &CodebookGrid) -> Result<(), CodecError> {
    let s = grid.spec();
    writeln!(w, "{GRID_FILE_MAGIC}")?;
    writeln!(
        w,
        "k={} v={} frame_rate={} pad={} mask={} end={}",
        s.num_codebooks, s.vocab_size, s.frame_rate_hz, s.pad_id, s.mask_id, s.end_id
    )?;
    writeln!(w, "t={}", grid.width())?;
    for row in grid.rows() {
        write!(w, "row")?;
        for tok in row {
            write!(w, " {tok}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_grid<R: BufRead>(r: &mut R) -> Result<CodebookGrid, CodecError> {
    let mut lines = r.lines().enumerate();
    let mut next_line = |what: &str| -> Result<(usize, String), CodecError> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(CodecError::Parse { line: i + 1, msg: e.to_string() }),
            None => Err(CodecError::Parse { line: 0, msg: format!("missing {what}") }),
        }
    };
    let (ln, magic) = next_line("magic")?;
    if magic.trim() != GRID_FILE_MAGIC {
        return Err(CodecError::Parse { line: ln, msg: format!("bad magic {magic:?}") });
    }
    let (ln, header) = next_line("spec header")?;
    let mut fields = std::collections::HashMap::new();
    for part in header.split_whitespace() {
        let (key, val) = part
            .split_once('=')
            .ok_or_else(|| CodecError::Parse { line: ln, msg: format!("bad field {part:?}") })?;
        let val: u32 = val
            .parse()
            .map_err(|_| CodecError::Parse { line: ln, msg: format!("bad value in {part:?}") })?;
        fields.insert(key.to_string(), val);
    }
    let get = |key: &str| -> Result<u32, CodecError> {
        fields.get(key).copied().ok_or_else(|| CodecError::Parse { line: ln, msg: format!("missing field {key}") })
    };
    let spec = CodecSpec {
        num_codebooks: get("k")? as usize,
        vocab_size: get("v")?,
        frame_rate_hz: get("frame_rate")?,
        pad_id: get("pad")?,
        mask_id: get("mask")?,
        end_id: get("end")?,
    };
    spec.validate()?;
    let (ln, t_line) = next_line("t header")?;
    let t: usize = t_line
        .trim()
        .strip_prefix("t=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CodecError::Parse { line: ln, msg: format!("bad t line {t_line:?}") })?;
    let mut tokens = Vec::with_capacity(spec.num_codebooks);
    for _ in 0..spec.num_codebooks {
        let (ln, row_line) = next_line("row")?;
        let mut parts = row_line.split_whitespace();
        if parts.next() != Some("row") {
            return Err(CodecError::Parse { line: ln, msg: "expected row line".into() });
        }
        let row: Vec<TokenId> = parts
            .map(|p| p.parse::<TokenId>().map_err(|_| CodecError::Parse { line: ln, msg: format!("bad token {p:?}") }))
            .collect::<Result<_, _>>()?;
        if row.len() != t {
            return Err(CodecError::Parse { line: ln, msg: format!("row has {} tokens, expected {t}", row.len()) });
        }
        tokens.push(row);
    }
    CodebookGrid::new(spec, tokens)
}
