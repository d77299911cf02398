//! Deterministic synthetic codec: an invertible mapping from symbol
//! sequences to token grids, standing in for a neural audio codec.
//!
//! Each symbol occupies `d` consecutive frames whose column is fully
//! determined by the symbol and the speaker:
//!
//! ```text
//! tokens[k][t] = symbol_at(t) * K + k + speaker_id * A * K
//! ```
//!
//! The rule is injective when `A * K * S <= V`, so decoding can recover the
//! exact symbols and speaker, and model outputs can be scored by exact
//! symbol match.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{AlignedUnit, AlignedUtterance, Corpus};
use crate::codec::{CodebookGrid, CodecSpec, TokenId};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid toy language: {0}")]
    InvalidSpec(String),
    #[error("symbol {0} outside alphabet of {1}")]
    SymbolOutOfRange(u32, u32),
    #[error("speaker {0} outside {1} speakers")]
    SpeakerOutOfRange(u32, u32),
    #[error("expected {expected} rows of equal length, got row {row} with length {len} (first row {first})")]
    BadRows { expected: usize, row: usize, len: usize, first: usize },
}

/// A tiny language over `A` symbols spoken by `S` speakers, rendered at `d`
/// frames per symbol into the codec described by `spec`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLanguageSpec {
    pub alphabet_size: u32,
    pub frames_per_symbol: usize,
    pub num_speakers: u32,
    pub spec: CodecSpec,
}

impl ToyLanguageSpec {
    pub fn new(
        alphabet_size: u32,
        frames_per_symbol: usize,
        num_speakers: u32,
        spec: CodecSpec,
    ) -> Result<Self, ToyError> {
        let toy = ToyLanguageSpec { alphabet_size, frames_per_symbol, num_speakers, spec };
        toy.validate()?;
        Ok(toy)
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        if self.alphabet_size == 0 || self.num_speakers == 0 {
            return Err(ToyError::InvalidSpec("alphabet and speaker counts must be >= 1".into()));
        }
        if self.frames_per_symbol == 0 {
            return Err(ToyError::InvalidSpec("frames_per_symbol must be >= 1".into()));
        }
        let k = self.spec.num_codebooks as u64;
        let needed = self.alphabet_size as u64 * k * self.num_speakers as u64;
        if needed > self.spec.vocab_size as u64 {
            return Err(ToyError::InvalidSpec(format!(
                "A*K*S = {needed} exceeds vocab {} so encoding would not be injective",
                self.spec.vocab_size
            )));
        }
        Ok(())
    }

    fn cell(&self, symbol: u32, speaker: u32, k: usize) -> TokenId {
        let k_total = self.spec.num_codebooks as u32;
        (speaker * self.alphabet_size * k_total + symbol * k_total + k as u32) % self.spec.vocab_size
    }

    /// Invert one cell at codebook row `k`. Valid cells satisfy
    /// `token % K == k` and fall below `A*K*S`.
    fn invert_cell(&self, token: TokenId, k: usize) -> Option<(u32, u32)> {
        let k_total = self.spec.num_codebooks as u32;
        let ceiling = self.alphabet_size * k_total * self.num_speakers;
        if token >= ceiling || token % k_total != k as u32 {
            return None;
        }
        let q = token / k_total;
        Some((q % self.alphabet_size, q / self.alphabet_size))
    }
}

/// Render symbols for one speaker into an aligned utterance. Each symbol
/// occupies `d` frames with identical columns; units carry the exact spans.
pub fn encode(toy: &ToyLanguageSpec, symbols: &[u32], speaker_id: u32) -> Result<AlignedUtterance, ToyError> {
    if speaker_id >= toy.num_speakers {
        return Err(ToyError::SpeakerOutOfRange(speaker_id, toy.num_speakers));
    }
    for &s in symbols {
        if s >= toy.alphabet_size {
            return Err(ToyError::SymbolOutOfRange(s, toy.alphabet_size));
        }
    }
    let d = toy.frames_per_symbol;
    let k_total = toy.spec.num_codebooks;
    let mut rows = vec![Vec::with_capacity(symbols.len() * d); k_total];
    let mut units = Vec::with_capacity(symbols.len());
    for (i, &sym) in symbols.iter().enumerate() {
        units.push(AlignedUnit { symbol: sym, start_frame: i * d, end_frame: (i + 1) * d });
        for (k, row) in rows.iter_mut().enumerate() {
            let tok = toy.cell(sym, speaker_id, k);
            row.extend(std::iter::repeat(tok).take(d));
        }
    }
    let grid = CodebookGrid::new(toy.spec.clone(), rows).expect("encoded cells are in-vocabulary");
    Ok(AlignedUtterance::new(units, grid, speaker_id).expect("encoded spans tile the grid"))
}

/// Best-effort inverse of [`encode`] for arbitrary token rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyDecode {
    /// Majority-vote symbol per `d`-frame window; windows with no valid
    /// cell emit nothing.
    pub symbols: Vec<u32>,
    /// Majority speaker across all valid cells, if any.
    pub speaker_id: Option<u32>,
    /// Per-frame flag: all `K` cells invert and agree on one
    /// (symbol, speaker) pair.
    pub frame_valid: Vec<bool>,
}

/// Decode a well-formed grid.
pub fn decode(toy: &ToyLanguageSpec, grid: &CodebookGrid) -> ToyDecode {
    decode_rows(toy, grid.rows()).expect("grid rows are rectangular")
}

/// Decode raw rows (model output may contain special or junk ids; those
/// cells simply lose their vote). Rows must be rectangular with `K` rows.
pub fn decode_rows(toy: &ToyLanguageSpec, rows: &[Vec<TokenId>]) -> Result<ToyDecode, ToyError> {
    let k_total = toy.spec.num_codebooks;
    if rows.len() != k_total {
        return Err(ToyError::BadRows { expected: k_total, row: rows.len(), len: 0, first: 0 });
    }
    let t = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != t {
            return Err(ToyError::BadRows { expected: k_total, row: i, len: row.len(), first: t });
        }
    }
    let d = toy.frames_per_symbol;
    let n_windows = ((t as f64) / (d as f64)).round() as usize;
    let mut symbols = Vec::with_capacity(n_windows);
    let mut speaker_votes = vec![0usize; toy.num_speakers as usize];
    let mut frame_valid = Vec::with_capacity(t);
    for frame in 0..t {
        let mut first: Option<(u32, u32)> = None;
        let mut ok = true;
        for (k, row) in rows.iter().enumerate() {
            match toy.invert_cell(row[frame], k) {
                Some(pair) => {
                    if *first.get_or_insert(pair) != pair {
                        ok = false;
                    }
                }
                None => ok = false,
            }
        }
        frame_valid.push(ok && first.is_some());
    }
    for w in 0..n_windows {
        let lo = w * d;
        let hi = ((w + 1) * d).min(t);
        let mut votes = vec![0usize; toy.alphabet_size as usize];
        let mut any = false;
        for frame in lo..hi {
            for (k, row) in rows.iter().enumerate() {
                if let Some((sym, spk)) = toy.invert_cell(row[frame], k) {
                    votes[sym as usize] += 1;
                    speaker_votes[spk as usize] += 1;
                    any = true;
                }
            }
        }
        if any {
            let best = votes
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(sym, _)| sym as u32)
                .unwrap();
            symbols.push(best);
        }
    }
    let speaker_id = if speaker_votes.iter().any(|&v| v > 0) {
        speaker_votes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(spk, _)| spk as u32)
    } else {
        None
    };
    Ok(ToyDecode { symbols, speaker_id, frame_valid })
}

/// Corpus sampling knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub size: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
}

/// Sample one utterance: uniform speaker, uniform length in
/// `[min_symbols, max_symbols]`, uniform symbols.
pub fn sample_utterance<R: Rng>(toy: &ToyLanguageSpec, rng: &mut R, cfg: &CorpusConfig) -> AlignedUtterance {
    let len = rng.random_range(cfg.min_symbols..=cfg.max_symbols);
    let symbols: Vec<u32> = (0..len).map(|_| rng.random_range(0..toy.alphabet_size)).collect();
    let speaker = rng.random_range(0..toy.num_speakers);
    encode(toy, &symbols, speaker).expect("sampled symbols are in range")
}

/// Seeded, reproducible corpus. The toy language and sampling knobs are
/// recorded in the corpus metadata.
pub fn gen_corpus<R: Rng>(toy: &ToyLanguageSpec, rng: &mut R, cfg: &CorpusConfig, seed_note: u64) -> Corpus {
    let utterances = (0..cfg.size).map(|_| sample_utterance(toy, rng, cfg)).collect();
    let meta = serde_json::json!({
        "generator": "toy-language",
        "seed": seed_note,
        "toy": serde_json::to_value(toy).expect("toy spec serializes"),
        "sampling": serde_json::to_value(cfg).expect("corpus config serializes"),
    });
    Corpus { spec: toy.spec.clone(), meta, utterances }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::write_corpus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(a: u32, d: usize, s: u32, k: usize, v: u32) -> ToyLanguageSpec {
        ToyLanguageSpec::new(a, d, s, CodecSpec::new(k, v, 50).unwrap()).unwrap()
    }

    #[test]
    fn symbol_three_speaker_zero_column() {
        let toy = toy(8, 2, 2, 4, 64);
        let utt = encode(&toy, &[3], 0).unwrap();
        assert_eq!(utt.grid().width(), 2);
        for t in 0..2 {
            assert_eq!(utt.grid().column(t), vec![12, 13, 14, 15]);
        }
        assert_eq!(utt.units(), &[AlignedUnit { symbol: 3, start_frame: 0, end_frame: 2 }]);
    }

    #[test]
    fn speaker_offset_shifts_columns() {
        let toy = toy(8, 2, 2, 4, 64);
        let utt = encode(&toy, &[3], 1).unwrap();
        // speaker 1 adds A*K = 32 to every cell
        assert_eq!(utt.grid().column(0), vec![44, 45, 46, 47]);
    }

    #[test]
    fn empty_symbols_give_empty_grid() {
        let toy = toy(8, 2, 2, 4, 64);
        let utt = encode(&toy, &[], 1).unwrap();
        assert!(utt.grid().is_empty());
        assert!(utt.units().is_empty());
    }

    #[test]
    fn decode_inverts_encode() {
        let toy = toy(16, 2, 4, 4, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let len = rng.random_range(1..=12usize);
            let symbols: Vec<u32> = (0..len).map(|_| rng.random_range(0..16)).collect();
            let speaker = rng.random_range(0..4);
            let utt = encode(&toy, &symbols, speaker).unwrap();
            let decoded = decode(&toy, utt.grid());
            assert_eq!(decoded.symbols, symbols);
            assert_eq!(decoded.speaker_id, Some(speaker));
            assert!(decoded.frame_valid.iter().all(|&v| v));
        }
    }

    #[test]
    fn single_corrupted_cell_recovers_by_majority() {
        let toy = toy(8, 2, 2, 4, 64);
        let utt = encode(&toy, &[3, 5, 1], 1).unwrap();
        let mut rows: Vec<Vec<TokenId>> = utt.grid().rows().to_vec();
        rows[2][3] = 2; // invertible at row 2 but votes for the wrong pair
        let decoded = decode_rows(&toy, &rows).unwrap();
        assert_eq!(decoded.symbols, vec![3, 5, 1]);
        assert_eq!(decoded.speaker_id, Some(1));
        assert!(!decoded.frame_valid[3]);
        assert!(decoded.frame_valid[2]);
    }

    #[test]
    fn all_pad_rows_decode_empty_with_zero_validity() {
        let toy = toy(8, 2, 2, 4, 64);
        let pad = toy.spec.pad_id;
        let rows = vec![vec![pad; 6]; 4];
        let decoded = decode_rows(&toy, &rows).unwrap();
        assert!(decoded.symbols.is_empty());
        assert_eq!(decoded.speaker_id, None);
        assert_eq!(decoded.frame_valid, vec![false; 6]);
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        let toy = toy(8, 2, 2, 4, 64);
        assert!(matches!(encode(&toy, &[8], 0), Err(ToyError::SymbolOutOfRange(8, 8))));
        assert!(matches!(encode(&toy, &[0], 2), Err(ToyError::SpeakerOutOfRange(2, 2))));
    }

    #[test]
    fn injectivity_bound_is_enforced() {
        let spec = CodecSpec::new(4, 64, 50).unwrap();
        assert!(ToyLanguageSpec::new(8, 2, 3, spec).is_err());
    }

    #[test]
    fn same_seed_gives_byte_identical_corpus() {
        let toy = toy(16, 2, 4, 4, 256);
        let cfg = CorpusConfig { size: 20, min_symbols: 1, max_symbols: 12 };
        let write = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let corpus = gen_corpus(&toy, &mut rng, &cfg, seed);
            let mut bytes = Vec::new();
            write_corpus(&mut bytes, &corpus).unwrap();
            bytes
        };
        assert_eq!(write(7), write(7));
        assert_ne!(write(7), write(8));
    }

    #[test]
    fn empty_corpus_is_header_only() {
        let toy = toy(16, 2, 4, 4, 256);
        let cfg = CorpusConfig { size: 0, min_symbols: 1, max_symbols: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corpus = gen_corpus(&toy, &mut rng, &cfg, 1);
        assert!(corpus.utterances.is_empty());
        let mut bytes = Vec::new();
        write_corpus(&mut bytes, &corpus).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.ends_with("count=0\n"));
    }
}
