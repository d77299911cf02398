//! Decoder-only transformer over layout elements with manual gradients.
//!
//! The input side embeds each layout element into one position: text and
//! special tokens by table lookup, audio columns as the sum of K codebook
//! embeddings, the speaker slot through a linear projection. The output
//! side applies K independent heads to the final hidden state, one per
//! codebook. Forward, backward, and the incremental generation path are
//! written by hand and are generic over `f32`/`f64`.

pub mod math;

use std::io::{Read, Write};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecSpec;
use crate::layout::{LayoutElement, SpeakerInput};
use math::{
    dot, gelu, gelu_prime, layernorm, layernorm_backward, linear, linear_backward, linear_bias,
    sinusoidal_table, softmax_in_place, NormCache, RotaryTables,
};
pub use math::Real;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} exceeds max length {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("{what} id {id} out of range (max {max})")]
    IdOutOfRange { what: &'static str, id: u32, max: u32 },
    #[error("speaker vector has {got} entries, expected {want}")]
    BadSpeakerVector { got: usize, want: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint dtype tag {file} does not match requested element width {expected}")]
    DtypeMismatch { file: u8, expected: u8 },
}

/// Positional encoding choice; rotary matches the backbone family, the
/// additive sinusoidal table is the fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    Rotary,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ffn_mult: usize,
    pub text_vocab: u32,
    /// Width of the speaker-slot input vector (one-hot of speaker id).
    pub speaker_dim: u32,
    pub codec: CodecSpec,
    pub max_seq_len: usize,
    pub pos_encoding: PosEncoding,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, width 128, 4 heads, rotary positions.
    pub fn desk_default(codec: CodecSpec, text_vocab: u32, speaker_dim: u32) -> Self {
        ModelConfig {
            layers: 2,
            dim: 128,
            heads: 4,
            ffn_mult: 4,
            text_vocab,
            speaker_dim,
            codec,
            max_seq_len: 256,
            pos_encoding: PosEncoding::Rotary,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.layers == 0 || self.heads == 0 || self.ffn_mult == 0 || self.max_seq_len == 0 {
            return bad("layers, heads, ffn_mult, max_seq_len must all be >= 1".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if (self.dim / self.heads) % 2 != 0 {
            return bad(format!("head width {} must be even for rotary pairs", self.dim / self.heads));
        }
        if self.text_vocab == 0 || self.speaker_dim == 0 {
            return bad("text_vocab and speaker_dim must be >= 1".into());
        }
        self.codec.validate().map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.dim * self.ffn_mult
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Audio embedding / output-head vocabulary: codec ids plus specials.
    pub fn ext_vocab(&self) -> usize {
        self.codec.extended_vocab() as usize
    }
}

/// Flat parameter buffer with named, ordered sections.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    data: Vec<T>,
    sections: Vec<(String, Range<usize>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { data: Vec::new(), sections: Vec::new() }
    }

    fn add(&mut self, name: &str, len: usize) -> Range<usize> {
        let start = self.data.len();
        self.data.resize(start + len, T::zero());
        let range = start..start + len;
        self.sections.push((name.to_string(), range.clone()));
        range
    }

    /// Same section layout, all-zero data.
    pub fn zeros_like(&self) -> ParamStore<T> {
        ParamStore { data: vec![T::zero(); self.data.len()], sections: self.sections.clone() }
    }

    pub fn zero(&mut self) {
        self.data.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn sections(&self) -> &[(String, Range<usize>)] {
        &self.sections
    }

    pub fn section(&self, name: &str) -> Option<&[T]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, r)| &self.data[r.clone()])
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
struct LayerRanges {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    wq: Range<usize>,
    wk: Range<usize>,
    wv: Range<usize>,
    wo: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
}

#[derive(Debug, Clone)]
struct ParamLayout {
    text: Range<usize>,
    audio: Vec<Range<usize>>,
    mask: Range<usize>,
    end: Range<usize>,
    spk: Range<usize>,
    layers: Vec<LayerRanges>,
    final_g: Range<usize>,
    final_b: Range<usize>,
    heads: Vec<Range<usize>>,
}

fn build_layout<T: Real>(cfg: &ModelConfig) -> (ParamStore<T>, ParamLayout) {
    let d = cfg.dim;
    let f = cfg.ffn_dim();
    let e = cfg.ext_vocab();
    let k = cfg.codec.num_codebooks;
    let mut store = ParamStore::new();
    let text = store.add("text_embed", cfg.text_vocab as usize * d);
    let audio = (0..k).map(|i| store.add(&format!("audio_embed.{i}"), e * d)).collect();
    let mask = store.add("mask_embed", d);
    let end = store.add("end_embed", d);
    let spk = store.add("spk_proj", d * cfg.speaker_dim as usize);
    let layers = (0..cfg.layers)
        .map(|l| LayerRanges {
            ln1_g: store.add(&format!("layer{l}.ln1.g"), d),
            ln1_b: store.add(&format!("layer{l}.ln1.b"), d),
            wq: store.add(&format!("layer{l}.attn.wq"), d * d),
            wk: store.add(&format!("layer{l}.attn.wk"), d * d),
            wv: store.add(&format!("layer{l}.attn.wv"), d * d),
            wo: store.add(&format!("layer{l}.attn.wo"), d * d),
            ln2_g: store.add(&format!("layer{l}.ln2.g"), d),
            ln2_b: store.add(&format!("layer{l}.ln2.b"), d),
            w1: store.add(&format!("layer{l}.ffn.w1"), f * d),
            b1: store.add(&format!("layer{l}.ffn.b1"), f),
            w2: store.add(&format!("layer{l}.ffn.w2"), d * f),
            b2: store.add(&format!("layer{l}.ffn.b2"), d),
        })
        .collect();
    let final_g = store.add("final_ln.g", d);
    let final_b = store.add("final_ln.b", d);
    let heads = (0..k).map(|i| store.add(&format!("head.{i}"), e * d)).collect();
    (store, ParamLayout { text, audio, mask, end, spk, layers, final_g, final_b, heads })
}

/// Per-head logits at one sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionLogits<T> {
    pub position: usize,
    pub heads: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    ln1: NormCache<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention probabilities, per head a flattened lower triangle:
    /// `probs[h_off + t(t+1)/2 + j]` for query `t`, key `j`.
    probs: Vec<T>,
    attn_out: Vec<T>,
    ln2: NormCache<T>,
    ffn_u: Vec<T>,
    ffn_a: Vec<T>,
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    n: usize,
    layers: Vec<LayerCache<T>>,
    final_ln: NormCache<T>,
    hidden: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Final-normed hidden state of position `t`.
    pub fn hidden_at(&self, t: usize) -> &[T] {
        let d = self.hidden.len() / self.n;
        &self.hidden[t * d..(t + 1) * d]
    }
}

pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: ParamLayout,
    rotary: Option<RotaryTables<T>>,
    sinusoidal: Option<Vec<T>>,
}

impl<T: Real> Model<T> {
    /// Fresh model with N(0, 0.02) weights, unit norm gains, zero biases,
    /// deterministically seeded from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (mut params, layout) = build_layout::<T>(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid sigma");
        for range in [&layout.text, &layout.mask, &layout.end, &layout.spk]
            .into_iter()
            .cloned()
            .chain(layout.audio.iter().cloned())
            .chain(layout.heads.iter().cloned())
            .chain(layout.layers.iter().flat_map(|l| {
                [l.wq.clone(), l.wk.clone(), l.wv.clone(), l.wo.clone(), l.w1.clone(), l.w2.clone()]
            }))
        {
            for x in &mut params.data_mut()[range] {
                *x = T::of(normal.sample(&mut rng));
            }
        }
        for range in layout
            .layers
            .iter()
            .flat_map(|l| [l.ln1_g.clone(), l.ln2_g.clone()])
            .chain([layout.final_g.clone()])
        {
            params.data_mut()[range].fill(T::one());
        }
        Ok(Self::assemble(config, params, layout))
    }

    fn assemble(config: ModelConfig, params: ParamStore<T>, layout: ParamLayout) -> Self {
        let (rotary, sinusoidal) = match config.pos_encoding {
            PosEncoding::Rotary => {
                (Some(RotaryTables::new(config.max_seq_len, config.head_dim(), 10000.0)), None)
            }
            PosEncoding::Sinusoidal => {
                (None, Some(sinusoidal_table(config.max_seq_len, config.dim, 10000.0)))
            }
        };
        Model { config, params, layout, rotary, sinusoidal }
    }

    fn p(&self, r: &Range<usize>) -> &[T] {
        &self.params.data()[r.clone()]
    }

    /// Element embedding (without positional terms).
    pub fn embed_element(&self, el: &LayoutElement, out: &mut [T]) -> Result<(), ModelError> {
        let d = self.config.dim;
        out.fill(T::zero());
        match el {
            LayoutElement::TextTok(id) => {
                if *id >= self.config.text_vocab {
                    return Err(ModelError::IdOutOfRange { what: "text", id: *id, max: self.config.text_vocab });
                }
                let table = self.p(&self.layout.text);
                out.copy_from_slice(&table[*id as usize * d..(*id as usize + 1) * d]);
            }
            LayoutElement::AudioCol(ids) => {
                let e = self.config.ext_vocab() as u32;
                if ids.len() != self.config.codec.num_codebooks {
                    return Err(ModelError::InvalidConfig(format!(
                        "audio column has {} ids, expected {}",
                        ids.len(),
                        self.config.codec.num_codebooks
                    )));
                }
                for (k, &id) in ids.iter().enumerate() {
                    if id >= e {
                        return Err(ModelError::IdOutOfRange { what: "audio", id, max: e });
                    }
                    let table = self.p(&self.layout.audio[k]);
                    math::axpy(T::one(), &table[id as usize * d..(id as usize + 1) * d], out);
                }
            }
            LayoutElement::SpeakerSlot(spk) => {
                let s = self.config.speaker_dim as usize;
                let w = self.p(&self.layout.spk);
                match spk {
                    SpeakerInput::Id(id) => {
                        if *id >= self.config.speaker_dim {
                            return Err(ModelError::IdOutOfRange { what: "speaker", id: *id, max: self.config.speaker_dim });
                        }
                        for i in 0..d {
                            out[i] = w[i * s + *id as usize];
                        }
                    }
                    SpeakerInput::Vector(vec) => {
                        if vec.len() != s {
                            return Err(ModelError::BadSpeakerVector { got: vec.len(), want: s });
                        }
                        for i in 0..d {
                            let mut acc = T::zero();
                            for (j, &vj) in vec.iter().enumerate() {
                                acc = acc + w[i * s + j] * T::of(vj);
                            }
                            out[i] = acc;
                        }
                    }
                }
            }
            LayoutElement::MaskTok => out.copy_from_slice(self.p(&self.layout.mask)),
            LayoutElement::EndTok => out.copy_from_slice(self.p(&self.layout.end)),
        }
        Ok(())
    }

    fn add_positional(&self, pos: usize, x: &mut [T]) {
        if let Some(table) = &self.sinusoidal {
            let d = self.config.dim;
            math::axpy(T::one(), &table[pos * d..(pos + 1) * d], x);
        }
    }

    fn rotate(&self, pos: usize, qk: &mut [T]) {
        if let Some(tables) = &self.rotary {
            let dh = self.config.head_dim();
            for h in 0..self.config.heads {
                tables.apply(pos, &mut qk[h * dh..(h + 1) * dh]);
            }
        }
    }

    fn rotate_inverse(&self, pos: usize, dqk: &mut [T]) {
        if let Some(tables) = &self.rotary {
            let dh = self.config.head_dim();
            for h in 0..self.config.heads {
                tables.apply_inverse(pos, &mut dqk[h * dh..(h + 1) * dh]);
            }
        }
    }

    fn head_logits_into(&self, hidden: &[T], heads: &mut Vec<Vec<T>>) {
        let e = self.config.ext_vocab();
        for k in 0..self.config.codec.num_codebooks {
            let mut logits = vec![T::zero(); e];
            linear(self.p(&self.layout.heads[k]), hidden, &mut logits);
            heads.push(logits);
        }
    }

    /// K head logit vectors from a final hidden state.
    pub fn head_logits(&self, hidden: &[T]) -> Vec<Vec<T>> {
        let mut heads = Vec::with_capacity(self.config.codec.num_codebooks);
        self.head_logits_into(hidden, &mut heads);
        heads
    }

    /// Full teacher-forced pass. Returns logits at `positions` (all
    /// positions when `None`, ascending) plus the cache for `backward`.
    pub fn forward(
        &self,
        elements: &[LayoutElement],
        positions: Option<&[usize]>,
    ) -> Result<(Vec<PositionLogits<T>>, ForwardCache<T>), ModelError> {
        let n = elements.len();
        if n == 0 {
            return Err(ModelError::EmptySequence);
        }
        if n > self.config.max_seq_len {
            return Err(ModelError::TooLong { len: n, max: self.config.max_seq_len });
        }
        let d = self.config.dim;
        let f = self.config.ffn_dim();
        let h_count = self.config.heads;
        let dh = self.config.head_dim();
        let inv_scale = T::of(1.0 / (dh as f64).sqrt());
        let tri = n * (n + 1) / 2;

        let mut x = vec![T::zero(); n * d];
        for (t, el) in elements.iter().enumerate() {
            self.embed_element(el, &mut x[t * d..(t + 1) * d])?;
            self.add_positional(t, &mut x[t * d..(t + 1) * d]);
        }

        let mut layers = Vec::with_capacity(self.config.layers);
        let mut y = vec![T::zero(); n * d]; // norm output scratch
        for l in &self.layout.layers {
            let mut ln1 = NormCache { xhat: Vec::with_capacity(n * d), rstd: Vec::with_capacity(n) };
            let mut q = vec![T::zero(); n * d];
            let mut k = vec![T::zero(); n * d];
            let mut v = vec![T::zero(); n * d];
            for t in 0..n {
                layernorm(&x[t * d..(t + 1) * d], self.p(&l.ln1_g), self.p(&l.ln1_b), &mut y[t * d..(t + 1) * d], &mut ln1);
            }
            for t in 0..n {
                let yt = &y[t * d..(t + 1) * d];
                linear(self.p(&l.wq), yt, &mut q[t * d..(t + 1) * d]);
                linear(self.p(&l.wk), yt, &mut k[t * d..(t + 1) * d]);
                linear(self.p(&l.wv), yt, &mut v[t * d..(t + 1) * d]);
                self.rotate(t, &mut q[t * d..(t + 1) * d]);
                self.rotate(t, &mut k[t * d..(t + 1) * d]);
            }
            let mut probs = vec![T::zero(); h_count * tri];
            let mut attn_out = vec![T::zero(); n * d];
            let mut scores: Vec<T> = Vec::with_capacity(n);
            for h in 0..h_count {
                let h_off = h * tri;
                let hd = h * dh;
                for t in 0..n {
                    scores.clear();
                    let qt = &q[t * d + hd..t * d + hd + dh];
                    for j in 0..=t {
                        scores.push(dot(qt, &k[j * d + hd..j * d + hd + dh]) * inv_scale);
                    }
                    softmax_in_place(&mut scores);
                    let row = h_off + t * (t + 1) / 2;
                    probs[row..row + t + 1].copy_from_slice(&scores);
                    let out = &mut attn_out[t * d + hd..t * d + hd + dh];
                    for j in 0..=t {
                        math::axpy(scores[j], &v[j * d + hd..j * d + hd + dh], out);
                    }
                }
            }
            let mut tmp = vec![T::zero(); d];
            for t in 0..n {
                linear(self.p(&l.wo), &attn_out[t * d..(t + 1) * d], &mut tmp);
                math::axpy(T::one(), &tmp, &mut x[t * d..(t + 1) * d]);
            }

            let mut ln2 = NormCache { xhat: Vec::with_capacity(n * d), rstd: Vec::with_capacity(n) };
            let mut ffn_u = vec![T::zero(); n * f];
            let mut ffn_a = vec![T::zero(); n * f];
            let mut tmp_d = vec![T::zero(); d];
            for t in 0..n {
                layernorm(&x[t * d..(t + 1) * d], self.p(&l.ln2_g), self.p(&l.ln2_b), &mut y[t * d..(t + 1) * d], &mut ln2);
                let ut = &mut ffn_u[t * f..(t + 1) * f];
                linear_bias(self.p(&l.w1), self.p(&l.b1), &y[t * d..(t + 1) * d], ut);
                let at = &mut ffn_a[t * f..(t + 1) * f];
                for (a, &u) in at.iter_mut().zip(ut.iter()) {
                    *a = gelu(u);
                }
                linear_bias(self.p(&l.w2), self.p(&l.b2), at, &mut tmp_d);
                math::axpy(T::one(), &tmp_d, &mut x[t * d..(t + 1) * d]);
            }
            layers.push(LayerCache { ln1, q, k, v, probs, attn_out, ln2, ffn_u, ffn_a });
        }

        let mut final_ln = NormCache { xhat: Vec::with_capacity(n * d), rstd: Vec::with_capacity(n) };
        let mut hidden = vec![T::zero(); n * d];
        for t in 0..n {
            layernorm(&x[t * d..(t + 1) * d], self.p(&self.layout.final_g), self.p(&self.layout.final_b), &mut hidden[t * d..(t + 1) * d], &mut final_ln);
        }

        let all: Vec<usize>;
        let wanted: &[usize] = match positions {
            Some(p) => p,
            None => {
                all = (0..n).collect();
                &all
            }
        };
        let mut logits = Vec::with_capacity(wanted.len());
        for &t in wanted {
            if t >= n {
                return Err(ModelError::TooLong { len: t, max: n });
            }
            let mut heads = Vec::with_capacity(self.config.codec.num_codebooks);
            self.head_logits_into(&hidden[t * d..(t + 1) * d], &mut heads);
            logits.push(PositionLogits { position: t, heads });
        }
        Ok((logits, ForwardCache { n, layers, final_ln, hidden }))
    }

    /// Analytic gradients of a scalar loss whose per-logit derivatives are
    /// `dlogits`, accumulated into `grads` (same layout as `params`).
    pub fn backward(
        &self,
        elements: &[LayoutElement],
        cache: &ForwardCache<T>,
        dlogits: &[PositionLogits<T>],
        grads: &mut ParamStore<T>,
    ) {
        let n = cache.n;
        let d = self.config.dim;
        let f = self.config.ffn_dim();
        let h_count = self.config.heads;
        let dh = self.config.head_dim();
        let inv_scale = T::of(1.0 / (dh as f64).sqrt());
        let tri = n * (n + 1) / 2;
        assert_eq!(elements.len(), n, "elements must match the cached forward");

        let gd = grads.data_mut();
        let mut dhidden = vec![T::zero(); n * d];
        for pl in dlogits {
            let t = pl.position;
            let hidden_t = &cache.hidden[t * d..(t + 1) * d];
            for (k, dl) in pl.heads.iter().enumerate() {
                let w = &self.params.data()[self.layout.heads[k].clone()];
                let gw = &mut gd[self.layout.heads[k].clone()];
                linear_backward(w, hidden_t, dl, &mut dhidden[t * d..(t + 1) * d], gw);
            }
        }

        // final LN
        let mut dx = vec![T::zero(); n * d];
        for t in 0..n {
            // split disjoint gain/bias grad slices out of the flat buffer
            let (gga, ggb) = split_two(gd, &self.layout.final_g, &self.layout.final_b);
            layernorm_backward(
                &dhidden[t * d..(t + 1) * d],
                &cache.final_ln.xhat[t * d..(t + 1) * d],
                cache.final_ln.rstd[t],
                self.p(&self.layout.final_g),
                gga,
                ggb,
                &mut dx[t * d..(t + 1) * d],
            );
        }

        let mut y = vec![T::zero(); d]; // recomputed norm outputs
        for (li, l) in self.layout.layers.iter().enumerate().rev() {
            let lc = &cache.layers[li];
            // FFN path
            let mut da = vec![T::zero(); f];
            let mut du = vec![T::zero(); f];
            let mut dy2 = vec![T::zero(); d];
            for t in 0..n {
                let dxt = dx[t * d..(t + 1) * d].to_vec();
                da.fill(T::zero());
                {
                    let gw2 = &mut gd[l.w2.clone()];
                    linear_backward(self.p(&l.w2), &lc.ffn_a[t * f..(t + 1) * f], &dxt, &mut da, gw2);
                }
                math::axpy(T::one(), &dxt, &mut gd[l.b2.clone()]);
                for i in 0..f {
                    du[i] = da[i] * gelu_prime(lc.ffn_u[t * f + i]);
                }
                recompute_norm_out(&lc.ln2, t, self.p(&l.ln2_g), self.p(&l.ln2_b), &mut y);
                dy2.fill(T::zero());
                {
                    let gw1 = &mut gd[l.w1.clone()];
                    linear_backward(self.p(&l.w1), &y, &du, &mut dy2, gw1);
                }
                math::axpy(T::one(), &du, &mut gd[l.b1.clone()]);
                let (gg2, gb2) = split_two(gd, &l.ln2_g, &l.ln2_b);
                layernorm_backward(
                    &dy2,
                    &lc.ln2.xhat[t * d..(t + 1) * d],
                    lc.ln2.rstd[t],
                    self.p(&l.ln2_g),
                    gg2,
                    gb2,
                    &mut dx[t * d..(t + 1) * d],
                );
            }

            // attention path
            let mut dattn = vec![T::zero(); n * d];
            for t in 0..n {
                let dxt = dx[t * d..(t + 1) * d].to_vec();
                let gwo = &mut gd[l.wo.clone()];
                linear_backward(self.p(&l.wo), &lc.attn_out[t * d..(t + 1) * d], &dxt, &mut dattn[t * d..(t + 1) * d], gwo);
            }
            let mut dq = vec![T::zero(); n * d];
            let mut dk = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            let mut dp: Vec<T> = Vec::with_capacity(n);
            for h in 0..h_count {
                let h_off = h * tri;
                let hd = h * dh;
                for t in 0..n {
                    let row = h_off + t * (t + 1) / 2;
                    let p = &lc.probs[row..row + t + 1];
                    let do_h = &dattn[t * d + hd..t * d + hd + dh];
                    dp.clear();
                    let mut sum_pd = T::zero();
                    for j in 0..=t {
                        let dpj = dot(do_h, &lc.v[j * d + hd..j * d + hd + dh]);
                        dp.push(dpj);
                        sum_pd = sum_pd + p[j] * dpj;
                    }
                    let qt = lc.q[t * d + hd..t * d + hd + dh].to_vec();
                    for j in 0..=t {
                        math::axpy(p[j], do_h, &mut dv[j * d + hd..j * d + hd + dh]);
                        let ds = p[j] * (dp[j] - sum_pd) * inv_scale;
                        math::axpy(ds, &lc.k[j * d + hd..j * d + hd + dh], &mut dq[t * d + hd..t * d + hd + dh]);
                        math::axpy(ds, &qt, &mut dk[j * d + hd..j * d + hd + dh]);
                    }
                }
            }
            for t in 0..n {
                self.rotate_inverse(t, &mut dq[t * d..(t + 1) * d]);
                self.rotate_inverse(t, &mut dk[t * d..(t + 1) * d]);
            }
            let mut dy1 = vec![T::zero(); d];
            for t in 0..n {
                recompute_norm_out(&lc.ln1, t, self.p(&l.ln1_g), self.p(&l.ln1_b), &mut y);
                dy1.fill(T::zero());
                {
                    let gwq = &mut gd[l.wq.clone()];
                    linear_backward(self.p(&l.wq), &y, &dq[t * d..(t + 1) * d], &mut dy1, gwq);
                }
                {
                    let gwk = &mut gd[l.wk.clone()];
                    linear_backward(self.p(&l.wk), &y, &dk[t * d..(t + 1) * d], &mut dy1, gwk);
                }
                {
                    let gwv = &mut gd[l.wv.clone()];
                    linear_backward(self.p(&l.wv), &y, &dv[t * d..(t + 1) * d], &mut dy1, gwv);
                }
                let (gg1, gb1) = split_two(gd, &l.ln1_g, &l.ln1_b);
                layernorm_backward(
                    &dy1,
                    &lc.ln1.xhat[t * d..(t + 1) * d],
                    lc.ln1.rstd[t],
                    self.p(&l.ln1_g),
                    gg1,
                    gb1,
                    &mut dx[t * d..(t + 1) * d],
                );
            }
        }

        // embeddings
        let s = self.config.speaker_dim as usize;
        for (t, el) in elements.iter().enumerate() {
            let dxt = &dx[t * d..(t + 1) * d];
            match el {
                LayoutElement::TextTok(id) => {
                    let g = &mut gd[self.layout.text.clone()];
                    math::axpy(T::one(), dxt, &mut g[*id as usize * d..(*id as usize + 1) * d]);
                }
                LayoutElement::AudioCol(ids) => {
                    for (k, &id) in ids.iter().enumerate() {
                        let g = &mut gd[self.layout.audio[k].clone()];
                        math::axpy(T::one(), dxt, &mut g[id as usize * d..(id as usize + 1) * d]);
                    }
                }
                LayoutElement::SpeakerSlot(spk) => {
                    let g = &mut gd[self.layout.spk.clone()];
                    match spk {
                        SpeakerInput::Id(id) => {
                            for i in 0..d {
                                g[i * s + *id as usize] = g[i * s + *id as usize] + dxt[i];
                            }
                        }
                        SpeakerInput::Vector(vec) => {
                            for i in 0..d {
                                for (j, &vj) in vec.iter().enumerate() {
                                    g[i * s + j] = g[i * s + j] + dxt[i] * T::of(vj);
                                }
                            }
                        }
                    }
                }
                LayoutElement::MaskTok => {
                    math::axpy(T::one(), dxt, &mut gd[self.layout.mask.clone()]);
                }
                LayoutElement::EndTok => {
                    math::axpy(T::one(), dxt, &mut gd[self.layout.end.clone()]);
                }
            }
        }
    }
}

/// Disjoint mutable views of two named ranges of the flat grad buffer.
fn split_two<'a, T>(data: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (left, right) = data.split_at_mut(b.start);
    (&mut left[a.clone()], &mut right[..b.end - b.start])
}

fn recompute_norm_out<T: Real>(cache: &NormCache<T>, t: usize, gain: &[T], bias: &[T], out: &mut [T]) {
    let d = gain.len();
    let xhat = &cache.xhat[t * d..(t + 1) * d];
    for i in 0..d {
        out[i] = gain[i] * xhat[i] + bias[i];
    }
}

/// Incremental decoding state: cached post-rotary keys and values per
/// layer. Elements are pushed one at a time; each push returns the new
/// position's final hidden state.
pub struct GenSession<'m, T: Real> {
    model: &'m Model<T>,
    k_cache: Vec<Vec<T>>,
    v_cache: Vec<Vec<T>>,
    len: usize,
}

impl<'m, T: Real> GenSession<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        let layers = model.config.layers;
        GenSession { model, k_cache: vec![Vec::new(); layers], v_cache: vec![Vec::new(); layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Advance one position; returns the final-normed hidden state.
    pub fn push(&mut self, el: &LayoutElement) -> Result<Vec<T>, ModelError> {
        let m = self.model;
        let d = m.config.dim;
        let f = m.config.ffn_dim();
        let dh = m.config.head_dim();
        let inv_scale = T::of(1.0 / (dh as f64).sqrt());
        let pos = self.len;
        if pos >= m.config.max_seq_len {
            return Err(ModelError::TooLong { len: pos + 1, max: m.config.max_seq_len });
        }
        let mut x = vec![T::zero(); d];
        m.embed_element(el, &mut x)?;
        m.add_positional(pos, &mut x);

        let mut y = vec![T::zero(); d];
        let mut q = vec![T::zero(); d];
        let mut k = vec![T::zero(); d];
        let mut v = vec![T::zero(); d];
        let mut attn = vec![T::zero(); d];
        let mut tmp = vec![T::zero(); d];
        let mut u = vec![T::zero(); f];
        let mut scratch = NormCache { xhat: Vec::with_capacity(d), rstd: Vec::with_capacity(1) };
        for (li, l) in m.layout.layers.iter().enumerate() {
            scratch.xhat.clear();
            scratch.rstd.clear();
            layernorm(&x, m.p(&l.ln1_g), m.p(&l.ln1_b), &mut y, &mut scratch);
            linear(m.p(&l.wq), &y, &mut q);
            linear(m.p(&l.wk), &y, &mut k);
            linear(m.p(&l.wv), &y, &mut v);
            m.rotate(pos, &mut q);
            m.rotate(pos, &mut k);
            self.k_cache[li].extend_from_slice(&k);
            self.v_cache[li].extend_from_slice(&v);
            let keys = &self.k_cache[li];
            let vals = &self.v_cache[li];
            attn.fill(T::zero());
            let mut scores: Vec<T> = Vec::with_capacity(pos + 1);
            for h in 0..m.config.heads {
                let hd = h * dh;
                scores.clear();
                for j in 0..=pos {
                    scores.push(dot(&q[hd..hd + dh], &keys[j * d + hd..j * d + hd + dh]) * inv_scale);
                }
                softmax_in_place(&mut scores);
                for j in 0..=pos {
                    math::axpy(scores[j], &vals[j * d + hd..j * d + hd + dh], &mut attn[hd..hd + dh]);
                }
            }
            linear(m.p(&l.wo), &attn, &mut tmp);
            math::axpy(T::one(), &tmp, &mut x);

            scratch.xhat.clear();
            scratch.rstd.clear();
            layernorm(&x, m.p(&l.ln2_g), m.p(&l.ln2_b), &mut y, &mut scratch);
            linear_bias(m.p(&l.w1), m.p(&l.b1), &y, &mut u);
            for ui in u.iter_mut() {
                *ui = gelu(*ui);
            }
            linear_bias(m.p(&l.w2), m.p(&l.b2), &u, &mut tmp);
            math::axpy(T::one(), &tmp, &mut x);
        }
        scratch.xhat.clear();
        scratch.rstd.clear();
        let mut hidden = vec![T::zero(); d];
        layernorm(&x, m.p(&m.layout.final_g), m.p(&m.layout.final_b), &mut hidden, &mut scratch);
        self.len += 1;
        Ok(hidden)
    }

    pub fn head_logits(&self, hidden: &[T]) -> Vec<Vec<T>> {
        self.model.head_logits(hidden)
    }
}

/// Optimizer moments stored alongside parameters in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct OptBlob<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

const CKPT_MAGIC: &[u8; 8] = b"CLMCKPT1";

fn write_u32<W: Write>(w: &mut W, x: u32) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn write_u64<W: Write>(w: &mut W, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn write_blob<T: Real, W: Write>(w: &mut W, data: &[T]) -> std::io::Result<()> {
    write_u64(w, data.len() as u64)?;
    let mut bytes = Vec::with_capacity(data.len() * T::BYTES);
    for &x in data {
        x.write_le(&mut bytes);
    }
    w.write_all(&bytes)
}

fn read_exact_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>, ModelError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    Ok(u32::from_le_bytes(read_exact_vec(r, 4)?.try_into().unwrap()))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    Ok(u64::from_le_bytes(read_exact_vec(r, 8)?.try_into().unwrap()))
}

fn read_blob<T: Real, R: Read>(r: &mut R, expect_len: usize) -> Result<Vec<T>, ModelError> {
    let len = read_u64(r)? as usize;
    if len != expect_len {
        return Err(ModelError::Corrupt(format!("blob of {len} values, expected {expect_len}")));
    }
    let bytes = read_exact_vec(r, len * T::BYTES)?;
    Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
}

/// Versioned container: config + meta JSON, named sections, parameter
/// blob, optional optimizer moments. Save/load/save is byte-exact.
pub fn save_checkpoint<T: Real, W: Write>(
    w: &mut W,
    model: &Model<T>,
    meta: &serde_json::Value,
    opt: Option<&OptBlob<T>>,
) -> Result<(), ModelError> {
    w.write_all(CKPT_MAGIC)?;
    write_u32(w, 1)?;
    w.write_all(&[T::DTYPE_TAG])?;
    let config_json = serde_json::to_vec(&model.config)?;
    write_u32(w, config_json.len() as u32)?;
    w.write_all(&config_json)?;
    let meta_json = serde_json::to_vec(meta)?;
    write_u32(w, meta_json.len() as u32)?;
    w.write_all(&meta_json)?;
    let sections = model.params.sections();
    write_u32(w, sections.len() as u32)?;
    for (name, range) in sections {
        let name_bytes = name.as_bytes();
        write_u32(w, name_bytes.len() as u32)?;
        w.write_all(name_bytes)?;
        write_u64(w, range.start as u64)?;
        write_u64(w, range.len() as u64)?;
    }
    write_blob(w, model.params.data())?;
    match opt {
        Some(blob) => {
            w.write_all(&[1])?;
            write_u64(w, blob.step)?;
            write_blob(w, &blob.m)?;
            write_blob(w, &blob.v)?;
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

pub fn load_checkpoint<T: Real, R: Read>(
    r: &mut R,
) -> Result<(Model<T>, serde_json::Value, Option<OptBlob<T>>), ModelError> {
    let magic = read_exact_vec(r, 8)?;
    if magic != CKPT_MAGIC {
        return Err(ModelError::Corrupt("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != 1 {
        return Err(ModelError::Corrupt(format!("unsupported version {version}")));
    }
    let dtype = read_exact_vec(r, 1)?[0];
    if dtype != T::DTYPE_TAG {
        return Err(ModelError::DtypeMismatch { file: dtype, expected: T::DTYPE_TAG });
    }
    let config_len = read_u32(r)? as usize;
    let config: ModelConfig = serde_json::from_slice(&read_exact_vec(r, config_len)?)?;
    config.validate()?;
    let meta_len = read_u32(r)? as usize;
    let meta: serde_json::Value = serde_json::from_slice(&read_exact_vec(r, meta_len)?)?;
    let (store, layout) = build_layout::<T>(&config);
    let n_sections = read_u32(r)? as usize;
    if n_sections != store.sections().len() {
        return Err(ModelError::Corrupt(format!(
            "{n_sections} sections, config implies {}",
            store.sections().len()
        )));
    }
    for (name, range) in store.sections() {
        let name_len = read_u32(r)? as usize;
        let file_name = String::from_utf8(read_exact_vec(r, name_len)?)
            .map_err(|_| ModelError::Corrupt("non-utf8 section name".into()))?;
        let start = read_u64(r)? as usize;
        let len = read_u64(r)? as usize;
        if file_name != *name || start != range.start || len != range.len() {
            return Err(ModelError::Corrupt(format!(
                "section {file_name} ({start}+{len}) does not match expected {name} ({}+{})",
                range.start,
                range.len()
            )));
        }
    }
    let n_params = store.len();
    let mut store = store;
    let data = read_blob::<T, R>(r, n_params)?;
    store.data_mut().copy_from_slice(&data);
    let opt_flag = read_exact_vec(r, 1)?[0];
    let opt = match opt_flag {
        0 => None,
        1 => {
            let step = read_u64(r)?;
            let m = read_blob::<T, R>(r, n_params)?;
            let v = read_blob::<T, R>(r, n_params)?;
            Some(OptBlob { step, m, v })
        }
        other => return Err(ModelError::Corrupt(format!("bad optimizer flag {other}"))),
    };
    Ok((Model::assemble(config, store, layout), meta, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecSpec;
    use rand::Rng;

    fn tiny_config(k: usize, dtype_seed: u64) -> ModelConfig {
        ModelConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            ffn_mult: 2,
            text_vocab: 4,
            speaker_dim: 2,
            codec: CodecSpec::new(k, 8, 50).unwrap(),
            max_seq_len: 32,
            pos_encoding: PosEncoding::Rotary,
            seed: dtype_seed,
        }
    }

    fn sample_elements(k: usize) -> Vec<LayoutElement> {
        vec![
            LayoutElement::TextTok(1),
            LayoutElement::TextTok(3),
            LayoutElement::SpeakerSlot(SpeakerInput::Id(1)),
            LayoutElement::AudioCol(vec![2; k]),
            LayoutElement::MaskTok,
            LayoutElement::AudioCol(vec![5; k]),
            LayoutElement::AudioCol((0..k as u32).collect()),
            LayoutElement::MaskTok,
            LayoutElement::AudioCol(vec![7; k]),
            LayoutElement::EndTok,
        ]
    }

    #[test]
    fn same_seed_same_params_and_logits() {
        let a = Model::<f64>::new(tiny_config(2, 7)).unwrap();
        let b = Model::<f64>::new(tiny_config(2, 7)).unwrap();
        assert_eq!(a.params.data(), b.params.data());
        let els = sample_elements(2);
        let (la, _) = a.forward(&els, None).unwrap();
        let (lb, _) = b.forward(&els, None).unwrap();
        assert_eq!(la, lb);
        let c = Model::<f64>::new(tiny_config(2, 8)).unwrap();
        assert_ne!(a.params.data(), c.params.data());
    }

    #[test]
    fn causality_perturbation() {
        let model = Model::<f64>::new(tiny_config(2, 1)).unwrap();
        let els = sample_elements(2);
        let (base, _) = model.forward(&els, None).unwrap();
        let mut perturbed = els.clone();
        perturbed[5] = LayoutElement::AudioCol(vec![6, 1]);
        let (after, _) = model.forward(&perturbed, None).unwrap();
        for t in 0..5 {
            assert_eq!(base[t], after[t], "position {t} must be unaffected");
        }
        assert_ne!(base[5].heads, after[5].heads);
    }

    #[test]
    fn session_matches_full_forward() {
        for pos in [PosEncoding::Rotary, PosEncoding::Sinusoidal] {
            let mut cfg = tiny_config(2, 3);
            cfg.pos_encoding = pos;
            let model = Model::<f64>::new(cfg).unwrap();
            let els = sample_elements(2);
            let (full, _) = model.forward(&els, None).unwrap();
            let mut session = GenSession::new(&model);
            for (t, el) in els.iter().enumerate() {
                let hidden = session.push(el).unwrap();
                let logits = session.head_logits(&hidden);
                assert_eq!(logits, full[t].heads, "position {t}");
            }
        }
    }

    #[test]
    fn embedding_is_sum_of_codebook_lookups() {
        let model = Model::<f64>::new(tiny_config(3, 5)).unwrap();
        let ids = vec![4u32, 0, 9];
        let mut whole = vec![0.0; 8];
        model.embed_element(&LayoutElement::AudioCol(ids.clone()), &mut whole).unwrap();
        let mut acc = vec![0.0; 8];
        for (k, &id) in ids.iter().enumerate() {
            let table = model.params.section(&format!("audio_embed.{k}")).unwrap();
            for i in 0..8 {
                acc[i] += table[id as usize * 8 + i];
            }
        }
        for i in 0..8 {
            assert!((whole[i] - acc[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_ids_error() {
        let model = Model::<f64>::new(tiny_config(2, 0)).unwrap();
        let mut out = vec![0.0; 8];
        assert!(matches!(
            model.embed_element(&LayoutElement::TextTok(4), &mut out),
            Err(ModelError::IdOutOfRange { what: "text", .. })
        ));
        assert!(matches!(
            model.embed_element(&LayoutElement::AudioCol(vec![11, 0]), &mut out),
            Err(ModelError::IdOutOfRange { what: "audio", .. })
        ));
        assert!(matches!(
            model.embed_element(&LayoutElement::SpeakerSlot(SpeakerInput::Id(2)), &mut out),
            Err(ModelError::IdOutOfRange { what: "speaker", .. })
        ));
        assert!(matches!(
            model.embed_element(&LayoutElement::SpeakerSlot(SpeakerInput::Vector(vec![0.0; 3])), &mut out),
            Err(ModelError::BadSpeakerVector { got: 3, want: 2 })
        ));
    }

    #[test]
    fn sequence_length_limit() {
        let model = Model::<f64>::new(tiny_config(1, 0)).unwrap();
        let els: Vec<_> = (0..33).map(|_| LayoutElement::MaskTok).collect();
        assert!(matches!(model.forward(&els, None), Err(ModelError::TooLong { len: 33, max: 32 })));
        assert!(matches!(model.forward(&[], None), Err(ModelError::EmptySequence)));
    }

    #[test]
    fn empty_dlogits_give_zero_grads() {
        let model = Model::<f64>::new(tiny_config(2, 2)).unwrap();
        let els = sample_elements(2);
        let (_, cache) = model.forward(&els, Some(&[])).unwrap();
        let mut grads = model.params.zeros_like();
        model.backward(&els, &cache, &[], &mut grads);
        assert!(grads.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unused_embedding_rows_have_zero_grad() {
        let model = Model::<f64>::new(tiny_config(2, 4)).unwrap();
        let els = vec![
            LayoutElement::TextTok(0),
            LayoutElement::SpeakerSlot(SpeakerInput::Id(0)),
            LayoutElement::AudioCol(vec![3, 3]),
            LayoutElement::AudioCol(vec![4, 4]),
        ];
        let (logits, cache) = model.forward(&els, Some(&[3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dlogits = vec![PositionLogits {
            position: 3,
            heads: logits[0].heads.iter().map(|h| h.iter().map(|_| rng.random::<f64>() - 0.5).collect()).collect(),
        }];
        let mut grads = model.params.zeros_like();
        model.backward(&els, &cache, &dlogits, &mut grads);
        let d = 8;
        let g_text = grads.section("text_embed").unwrap();
        assert!(g_text[0..d].iter().any(|&g| g != 0.0), "used text row must have grad");
        assert!(g_text[d..].iter().all(|&g| g == 0.0), "unused text rows must be zero");
        let g_audio = grads.section("audio_embed.0").unwrap();
        for id in [0usize, 1, 2, 5, 6, 7, 8, 9, 10] {
            assert!(g_audio[id * d..(id + 1) * d].iter().all(|&g| g == 0.0), "row {id}");
        }
        for id in [3usize, 4] {
            assert!(g_audio[id * d..(id + 1) * d].iter().any(|&g| g != 0.0), "row {id}");
        }
    }

    /// Gradient check with a loss linear in the logits: L = Σ c ⊙ logits.
    /// Linearity makes dL/dlogits exact, so any mismatch is in the network
    /// backward itself.
    #[test]
    fn gradcheck_all_params_tiny_model() {
        for pos in [PosEncoding::Rotary, PosEncoding::Sinusoidal] {
            let mut cfg = tiny_config(2, 11);
            cfg.pos_encoding = pos;
            let mut model = Model::<f64>::new(cfg).unwrap();
            let els = sample_elements(2);
            let positions: Vec<usize> = vec![2, 3, 5, 6, 8];
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let coeffs: Vec<PositionLogits<f64>> = positions
                .iter()
                .map(|&p| PositionLogits {
                    position: p,
                    heads: (0..2).map(|_| (0..11).map(|_| rng.random::<f64>() - 0.5).collect()).collect(),
                })
                .collect();
            let loss = |m: &Model<f64>| -> f64 {
                let (logits, _) = m.forward(&els, Some(&positions)).unwrap();
                logits
                    .iter()
                    .zip(&coeffs)
                    .map(|(pl, c)| {
                        pl.heads
                            .iter()
                            .zip(&c.heads)
                            .map(|(lh, ch)| lh.iter().zip(ch).map(|(l, c)| l * c).sum::<f64>())
                            .sum::<f64>()
                    })
                    .sum()
            };
            let (_, cache) = model.forward(&els, Some(&positions)).unwrap();
            let mut grads = model.params.zeros_like();
            model.backward(&els, &cache, &coeffs, &mut grads);
            let h = 1e-5;
            let mut worst = 0.0f64;
            for i in 0..model.params.len() {
                let orig = model.params.data()[i];
                model.params.data_mut()[i] = orig + h;
                let up = loss(&model);
                model.params.data_mut()[i] = orig - h;
                let down = loss(&model);
                model.params.data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.data()[i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                }
                assert!(rel < 1e-3, "param {i}: analytic {analytic} vs numeric {numeric} (rel {rel})");
            }
            assert!(worst < 1e-3, "worst relative error {worst}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_exact() {
        let model = Model::<f32>::new(tiny_config(2, 21)).unwrap();
        let meta = serde_json::json!({"step": 17, "note": "unit"});
        let opt = OptBlob {
            step: 17,
            m: (0..model.params.len()).map(|i| i as f32 * 0.5).collect(),
            v: (0..model.params.len()).map(|i| i as f32 * 0.25).collect(),
        };
        let mut bytes = Vec::new();
        save_checkpoint(&mut bytes, &model, &meta, Some(&opt)).unwrap();
        let (loaded, meta2, opt2) = load_checkpoint::<f32, _>(&mut bytes.as_slice()).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.params.data(), model.params.data());
        assert_eq!(meta2, meta);
        assert_eq!(opt2.as_ref(), Some(&opt));
        let mut again = Vec::new();
        save_checkpoint(&mut again, &loaded, &meta2, opt2.as_ref()).unwrap();
        assert_eq!(bytes, again);
        // dtype tag is enforced
        assert!(matches!(
            load_checkpoint::<f64, _>(&mut bytes.as_slice()),
            Err(ModelError::DtypeMismatch { file: 4, expected: 8 })
        ));
    }

    #[test]
    fn forward_rejects_bad_positions() {
        let model = Model::<f64>::new(tiny_config(2, 2)).unwrap();
        let els = sample_elements(2);
        assert!(model.forward(&els, Some(&[els.len()])).is_err());
    }
}
