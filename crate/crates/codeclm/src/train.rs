//! Weighted cross-entropy objective, AdamW with linear warmup/decay,
//! gradient accumulation, and the training loop.
//!
//! The loop is deterministic under its seed: each processed item derives
//! its own rng from (seed, step, item index), so a resumed run replays
//! the exact stream a straight-through run would have seen. Gradients are
//! accumulated as raw weighted sums and scaled once per optimizer step,
//! which makes micro-batch grouping irrelevant to the result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{sample_split, slice, AlignError, AlignedUtterance, SplitPolicy};
use crate::layout::{
    build_natural_training_sequence, build_training_sequence, LayoutError, SegmentTag,
    TrainingLayout,
};
use crate::model::{
    load_checkpoint, save_checkpoint, Model, ModelError, OptBlob, ParamStore, PositionLogits, Real,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("utterance needs a layout of {needed} elements, model limit is {max}")]
    SequenceTooLong { needed: usize, max: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("non-finite gradient at step {step} in {section}[{index}]")]
    NonFiniteGrad { step: u64, section: String, index: usize },
    #[error("logits at position {position} have no target")]
    TargetMismatch { position: usize },
    #[error("checkpoint lacks optimizer state; cannot resume")]
    MissingOptState,
    #[error("checkpoint meta: {0}")]
    BadMeta(String),
}

/// Which training sequence construction the loop uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    /// Prefix-suffix-middle reordering with an end marker (the default).
    Reordered,
    /// Natural-order infilling arm: middle-only targets, no end marker.
    Natural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Micro-batches whose gradients are accumulated into one step.
    pub accum_micro_batches: usize,
    /// Utterances per micro-batch.
    pub micro_batch_size: usize,
    /// Per-codebook loss weights α, length K.
    pub codebook_weights: Vec<f64>,
    /// Per-segment loss weights (prefix, suffix, middle).
    pub segment_weights: [f64; 3],
    /// Divide the loss (and gradients) by the summed weights of the step;
    /// `false` reproduces the raw weighted sum.
    pub normalize_loss: bool,
    pub split_policy: SplitPolicy,
    pub layout_kind: LayoutKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults, sized for a single CPU core; full-scale
    /// values (peak 4e-3, 8 micro-batches, millions of steps) remain
    /// reachable through the fields.
    fn default() -> Self {
        TrainConfig {
            total_steps: 20_000,
            warmup_steps: 500,
            peak_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            accum_micro_batches: 1,
            micro_batch_size: 2,
            codebook_weights: vec![1.0, 0.8, 0.6, 0.4],
            segment_weights: [1.0, 1.0, 3.0],
            normalize_loss: true,
            split_policy: SplitPolicy::default(),
            layout_kind: LayoutKind::Reordered,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_codebooks: usize) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.total_steps == 0 {
            return bad("total_steps must be >= 1".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive and finite".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be > 0 and weight_decay >= 0".into());
        }
        if self.accum_micro_batches == 0 || self.micro_batch_size == 0 {
            return bad("accum_micro_batches and micro_batch_size must be >= 1".into());
        }
        if self.codebook_weights.len() != num_codebooks {
            return bad(format!(
                "codebook_weights has {} entries for {} codebooks",
                self.codebook_weights.len(),
                num_codebooks
            ));
        }
        if self.codebook_weights.iter().any(|&a| !(a > 0.0)) {
            return bad("codebook_weights must all be positive".into());
        }
        if self.segment_weights.iter().any(|&w| !(w >= 0.0)) {
            return bad("segment_weights must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.split_policy.p_tts) {
            return bad("split_policy.p_tts must lie in [0, 1]".into());
        }
        Ok(())
    }
}

fn segment_weight_of(tag: SegmentTag, seg: &[f64; 3]) -> f64 {
    match tag {
        SegmentTag::Prefix => seg[0],
        SegmentTag::Suffix => seg[1],
        SegmentTag::Middle => seg[2],
        SegmentTag::NonAudio => 0.0,
    }
}

/// Raw pieces of one weighted cross-entropy evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// Σ w·CE over all target positions and codebooks.
    pub weighted_sum: f64,
    /// Σ w over the same terms.
    pub weight_sum: f64,
    /// Number of (position, codebook) terms.
    pub terms: usize,
}

impl LossTerms {
    pub const ZERO: LossTerms = LossTerms { weighted_sum: 0.0, weight_sum: 0.0, terms: 0 };

    pub fn value(&self, normalize: bool) -> f64 {
        if normalize {
            if self.weight_sum == 0.0 {
                0.0
            } else {
                self.weighted_sum / self.weight_sum
            }
        } else {
            self.weighted_sum
        }
    }

    pub fn add(&mut self, other: &LossTerms) {
        self.weighted_sum += other.weighted_sum;
        self.weight_sum += other.weight_sum;
        self.terms += other.terms;
    }
}

fn ce_term<T: Real>(logits: &[T], target: usize) -> (f64, f64) {
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        let l = l.f64();
        if l > max {
            max = l;
        }
    }
    let mut sum = 0.0f64;
    for &l in logits {
        sum += (l.f64() - max).exp();
    }
    let lse = max + sum.ln();
    (lse, lse - logits[target].f64())
}

/// Σ over target positions and codebooks of w_seg·α_k·CE, evaluated in
/// `f64`. `logits` must carry one entry per target position of the layout.
pub fn weighted_ce<T: Real>(
    logits: &[PositionLogits<T>],
    layout: &TrainingLayout,
    codebook_weights: &[f64],
    segment_weights: &[f64; 3],
) -> Result<LossTerms, TrainError> {
    let (terms, _) = weighted_ce_inner(logits, layout, codebook_weights, segment_weights, false)?;
    Ok(terms)
}

/// [`weighted_ce`] plus d(weighted_sum)/d(logits). The gradient is of the
/// raw sum; the caller applies any normalization scale once.
pub fn weighted_ce_with_grad<T: Real>(
    logits: &[PositionLogits<T>],
    layout: &TrainingLayout,
    codebook_weights: &[f64],
    segment_weights: &[f64; 3],
) -> Result<(LossTerms, Vec<PositionLogits<T>>), TrainError> {
    let (terms, grads) = weighted_ce_inner(logits, layout, codebook_weights, segment_weights, true)?;
    Ok((terms, grads))
}

fn weighted_ce_inner<T: Real>(
    logits: &[PositionLogits<T>],
    layout: &TrainingLayout,
    codebook_weights: &[f64],
    segment_weights: &[f64; 3],
    want_grad: bool,
) -> Result<(LossTerms, Vec<PositionLogits<T>>), TrainError> {
    let k_total = layout.spec.num_codebooks;
    if codebook_weights.len() != k_total {
        return Err(TrainError::InvalidConfig(format!(
            "codebook_weights has {} entries for {} codebooks",
            codebook_weights.len(),
            k_total
        )));
    }
    let mut terms = LossTerms::ZERO;
    let mut grads = Vec::new();
    for pl in logits {
        let pos = pl.position;
        let target = layout
            .target
            .get(pos)
            .and_then(|t| t.as_ref())
            .ok_or(TrainError::TargetMismatch { position: pos })?;
        let w_seg = segment_weight_of(layout.segment_tag[pos], segment_weights);
        let mut head_grads = Vec::new();
        for (k, head) in pl.heads.iter().enumerate() {
            let z = target[k] as usize;
            let w = w_seg * codebook_weights[k];
            let (lse, ce) = ce_term(head, z);
            terms.weighted_sum += w * ce;
            terms.weight_sum += w;
            terms.terms += 1;
            if want_grad {
                let mut dl: Vec<T> = Vec::with_capacity(head.len());
                for (v, &l) in head.iter().enumerate() {
                    let p = (l.f64() - lse).exp();
                    let onehot = if v == z { 1.0 } else { 0.0 };
                    dl.push(T::of(w * (p - onehot)));
                }
                head_grads.push(dl);
            }
        }
        if want_grad {
            grads.push(PositionLogits { position: pos, heads: head_grads });
        }
    }
    Ok((terms, grads))
}

/// Linear warmup to `peak_lr` at `warmup_steps`, then linear decay to zero
/// at `total_steps`. Steps are the 1-based optimizer step count; step 0 is
/// the pre-training point.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    let (w, total) = (cfg.warmup_steps, cfg.total_steps);
    let step = step.min(total);
    if step <= w {
        if w == 0 {
            // degenerate no-warmup schedule starts at peak
            cfg.peak_lr
        } else {
            cfg.peak_lr * step as f64 / w as f64
        }
    } else {
        cfg.peak_lr * (total - step) as f64 / (total - w) as f64
    }
}

/// First and second moment estimates, step count included for bias
/// correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(n_params: usize) -> Self {
        AdamState { m: vec![T::zero(); n_params], v: vec![T::zero(); n_params], step: 0 }
    }
}

/// One AdamW update: decoupled decay shrinks the parameter first, then the
/// bias-corrected moment update is applied. Rejects non-finite gradients
/// before touching any parameter.
pub fn adamw_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGrad {
            step: state.step + 1,
            section: "<flat>".into(),
            index,
        });
    }
    state.step += 1;
    let t = state.step;
    let inv_bc1 = T::of(1.0 / (1.0 - cfg.beta1.powi(t as i32)));
    let inv_bc2 = T::of(1.0 / (1.0 - cfg.beta2.powi(t as i32)));
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one_m_b1 = T::of(1.0 - cfg.beta1);
    let one_m_b2 = T::of(1.0 - cfg.beta2);
    let shrink = T::of(1.0 - lr * cfg.weight_decay);
    let lr_t = T::of(lr);
    let eps = T::of(cfg.eps);
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.m[i] + one_m_b1 * g;
        let v = b2 * state.v[i] + one_m_b2 * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m * inv_bc1;
        let v_hat = v * inv_bc2;
        let p = params[i] * shrink;
        params[i] = p - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Deterministic per-step record; wall-clock rates are the caller's
/// concern so that logs from equal-seed runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Layout elements processed during this step.
    pub elements: u64,
    /// Running total across the run, checkpoint-resume included.
    pub cumulative_elements: u64,
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Item rng keyed by (seed, step, flat item index). Grouping items into
/// micro-batches does not change any item's stream, and a resumed run
/// derives the same rngs a straight run would.
fn item_rng(seed: u64, step: u64, item: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(splitmix64(seed) ^ step) ^ item))
}

pub struct Trainer<T: Real> {
    model: Model<T>,
    cfg: TrainConfig,
    opt: AdamState<T>,
    grads: ParamStore<T>,
    cumulative_elements: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate(model.config.codec.num_codebooks)?;
        let n = model.params.len();
        let grads = model.params.zeros_like();
        Ok(Trainer { model, cfg, opt: AdamState::new(n), grads, cumulative_elements: 0 })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn completed_steps(&self) -> u64 {
        self.opt.step
    }

    pub fn is_finished(&self) -> bool {
        self.opt.step >= self.cfg.total_steps
    }

    /// Upper bound on the layout length an utterance can need under any
    /// split (text + speaker + two masks + three delayed segments + end).
    fn layout_bound(utt: &AlignedUtterance, k: usize) -> usize {
        utt.units().len() + utt.grid().width() + 3 * k + 1
    }

    /// Run steps until `until_step` (clamped to `total_steps`), invoking
    /// `on_step` after each optimizer step.
    pub fn run_steps(
        &mut self,
        corpus: &[AlignedUtterance],
        until_step: u64,
        on_step: &mut dyn FnMut(&StepMetrics),
    ) -> Result<(), TrainError> {
        if corpus.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let max = self.model.config.max_seq_len;
        let k = self.model.config.codec.num_codebooks;
        if let Some(worst) = corpus.iter().map(|u| Self::layout_bound(u, k)).max() {
            if worst > max {
                return Err(TrainError::SequenceTooLong { needed: worst, max });
            }
        }
        let until = until_step.min(self.cfg.total_steps);
        while self.opt.step < until {
            let metrics = self.one_step(corpus)?;
            on_step(&metrics);
        }
        Ok(())
    }

    pub fn run_to_completion(
        &mut self,
        corpus: &[AlignedUtterance],
        on_step: &mut dyn FnMut(&StepMetrics),
    ) -> Result<(), TrainError> {
        self.run_steps(corpus, self.cfg.total_steps, on_step)
    }

    fn one_step(&mut self, corpus: &[AlignedUtterance]) -> Result<StepMetrics, TrainError> {
        let step = self.opt.step + 1;
        let cfg = self.cfg.clone();
        self.grads.zero();
        let mut totals = LossTerms::ZERO;
        let mut elements_this_step: u64 = 0;
        let items = cfg.accum_micro_batches * cfg.micro_batch_size;
        for item in 0..items {
            let mut rng = item_rng(cfg.seed, step, item as u64);
            let utt = &corpus[rng.random_range(0..corpus.len())];
            let split = sample_split(utt, &mut rng, cfg.split_policy);
            let (texts, grids) = slice(utt, &split)?;
            let layout = match cfg.layout_kind {
                LayoutKind::Reordered => build_training_sequence(&texts, &grids, utt.speaker_id())?,
                LayoutKind::Natural => {
                    build_natural_training_sequence(&texts, &grids, utt.speaker_id())?
                }
            };
            let positions: Vec<usize> = layout
                .target
                .iter()
                .enumerate()
                .filter_map(|(i, t)| t.as_ref().map(|_| i))
                .collect();
            let (logits, cache) = self.model.forward(&layout.elements, Some(&positions))?;
            let (terms, dlogits) = weighted_ce_with_grad(
                &logits,
                &layout,
                &cfg.codebook_weights,
                &cfg.segment_weights,
            )?;
            if !terms.weighted_sum.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            self.model.backward(&layout.elements, &cache, &dlogits, &mut self.grads);
            totals.add(&terms);
            elements_this_step += layout.elements.len() as u64;
        }
        let scale = if cfg.normalize_loss && totals.weight_sum != 0.0 {
            1.0 / totals.weight_sum
        } else {
            1.0
        };
        if scale != 1.0 {
            let s = T::of(scale);
            for g in self.grads.data_mut() {
                *g = *g * s;
            }
        }
        if let Some(index) = self.grads.data().iter().position(|g| !g.is_finite()) {
            let section = self
                .grads
                .sections()
                .iter()
                .find(|(_, r)| r.contains(&index))
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            return Err(TrainError::NonFiniteGrad { step, section, index });
        }
        let lr = lr_at(&cfg, step);
        adamw_step(self.model.params.data_mut(), self.grads.data(), &mut self.opt, lr, &cfg)?;
        self.cumulative_elements += elements_this_step;
        Ok(StepMetrics {
            step,
            loss: totals.value(cfg.normalize_loss),
            lr,
            elements: elements_this_step,
            cumulative_elements: self.cumulative_elements,
        })
    }

    /// Checkpoint with the train config and progress embedded; resuming
    /// from it continues the identical step stream.
    pub fn save<W: std::io::Write>(&self, w: &mut W) -> Result<(), TrainError> {
        let meta = serde_json::json!({
            "kind": "trainer-state",
            "train_config": serde_json::to_value(&self.cfg).map_err(ModelError::Json)?,
            "completed_steps": self.opt.step,
            "cumulative_elements": self.cumulative_elements,
        });
        let blob = OptBlob { step: self.opt.step, m: self.opt.m.clone(), v: self.opt.v.clone() };
        save_checkpoint(w, &self.model, &meta, Some(&blob))?;
        Ok(())
    }

    pub fn load<R: std::io::Read>(r: &mut R) -> Result<Trainer<T>, TrainError> {
        let (model, meta, opt) = load_checkpoint::<T, R>(r)?;
        let blob = opt.ok_or(TrainError::MissingOptState)?;
        let cfg: TrainConfig = serde_json::from_value(
            meta.get("train_config")
                .cloned()
                .ok_or_else(|| TrainError::BadMeta("missing train_config".into()))?,
        )
        .map_err(|e| TrainError::BadMeta(e.to_string()))?;
        cfg.validate(model.config.codec.num_codebooks)?;
        let completed = meta
            .get("completed_steps")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| TrainError::BadMeta("missing completed_steps".into()))?;
        if completed != blob.step {
            return Err(TrainError::BadMeta(format!(
                "meta says {completed} steps, optimizer state says {}",
                blob.step
            )));
        }
        let cumulative_elements =
            meta.get("cumulative_elements").and_then(|v| v.as_u64()).unwrap_or(0);
        let grads = model.params.zeros_like();
        Ok(Trainer {
            model,
            cfg,
            opt: AdamState { m: blob.m, v: blob.v, step: blob.step },
            grads,
            cumulative_elements,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecSpec;
    use crate::layout::LayoutElement;
    use crate::model::{ModelConfig, PosEncoding};
    use crate::toy::{gen_corpus, CorpusConfig, ToyLanguageSpec};

    fn tiny_toy() -> ToyLanguageSpec {
        ToyLanguageSpec::new(4, 2, 2, CodecSpec::new(2, 16, 50).unwrap()).unwrap()
    }

    fn tiny_model_config(toy: &ToyLanguageSpec) -> ModelConfig {
        ModelConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            ffn_mult: 2,
            text_vocab: toy.alphabet_size,
            speaker_dim: toy.num_speakers,
            codec: toy.spec.clone(),
            max_seq_len: 64,
            pos_encoding: PosEncoding::Rotary,
            seed: 5,
        }
    }

    fn tiny_train_config(toy: &ToyLanguageSpec) -> TrainConfig {
        TrainConfig {
            total_steps: 8,
            warmup_steps: 2,
            peak_lr: 1e-3,
            accum_micro_batches: 1,
            micro_batch_size: 2,
            codebook_weights: vec![1.0; toy.spec.num_codebooks],
            ..TrainConfig::default()
        }
    }

    fn single_target_layout(spec: &CodecSpec, tag: SegmentTag, target: Vec<u32>) -> TrainingLayout {
        let k = spec.num_codebooks;
        TrainingLayout {
            spec: spec.clone(),
            elements: vec![
                LayoutElement::AudioCol(vec![0; k]),
                LayoutElement::AudioCol(target.clone()),
            ],
            target: vec![Some(target), None],
            weight: vec![crate::layout::segment_weight(tag), 0.0],
            segment_tag: vec![tag, SegmentTag::NonAudio],
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let spec = CodecSpec::new(4, 8, 50).unwrap();
        let e = spec.extended_vocab() as usize;
        let layout = single_target_layout(&spec, SegmentTag::Middle, vec![3, 1, 0, 7]);
        let logits = vec![PositionLogits { position: 0, heads: vec![vec![0.0f64; e]; 4] }];
        let terms =
            weighted_ce(&logits, &layout, &[1.0, 0.8, 0.6, 0.4], &[1.0, 1.0, 3.0]).unwrap();
        assert!((terms.value(true) - (e as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn middle_codebook_scaling_is_2_4x() {
        let spec = CodecSpec::new(4, 8, 50).unwrap();
        let e = spec.extended_vocab() as usize;
        let logits_at = |pos: usize| {
            let head: Vec<f64> = (0..e).map(|v| (v as f64 * 0.37).sin()).collect();
            vec![PositionLogits { position: pos, heads: vec![head; 4] }]
        };
        // (middle, codebook 1, alpha 0.8) vs (prefix, codebook 0, alpha 1.0),
        // identical CE underneath: ratio is exactly 3 * 0.8 = 2.4
        let mid = single_target_layout(&spec, SegmentTag::Middle, vec![2; 4]);
        let pre = single_target_layout(&spec, SegmentTag::Prefix, vec![2; 4]);
        let l_mid =
            weighted_ce(&logits_at(0), &mid, &[0.0, 0.8, 0.0, 0.0], &[1.0, 1.0, 3.0]).unwrap();
        let l_pre =
            weighted_ce(&logits_at(0), &pre, &[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 3.0]).unwrap();
        let ratio = l_mid.value(false) / l_pre.value(false);
        assert!((ratio - 2.4).abs() < 1e-12, "ratio {ratio}");
    }

    #[test]
    fn loss_matches_bruteforce_oracle() {
        let spec = CodecSpec::new(4, 8, 50).unwrap();
        let e = spec.extended_vocab() as usize;
        let alpha = [1.0, 0.8, 0.6, 0.4];
        let seg = [1.0, 1.0, 3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let tags = [SegmentTag::Prefix, SegmentTag::Suffix, SegmentTag::Middle];
            let tag = tags[rng.random_range(0..3)];
            let target: Vec<u32> = (0..4).map(|_| rng.random_range(0..e as u32)).collect();
            let layout = single_target_layout(&spec, tag, target.clone());
            let heads: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..e).map(|_| rng.random_range(-5.0..5.0)).collect())
                .collect();
            let logits = vec![PositionLogits { position: 0, heads: heads.clone() }];
            let terms = weighted_ce(&logits, &layout, &alpha, &seg).unwrap();

            // independent recomputation: plain exp-sum per scalar term
            let w_seg = segment_weight_of(tag, &seg);
            let mut oracle_sum = 0.0;
            let mut oracle_w = 0.0;
            for k in 0..4 {
                let denom: f64 = heads[k].iter().map(|l| l.exp()).sum();
                let ce = denom.ln() - heads[k][target[k] as usize];
                oracle_sum += w_seg * alpha[k] * ce;
                oracle_w += w_seg * alpha[k];
            }
            let rel = (terms.value(true) - oracle_sum / oracle_w).abs()
                / (oracle_sum / oracle_w).abs().max(1e-9);
            assert!(rel < 1e-6, "rel {rel}");
        }
    }

    #[test]
    fn loss_grad_matches_finite_difference() {
        let spec = CodecSpec::new(2, 8, 50).unwrap();
        let e = spec.extended_vocab() as usize;
        let alpha = [1.0, 0.8];
        let seg = [1.0, 1.0, 3.0];
        let layout = single_target_layout(&spec, SegmentTag::Middle, vec![5, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let heads: Vec<Vec<f64>> =
            (0..2).map(|_| (0..e).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let base = vec![PositionLogits { position: 0, heads }];
        let (_, grads) = weighted_ce_with_grad(&base, &layout, &alpha, &seg).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            for v in 0..e {
                let mut up = base.clone();
                up[0].heads[k][v] += h;
                let mut down = base.clone();
                down[0].heads[k][v] -= h;
                let lu = weighted_ce(&up, &layout, &alpha, &seg).unwrap().weighted_sum;
                let ld = weighted_ce(&down, &layout, &alpha, &seg).unwrap().weighted_sum;
                let numeric = (lu - ld) / (2.0 * h);
                let analytic = grads[0].heads[k][v];
                assert!(
                    (numeric - analytic).abs() < 1e-6,
                    "k={k} v={v}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn target_on_wrong_position_is_rejected() {
        let spec = CodecSpec::new(2, 8, 50).unwrap();
        let layout = single_target_layout(&spec, SegmentTag::Middle, vec![1, 1]);
        let logits = vec![PositionLogits { position: 1, heads: vec![vec![0.0f64; 11]; 2] }];
        assert!(matches!(
            weighted_ce(&logits, &layout, &[1.0, 1.0], &[1.0, 1.0, 3.0]),
            Err(TrainError::TargetMismatch { position: 1 })
        ));
    }

    #[test]
    fn lr_schedule_endpoints_and_monotonicity() {
        let cfg = TrainConfig {
            total_steps: 100,
            warmup_steps: 10,
            peak_lr: 2.0,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(&cfg, 0), 0.0);
        assert_eq!(lr_at(&cfg, 10), 2.0);
        assert_eq!(lr_at(&cfg, 100), 0.0);
        for s in 0..10 {
            assert!(lr_at(&cfg, s) < lr_at(&cfg, s + 1));
        }
        for s in 10..100 {
            assert!(lr_at(&cfg, s) > lr_at(&cfg, s + 1));
        }
        assert!((lr_at(&cfg, 55) - 2.0 * 45.0 / 90.0).abs() < 1e-15);
    }

    #[test]
    fn adamw_hand_examples() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = vec![1.0f64];
        let mut st = AdamState::new(1);
        adamw_step(&mut p, &[1.0], &mut st, 0.1, &cfg).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-4, "p = {}", p[0]);
        assert_eq!(st.step, 1);

        // zero grads, zero decay: parameters unchanged
        let mut p2 = vec![0.7f64, -1.3];
        let mut st2 = AdamState::new(2);
        adamw_step(&mut p2, &[0.0, 0.0], &mut st2, 0.1, &cfg).unwrap();
        assert_eq!(p2, vec![0.7, -1.3]);

        // zero grads, positive decay: pure multiplicative shrink
        let cfg_wd = TrainConfig { weight_decay: 0.5, ..TrainConfig::default() };
        let mut p3 = vec![2.0f64];
        let mut st3 = AdamState::new(1);
        adamw_step(&mut p3, &[0.0], &mut st3, 0.1, &cfg_wd).unwrap();
        assert!((p3[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);

        let mut p4 = vec![1.0f64];
        let mut st4 = AdamState::new(1);
        assert!(matches!(
            adamw_step(&mut p4, &[f64::NAN], &mut st4, 0.1, &cfg),
            Err(TrainError::NonFiniteGrad { .. })
        ));
        assert_eq!(p4, vec![1.0], "rejected step must not touch params");
        assert_eq!(st4.step, 0);
    }

    fn train_corpus(toy: &ToyLanguageSpec, size: usize) -> Vec<AlignedUtterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        gen_corpus(toy, &mut rng, &CorpusConfig { size, min_symbols: 2, max_symbols: 4 }, 1234)
            .utterances
    }

    #[test]
    fn fresh_model_step_one_loss_is_near_log_vocab() {
        let toy = tiny_toy();
        let model = Model::<f64>::new(tiny_model_config(&toy)).unwrap();
        let mut trainer = Trainer::new(model, tiny_train_config(&toy)).unwrap();
        let corpus = train_corpus(&toy, 16);
        let mut first = None;
        trainer.run_steps(&corpus, 1, &mut |m| first = Some(m.loss)).unwrap();
        let e = toy.spec.extended_vocab() as f64;
        let loss = first.expect("one step ran");
        assert!((loss - e.ln()).abs() < 0.05, "loss {loss} vs ln {}", e.ln());
    }

    #[test]
    fn micro_batch_grouping_does_not_change_the_result() {
        let toy = tiny_toy();
        let corpus = train_corpus(&toy, 16);
        let run = |accum: usize, micro: usize| {
            let model = Model::<f64>::new(tiny_model_config(&toy)).unwrap();
            let cfg = TrainConfig {
                accum_micro_batches: accum,
                micro_batch_size: micro,
                ..tiny_train_config(&toy)
            };
            let mut trainer = Trainer::new(model, cfg).unwrap();
            let mut losses = Vec::new();
            trainer.run_steps(&corpus, 4, &mut |m| losses.push(m.loss)).unwrap();
            (losses, trainer.into_model().params.data().to_vec())
        };
        let (loss_a, params_a) = run(4, 1);
        let (loss_b, params_b) = run(1, 4);
        let (loss_c, params_c) = run(2, 2);
        for (a, b) in loss_a.iter().zip(&loss_b) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        for (a, b) in params_a.iter().zip(&params_b) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-6));
        }
        assert_eq!(loss_b, loss_c);
        assert_eq!(params_b, params_c);
    }

    #[test]
    fn same_seed_runs_are_identical() {
        let toy = tiny_toy();
        let corpus = train_corpus(&toy, 16);
        let run = || {
            let model = Model::<f32>::new(tiny_model_config(&toy)).unwrap();
            let mut trainer = Trainer::new(model, tiny_train_config(&toy)).unwrap();
            let mut metrics = Vec::new();
            trainer.run_to_completion(&corpus, &mut |m| metrics.push(m.clone())).unwrap();
            (metrics, trainer.into_model().params.data().to_vec())
        };
        let (m1, p1) = run();
        let (m2, p2) = run();
        assert_eq!(m1, m2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn resume_continues_the_same_stream() {
        let toy = tiny_toy();
        let corpus = train_corpus(&toy, 16);
        let straight = {
            let model = Model::<f32>::new(tiny_model_config(&toy)).unwrap();
            let mut trainer = Trainer::new(model, tiny_train_config(&toy)).unwrap();
            let mut metrics = Vec::new();
            trainer.run_to_completion(&corpus, &mut |m| metrics.push(m.clone())).unwrap();
            (metrics, trainer.into_model().params.data().to_vec())
        };
        let resumed = {
            let model = Model::<f32>::new(tiny_model_config(&toy)).unwrap();
            let mut trainer = Trainer::new(model, tiny_train_config(&toy)).unwrap();
            let mut metrics = Vec::new();
            trainer.run_steps(&corpus, 3, &mut |m| metrics.push(m.clone())).unwrap();
            let mut bytes = Vec::new();
            trainer.save(&mut bytes).unwrap();
            let mut trainer2 = Trainer::<f32>::load(&mut bytes.as_slice()).unwrap();
            assert_eq!(trainer2.completed_steps(), 3);
            trainer2.run_to_completion(&corpus, &mut |m| metrics.push(m.clone())).unwrap();
            (metrics, trainer2.into_model().params.data().to_vec())
        };
        assert_eq!(straight.0, resumed.0);
        assert_eq!(straight.1, resumed.1);
    }

    #[test]
    fn nan_in_params_aborts_with_loss_error() {
        let toy = tiny_toy();
        let corpus = train_corpus(&toy, 8);
        let mut model = Model::<f64>::new(tiny_model_config(&toy)).unwrap();
        // poison the final norm gain: every position's logits turn NaN
        let range =
            model.params.sections().iter().find(|(n, _)| n == "final_ln.g").unwrap().1.clone();
        model.params.data_mut()[range.start] = f64::NAN;
        let mut trainer = Trainer::new(model, tiny_train_config(&toy)).unwrap();
        let err = trainer.run_steps(&corpus, 1, &mut |_| {}).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { step: 1 }), "{err}");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let spec_k = 4;
        let base = TrainConfig::default();
        assert!(base.validate(spec_k).is_ok());
        let cases = [
            TrainConfig { warmup_steps: 30_000, ..base.clone() },
            TrainConfig { total_steps: 0, ..base.clone() },
            TrainConfig { peak_lr: 0.0, ..base.clone() },
            TrainConfig { beta1: 1.0, ..base.clone() },
            TrainConfig { codebook_weights: vec![1.0; 3], ..base.clone() },
            TrainConfig { codebook_weights: vec![1.0, 0.8, 0.6, 0.0], ..base.clone() },
            TrainConfig { accum_micro_batches: 0, ..base.clone() },
            TrainConfig { segment_weights: [1.0, -1.0, 3.0], ..base.clone() },
        ];
        for (i, cfg) in cases.iter().enumerate() {
            assert!(cfg.validate(spec_k).is_err(), "case {i} should fail");
        }
    }

    #[test]
    fn natural_layout_trains_middle_only() {
        let toy = tiny_toy();
        let corpus = train_corpus(&toy, 8);
        let model = Model::<f64>::new(tiny_model_config(&toy)).unwrap();
        let cfg = TrainConfig { layout_kind: LayoutKind::Natural, ..tiny_train_config(&toy) };
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let mut steps = 0;
        trainer.run_steps(&corpus, 2, &mut |_| steps += 1).unwrap();
        assert_eq!(steps, 2);
    }

    #[test]
    fn sequence_too_long_is_rejected_up_front() {
        let toy = tiny_toy();
        let mut cfg = tiny_model_config(&toy);
        cfg.max_seq_len = 8;
        let model = Model::<f64>::new(cfg).unwrap();
        let corpus = train_corpus(&toy, 4);
        let mut trainer = Trainer::new(model, tiny_train_config(&toy)).unwrap();
        assert!(matches!(
            trainer.run_steps(&corpus, 1, &mut |_| {}),
            Err(TrainError::SequenceTooLong { .. })
        ));
    }
}
