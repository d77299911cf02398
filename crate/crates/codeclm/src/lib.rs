//! Sequence-generation machinery for a tiny codec language model.
//!
//! The crate covers the full path from codec token grids to trained models:
//!
//! * [`codec`]: `K x T` codebook grids and the per-codebook delay pattern.
//! * [`align`]: transcript/audio alignment and prefix/suffix/middle splits.
//! * [`toy`]: a deterministic synthetic codec used as the test language.
//! * [`layout`]: training and inference sequence layouts over text, audio,
//!   mask, and speaker elements.
//! * [`model`]: a small decoder-only transformer with manual gradients.
//! * [`train`]: weighted cross-entropy, AdamW, and the training loop.
//! * [`infer`]: nucleus sampling and layout-driven generation, editing,
//!   and continuation.
//! * [`pipeline`]: corpus construction and end-to-end evaluation runs.

pub mod align;
pub mod codec;
pub mod infer;
pub mod layout;
pub mod model;
pub mod pipeline;
pub mod toy;
pub mod train;
