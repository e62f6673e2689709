//! Band-wise vector-quantized EEG modeling.
//!
//! The crate implements a complete desk-scale pipeline:
//!
//! 1. [`signal`] — preprocessing (notch, 0.5–45 Hz bandpass, resampling,
//!    unit scaling) and FFT decomposition into the five canonical bands.
//! 2. [`vq`] — per-band VQ-VAE tokenizers: RMS-normalized 1-s tokens, a
//!    convolutional encoder/decoder, EMA codebooks, and the four-term
//!    reconstruction loss.
//! 3. [`tokens`] — quantized absolute log-power tokens, the metadata
//!    taxonomy, and the unified global code vocabulary.
//! 4. [`masking`] — region-based masking over (region, laterality) channel
//!    groups.
//! 5. [`encoder`] — the shared Transformer encoder with metadata prefix
//!    tokens, band-specific prediction heads, and the masked code
//!    prediction pretraining loop.
//! 6. [`downstream`] — trial representations, fine-tuning, and the
//!    leave-one-subject-out evaluation harness.
//! 7. [`data`] — binary container formats (EEGB recordings, BVQT token
//!    streams, checkpoints), dataset manifests, and the synthetic corpus
//!    generator.
//! 8. [`engine`] — the tensor/autodiff/optimizer substrate everything
//!    above runs on.
//!
//! The `bandvq` CLI in this workspace wires the stages together; the book
//! under `book/` walks through the concepts with runnable snippets.

pub mod engine;

pub mod rng;
pub mod signal;
pub mod encoder;
pub mod masking;
pub mod tokens;
pub mod vq;
