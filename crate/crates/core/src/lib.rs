//! Privacy-enhanced training outsourcing for on-device models.
//!
//! A device uploads a one-shot anonymous query — a differentially-private
//! similarity sketch of its local data plus a model spec, sealed with
//! authenticated encryption — and the server retrieves similar corpus
//! samples, fine-tunes a pretrained base model on them, and returns an
//! integrity-checked artifact for offline on-device inference.
//!
//! The `parallel` feature (default on) parallelizes corpus sketching,
//! retrieval scoring, and experiment trials with rayon; disabling it gives
//! a fully sequential build with identical results.

pub mod corpus;
pub mod envelope;
pub mod eval;
pub mod learn;
pub mod privacy;
pub mod protocol;
pub mod sketch;
pub mod synth;
