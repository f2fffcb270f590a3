//! Unified image-text-label contrastive learning with continuous prompts.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`] samples, multi-hot labels, JSONL ingestion, the synthetic
//!   generator and source-homogeneous batch sampling.
//! * [`prompt`] hashed tokenizer, discrete template registry and assembly of
//!   continuous-prompt embedding sequences.
//! * [`encoders`] the parameter store and the two toy MLP encoders with a
//!   hand-written reverse pass.
//! * [`objective`] soft label targets, globally normalized similarity, the
//!   softmax-free loss, its gradient and the finite-difference harness.
//! * [`training`] Adam, the warmup/decay schedule, the training loop and
//!   checkpoints.
//! * [`evaluation`] zero-shot (single and ensemble), linear probe,
//!   Precision@K and PCA embedding export.
//! * [`ablation`] context-length / data-source grid and the false-negative
//!   study.
//!
//! Batch-level work (per-sample forward/backward, per-query ranking) goes
//! through [`par`], which uses rayon when the `parallel` feature is on and a
//! plain iterator otherwise. Both paths produce bit-identical results.

pub mod ablation;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod objective;
pub mod par;
pub mod prompt;
pub mod run_dir;
pub mod training;

pub use error::{Error, Result};
