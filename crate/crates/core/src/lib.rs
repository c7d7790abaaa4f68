//! Desk-scale laboratory for optimizer-dependent spectral scaling of
//! transformer FFN representations.
//!
//! The crate trains small decoder-only transformers under AdamW, Muon,
//! NorMuon and Dion, captures FFN pre-/post-activation covariance spectra
//! stratified by token frequency, and fits rank-vs-width power laws.
//!
//! Module map:
//! - [`linalg`]: matrices, GEMM, eigensolvers, QR, seeded RNG
//! - [`model`]: transformer with manual reverse-mode gradients and probes
//! - [`optim`]: AdamW, Lion, Muon, NorMuon, Dion and parameter routing
//! - [`data`]: byte corpora, frequency tables, HEAD/MID/TAIL strata, batches
//! - [`spectral`]: eigenspectra, Rényi ranks, reinjection and symmetry ratios
//! - [`fit`]: power-law fits, layer-wise summaries, effect sizes
//! - [`experiment`]: configs, runs, sweeps and reports

pub mod data;
pub mod experiment;
pub mod fit;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod spectral;
