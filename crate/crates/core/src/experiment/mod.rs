//! Reproduction harness: JSON configs, single training runs with periodic
//! spectral evaluation, width/optimizer/architecture sweeps, and CSV reports.
//!
//! Layout of a sweep directory:
//!
//! ```text
//! <out>/config.json        resolved experiment config
//! <out>/manifest.json      one entry per run, written only by the orchestrator
//! <out>/fit_grid.csv       layer-mean fits per (optimizer, architecture, regime, metric)
//! <out>/layer_fits.csv     the same fits per layer
//! <out>/runs/<id>/         record.json, metrics.jsonl, model.bin
//! <out>/report/            CSV tables written by `generate_report`
//! ```

mod config;
mod report;
mod run;
mod sweep;

pub use config::{ArchitectureSpec, CorpusSource, ExperimentConfig, RunConfig, SweepAxes, SweepCoordinates, SCHEMA_VERSION};
pub use report::{generate_report, REPORT_FILES};
pub use run::{
    dump_spectra, evaluate, load_corpus, run_single, run_single_in, Checkpoint, Divergence, FitInput, RunRecord,
    SpectralCell, DIVERGENCE_PPL,
};
pub use sweep::{load_layer_fits, run_sweep, LayerFit, Manifest, RunStatus, SweepOutcome, SweepRun};

use thiserror::Error;

use crate::data::DataError;
use crate::fit::FitError;
use crate::model::ModelError;
use crate::optim::OptimError;
use crate::spectral::SpectralError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

impl ExperimentError {
    /// True for errors caused by the configuration rather than the
    /// environment.
    pub fn is_config(&self) -> bool {
        match self {
            Self::Config(_) | Self::Json(_) => true,
            Self::Model(ModelError::InvalidConfig(_)) | Self::Optim(OptimError::InvalidConfig(_)) => true,
            _ => false,
        }
    }

    /// True for file-system and corpus access failures.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Self::Io(_)
                | Self::Model(ModelError::Io(_))
                | Self::Data(DataError::Io(_))
                | Self::Fit(FitError::Io(_))
                | Self::Spectral(SpectralError::Io(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Keeps freed training buffers inside the heap instead of returning them to
/// the kernel after every step; otherwise each step re-faults tens of
/// megabytes of fresh pages.
pub(crate) fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        use std::sync::Once;
        static ONCE: Once = Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
            libc::mallopt(libc::M_TOP_PAD, 256 << 20);
        });
    }
}

pub(crate) fn write_atomic(path: &std::path::Path, contents: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}
