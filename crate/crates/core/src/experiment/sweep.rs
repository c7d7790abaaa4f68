use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RunConfig, SweepCoordinates, SCHEMA_VERSION};
use super::run::{load_corpus, run_single_in, RunRecord};
use super::{write_atomic, ExperimentError, Result};
use crate::data::{Corpus, FrequencyStrata};
use crate::fit::{fit_power_law, FitGrid, GridCell, GridKey, Metric, RegimeLabel};

pub(crate) const MANIFEST_FILE: &str = "manifest.json";
pub(crate) const GRID_FILE: &str = "fit_grid.csv";
pub(crate) const LAYER_FITS_FILE: &str = "layer_fits.csv";
const LAYER_FITS_HEADER: &str = "optimizer,architecture,regime,metric,layer,beta,r2,stderr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum RunStatus {
    Completed,
    Diverged(String),
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub id: String,
    pub optimizer: String,
    pub architecture: String,
    pub ffn_mult: usize,
    pub width: usize,
    pub lr: f64,
    pub status: RunStatus,
    pub final_perplexity: Option<f64>,
}

impl SweepRun {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub architecture_pair: Option<(String, String)>,
    pub reliability_floor: f64,
    pub runs: Vec<SweepRun>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?)
    }
}

/// Per-layer exponent for one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFit {
    pub optimizer: String,
    pub architecture: String,
    pub regime: RegimeLabel,
    pub metric: Metric,
    pub layer: usize,
    pub beta: f64,
    pub r2: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub manifest: Manifest,
    pub grid: FitGrid,
    pub layer_fits: Vec<LayerFit>,
    /// Runs whose completed record was reused instead of retrained.
    pub reused: usize,
}

fn layer_fits_csv(fits: &[LayerFit]) -> String {
    let mut out = format!("{LAYER_FITS_HEADER}\n");
    for f in fits {
        out.push_str(&format!(
            "{},{},{},{},{},{:.17e},{:.17e},{:.17e}\n",
            f.optimizer, f.architecture, f.regime, f.metric, f.layer, f.beta, f.r2, f.stderr
        ));
    }
    out
}

pub fn load_layer_fits(path: &Path) -> Result<Vec<LayerFit>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || ExperimentError::Config(format!("{}:{}: malformed layer fit", path.display(), i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(LayerFit {
            optimizer: f[0].into(),
            architecture: f[1].into(),
            regime: f[2].parse().map_err(|_| bad())?,
            metric: f[3].parse().map_err(|_| bad())?,
            layer: f[4].parse().map_err(|_| bad())?,
            beta: num(f[5])?,
            r2: num(f[6])?,
            stderr: num(f[7])?,
        });
    }
    Ok(out)
}

type CellKey = (String, String, RegimeLabel, Metric, Option<usize>);

/// Fits every (optimizer, architecture, regime, metric) cell, and each
/// layer separately, from the fit inputs of non-diverged runs. Cells with
/// fewer than two widths are skipped.
fn build_fits(entries: &[(SweepCoordinates, Option<RunRecord>)]) -> (FitGrid, Vec<LayerFit>) {
    let mut points: BTreeMap<CellKey, Vec<(f64, f64)>> = BTreeMap::new();
    for (coords, record) in entries {
        let Some(rec) = record.as_ref().filter(|r| !r.diverged()) else { continue };
        for p in &rec.fit_inputs {
            let key = (coords.optimizer.clone(), coords.architecture.clone(), p.regime, p.metric, p.layer);
            points.entry(key).or_default().push((p.width as f64, p.rank));
        }
    }
    let mut grid = FitGrid::new();
    let mut layer_fits = Vec::new();
    for ((optimizer, architecture, regime, metric, layer), pts) in points {
        if pts.len() < 2 {
            continue;
        }
        let Ok(fit) = fit_power_law(&pts) else { continue };
        match layer {
            None => grid.insert(
                GridKey { optimizer, architecture, regime, metric },
                GridCell { beta: fit.beta, r2: fit.r2, stderr: fit.stderr },
            ),
            Some(layer) => layer_fits.push(LayerFit {
                optimizer,
                architecture,
                regime,
                metric,
                layer,
                beta: fit.beta,
                r2: fit.r2,
                stderr: fit.stderr,
            }),
        }
    }
    (grid, layer_fits)
}

fn default_pair(cfg: &ExperimentConfig) -> Option<(String, String)> {
    if cfg.architecture_pair.is_some() {
        return cfg.architecture_pair.clone();
    }
    match cfg.architectures().as_slice() {
        [reference, variant] => Some((reference.label(), variant.label())),
        _ => None,
    }
}

fn execute(
    jobs: &[(String, RunConfig, SweepCoordinates)],
    corpus: &Corpus,
    strata: &FrequencyStrata,
    runs_dir: &Path,
    workers: usize,
) -> Vec<(std::result::Result<RunRecord, String>, bool)> {
    let results: Vec<Mutex<Option<(std::result::Result<RunRecord, String>, bool)>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((id, cfg, _)) = jobs.get(i) else { break };
        let dir = runs_dir.join(id);
        let outcome = match RunRecord::load_matching(&dir, cfg) {
            Some(rec) => (Ok(rec), true),
            None => (run_single_in(cfg, corpus, strata, &dir).map_err(|e| e.to_string()), false),
        };
        *results[i].lock().expect("result slot") = Some(outcome);
    };
    if workers <= 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers.min(jobs.len()) {
                s.spawn(work);
            }
        });
    }
    results.into_iter().map(|m| m.into_inner().expect("result slot").expect("every job ran")).collect()
}

/// Runs the Cartesian product of the sweep axes under `out_dir`, reusing
/// any completed run whose recorded config matches, then fits the grid.
/// Failed runs are recorded in the manifest and do not stop the sweep.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SweepOutcome> {
    cfg.validate()?;
    let jobs = cfg.sweep_runs();
    let (corpus, strata) = load_corpus(&jobs[0].1)?;
    let runs_dir = out_dir.join("runs");
    fs::create_dir_all(&runs_dir)?;
    write_atomic(&out_dir.join("config.json"), cfg.to_json().as_bytes())?;

    let outcomes = execute(&jobs, &corpus, &strata, &runs_dir, cfg.jobs);
    let mut reused = 0;
    let mut runs = Vec::new();
    let mut entries = Vec::new();
    for ((id, run_cfg, coords), (outcome, was_reused)) in jobs.into_iter().zip(outcomes) {
        reused += was_reused as usize;
        let (status, final_perplexity, record) = match outcome {
            Ok(rec) => {
                let status = match &rec.divergence {
                    Some(d) => RunStatus::Diverged(format!("step {}: {}", d.step, d.reason)),
                    None => RunStatus::Completed,
                };
                let ppl = if rec.diverged() { None } else { rec.final_checkpoint().map(|c| c.perplexity) };
                (status, ppl, Some(rec))
            }
            Err(msg) => (RunStatus::Failed(msg), None, None),
        };
        runs.push(SweepRun {
            id,
            optimizer: coords.optimizer.clone(),
            architecture: coords.architecture.clone(),
            ffn_mult: coords.ffn_mult,
            width: run_cfg.model.ffn_dim(),
            lr: run_cfg.optimizer.lr,
            status,
            final_perplexity,
        });
        entries.push((coords, record));
    }

    let (grid, layer_fits) = build_fits(&entries);
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        architecture_pair: default_pair(cfg),
        reliability_floor: cfg.reliability_floor,
        runs,
    };
    write_atomic(&out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write_atomic(&out_dir.join(GRID_FILE), grid.to_csv().as_bytes())?;
    write_atomic(&out_dir.join(LAYER_FITS_FILE), layer_fits_csv(&layer_fits).as_bytes())?;
    Ok(SweepOutcome { manifest, grid, layer_fits, reused })
}
