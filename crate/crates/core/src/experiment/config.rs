use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentError, Result};
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Axes whose Cartesian product defines a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub ffn_mult: Vec<usize>,
    /// Each entry carries its own learning rate.
    pub optimizers: Vec<OptimizerConfig>,
    /// When present, every optimizer is crossed with these learning rates
    /// instead of using its own.
    pub lr: Option<Vec<f64>>,
    pub n_heads: Vec<usize>,
    pub use_rope: Vec<bool>,
    pub postln_frac: Vec<f64>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            ffn_mult: vec![1, 2, 4, 8],
            optimizers: vec![
                OptimizerConfig::for_kind(crate::optim::OptimizerKind::AdamW),
                OptimizerConfig::for_kind(crate::optim::OptimizerKind::Muon),
                OptimizerConfig::dion(0.5),
                OptimizerConfig::dion(1.0 / 16.0),
            ],
            lr: None,
            n_heads: vec![2],
            use_rope: vec![true],
            postln_frac: vec![0.0],
        }
    }
}

/// Where training bytes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    File(PathBuf),
    Synthetic { bytes: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    /// Optimizer of a single run; sweeps use `sweep.optimizers`.
    pub optimizer: OptimizerConfig,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Held-out tokens evaluated at every checkpoint.
    pub eval_tokens: usize,
    pub log_every: usize,
    /// Raw byte corpus; when absent a synthetic corpus is generated.
    pub corpus: Option<PathBuf>,
    pub synthetic_bytes: usize,
    /// Optional fixed `token_id<TAB>count` table used for stratification.
    pub frequency_table: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub sweep: SweepAxes,
    /// Reference and variant architecture labels for shift statistics.
    pub architecture_pair: Option<(String, String)>,
    pub reliability_floor: f64,
    /// Concurrent runs in a sweep.
    pub jobs: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            total_steps: 2000,
            batch_size: 16,
            eval_tokens: 1 << 16,
            log_every: 250,
            corpus: None,
            synthetic_bytes: 1_200_000,
            frequency_table: None,
            out_dir: PathBuf::from("runs/default"),
            sweep: SweepAxes::default(),
            architecture_pair: None,
            reliability_floor: crate::fit::DEFAULT_RELIABILITY_FLOOR,
            jobs: 1,
            seed: 0,
        }
    }
}

/// Architecture variant along the sweep's architecture axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchitectureSpec {
    pub n_heads: usize,
    pub use_rope: bool,
    pub postln_frac: f64,
}

impl ArchitectureSpec {
    /// e.g. `2h`, `4h_norope`, `2h_postln0.5`.
    pub fn label(&self) -> String {
        let mut s = format!("{}h", self.n_heads);
        if !self.use_rope {
            s.push_str("_norope");
        }
        if self.postln_frac > 0.0 {
            s.push_str(&format!("_postln{}", self.postln_frac));
        }
        s
    }
}

/// Fully resolved settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub total_steps: usize,
    pub batch_size: usize,
    pub eval_tokens: usize,
    pub log_every: usize,
    pub corpus: CorpusSource,
    pub frequency_table: Option<PathBuf>,
    pub seed: u64,
}

impl RunConfig {
    /// Steps at which the model is evaluated: 0, every `log_every`, and the
    /// final step.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = (0..=self.total_steps).step_by(self.log_every.max(1)).collect();
        if steps.last() != Some(&self.total_steps) {
            steps.push(self.total_steps);
        }
        steps
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.eval_tokens == 0 || self.log_every == 0 {
            return Err(ExperimentError::Config("batch_size, eval_tokens and log_every must be positive".into()));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.corpus, &mut cfg.frequency_table].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(ExperimentError::Config(format!("unsupported schema_version {v}"))),
            None => return Err(ExperimentError::Config("missing schema_version".into())),
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.schema_version != SCHEMA_VERSION {
            return bad("unsupported schema_version");
        }
        let s = &self.sweep;
        if s.ffn_mult.is_empty()
            || s.optimizers.is_empty()
            || s.n_heads.is_empty()
            || s.use_rope.is_empty()
            || s.postln_frac.is_empty()
            || s.lr.as_ref().is_some_and(Vec::is_empty)
        {
            return bad("sweep lists must be nonempty");
        }
        if self.log_every == 0 || (self.total_steps > 0 && self.log_every > self.total_steps) {
            return bad("log_every must lie in [1, total_steps] so that at least two checkpoints exist");
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1");
        }
        if self.corpus.is_none() && self.synthetic_bytes <= self.model.seq_len * 20 {
            return bad("synthetic_bytes too small for the configured seq_len");
        }
        if !(0.0..=1.0).contains(&self.reliability_floor) {
            return bad("reliability_floor must lie in [0, 1]");
        }
        self.single_run().validate()?;
        for run in self.sweep_runs() {
            run.1.validate()?;
        }
        Ok(())
    }

    fn corpus_source(&self) -> CorpusSource {
        match &self.corpus {
            Some(p) => CorpusSource::File(p.clone()),
            None => CorpusSource::Synthetic { bytes: self.synthetic_bytes, seed: self.seed },
        }
    }

    fn resolve(&self, model: ModelConfig, optimizer: OptimizerConfig) -> RunConfig {
        RunConfig {
            model: ModelConfig { seed: self.seed, ..model },
            optimizer,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            eval_tokens: self.eval_tokens,
            log_every: self.log_every,
            corpus: self.corpus_source(),
            frequency_table: self.frequency_table.clone(),
            seed: self.seed,
        }
    }

    /// The run described by the top-level model and optimizer fields.
    pub fn single_run(&self) -> RunConfig {
        self.resolve(self.model.clone(), self.optimizer.clone())
    }

    pub fn architectures(&self) -> Vec<ArchitectureSpec> {
        let s = &self.sweep;
        let mut out = Vec::new();
        for &n_heads in &s.n_heads {
            for &use_rope in &s.use_rope {
                for &postln_frac in &s.postln_frac {
                    out.push(ArchitectureSpec { n_heads, use_rope, postln_frac });
                }
            }
        }
        out
    }

    /// Optimizers of the sweep after applying the learning-rate axis, with
    /// their grid labels.
    pub fn sweep_optimizers(&self) -> Vec<(String, OptimizerConfig)> {
        let s = &self.sweep;
        match &s.lr {
            None => s.optimizers.iter().map(|o| (o.label(), o.clone())).collect(),
            Some(lrs) => s
                .optimizers
                .iter()
                .flat_map(|o| {
                    lrs.iter().map(move |&lr| {
                        let label = if lrs.len() == 1 { o.label() } else { format!("{}@{lr}", o.label()) };
                        (label, OptimizerConfig { lr, ..o.clone() })
                    })
                })
                .collect(),
        }
    }

    /// Every run of the sweep as `(run id, config)`, in a fixed order:
    /// architecture, then optimizer, then width.
    pub fn sweep_runs(&self) -> Vec<(String, RunConfig, SweepCoordinates)> {
        let mut out = Vec::new();
        for arch in self.architectures() {
            for (opt_label, opt) in self.sweep_optimizers() {
                for &m in &self.sweep.ffn_mult {
                    let model = ModelConfig {
                        ffn_mult: m,
                        n_heads: arch.n_heads,
                        use_rope: arch.use_rope,
                        postln_frac: arch.postln_frac,
                        ..self.model.clone()
                    };
                    let id = format!("{}__{}__m{m}", opt_label.replace('@', "_lr"), arch.label());
                    let coords = SweepCoordinates { optimizer: opt_label.clone(), architecture: arch.label(), ffn_mult: m };
                    out.push((id, self.resolve(model, opt.clone()), coords));
                }
            }
        }
        out
    }
}

/// Position of a run inside the sweep grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCoordinates {
    pub optimizer: String,
    pub architecture: String,
    pub ffn_mult: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn schema_version_required() {
        assert!(ExperimentConfig::from_json("{}").unwrap_err().is_config());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 99}"#).unwrap_err().is_config());
        let cfg = ExperimentConfig::from_json(r#"{"schema_version": 1, "total_steps": 10, "log_every": 5}"#).unwrap();
        assert_eq!(cfg.total_steps, 10);
    }

    #[test]
    fn rejects_empty_axes_and_bad_cadence() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.ffn_mult.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.log_every = cfg.total_steps + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.lr = Some(vec![]);
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.n_heads = vec![3];
        assert!(cfg.validate().unwrap_err().is_config());
    }

    #[test]
    fn default_sweep_has_sixteen_runs() {
        let runs = ExperimentConfig::default().sweep_runs();
        assert_eq!(runs.len(), 16);
        assert_eq!(runs[0].0, "adamw__2h__m1");
        assert_eq!(runs[15].0, "dion_1_16__2h__m8");
        assert_eq!(runs[15].1.model.ffn_dim(), 512);
    }

    #[test]
    fn lr_axis_is_crossed() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.optimizers.truncate(1);
        cfg.sweep.ffn_mult = vec![1];
        cfg.sweep.lr = Some(vec![1e-3, 3e-3]);
        let runs = cfg.sweep_runs();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].2.optimizer, "adamw@0.001");
        assert_eq!(runs[1].1.optimizer.lr, 3e-3);
    }

    #[test]
    fn checkpoints_include_init_and_end() {
        let mut run = ExperimentConfig::default().single_run();
        assert_eq!(run.checkpoint_steps().len(), 9);
        run.total_steps = 0;
        assert_eq!(run.checkpoint_steps(), vec![0]);
        run.total_steps = 10;
        run.log_every = 4;
        assert_eq!(run.checkpoint_steps(), vec![0, 4, 8, 10]);
    }

    #[test]
    fn architecture_labels() {
        let a = ArchitectureSpec { n_heads: 4, use_rope: false, postln_frac: 0.5 };
        assert_eq!(a.label(), "4h_norope_postln0.5");
    }
}
