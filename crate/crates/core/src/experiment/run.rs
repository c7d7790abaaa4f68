use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::config::{CorpusSource, RunConfig, SCHEMA_VERSION};
use super::{tune_allocator, write_atomic, ExperimentError, Result};
use crate::data::{eval_batches, synthetic_corpus, stratify, Batch, BatchSampler, Corpus, FrequencyStrata, FrequencyTable};
use crate::fit::{Metric, RegimeLabel};
use crate::linalg::Rng;
use crate::model::{Model, ModelError, ProbeCapture, ProbePoint};
use crate::optim::{OptimError, Optimizer};
use crate::spectral::{
    reinjection_ratio, symmetry_ratio, write_spectrum_dump, EigenSpectrum, RankProfile, SpectralError, SymmetryPair,
    SymmetryStats, ALPHAS,
};

/// Validation perplexity above which a run counts as diverged.
pub const DIVERGENCE_PPL: f64 = 1000.0;
const DATA_STREAM: u64 = 2;
const RECORD_FILE: &str = "record.json";
const METRICS_FILE: &str = "metrics.jsonl";
const MODEL_FILE: &str = "model.bin";

/// Rank profile of one (layer, probe, regime) covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralCell {
    pub layer: usize,
    pub probe: ProbePoint,
    pub regime: RegimeLabel,
    pub samples: u64,
    /// `None` flags a degenerate cell: fewer than two samples or zero trace.
    pub profile: Option<RankProfile>,
}

impl SpectralCell {
    pub fn is_degenerate(&self) -> bool {
        self.profile.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    /// Mean training loss since the previous checkpoint.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub perplexity: f64,
    pub cells: Vec<SpectralCell>,
    /// One entry per layer; `None` when too few positions were observed.
    pub symmetry: Vec<Option<SymmetryStats>>,
}

fn metric_parts(metric: Metric) -> (ProbePoint, fn(&RankProfile) -> f64) {
    match metric {
        Metric::HardPre => (ProbePoint::Pre, |p| p.hard),
        Metric::SoftPre => (ProbePoint::Pre, |p| p.soft),
        Metric::HardPost => (ProbePoint::Post, |p| p.hard),
        Metric::SoftPost => (ProbePoint::Post, |p| p.soft),
    }
}

impl Checkpoint {
    pub fn n_layers(&self) -> usize {
        self.symmetry.len()
    }

    pub fn cell(&self, layer: usize, probe: ProbePoint, regime: RegimeLabel) -> Option<&SpectralCell> {
        self.cells.iter().find(|c| c.layer == layer && c.probe == probe && c.regime == regime)
    }

    pub fn profile(&self, layer: usize, probe: ProbePoint, regime: RegimeLabel) -> Option<&RankProfile> {
        self.cell(layer, probe, regime)?.profile.as_ref()
    }

    /// Mean over layers of `f(profile)`; `None` if any layer is degenerate.
    pub fn layer_mean(&self, probe: ProbePoint, regime: RegimeLabel, f: impl Fn(&RankProfile) -> f64) -> Option<f64> {
        let n = self.n_layers();
        let mut sum = 0.0;
        for layer in 0..n {
            sum += f(self.profile(layer, probe, regime)?);
        }
        (n > 0).then(|| sum / n as f64)
    }

    pub fn metric(&self, layer: Option<usize>, regime: RegimeLabel, metric: Metric) -> Option<f64> {
        let (probe, f) = metric_parts(metric);
        match layer {
            Some(l) => self.profile(l, probe, regime).map(f),
            None => self.layer_mean(probe, regime, f),
        }
    }

    /// `ρ_α` of one layer.
    pub fn reinjection(&self, layer: usize, regime: RegimeLabel, alpha_index: usize) -> Option<f64> {
        let pre = self.profile(layer, ProbePoint::Pre, regime)?.renyi[alpha_index];
        let post = self.profile(layer, ProbePoint::Post, regime)?.renyi[alpha_index];
        reinjection_ratio(pre, post).ok()
    }

    /// Mean over layers of the per-layer `ρ_α`.
    pub fn reinjection_layer_mean(&self, regime: RegimeLabel, alpha_index: usize) -> Option<f64> {
        let n = self.n_layers();
        let mut sum = 0.0;
        for layer in 0..n {
            sum += self.reinjection(layer, regime, alpha_index)?;
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Ratio of the layer-mean post and pre ranks.
    pub fn reinjection_of_means(&self, regime: RegimeLabel, alpha_index: usize) -> Option<f64> {
        let pre = self.layer_mean(ProbePoint::Pre, regime, |p| p.renyi[alpha_index])?;
        let post = self.layer_mean(ProbePoint::Post, regime, |p| p.renyi[alpha_index])?;
        reinjection_ratio(pre, post).ok()
    }

    /// Flat `layer.probe.regime.metric` object for the metrics stream.
    pub fn metrics_line(&self) -> Value {
        let mut m = Map::new();
        let num = |x: f64| serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number);
        let opt = |x: Option<f64>| x.map_or(Value::Null, num);
        m.insert("step".into(), Value::from(self.step));
        m.insert("train_loss".into(), opt(self.train_loss));
        m.insert("val_loss".into(), num(self.val_loss));
        m.insert("perplexity".into(), num(self.perplexity));
        for c in &self.cells {
            let key = format!("{}.{}.{}", c.layer, c.probe.as_str(), c.regime);
            m.insert(format!("{key}.samples"), Value::from(c.samples));
            m.insert(format!("{key}.degenerate"), Value::Bool(c.is_degenerate()));
            if let Some(p) = &c.profile {
                m.insert(format!("{key}.soft"), num(p.soft));
                m.insert(format!("{key}.hard"), num(p.hard));
                m.insert(format!("{key}.asym"), num(p.asymmetry));
                for (a, r) in ALPHAS.iter().zip(&p.renyi) {
                    m.insert(format!("{key}.renyi_{a}"), num(*r));
                }
            }
        }
        for regime in RegimeLabel::ALL {
            for metric in Metric::ALL {
                m.insert(format!("mean.{regime}.{metric}"), opt(self.metric(None, regime, metric)));
            }
            for (i, a) in ALPHAS.iter().enumerate() {
                for layer in 0..self.n_layers() {
                    m.insert(format!("{layer}.rho.{regime}.alpha_{a}"), opt(self.reinjection(layer, regime, i)));
                }
                m.insert(format!("mean.rho.{regime}.alpha_{a}"), opt(self.reinjection_layer_mean(regime, i)));
            }
        }
        for (layer, s) in self.symmetry.iter().enumerate() {
            let Some(s) = s else { continue };
            let pairs = std::iter::once((RegimeLabel::All, Some(s.all)))
                .chain(crate::data::Regime::ALL.iter().map(|&r| (RegimeLabel::Regime(r), s.regimes[r.index()])));
            for (regime, pair) in pairs {
                let Some(p) = pair else { continue };
                m.insert(format!("{layer}.pre.{regime}.sr"), num(p.sr_pre));
                m.insert(format!("{layer}.post.{regime}.sr"), num(p.sr_post));
                m.insert(format!("{layer}.delta.{regime}.sr"), num(p.delta));
            }
            m.insert(format!("{layer}.delta.ALL.head_tail_bias"), opt(s.head_tail_bias));
        }
        Value::Object(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

/// One rank-vs-width point contributed by a finished run. `layer` is
/// `None` for the layer mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitInput {
    pub layer: Option<usize>,
    pub regime: RegimeLabel,
    pub metric: Metric,
    pub width: usize,
    pub rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config: RunConfig,
    pub checkpoints: Vec<Checkpoint>,
    pub divergence: Option<Divergence>,
    /// Empty for diverged runs.
    pub fit_inputs: Vec<FitInput>,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn final_checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(RECORD_FILE))?)?)
    }

    /// The completed record in `dir` if it was produced by `cfg`.
    pub fn load_matching(dir: &Path, cfg: &RunConfig) -> Option<Self> {
        Self::load(dir).ok().filter(|r| r.schema_version == SCHEMA_VERSION && &r.config == cfg)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.join(RECORD_FILE), json.as_bytes())?;
        Ok(())
    }
}

/// Reads or generates the corpus and derives its frequency strata.
pub fn load_corpus(cfg: &RunConfig) -> Result<(Corpus, FrequencyStrata)> {
    let corpus = match &cfg.corpus {
        CorpusSource::File(p) => Corpus::load(p)?,
        CorpusSource::Synthetic { bytes, seed } => Corpus::new(synthetic_corpus(*bytes, *seed))?,
    };
    let table = match &cfg.frequency_table {
        Some(p) => FrequencyTable::load(p, cfg.model.vocab_size)?,
        None => FrequencyTable::from_corpus(corpus.bytes())?,
    };
    let strata = stratify(&table)?;
    Ok((corpus, strata))
}

fn spectral_cell(capture: &ProbeCapture, layer: usize, probe: ProbePoint, regime: RegimeLabel) -> Result<SpectralCell> {
    let acc = capture.accumulator(layer, probe, regime.regime());
    let profile = match EigenSpectrum::from_accumulator(&acc) {
        Ok(spec) if !spec.is_degenerate() => Some(RankProfile::from_spectrum(&spec)?),
        Ok(_) | Err(SpectralError::TooFewSamples(_)) | Err(SpectralError::Degenerate) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(SpectralCell { layer, probe, regime, samples: acc.count(), profile })
}

fn symmetry_pair(capture: &ProbeCapture, layer: usize, regime: Option<crate::data::Regime>) -> Option<SymmetryPair> {
    let pre = capture.positions(layer, ProbePoint::Pre, regime)?;
    let post = capture.positions(layer, ProbePoint::Post, regime)?;
    Some(SymmetryPair::new(symmetry_ratio(&pre).ok()?, symmetry_ratio(&post).ok()?))
}

/// Evaluates `model` on `batches`, capturing stratified probes. Returns
/// `None` when the loss or activations are non-finite.
pub fn evaluate(
    model: &Model<f32>,
    batches: &[Batch],
    strata: &FrequencyStrata,
    step: usize,
    train_loss: Option<f64>,
) -> Result<Option<Checkpoint>> {
    let cfg = model.config();
    let mut capture = ProbeCapture::new(cfg, Some(strata), true);
    let (mut total, mut tokens) = (0.0, 0usize);
    for b in batches {
        match model.loss(&b.tokens, &b.targets, b.batch, Some(&mut capture)) {
            Ok(l) if l.is_finite() => {
                total += l * b.tokens.len() as f64;
                tokens += b.tokens.len();
            }
            Ok(_) | Err(ModelError::NonFinite { .. }) => return Ok(None),
            Err(e) => return Err(e.into()),
        }
    }
    let val_loss = total / tokens as f64;
    let perplexity = val_loss.exp();
    if !(perplexity <= DIVERGENCE_PPL) {
        return Ok(Some(Checkpoint { step, train_loss, val_loss, perplexity, cells: Vec::new(), symmetry: Vec::new() }));
    }
    let mut cells = Vec::new();
    let mut symmetry = Vec::new();
    for layer in 0..cfg.n_layers {
        for probe in ProbePoint::ALL {
            for regime in RegimeLabel::ALL {
                cells.push(spectral_cell(&capture, layer, probe, regime)?);
            }
        }
        let regimes = crate::data::Regime::ALL.map(|r| symmetry_pair(&capture, layer, Some(r)));
        symmetry.push(symmetry_pair(&capture, layer, None).map(|all| SymmetryStats::new(all, regimes)));
    }
    Ok(Some(Checkpoint { step, train_loss, val_loss, perplexity, cells, symmetry }))
}

fn fit_inputs(ck: &Checkpoint, width: usize) -> Vec<FitInput> {
    let mut out = Vec::new();
    for regime in RegimeLabel::ALL {
        for metric in Metric::ALL {
            for layer in std::iter::once(None).chain((0..ck.n_layers()).map(Some)) {
                if let Some(rank) = ck.metric(layer, regime, metric) {
                    out.push(FitInput { layer, regime, metric, width, rank });
                }
            }
        }
    }
    out
}

/// Loads the corpus described by `cfg` and trains in `out_dir`.
pub fn run_single(cfg: &RunConfig, out_dir: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    let (corpus, strata) = load_corpus(cfg)?;
    run_single_in(cfg, &corpus, &strata, out_dir)
}

/// Trains one model, evaluating at every checkpoint step. Writes
/// `metrics.jsonl` as it goes, `model.bin` at each healthy checkpoint, and
/// `record.json` last.
pub fn run_single_in(cfg: &RunConfig, corpus: &Corpus, strata: &FrequencyStrata, out_dir: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    if cfg.model.vocab_size < 256 {
        return Err(ExperimentError::Config("byte corpora need vocab_size >= 256".into()));
    }
    tune_allocator();
    fs::create_dir_all(out_dir)?;
    let mut metrics = File::create(out_dir.join(METRICS_FILE))?;

    let mut model: Model<f32> = Model::init(&cfg.model)?;
    let mut opt = Optimizer::<f32>::new(&cfg.optimizer, model.specs(), cfg.seed)?;
    let seq = cfg.model.seq_len;
    let mut sampler = BatchSampler::new(corpus.train(), strata, seq, cfg.batch_size, Rng::with_stream(cfg.seed, DATA_STREAM))?;
    let eval = eval_batches(corpus.validation(), strata, seq, cfg.batch_size, cfg.eval_tokens)?;

    let steps = cfg.checkpoint_steps();
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut record_checkpoint = |ck: Option<Checkpoint>, step: usize, model: &Model<f32>| -> Result<Option<Divergence>> {
        let Some(ck) = ck else {
            return Ok(Some(Divergence { step, reason: "non-finite validation loss".into() }));
        };
        if !(ck.perplexity <= DIVERGENCE_PPL) {
            return Ok(Some(Divergence {
                step,
                reason: format!("validation perplexity {} exceeds {DIVERGENCE_PPL}", ck.perplexity),
            }));
        }
        writeln!(metrics, "{}", ck.metrics_line())?;
        metrics.flush()?;
        model.save(&out_dir.join(MODEL_FILE))?;
        checkpoints.push(ck);
        Ok(None)
    };

    let mut divergence = record_checkpoint(evaluate(&model, &eval, strata, 0, None)?, 0, &model)?;
    let mut next = 1;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for step in 0..cfg.total_steps {
        if divergence.is_some() {
            break;
        }
        let batch = sampler.next_batch();
        let grads = match model.loss_and_grads(&batch.tokens, &batch.targets, batch.batch) {
            Ok((loss, g)) if loss.is_finite() => {
                loss_sum += loss;
                loss_n += 1;
                g
            }
            Ok(_) | Err(ModelError::NonFinite { .. }) => {
                divergence = Some(Divergence { step, reason: "non-finite training loss".into() });
                break;
            }
            Err(e) => return Err(e.into()),
        };
        match opt.step(model.params_mut(), &grads, step, cfg.total_steps) {
            Ok(()) => {}
            Err(OptimError::NonFiniteGrad(name)) => {
                divergence = Some(Divergence { step, reason: format!("non-finite gradient in {name}") });
                break;
            }
            Err(e) => return Err(e.into()),
        }
        if next < steps.len() && step + 1 == steps[next] {
            next += 1;
            let train_loss = Some(loss_sum / loss_n as f64);
            (loss_sum, loss_n) = (0.0, 0);
            let ck = evaluate(&model, &eval, strata, step + 1, train_loss)?;
            divergence = record_checkpoint(ck, step + 1, &model)?;
        }
    }
    drop(record_checkpoint);

    let fit_inputs = match (&divergence, checkpoints.last()) {
        (None, Some(ck)) => fit_inputs(ck, cfg.model.ffn_dim()),
        _ => Vec::new(),
    };
    let record = RunRecord { schema_version: SCHEMA_VERSION, config: cfg.clone(), checkpoints, divergence, fit_inputs };
    record.save(out_dir)?;
    Ok(record)
}

/// Re-evaluates the checkpoint saved in `run_dir` and writes one spectrum
/// file per non-degenerate (layer, probe, regime) cell into `out_dir`.
pub fn dump_spectra(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let record = RunRecord::load(run_dir)?;
    let model: Model<f32> = Model::load(&run_dir.join(MODEL_FILE))?;
    let cfg = &record.config;
    let (corpus, strata) = load_corpus(cfg)?;
    let eval = eval_batches(corpus.validation(), &strata, cfg.model.seq_len, cfg.batch_size, cfg.eval_tokens)?;
    let mut capture = ProbeCapture::new(model.config(), Some(&strata), false);
    for b in &eval {
        model.loss(&b.tokens, &b.targets, b.batch, Some(&mut capture))?;
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for layer in 0..cfg.model.n_layers {
        for probe in ProbePoint::ALL {
            for regime in RegimeLabel::ALL {
                let acc = capture.accumulator(layer, probe, regime.regime());
                let Ok(spec) = EigenSpectrum::from_accumulator(&acc) else { continue };
                if spec.is_degenerate() {
                    continue;
                }
                let path = out_dir.join(format!("spectrum_L{layer}_{}_{regime}.txt", probe.as_str()));
                write_spectrum_dump(&path, layer, probe, regime.regime(), acc.count(), &spec)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::optim::OptimizerConfig;

    fn tiny(total_steps: usize) -> RunConfig {
        RunConfig {
            model: ModelConfig { d_model: 16, n_heads: 2, ffn_mult: 2, seq_len: 16, ..ModelConfig::default() },
            optimizer: OptimizerConfig::default(),
            total_steps,
            batch_size: 4,
            eval_tokens: 512,
            log_every: 5,
            corpus: CorpusSource::Synthetic { bytes: 20_000, seed: 3 },
            frequency_table: None,
            seed: 1,
        }
    }

    #[test]
    fn zero_steps_gives_init_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let rec = run_single(&tiny(0), dir.path()).unwrap();
        assert_eq!(rec.checkpoints.len(), 1);
        assert_eq!(rec.checkpoints[0].step, 0);
        assert!(!rec.diverged());
        let lines = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 1);
    }

    #[test]
    fn checkpoints_are_complete_and_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let rec = run_single(&tiny(10), dir.path()).unwrap();
        let steps: Vec<usize> = rec.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![0, 5, 10]);
        for ck in &rec.checkpoints {
            assert!((ck.perplexity - ck.val_loss.exp()).abs() <= 1e-9 * ck.perplexity);
            assert_eq!(ck.cells.len(), 2 * 2 * 4);
            for layer in 0..2 {
                for probe in ProbePoint::ALL {
                    for regime in RegimeLabel::ALL {
                        assert!(ck.cell(layer, probe, regime).is_some());
                    }
                }
            }
        }
        assert!(!rec.fit_inputs.is_empty());
        let line: Value = serde_json::from_str(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap().lines().last().unwrap()).unwrap();
        assert!(line.get("1.post.TAIL.hard").is_some());
        assert_eq!(line["step"], 10);
        assert_eq!(RunRecord::load(dir.path()).unwrap(), rec);
        assert!(RunRecord::load_matching(dir.path(), &rec.config).is_some());
        assert!(RunRecord::load_matching(dir.path(), &tiny(11)).is_none());
    }

    #[test]
    fn spectra_dump_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        run_single(&tiny(5), dir.path()).unwrap();
        let files = dump_spectra(dir.path(), &dir.path().join("spectra")).unwrap();
        assert!(!files.is_empty());
        let text = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(text.lines().next(), Some("layer probe regime n D"));
        let d: usize = text.lines().nth(1).unwrap().split(' ').nth(4).unwrap().parse().unwrap();
        assert_eq!(text.lines().count(), d + 2);
    }
}
