use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::run::RunRecord;
use super::sweep::{load_layer_fits, LayerFit, Manifest, RunStatus, GRID_FILE, LAYER_FITS_FILE};
use super::{write_atomic, Result};
use crate::data::Regime;
use crate::fit::{
    effect_sizes, layerwise_summary, ArchitecturePair, EffectSizes, FitGrid, GridKey, Metric, RegimeLabel,
    DEFAULT_RELIABILITY_FLOOR,
};
use crate::model::ProbePoint;
use crate::spectral::ALPHAS;

/// Files written into `<sweep>/report/`.
pub const REPORT_FILES: [&str; 9] = [
    "beta_table.csv",
    "layerwise.csv",
    "effects.csv",
    "rank_points.csv",
    "trajectory.csv",
    "trainability.csv",
    "symmetry.csv",
    "renyi.csv",
    "reinjection.csv",
];

fn na(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v}"))
}

fn layer_label(layer: Option<usize>) -> String {
    layer.map_or_else(|| "mean".to_string(), |l| l.to_string())
}

struct Table {
    text: String,
}

impl Table {
    fn new(header: &str) -> Self {
        Self { text: format!("{header}\n") }
    }

    fn row(&mut self, fields: &[String]) {
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }
}

fn beta_table(grid: &FitGrid, floor: f64) -> Table {
    let mut t = Table::new("optimizer,architecture,probe,regime,beta_hard,r2_hard,beta_soft,r2_soft,delta_12,reliability");
    for opt in grid.optimizers() {
        for arch in grid.architectures() {
            for (probe, hard) in [("pre", Metric::HardPre), ("post", Metric::HardPost)] {
                let soft = hard.soft_partner().expect("hard metric");
                for regime in RegimeLabel::ALL {
                    let h = grid.get(&GridKey::new(&opt, &arch, regime, hard));
                    let s = grid.get(&GridKey::new(&opt, &arch, regime, soft));
                    if h.is_none() && s.is_none() {
                        continue;
                    }
                    let delta = match (h, s) {
                        (Some(h), Some(s)) => Some(s.beta - h.beta),
                        _ => None,
                    };
                    let worst_r2 = [h, s].iter().flatten().map(|c| c.r2).fold(f64::INFINITY, f64::min);
                    let reliability = if worst_r2 < floor { "directional" } else { "ok" };
                    t.row(&[
                        opt.clone(),
                        arch.clone(),
                        probe.into(),
                        regime.to_string(),
                        na(h.map(|c| c.beta)),
                        na(h.map(|c| c.r2)),
                        na(s.map(|c| c.beta)),
                        na(s.map(|c| c.r2)),
                        na(delta),
                        reliability.into(),
                    ]);
                }
            }
        }
    }
    t
}

fn layerwise_table(fits: &[LayerFit]) -> Result<Table> {
    let mut t = Table::new("optimizer,architecture,regime,metric,n_layers,median,q1,q3,iqr,frac_positive");
    let mut groups: BTreeMap<(String, String, RegimeLabel, Metric), Vec<(usize, f64)>> = BTreeMap::new();
    for f in fits {
        groups
            .entry((f.optimizer.clone(), f.architecture.clone(), f.regime, f.metric))
            .or_default()
            .push((f.layer, f.beta));
    }
    for ((opt, arch, regime, metric), mut betas) in groups {
        betas.sort_by_key(|b| b.0);
        let betas: Vec<f64> = betas.into_iter().map(|b| b.1).collect();
        let s = layerwise_summary(&betas)?;
        t.row(&[
            opt,
            arch,
            regime.to_string(),
            metric.to_string(),
            betas.len().to_string(),
            na(Some(s.median)),
            na(Some(s.q1)),
            na(Some(s.q3)),
            na(Some(s.iqr)),
            na(Some(s.frac_positive)),
        ]);
    }
    Ok(t)
}

/// Renders effect statistics; numbers use shortest round-trip formatting so
/// the CSV parses back to the exact values.
fn effects_table(effects: &EffectSizes, pair: Option<&ArchitecturePair>) -> Table {
    let mut t = Table::new("statistic,architecture,optimizer,regime,metric,value,detail");
    let pair_label = pair.map_or_else(String::new, |p| format!("{} vs {}", p.variant, p.reference));
    for g in &effects.gains {
        t.row(&[
            "delta_opt_star".into(),
            g.architecture.clone(),
            g.best_optimizer.clone(),
            g.regime.to_string(),
            g.metric.to_string(),
            na(Some(g.delta_opt)),
            format!("baseline_beta={}", g.baseline_beta),
        ]);
    }
    for s in &effects.shifts {
        for (name, v) in [("delta_arch", s.delta_arch), ("a_rank", s.a_rank)] {
            t.row(&[
                name.into(),
                pair_label.clone(),
                s.optimizer.clone(),
                s.regime.to_string(),
                s.metric.to_string(),
                na(Some(v)),
                String::new(),
            ]);
        }
    }
    for i in &effects.interactions {
        t.row(&[
            "i_star".into(),
            pair_label.clone(),
            String::new(),
            i.regime.to_string(),
            i.metric.to_string(),
            na(Some(i.i_star)),
            String::new(),
        ]);
    }
    for g in &effects.gaps {
        t.row(&[
            "delta_12".into(),
            g.architecture.clone(),
            g.optimizer.clone(),
            g.regime.to_string(),
            g.probe.clone(),
            na(Some(g.delta_12)),
            String::new(),
        ]);
    }
    for m in &effects.missing {
        t.row(&[m.statistic.clone(), String::new(), String::new(), String::new(), String::new(), "NA".into(), m.cell.clone()]);
    }
    t
}

struct Loaded<'a> {
    run: &'a super::sweep::SweepRun,
    record: RunRecord,
}

fn status_label(status: &RunStatus) -> &'static str {
    match status {
        RunStatus::Completed => "completed",
        RunStatus::Diverged(_) => "diverged",
        RunStatus::Failed(_) => "failed",
    }
}

fn rank_points(runs: &[Loaded]) -> Table {
    let mut t = Table::new("optimizer,architecture,lr,width,layer,regime,metric,rank,status");
    for l in runs {
        let Some(ck) = l.record.final_checkpoint() else { continue };
        for layer in std::iter::once(None).chain((0..ck.n_layers()).map(Some)) {
            for regime in RegimeLabel::ALL {
                for metric in Metric::ALL {
                    t.row(&[
                        l.run.optimizer.clone(),
                        l.run.architecture.clone(),
                        format!("{}", l.run.lr),
                        l.run.width.to_string(),
                        layer_label(layer),
                        regime.to_string(),
                        metric.to_string(),
                        na(ck.metric(layer, regime, metric)),
                        status_label(&l.run.status).into(),
                    ]);
                }
            }
        }
    }
    t
}

fn trajectory(runs: &[Loaded]) -> Table {
    let mut t = Table::new("optimizer,architecture,width,step,train_loss,val_loss,perplexity,regime,hard_pre,hard_post");
    for l in runs {
        for ck in &l.record.checkpoints {
            for regime in RegimeLabel::ALL {
                t.row(&[
                    l.run.optimizer.clone(),
                    l.run.architecture.clone(),
                    l.run.width.to_string(),
                    ck.step.to_string(),
                    na(ck.train_loss),
                    na(Some(ck.val_loss)),
                    na(Some(ck.perplexity)),
                    regime.to_string(),
                    na(ck.metric(None, regime, Metric::HardPre)),
                    na(ck.metric(None, regime, Metric::HardPost)),
                ]);
            }
        }
    }
    t
}

fn trainability(manifest: &Manifest) -> Table {
    let mut t = Table::new("architecture,optimizer,lr,width,status,perplexity");
    for r in &manifest.runs {
        let ppl = match &r.status {
            RunStatus::Completed => na(r.final_perplexity),
            RunStatus::Diverged(_) => "x".into(),
            RunStatus::Failed(_) => "NA".into(),
        };
        t.row(&[
            r.architecture.clone(),
            r.optimizer.clone(),
            format!("{}", r.lr),
            r.width.to_string(),
            status_label(&r.status).into(),
            ppl,
        ]);
    }
    t
}

fn symmetry(runs: &[Loaded]) -> Table {
    let mut t = Table::new("optimizer,architecture,width,layer,regime,sr_pre,sr_post,delta_sr,head_tail_bias");
    for l in runs {
        let Some(ck) = l.record.final_checkpoint() else { continue };
        for (layer, s) in ck.symmetry.iter().enumerate() {
            let Some(s) = s else { continue };
            let pairs = std::iter::once((RegimeLabel::All, Some(s.all)))
                .chain(Regime::ALL.iter().map(|&r| (RegimeLabel::Regime(r), s.regimes[r.index()])));
            for (regime, pair) in pairs {
                t.row(&[
                    l.run.optimizer.clone(),
                    l.run.architecture.clone(),
                    l.run.width.to_string(),
                    layer.to_string(),
                    regime.to_string(),
                    na(pair.map(|p| p.sr_pre)),
                    na(pair.map(|p| p.sr_post)),
                    na(pair.map(|p| p.delta)),
                    na(if regime == RegimeLabel::All { s.head_tail_bias } else { None }),
                ]);
            }
        }
    }
    t
}

fn renyi(runs: &[Loaded]) -> (Table, Table) {
    let mut ranks = Table::new("optimizer,architecture,width,probe,regime,alpha,rank");
    let mut rho = Table::new("optimizer,architecture,width,regime,alpha,rho_layer_mean,rho_of_means");
    for l in runs {
        let Some(ck) = l.record.final_checkpoint() else { continue };
        let lead = [l.run.optimizer.clone(), l.run.architecture.clone(), l.run.width.to_string()];
        for regime in RegimeLabel::ALL {
            for (i, a) in ALPHAS.iter().enumerate() {
                for probe in ProbePoint::ALL {
                    let r = ck.layer_mean(probe, regime, |p| p.renyi[i]);
                    let mut row = lead.to_vec();
                    row.extend([probe.as_str().into(), regime.to_string(), format!("{a}"), na(r)]);
                    ranks.row(&row);
                }
                let mut row = lead.to_vec();
                row.extend([
                    regime.to_string(),
                    format!("{a}"),
                    na(ck.reinjection_layer_mean(regime, i)),
                    na(ck.reinjection_of_means(regime, i)),
                ]);
                rho.row(&row);
            }
        }
    }
    (ranks, rho)
}

/// Writes the report tables for a sweep directory and returns their paths.
/// Missing fits and statistics appear as `NA`; a sweep without runs yields
/// header-only files.
pub fn generate_report(sweep_dir: &Path) -> Result<Vec<PathBuf>> {
    let grid = FitGrid::load(&sweep_dir.join(GRID_FILE))?;
    let manifest = match Manifest::load(sweep_dir) {
        Ok(m) => m,
        Err(e) if e.is_io() => Manifest {
            schema_version: super::SCHEMA_VERSION,
            architecture_pair: None,
            reliability_floor: DEFAULT_RELIABILITY_FLOOR,
            runs: Vec::new(),
        },
        Err(e) => return Err(e),
    };
    let layer_fits = match load_layer_fits(&sweep_dir.join(LAYER_FITS_FILE)) {
        Ok(f) => f,
        Err(e) if e.is_io() => Vec::new(),
        Err(e) => return Err(e),
    };
    let runs: Vec<Loaded> = manifest
        .runs
        .iter()
        .filter_map(|run| RunRecord::load(&sweep_dir.join("runs").join(&run.id)).ok().map(|record| Loaded { run, record }))
        .collect();

    let pair = manifest.architecture_pair.clone().map(|(reference, variant)| ArchitecturePair { reference, variant });
    let effects = match effect_sizes(&grid, pair.as_ref()) {
        Ok(e) => effects_table(&e, pair.as_ref()),
        Err(e) => {
            let mut t = effects_table(&EffectSizes::default(), pair.as_ref());
            t.row(&[
                "delta_opt_star".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                "NA".into(),
                e.to_string().replace(',', ";"),
            ]);
            t
        }
    };
    let (renyi_t, rho_t) = renyi(&runs);
    let tables = [
        beta_table(&grid, manifest.reliability_floor),
        layerwise_table(&layer_fits)?,
        effects,
        rank_points(&runs),
        trajectory(&runs),
        trainability(&manifest),
        symmetry(&runs),
        renyi_t,
        rho_t,
    ];
    let dir = sweep_dir.join("report");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for (name, table) in REPORT_FILES.iter().zip(tables) {
        let path = dir.join(name);
        write_atomic(&path, table.text.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
