//! Power-law fits of rank against FFN width, layer-wise summaries of the
//! fitted exponents, and optimizer/architecture effect sizes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Regime;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("power-law fit needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("non-positive {what} {value} in fit input")]
    NonPositive { what: &'static str, value: f64 },
    #[error("duplicate width {0} in fit input")]
    DuplicateWidth(f64),
    #[error("layer-wise summary needs at least one exponent")]
    Empty,
    #[error("missing AdamW baseline for {0}")]
    MissingBaseline(String),
    #[error("fit grid line {line}: {msg}")]
    BadCsv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FitError>;

/// Fits with `R²` under this floor are reported as directional only.
pub const DEFAULT_RELIABILITY_FLOOR: f64 = 0.3;

/// OLS fit of `ln R = β ln D + c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub beta: f64,
    pub intercept: f64,
    /// Clamped to [0, 1].
    pub r2: f64,
    pub r2_raw: f64,
    /// OLS standard error of the slope; 0 for two-point fits.
    pub stderr: f64,
    pub n_points: usize,
}

impl ScalingFit {
    pub fn is_directional(&self, floor: f64) -> bool {
        self.r2 < floor
    }
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 2 {
        return Err(FitError::TooFewPoints(points.len()));
    }
    let mut seen = Vec::with_capacity(points.len());
    for &(d, r) in points {
        if !(d > 0.0) {
            return Err(FitError::NonPositive { what: "width", value: d });
        }
        if !(r > 0.0) {
            return Err(FitError::NonPositive { what: "rank", value: r });
        }
        if seen.contains(&d) {
            return Err(FitError::DuplicateWidth(d));
        }
        seen.push(d);
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let beta = sxy / sxx;
    let intercept = my - beta * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - beta * x - intercept).powi(2)).sum();
    let r2_raw = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let stderr = if points.len() > 2 { (sse / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(ScalingFit { beta, intercept, r2: r2_raw.clamp(0.0, 1.0), r2_raw, stderr, n_points: points.len() })
}

/// `Δ₁,₂ = β_soft − β_hard`.
pub fn exponent_asymmetry(soft: &ScalingFit, hard: &ScalingFit) -> f64 {
    soft.beta - hard.beta
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseSummary {
    pub betas: Vec<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub frac_positive: f64,
}

/// Linear-interpolation quantile of sorted data (`h = (n−1)q`).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn layerwise_summary(betas: &[f64]) -> Result<LayerwiseSummary> {
    if betas.is_empty() {
        return Err(FitError::Empty);
    }
    let mut s = betas.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let frac_positive = betas.iter().filter(|&&b| b > 0.0).count() as f64 / betas.len() as f64;
    Ok(LayerwiseSummary { betas: betas.to_vec(), median, q1, q3, iqr: q3 - q1, frac_positive })
}

/// Rank metric whose width scaling is fitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    HardPre,
    SoftPre,
    HardPost,
    SoftPost,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::HardPre, Metric::SoftPre, Metric::HardPost, Metric::SoftPost];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::HardPre => "hard_pre",
            Self::SoftPre => "soft_pre",
            Self::HardPost => "hard_post",
            Self::SoftPost => "soft_post",
        }
    }

    /// The soft counterpart of a hard metric at the same probe point.
    pub fn soft_partner(self) -> Option<Metric> {
        match self {
            Self::HardPre => Some(Self::SoftPre),
            Self::HardPost => Some(Self::SoftPost),
            _ => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Metric::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

/// Regime label including the unstratified aggregate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum RegimeLabel {
    All,
    Regime(Regime),
}

impl RegimeLabel {
    pub const ALL: [RegimeLabel; 4] =
        [RegimeLabel::All, RegimeLabel::Regime(Regime::Head), RegimeLabel::Regime(Regime::Mid), RegimeLabel::Regime(Regime::Tail)];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::All => "ALL",
            Self::Regime(r) => r.as_str(),
        }
    }

    pub fn regime(self) -> Option<Regime> {
        match self {
            Self::All => None,
            Self::Regime(r) => Some(r),
        }
    }
}

impl fmt::Display for RegimeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<RegimeLabel> for String {
    fn from(r: RegimeLabel) -> String {
        r.as_str().to_string()
    }
}

impl TryFrom<String> for RegimeLabel {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl FromStr for RegimeLabel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "ALL" {
            Ok(Self::All)
        } else {
            s.parse().map(Self::Regime)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridKey {
    pub optimizer: String,
    pub architecture: String,
    pub regime: RegimeLabel,
    pub metric: Metric,
}

impl GridKey {
    pub fn new(optimizer: &str, architecture: &str, regime: RegimeLabel, metric: Metric) -> Self {
        Self { optimizer: optimizer.to_string(), architecture: architecture.to_string(), regime, metric }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub beta: f64,
    pub r2: f64,
    pub stderr: f64,
}

/// Fitted exponents keyed by (optimizer, architecture, regime, metric).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitGrid {
    cells: BTreeMap<GridKey, GridCell>,
}

pub const BASELINE_OPTIMIZER: &str = "adamw";
const CSV_HEADER: &str = "optimizer,architecture,regime,metric,beta,r2,stderr";

impl FitGrid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: GridKey, cell: GridCell) {
        self.cells.insert(key, cell);
    }

    pub fn get(&self, key: &GridKey) -> Option<&GridCell> {
        self.cells.get(key)
    }

    pub fn beta(&self, optimizer: &str, architecture: &str, regime: RegimeLabel, metric: Metric) -> Option<f64> {
        self.get(&GridKey::new(optimizer, architecture, regime, metric)).map(|c| c.beta)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GridKey, &GridCell)> {
        self.cells.iter()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn optimizers(&self) -> BTreeSet<String> {
        self.cells.keys().map(|k| k.optimizer.clone()).collect()
    }

    pub fn architectures(&self) -> BTreeSet<String> {
        self.cells.keys().map(|k| k.architecture.clone()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (k, c) in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{:.17e},{:.17e},{:.17e}\n",
                k.optimizer, k.architecture, k.regime, k.metric, c.beta, c.r2, c.stderr
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut grid = Self::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: String| FitError::BadCsv { line: i + 1, msg };
            if i == 0 {
                if line.trim() != CSV_HEADER {
                    return Err(bad(format!("expected header {CSV_HEADER:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            let key = GridKey {
                optimizer: f[0].to_string(),
                architecture: f[1].to_string(),
                regime: f[2].parse().map_err(bad)?,
                metric: f[3].parse().map_err(bad)?,
            };
            grid.insert(key, GridCell { beta: num(f[4])?, r2: num(f[5])?, stderr: num(f[6])? });
        }
        Ok(grid)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

/// Optimizer gain over AdamW within one architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerGain {
    pub architecture: String,
    pub regime: RegimeLabel,
    pub metric: Metric,
    pub baseline_beta: f64,
    /// `max_o β_o − β_AdamW`, maximized over every optimizer including AdamW.
    pub delta_opt: f64,
    pub best_optimizer: String,
}

/// Shift of one optimizer's exponent between two architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureShift {
    pub optimizer: String,
    pub regime: RegimeLabel,
    pub metric: Metric,
    /// `β(variant) − β(reference)`.
    pub delta_arch: f64,
    pub a_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub regime: RegimeLabel,
    pub metric: Metric,
    /// `Δβ_opt*(variant) − Δβ_opt*(reference)`.
    pub i_star: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftHardGap {
    pub optimizer: String,
    pub architecture: String,
    pub regime: RegimeLabel,
    pub probe: String,
    pub delta_12: f64,
}

/// A cell that could not be computed because an input fit was absent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingCell {
    pub statistic: String,
    pub cell: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EffectSizes {
    pub gains: Vec<OptimizerGain>,
    pub shifts: Vec<ArchitectureShift>,
    pub interactions: Vec<Interaction>,
    pub gaps: Vec<SoftHardGap>,
    pub missing: Vec<MissingCell>,
}

/// Names the reference and variant architecture for shift statistics.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitecturePair {
    pub reference: String,
    pub variant: String,
}

/// Computes every effect statistic the grid supports.
///
/// Each (architecture, regime, metric) slice that holds any fit must hold
/// the AdamW baseline. Shifts and interactions need `pair`; cells whose
/// inputs are absent are listed in `missing` rather than imputed.
pub fn effect_sizes(grid: &FitGrid, pair: Option<&ArchitecturePair>) -> Result<EffectSizes> {
    let mut out = EffectSizes::default();
    let optimizers = grid.optimizers();
    let architectures = grid.architectures();

    let mut gain_of: BTreeMap<(String, RegimeLabel, Metric), f64> = BTreeMap::new();
    for arch in &architectures {
        for regime in RegimeLabel::ALL {
            for metric in Metric::ALL {
                let present: Vec<(&String, f64)> =
                    optimizers.iter().filter_map(|o| grid.beta(o, arch, regime, metric).map(|b| (o, b))).collect();
                if present.is_empty() {
                    continue;
                }
                let base = grid
                    .beta(BASELINE_OPTIMIZER, arch, regime, metric)
                    .ok_or_else(|| FitError::MissingBaseline(format!("{arch}/{regime}/{metric}")))?;
                let (best, best_beta) = present
                    .iter()
                    .fold((present[0].0, present[0].1), |acc, &(o, b)| if b > acc.1 { (o, b) } else { acc });
                let delta_opt = best_beta - base;
                gain_of.insert((arch.clone(), regime, metric), delta_opt);
                out.gains.push(OptimizerGain {
                    architecture: arch.clone(),
                    regime,
                    metric,
                    baseline_beta: base,
                    delta_opt,
                    best_optimizer: best.clone(),
                });
            }
        }
    }

    for opt in &optimizers {
        for arch in &architectures {
            for regime in RegimeLabel::ALL {
                for (hard, probe) in [(Metric::HardPre, "pre"), (Metric::HardPost, "post")] {
                    let soft = hard.soft_partner().expect("hard metric");
                    if let (Some(s), Some(h)) = (grid.beta(opt, arch, regime, soft), grid.beta(opt, arch, regime, hard)) {
                        out.gaps.push(SoftHardGap {
                            optimizer: opt.clone(),
                            architecture: arch.clone(),
                            regime,
                            probe: probe.to_string(),
                            delta_12: s - h,
                        });
                    }
                }
            }
        }
    }

    if let Some(pair) = pair {
        for regime in RegimeLabel::ALL {
            for metric in Metric::ALL {
                for opt in &optimizers {
                    let r = grid.beta(opt, &pair.reference, regime, metric);
                    let v = grid.beta(opt, &pair.variant, regime, metric);
                    match (r, v) {
                        (Some(r), Some(v)) => out.shifts.push(ArchitectureShift {
                            optimizer: opt.clone(),
                            regime,
                            metric,
                            delta_arch: v - r,
                            a_rank: (v - r).abs(),
                        }),
                        (None, None) => {}
                        _ => out.missing.push(MissingCell {
                            statistic: "delta_arch".into(),
                            cell: format!("{opt}/{regime}/{metric}"),
                        }),
                    }
                }
                let r = gain_of.get(&(pair.reference.clone(), regime, metric));
                let v = gain_of.get(&(pair.variant.clone(), regime, metric));
                match (r, v) {
                    (Some(r), Some(v)) => out.interactions.push(Interaction { regime, metric, i_star: v - r }),
                    (None, None) => {}
                    _ => out.missing.push(MissingCell { statistic: "i_star".into(), cell: format!("{regime}/{metric}") }),
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_sqrt_laws() {
        let f = fit_power_law(&[(1.0, 1.0), (2.0, 2.0), (4.0, 4.0)]).unwrap();
        assert!((f.beta - 1.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&d: &f64| (d, 3.0 * d.sqrt())).collect();
        let f = fit_power_law(&pts).unwrap();
        assert!((f.beta - 0.5).abs() < 1e-9);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-9);
        assert!(f.stderr < 1e-9);
    }

    #[test]
    fn two_points_are_exact() {
        let f = fit_power_law(&[(2.0, 5.0), (6.0, 7.0)]).unwrap();
        assert!((f.beta - (7f64.ln() - 5f64.ln()) / (6f64.ln() - 2f64.ln())).abs() < 1e-14);
        assert_eq!(f.r2, 1.0);
        assert_eq!(f.n_points, 2);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit_power_law(&[(1.0, 1.0)]), Err(FitError::TooFewPoints(1))));
        assert!(matches!(fit_power_law(&[(0.0, 1.0), (1.0, 1.0)]), Err(FitError::NonPositive { .. })));
        assert!(matches!(fit_power_law(&[(1.0, -1.0), (2.0, 1.0)]), Err(FitError::NonPositive { .. })));
        assert!(matches!(fit_power_law(&[(2.0, 1.0), (2.0, 3.0)]), Err(FitError::DuplicateWidth(_))));
    }

    #[test]
    fn bad_fit_clamps_r2() {
        let f = fit_power_law(&[(1.0, 1.0), (2.0, 3.0), (4.0, 1.0), (8.0, 3.0)]).unwrap();
        assert!(f.r2 >= 0.0 && f.r2 <= 1.0);
        assert!(f.is_directional(DEFAULT_RELIABILITY_FLOOR));
    }

    #[test]
    fn asymmetry_values() {
        let fit = |beta| ScalingFit { beta, intercept: 0.0, r2: 1.0, r2_raw: 1.0, stderr: 0.0, n_points: 4 };
        assert!((exponent_asymmetry(&fit(0.88), &fit(1.02)) + 0.14).abs() < 1e-12);
        assert_eq!(exponent_asymmetry(&fit(0.4), &fit(0.4)), 0.0);
    }

    #[test]
    fn layerwise() {
        let s = layerwise_summary(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.median, s.iqr, s.frac_positive), (1.0, 0.0, 1.0));
        let s = layerwise_summary(&[-1.0, 1.0]).unwrap();
        assert_eq!((s.median, s.frac_positive), (0.0, 0.5));
        let s = layerwise_summary(&[0.0, 4.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3, s.frac_positive), (1.0, 2.0, 3.0, 0.8));
        assert!(matches!(layerwise_summary(&[]), Err(FitError::Empty)));
    }

    fn put(g: &mut FitGrid, o: &str, a: &str, r: RegimeLabel, m: Metric, beta: f64) {
        g.insert(GridKey::new(o, a, r, m), GridCell { beta, r2: 0.9, stderr: 0.01 });
    }

    #[test]
    fn optimizer_gain_and_interaction() {
        let mid = RegimeLabel::Regime(Regime::Mid);
        let mut g = FitGrid::new();
        put(&mut g, "adamw", "12h", mid, Metric::HardPre, 0.242);
        put(&mut g, "normuon", "12h", mid, Metric::HardPre, 0.945);
        put(&mut g, "muon", "12h", mid, Metric::HardPre, 0.8);
        let e = effect_sizes(&g, None).unwrap();
        assert_eq!(e.gains.len(), 1);
        assert!((e.gains[0].delta_opt - 0.703).abs() < 1e-12);
        assert_eq!(e.gains[0].best_optimizer, "normuon");

        put(&mut g, "adamw", "6h", mid, Metric::HardPre, 0.242);
        put(&mut g, "normuon", "6h", mid, Metric::HardPre, 0.945);
        put(&mut g, "muon", "6h", mid, Metric::HardPre, 0.8);
        let pair = ArchitecturePair { reference: "12h".into(), variant: "6h".into() };
        let e = effect_sizes(&g, Some(&pair)).unwrap();
        assert!(e.shifts.iter().all(|s| s.a_rank == 0.0 && s.delta_arch == 0.0));
        assert_eq!(e.interactions.len(), 1);
        assert_eq!(e.interactions[0].i_star, 0.0);
        assert!(e.missing.is_empty());
    }

    #[test]
    fn missing_baseline_and_cells() {
        let head = RegimeLabel::Regime(Regime::Head);
        let mut g = FitGrid::new();
        put(&mut g, "muon", "a", head, Metric::SoftPost, 0.5);
        let err = effect_sizes(&g, None).unwrap_err();
        assert!(err.to_string().contains("a/HEAD/soft_post"));

        let mut g = FitGrid::new();
        put(&mut g, "adamw", "a", head, Metric::SoftPost, 0.5);
        put(&mut g, "adamw", "b", head, Metric::SoftPost, 0.7);
        put(&mut g, "muon", "a", head, Metric::SoftPost, 0.9);
        let pair = ArchitecturePair { reference: "a".into(), variant: "b".into() };
        let e = effect_sizes(&g, Some(&pair)).unwrap();
        assert_eq!(e.missing, vec![MissingCell { statistic: "delta_arch".into(), cell: "muon/HEAD/soft_post".into() }]);
        assert!((e.shifts[0].delta_arch - 0.2).abs() < 1e-12);
        // gain(a) = 0.4, gain(b) = 0
        assert!((e.interactions[0].i_star + 0.4).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let mut g = FitGrid::new();
        put(&mut g, "adamw", "base", RegimeLabel::All, Metric::HardPre, 0.1 + 0.2);
        put(&mut g, "dion_1/16", "base", RegimeLabel::Regime(Regime::Tail), Metric::SoftPost, -0.5);
        let text = g.to_csv();
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(FitGrid::from_csv(&text).unwrap(), g);
        assert!(FitGrid::from_csv("bogus\n").is_err());
        assert!(FitGrid::from_csv(&format!("{CSV_HEADER}\na,b,ALL,hard_pre,x,1,1\n")).is_err());
    }
}
