//! Spectrum-derived metrics: trace-normalized eigenspectra, the Rényi rank
//! family, soft/hard ranks, reinjection ratios and the positional symmetry
//! ratio.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Regime;
use crate::linalg::{symmetric_eigenvalues, LinalgError, Matrix};
use crate::model::{CovAccumulator, PositionAccumulator, ProbePoint};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("covariance needs at least 2 samples, got {0}")]
    TooFewSamples(u64),
    #[error("Rényi order must be positive, got {0}")]
    BadAlpha(f64),
    #[error("spectrum is degenerate (zero trace)")]
    Degenerate,
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("every unit is constant; position share of variance is undefined")]
    AllConstant,
    #[error("symmetry ratio needs at least 2 positions with at least 2 samples each")]
    TooFewPositions,
    #[error("invalid eigenvalues: {0}")]
    BadEigenvalues(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

/// Rényi orders reported in every profile.
pub const ALPHAS: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 3.0, 5.0];

/// Relative floor under which eigenvalues are treated as zero.
pub const EIG_FLOOR: f64 = 1e-12;

/// Trace-normalized eigenvalue distribution, sorted descending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenSpectrum {
    p: Vec<f64>,
    degenerate: bool,
}

impl EigenSpectrum {
    /// Normalizes raw eigenvalues: negatives clamp to 0, values below
    /// `EIG_FLOOR·λmax` become 0, and the rest are divided by their sum.
    pub fn from_eigenvalues(mut eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(SpectralError::BadEigenvalues("empty".into()));
        }
        if let Some(bad) = eigenvalues.iter().find(|v| !v.is_finite()) {
            return Err(SpectralError::BadEigenvalues(format!("non-finite value {bad}")));
        }
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let max = eigenvalues[0].max(0.0);
        for v in &mut eigenvalues {
            if *v < 0.0 || *v < EIG_FLOOR * max {
                *v = 0.0;
            }
        }
        let trace: f64 = eigenvalues.iter().sum();
        if trace <= 0.0 {
            eigenvalues.iter_mut().for_each(|v| *v = 0.0);
            return Ok(Self { p: eigenvalues, degenerate: true });
        }
        eigenvalues.iter_mut().for_each(|v| *v /= trace);
        Ok(Self { p: eigenvalues, degenerate: false })
    }

    pub fn from_covariance(c: &Matrix) -> Result<Self> {
        Self::from_eigenvalues(symmetric_eigenvalues(c)?)
    }

    pub fn from_accumulator(acc: &CovAccumulator) -> Result<Self> {
        let c = acc.covariance().ok_or(SpectralError::TooFewSamples(acc.count()))?;
        Self::from_covariance(&c)
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    fn check(&self) -> Result<()> {
        if self.degenerate {
            Err(SpectralError::Degenerate)
        } else {
            Ok(())
        }
    }
}

/// `exp(H_α(p))`, with the Shannon limit for `|α − 1| < 1e-9`.
pub fn renyi_rank(spec: &EigenSpectrum, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(SpectralError::BadAlpha(alpha));
    }
    spec.check()?;
    // A flat spectrum over k directions has rank exactly k for every α.
    let support = spec.p.iter().take_while(|&&x| x > 0.0).count();
    if spec.p[0] == spec.p[support - 1] {
        return Ok(support as f64);
    }
    let nz = spec.p.iter().copied().filter(|&x| x > 0.0);
    let h = if (alpha - 1.0).abs() < 1e-9 {
        -nz.map(|x| x * x.ln()).sum::<f64>()
    } else {
        nz.map(|x| x.powf(alpha)).sum::<f64>().ln() / (1.0 - alpha)
    };
    // Rounding can push the rank a hair outside [1, D].
    Ok(h.exp().clamp(1.0, spec.dim() as f64))
}

/// Soft rank `R₁`, hard rank `R₂` and `A₁,₂ = ln R₁ − ln R₂`.
pub fn soft_hard_ranks(spec: &EigenSpectrum) -> Result<(f64, f64, f64)> {
    let soft = renyi_rank(spec, 1.0)?;
    let hard = renyi_rank(spec, 2.0)?;
    Ok((soft, hard, (soft.ln() - hard.ln()).max(0.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    /// `R_α` for each entry of [`ALPHAS`].
    pub renyi: [f64; 6],
    pub soft: f64,
    pub hard: f64,
    pub asymmetry: f64,
}

impl RankProfile {
    pub fn from_spectrum(spec: &EigenSpectrum) -> Result<Self> {
        let mut renyi = [0.0; 6];
        for (r, &a) in renyi.iter_mut().zip(&ALPHAS) {
            *r = renyi_rank(spec, a)?;
        }
        let (soft, hard, asymmetry) = soft_hard_ranks(spec)?;
        Ok(Self { renyi, soft, hard, asymmetry })
    }

    pub fn renyi_at(&self, alpha: f64) -> Option<f64> {
        ALPHAS.iter().position(|&a| a == alpha).map(|i| self.renyi[i])
    }
}

/// `ρ = r_post / r_pre`.
pub fn reinjection_ratio(r_pre: f64, r_post: f64) -> Result<f64> {
    if !(r_pre > 0.0) {
        return Err(SpectralError::NonPositive { what: "pre-activation rank", value: r_pre });
    }
    Ok(r_post / r_pre)
}

/// Mean between-position share of variance over non-constant units.
pub fn position_eta_squared(acc: &PositionAccumulator) -> Result<f64> {
    let live: Vec<usize> = (0..acc.positions()).filter(|&t| acc.count(t) >= 1).collect();
    if live.len() < 2 || live.iter().filter(|&&t| acc.count(t) >= 2).count() < 2 {
        return Err(SpectralError::TooFewPositions);
    }
    let n: f64 = live.iter().map(|&t| acc.count(t) as f64).sum();
    let mut sum = 0.0;
    let mut units = 0usize;
    for j in 0..acc.dim() {
        let grand = live.iter().map(|&t| acc.count(t) as f64 * acc.position_mean(t)[j]).sum::<f64>() / n;
        let mut between = 0.0;
        let mut within = 0.0;
        for &t in &live {
            let d = acc.position_mean(t)[j] - grand;
            between += acc.count(t) as f64 * d * d;
            within += acc.position_m2(t)[j];
        }
        let total = between + within;
        if total > 0.0 {
            sum += between / total;
            units += 1;
        }
    }
    if units == 0 {
        return Err(SpectralError::AllConstant);
    }
    Ok(sum / units as f64)
}

/// `SR = 1 − η²`, in [0, 1]; 1 means the state ignores position.
pub fn symmetry_ratio(acc: &PositionAccumulator) -> Result<f64> {
    Ok((1.0 - position_eta_squared(acc)?).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryPair {
    pub sr_pre: f64,
    pub sr_post: f64,
    /// `SR_post − SR_pre`; negative when the nonlinearity adds position dependence.
    pub delta: f64,
}

impl SymmetryPair {
    pub fn new(sr_pre: f64, sr_post: f64) -> Self {
        Self { sr_pre, sr_post, delta: sr_post - sr_pre }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryStats {
    pub all: SymmetryPair,
    /// Indexed by [`Regime::index`]; `None` when the regime had too few samples.
    pub regimes: [Option<SymmetryPair>; 3],
    /// `ΔSR_HEAD − ΔSR_TAIL`.
    pub head_tail_bias: Option<f64>,
}

impl SymmetryStats {
    pub fn new(all: SymmetryPair, regimes: [Option<SymmetryPair>; 3]) -> Self {
        let head_tail_bias = match (regimes[Regime::Head.index()], regimes[Regime::Tail.index()]) {
            (Some(h), Some(t)) => Some(h.delta - t.delta),
            _ => None,
        };
        Self { all, regimes, head_tail_bias }
    }
}

/// Writes the header `layer probe regime n D` followed by one normalized
/// eigenvalue per line.
pub fn write_spectrum_dump(
    path: &Path,
    layer: usize,
    probe: ProbePoint,
    regime: Option<Regime>,
    n: u64,
    spec: &EigenSpectrum,
) -> Result<()> {
    let mut out = String::with_capacity(24 * (spec.dim() + 2));
    let regime = regime.map_or("ALL", Regime::as_str);
    writeln!(out, "layer probe regime n D").unwrap();
    writeln!(out, "{layer} {} {regime} {n} {}", probe.as_str(), spec.dim()).unwrap();
    for v in spec.p() {
        writeln!(out, "{v:.17e}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}
