//! Streaming FFN probes.
//!
//! Covariances are accumulated as (count, mean, centered second-moment
//! matrix) and combined with the pairwise update of Chan et al., so no
//! activations are ever materialized beyond one batch.

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::data::{FrequencyStrata, Regime};
use crate::linalg::{gemm, Matrix, Real, Strided};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbePoint {
    /// `z = W_in·x`
    Pre,
    /// `a = φ(z)`
    Post,
}

impl ProbePoint {
    pub const ALL: [ProbePoint; 2] = [ProbePoint::Pre, ProbePoint::Post];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pre => "pre",
            Self::Post => "post",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

const COV_BLOCK: usize = 64;

/// Running count, mean and centered sum of outer products.
#[derive(Clone, Debug, PartialEq)]
pub struct CovAccumulator {
    dim: usize,
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl CovAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { dim, n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim * dim] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn push(&mut self, sample: &[f64]) {
        self.push_batch(sample);
    }

    /// Folds in `rows.len() / dim` samples stored row-major.
    pub fn push_batch(&mut self, rows: &[f64]) {
        assert_eq!(rows.len() % self.dim.max(1), 0, "batch is not a whole number of rows");
        let k = rows.len() / self.dim.max(1);
        if k == 0 {
            return;
        }
        let dim = self.dim;
        let mut mean = vec![0.0; dim];
        for row in rows.chunks(dim) {
            mean.iter_mut().zip(row).for_each(|(m, &x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= k as f64);
        let centered: Vec<f64> = rows.chunks(dim).flat_map(|row| row.iter().zip(&mean).map(|(&x, &m)| x - m)).collect();
        // Upper block triangle only, then mirrored: exact symmetry at about
        // half the cost of the full product.
        let mut m2 = vec![0.0; dim * dim];
        for bi in (0..dim).step_by(COV_BLOCK) {
            let hi = (bi + COV_BLOCK).min(dim);
            gemm(
                hi - bi,
                k,
                dim - bi,
                1.0,
                Strided::transposed(&centered[bi..], dim),
                Strided::rows(&centered[bi..], dim),
                0.0,
                &mut m2[bi * dim + bi..],
                dim,
            );
        }
        for i in 0..dim {
            for j in 0..i {
                m2[i * dim + j] = m2[j * dim + i];
            }
        }
        self.merge(&CovAccumulator { dim, n: k as u64, mean, m2 });
    }

    pub fn merge(&mut self, other: &CovAccumulator) {
        assert_eq!(self.dim, other.dim, "accumulator dimension mismatch");
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let w = na * nb / n;
        let dim = self.dim;
        for i in 0..dim {
            for j in 0..dim {
                self.m2[i * dim + j] += other.m2[i * dim + j] + delta[i] * delta[j] * w;
            }
        }
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d * nb / n;
        }
        self.n += other.n;
    }

    /// Unbiased covariance `M2/(n−1)`; `None` when fewer than two samples.
    pub fn covariance(&self) -> Option<Matrix> {
        if self.n < 2 {
            return None;
        }
        let s = 1.0 / (self.n as f64 - 1.0);
        Matrix::new(self.dim, self.dim, self.m2.iter().map(|x| x * s).collect()).ok()
    }
}

/// Per-position, per-unit count, mean and within-position sum of squares.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionAccumulator {
    positions: usize,
    dim: usize,
    count: Vec<u64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl PositionAccumulator {
    pub fn new(positions: usize, dim: usize) -> Self {
        Self { positions, dim, count: vec![0; positions], mean: vec![0.0; positions * dim], m2: vec![0.0; positions * dim] }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self, position: usize) -> u64 {
        self.count[position]
    }

    pub fn position_mean(&self, position: usize) -> &[f64] {
        &self.mean[position * self.dim..(position + 1) * self.dim]
    }

    /// Within-position sum of squared deviations, per unit.
    pub fn position_m2(&self, position: usize) -> &[f64] {
        &self.m2[position * self.dim..(position + 1) * self.dim]
    }

    pub fn push(&mut self, position: usize, sample: &[f64]) {
        let d = self.dim;
        self.count[position] += 1;
        let n = self.count[position] as f64;
        let mean = &mut self.mean[position * d..(position + 1) * d];
        let m2 = &mut self.m2[position * d..(position + 1) * d];
        for ((m, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(sample) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    pub fn merge(&mut self, other: &PositionAccumulator) {
        assert_eq!((self.positions, self.dim), (other.positions, other.dim));
        let d = self.dim;
        for t in 0..self.positions {
            let (na, nb) = (self.count[t] as f64, other.count[t] as f64);
            if nb == 0.0 {
                continue;
            }
            let n = na + nb;
            for j in 0..d {
                let i = t * d + j;
                let delta = other.mean[i] - self.mean[i];
                self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
                self.mean[i] += delta * nb / n;
            }
            self.count[t] += other.count[t];
        }
    }
}

/// FFN probe accumulators for every layer, probe point and frequency group.
#[derive(Clone, Debug)]
pub struct ProbeCapture {
    n_layers: usize,
    dim: usize,
    groups: usize,
    regime_of: Option<Vec<Regime>>,
    cov: Vec<CovAccumulator>,
    pos: Option<Vec<PositionAccumulator>>,
}

impl ProbeCapture {
    /// With `strata`, samples are grouped by the regime of the token at the
    /// probed position; without, everything lands in one group.
    /// `track_positions` additionally keeps per-position moments for the
    /// symmetry ratio.
    pub fn new(cfg: &ModelConfig, strata: Option<&FrequencyStrata>, track_positions: bool) -> Self {
        let groups = if strata.is_some() { Regime::ALL.len() } else { 1 };
        let dim = cfg.ffn_dim();
        let slots = cfg.n_layers * 2 * groups;
        Self {
            n_layers: cfg.n_layers,
            dim,
            groups,
            regime_of: strata.map(|s| (0..cfg.vocab_size).map(|v| s.regime(v as u32)).collect()),
            cov: (0..slots).map(|_| CovAccumulator::new(dim)).collect(),
            pos: track_positions.then(|| (0..slots).map(|_| PositionAccumulator::new(cfg.seq_len, dim)).collect()),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_stratified(&self) -> bool {
        self.groups > 1
    }

    fn slot(&self, layer: usize, probe: ProbePoint, group: usize) -> usize {
        (layer * 2 + probe.index()) * self.groups + group
    }

    fn group_of(&self, token: u32) -> usize {
        match &self.regime_of {
            Some(r) => r[token as usize].index(),
            None => 0,
        }
    }

    pub(crate) fn observe<T: Real>(&mut self, layer: usize, tokens: &[u32], seq: usize, z: &[T], a: &[T]) {
        let d = self.dim;
        for (probe, values) in [(ProbePoint::Pre, z), (ProbePoint::Post, a)] {
            let mut rows: Vec<Vec<f64>> = vec![Vec::new(); self.groups];
            for (r, &tok) in tokens.iter().enumerate() {
                let g = self.group_of(tok);
                let sample = &values[r * d..(r + 1) * d];
                let start = rows[g].len();
                rows[g].extend(sample.iter().map(|v| v.as_f64()));
                if self.pos.is_some() {
                    let slot = self.slot(layer, probe, g);
                    let pos = self.pos.as_mut().expect("checked");
                    let buf = &rows[g][start..];
                    pos[slot].push(r % seq, buf);
                }
            }
            for (g, buf) in rows.iter().enumerate() {
                let slot = self.slot(layer, probe, g);
                self.cov[slot].push_batch(buf);
            }
        }
    }

    /// Accumulator for one regime, or all regimes merged when `regime` is
    /// `None`.
    pub fn accumulator(&self, layer: usize, probe: ProbePoint, regime: Option<Regime>) -> CovAccumulator {
        match (regime, self.groups) {
            (Some(r), g) if g > 1 => self.cov[self.slot(layer, probe, r.index())].clone(),
            (Some(_), _) => CovAccumulator::new(self.dim),
            (None, _) => {
                let mut acc = CovAccumulator::new(self.dim);
                for g in 0..self.groups {
                    acc.merge(&self.cov[self.slot(layer, probe, g)]);
                }
                acc
            }
        }
    }

    pub fn positions(&self, layer: usize, probe: ProbePoint, regime: Option<Regime>) -> Option<PositionAccumulator> {
        let pos = self.pos.as_ref()?;
        let positions = pos[0].positions();
        Some(match (regime, self.groups) {
            (Some(r), g) if g > 1 => pos[self.slot(layer, probe, r.index())].clone(),
            (Some(_), _) => PositionAccumulator::new(positions, self.dim),
            (None, _) => {
                let mut acc = PositionAccumulator::new(positions, self.dim);
                for g in 0..self.groups {
                    acc.merge(&pos[self.slot(layer, probe, g)]);
                }
                acc
            }
        })
    }

    /// Samples seen at `layer` (either probe point), across all regimes.
    pub fn count(&self, layer: usize) -> u64 {
        (0..self.groups).map(|g| self.cov[self.slot(layer, ProbePoint::Pre, g)].count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    fn batch_covariance(rows: &[Vec<f64>]) -> Matrix {
        let n = rows.len() as f64;
        let d = rows[0].len();
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        Matrix::from_fn(d, d, |i, j| rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn streaming_matches_batch_covariance() {
        let mut rng = Rng::new(1);
        let rows: Vec<Vec<f64>> = (0..1000).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let mut acc = CovAccumulator::new(4);
        for chunk in rows.chunks(37) {
            let flat: Vec<f64> = chunk.iter().flatten().copied().collect();
            acc.push_batch(&flat);
        }
        let oracle = batch_covariance(&rows);
        let c = acc.covariance().unwrap();
        for (a, b) in c.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fewer_than_two_samples() {
        let mut acc = CovAccumulator::new(2);
        assert!(acc.covariance().is_none());
        acc.push(&[1.0, 2.0]);
        assert!(acc.covariance().is_none());
    }

    #[test]
    fn position_merge_equals_sequential() {
        let mut rng = Rng::new(2);
        let mut whole = PositionAccumulator::new(3, 2);
        let mut a = PositionAccumulator::new(3, 2);
        let mut b = PositionAccumulator::new(3, 2);
        for i in 0..30 {
            let x = [rng.normal(), rng.normal()];
            whole.push(i % 3, &x);
            if i < 13 { a.push(i % 3, &x) } else { b.push(i % 3, &x) }
        }
        a.merge(&b);
        for t in 0..3 {
            assert_eq!(a.count(t), whole.count(t));
            for j in 0..2 {
                assert!((a.position_mean(t)[j] - whole.position_mean(t)[j]).abs() < 1e-12);
                assert!((a.position_m2(t)[j] - whole.position_m2(t)[j]).abs() < 1e-12);
            }
        }
    }
}
