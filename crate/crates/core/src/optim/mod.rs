//! AdamW, Muon, NorMuon and Dion, plus the Lion path for non-matrix
//! parameters, the parameter router and the learning-rate schedule.
//!
//! Every step function takes the already-scheduled learning rate `lr_t`
//! and applies decoupled weight decay `lr_t·wd·θ` computed from the
//! pre-step parameter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{matmul, matmul_nt, matmul_tn, reduced_qr, LinalgError, Matrix, Real, Rng};
use crate::model::ParamSpec;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient for {0}")]
    NonFiniteGrad(String),
    #[error("shape mismatch for {name}: param {param:?}, grad {grad:?}")]
    Shape { name: String, param: (usize, usize), grad: (usize, usize) },
    #[error("step {step} exceeds total steps {total}")]
    StepBeyondTotal { step: usize, total: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    Muon,
    NorMuon,
    Dion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// AdamW moments; `betas.1` also drives NorMuon's row second moment.
    pub betas: (f64, f64),
    pub momentum: f64,
    pub dion_rank_fraction: f64,
    pub ns_iterations: usize,
    pub epsilon: f64,
    /// Base learning rate of the Lion path (scheduled like `lr`).
    pub scalar_lr: f64,
    pub lion_betas: (f64, f64),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::for_kind(OptimizerKind::AdamW)
    }
}

impl OptimizerConfig {
    pub fn for_kind(kind: OptimizerKind) -> Self {
        let lr = match kind {
            OptimizerKind::AdamW => 3e-3,
            _ => 0.02,
        };
        Self {
            kind,
            lr,
            weight_decay: 0.01,
            betas: (0.9, 0.95),
            momentum: 0.95,
            dion_rank_fraction: 0.5,
            ns_iterations: 5,
            epsilon: 1e-8,
            scalar_lr: 1e-3,
            lion_betas: (0.9, 0.99),
        }
    }

    pub fn dion(rank_fraction: f64) -> Self {
        Self { dion_rank_fraction: rank_fraction, ..Self::for_kind(OptimizerKind::Dion) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OptimError::InvalidConfig(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.scalar_lr > 0.0) {
            return bad(format!("scalar_lr must be positive, got {}", self.scalar_lr));
        }
        if !self.weight_decay.is_finite() || !(self.epsilon > 0.0) {
            return bad("weight_decay must be finite and epsilon positive".into());
        }
        for (name, b) in [
            ("betas.0", self.betas.0),
            ("betas.1", self.betas.1),
            ("momentum", self.momentum),
            ("lion_betas.0", self.lion_betas.0),
            ("lion_betas.1", self.lion_betas.1),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.kind == OptimizerKind::Dion && !(self.dion_rank_fraction > 0.0 && self.dion_rank_fraction <= 1.0) {
            return bad(format!("dion_rank_fraction must lie in (0, 1], got {}", self.dion_rank_fraction));
        }
        Ok(())
    }

    /// Short identifier used in file names and fit grids, e.g. `dion_1_16`.
    pub fn label(&self) -> String {
        match self.kind {
            OptimizerKind::AdamW => "adamw".into(),
            OptimizerKind::Muon => "muon".into(),
            OptimizerKind::NorMuon => "normuon".into(),
            OptimizerKind::Dion => {
                let inv = 1.0 / self.dion_rank_fraction;
                if (inv - inv.round()).abs() < 1e-9 {
                    format!("dion_1_{}", inv.round() as u64)
                } else {
                    format!("dion_{}", self.dion_rank_fraction)
                }
            }
        }
    }
}

/// Constant `base_lr` up to 80% of training, then linear decay to zero.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(OptimError::StepBeyondTotal { step, total: total_steps });
    }
    let (s, t) = (step as f64, total_steps as f64);
    let knee = 0.8 * t;
    if s <= knee {
        Ok(base_lr)
    } else {
        Ok(base_lr * ((t - s) / (t - knee)).max(0.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    AdamW,
    /// Muon, NorMuon or Dion, per the config kind.
    Matrix,
    Lion,
}

/// AdamW takes everything; otherwise hidden projections go to the matrix
/// optimizer and embeddings, norm gains and the LM head to Lion.
pub fn route_parameters(specs: &[ParamSpec], cfg: &OptimizerConfig) -> Vec<Route> {
    specs
        .iter()
        .map(|s| match cfg.kind {
            OptimizerKind::AdamW => Route::AdamW,
            _ if s.role.is_hidden_matrix() => Route::Matrix,
            _ => Route::Lion,
        })
        .collect()
}

fn check<T: Real>(name: &str, param: &Matrix<T>, grad: &Matrix<T>) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(OptimError::Shape { name: name.into(), param: param.shape(), grad: grad.shape() });
    }
    if !grad.is_finite() {
        return Err(OptimError::NonFiniteGrad(name.into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AdamState<T: Real> {
    pub m: Matrix<T>,
    pub v: Matrix<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { m: Matrix::zeros(rows, cols), v: Matrix::zeros(rows, cols), t: 0 }
    }
}

pub fn adamw_step<T: Real>(
    param: &mut Matrix<T>,
    grad: &Matrix<T>,
    state: &mut AdamState<T>,
    cfg: &OptimizerConfig,
    lr_t: f64,
) -> Result<()> {
    check("adamw", param, grad)?;
    state.t += 1;
    let (b1, b2) = (T::lit(cfg.betas.0), T::lit(cfg.betas.1));
    let c1 = T::lit(1.0 - cfg.betas.0.powi(state.t as i32));
    let c2 = T::lit(1.0 - cfg.betas.1.powi(state.t as i32));
    let (lr, wd, eps) = (T::lit(lr_t), T::lit(cfg.weight_decay), T::lit(cfg.epsilon));
    let one = T::one();
    let it = param.data_mut().iter_mut().zip(grad.data()).zip(state.m.data_mut().iter_mut().zip(state.v.data_mut()));
    for ((p, &g), (m, v)) in it {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LionState<T: Real> {
    pub c: Matrix<T>,
}

impl<T: Real> LionState<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { c: Matrix::zeros(rows, cols) }
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn lion_step<T: Real>(
    param: &mut Matrix<T>,
    grad: &Matrix<T>,
    state: &mut LionState<T>,
    cfg: &OptimizerConfig,
    lr_t: f64,
) -> Result<()> {
    check("lion", param, grad)?;
    let (b1, b2) = (T::lit(cfg.lion_betas.0), T::lit(cfg.lion_betas.1));
    let (lr, wd, one) = (T::lit(lr_t), T::lit(cfg.weight_decay), T::one());
    for ((p, &g), c) in param.data_mut().iter_mut().zip(grad.data()).zip(state.c.data_mut()) {
        let u = sign(b1 * *c + (one - b1) * g);
        *c = b2 * *c + (one - b2) * g;
        *p -= lr * (u + wd * *p);
    }
    Ok(())
}

const NS_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

/// Quintic Newton–Schulz approximation of the orthogonal polar factor
/// `UVᵀ`. A zero matrix maps to zero.
pub fn newton_schulz<T: Real>(m: &Matrix<T>, iters: usize) -> Matrix<T> {
    let norm = m.frobenius_norm();
    if norm == T::zero() {
        return Matrix::zeros(m.rows(), m.cols());
    }
    let tall = m.rows() > m.cols();
    let mut x = if tall { m.transpose() } else { m.clone() };
    x = x.scale(T::one() / (norm + T::lit(1e-7)));
    let (a, b, c) = (T::lit(NS_COEFFS.0), T::lit(NS_COEFFS.1), T::lit(NS_COEFFS.2));
    for _ in 0..iters {
        let g = matmul_nt(&x, &x).expect("square gram");
        let g2 = matmul(&g, &g).expect("square gram");
        let poly = Matrix::from_fn(g.rows(), g.cols(), |i, j| b * g[(i, j)] + c * g2[(i, j)]);
        let px = matmul(&poly, &x).expect("conformable");
        x = Matrix::from_fn(x.rows(), x.cols(), |i, j| a * x[(i, j)] + px[(i, j)]);
    }
    if tall {
        x.transpose()
    } else {
        x
    }
}

/// Spectral learning-rate scale `√max(1, d_out/d_in)` for a `d_out×d_in` weight.
pub fn spectral_scale(rows: usize, cols: usize) -> f64 {
    (rows as f64 / cols as f64).max(1.0).sqrt()
}

fn apply_matrix_update<T: Real>(param: &mut Matrix<T>, dir: &Matrix<T>, cfg: &OptimizerConfig, lr_t: f64) {
    let s = spectral_scale(param.rows(), param.cols());
    let (step, decay) = (T::lit(lr_t * s), T::lit(lr_t * cfg.weight_decay));
    for (p, &o) in param.data_mut().iter_mut().zip(dir.data()) {
        *p -= step * o + decay * *p;
    }
}

fn accumulate_momentum<T: Real>(buf: &mut Matrix<T>, grad: &Matrix<T>, mu: f64) {
    let mu = T::lit(mu);
    for (b, &g) in buf.data_mut().iter_mut().zip(grad.data()) {
        *b = mu * *b + g;
    }
}

#[derive(Clone, Debug)]
pub struct MuonState<T: Real> {
    pub buf: Matrix<T>,
}

impl<T: Real> MuonState<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { buf: Matrix::zeros(rows, cols) }
    }
}

/// Updates the momentum buffer and returns the orthogonalized direction.
pub fn muon_direction<T: Real>(grad: &Matrix<T>, state: &mut MuonState<T>, cfg: &OptimizerConfig) -> Matrix<T> {
    accumulate_momentum(&mut state.buf, grad, cfg.momentum);
    newton_schulz(&state.buf, cfg.ns_iterations)
}

pub fn muon_step<T: Real>(
    param: &mut Matrix<T>,
    grad: &Matrix<T>,
    state: &mut MuonState<T>,
    cfg: &OptimizerConfig,
    lr_t: f64,
) -> Result<()> {
    check("muon", param, grad)?;
    let dir = muon_direction(grad, state, cfg);
    apply_matrix_update(param, &dir, cfg, lr_t);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct NorMuonState<T: Real> {
    pub muon: MuonState<T>,
    /// Per-row second moment of the orthogonalized update.
    pub row_v: Vec<f64>,
    pub t: u64,
}

impl<T: Real> NorMuonState<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { muon: MuonState::new(rows, cols), row_v: vec![0.0; rows], t: 0 }
    }
}

/// Rescales rows of `o` by `1/(√v̂ᵢ + ε)` and restores `‖o‖_F`.
pub fn normuon_normalize<T: Real>(o: &Matrix<T>, row_v: &mut [f64], t: u64, cfg: &OptimizerConfig) -> Matrix<T> {
    let b2 = cfg.betas.1;
    let correction = 1.0 - b2.powi(t as i32);
    let mut out = o.clone();
    for (i, v) in row_v.iter_mut().enumerate() {
        let row = o.row(i);
        let ms = row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>() / row.len() as f64;
        *v = b2 * *v + (1.0 - b2) * ms;
        let scale = T::lit(1.0 / ((*v / correction).sqrt() + cfg.epsilon));
        out.row_mut(i).iter_mut().for_each(|x| *x *= scale);
    }
    let (before, after) = (o.frobenius_norm(), out.frobenius_norm());
    if after > T::zero() {
        out = out.scale(before / after);
    }
    out
}

pub fn normuon_direction<T: Real>(grad: &Matrix<T>, state: &mut NorMuonState<T>, cfg: &OptimizerConfig) -> Matrix<T> {
    let o = muon_direction(grad, &mut state.muon, cfg);
    state.t += 1;
    normuon_normalize(&o, &mut state.row_v, state.t, cfg)
}

pub fn normuon_step<T: Real>(
    param: &mut Matrix<T>,
    grad: &Matrix<T>,
    state: &mut NorMuonState<T>,
    cfg: &OptimizerConfig,
    lr_t: f64,
) -> Result<()> {
    check("normuon", param, grad)?;
    let dir = normuon_direction(grad, state, cfg);
    apply_matrix_update(param, &dir, cfg, lr_t);
    Ok(())
}

/// Dion rank `⌈r·min(m, n)⌉`, at least 1.
pub fn dion_rank(rows: usize, cols: usize, fraction: f64) -> usize {
    let k = (fraction * rows.min(cols) as f64 - 1e-9).ceil() as usize;
    k.clamp(1, rows.min(cols))
}

#[derive(Clone, Debug)]
pub struct DionState<T: Real> {
    pub buf: Matrix<T>,
    /// `n×k` right factor with unit-norm columns, warm-started across steps.
    pub q: Matrix<T>,
}

impl<T: Real> DionState<T> {
    /// Seeds `Q` with random orthonormal columns.
    pub fn new(rows: usize, cols: usize, fraction: f64, rng: &mut Rng) -> Self {
        let k = dion_rank(rows, cols, fraction);
        let g = Matrix::from_fn(cols, k, |_, _| T::lit(rng.normal()));
        let q = reduced_qr(&g).expect("n ≥ k").q;
        Self { buf: Matrix::zeros(rows, cols), q }
    }

    pub fn rank(&self) -> usize {
        self.q.cols()
    }
}

/// One warm-started power iteration with error feedback; returns `P̂·Qᵀ`.
pub fn dion_direction<T: Real>(grad: &Matrix<T>, state: &mut DionState<T>, cfg: &OptimizerConfig) -> Result<Matrix<T>> {
    let mu = cfg.momentum;
    accumulate_momentum(&mut state.buf, grad, mu);
    let p = matmul(&state.buf, &state.q)?;
    let p_hat = reduced_qr(&p)?.q;
    let r = matmul_tn(&state.buf, &p_hat)?;
    let fb = matmul_nt(&p_hat, &r)?;
    let keep = T::lit(1.0 - mu);
    for (b, &x) in state.buf.data_mut().iter_mut().zip(fb.data()) {
        *b -= keep * x;
    }
    let (n, k) = r.shape();
    for j in 0..k {
        let norm = (0..n).map(|i| r[(i, j)] * r[(i, j)]).sum::<T>().sqrt();
        // A zero column keeps its previous direction.
        if norm > T::zero() {
            for i in 0..n {
                state.q[(i, j)] = r[(i, j)] / norm;
            }
        }
    }
    Ok(matmul_nt(&p_hat, &state.q)?)
}

pub fn dion_step<T: Real>(
    param: &mut Matrix<T>,
    grad: &Matrix<T>,
    state: &mut DionState<T>,
    cfg: &OptimizerConfig,
    lr_t: f64,
) -> Result<()> {
    check("dion", param, grad)?;
    let dir = dion_direction(grad, state, cfg)?;
    apply_matrix_update(param, &dir, cfg, lr_t);
    Ok(())
}

#[derive(Clone, Debug)]
pub enum ParamState<T: Real> {
    AdamW(AdamState<T>),
    Lion(LionState<T>),
    Muon(MuonState<T>),
    NorMuon(NorMuonState<T>),
    Dion(DionState<T>),
}

/// Routed optimizer over a full parameter list.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Real = f32> {
    cfg: OptimizerConfig,
    names: Vec<String>,
    routes: Vec<Route>,
    states: Vec<ParamState<T>>,
}

impl<T: Real> Optimizer<T> {
    /// `seed` drives Dion's initial right factors.
    pub fn new(cfg: &OptimizerConfig, specs: &[ParamSpec], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let routes = route_parameters(specs, cfg);
        let mut rng = Rng::with_stream(seed, 7);
        let states = specs
            .iter()
            .zip(&routes)
            .map(|(s, route)| match (route, cfg.kind) {
                (Route::AdamW, _) => ParamState::AdamW(AdamState::new(s.rows, s.cols)),
                (Route::Lion, _) => ParamState::Lion(LionState::new(s.rows, s.cols)),
                (Route::Matrix, OptimizerKind::NorMuon) => ParamState::NorMuon(NorMuonState::new(s.rows, s.cols)),
                (Route::Matrix, OptimizerKind::Dion) => {
                    ParamState::Dion(DionState::new(s.rows, s.cols, cfg.dion_rank_fraction, &mut rng))
                }
                (Route::Matrix, _) => ParamState::Muon(MuonState::new(s.rows, s.cols)),
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), names: specs.iter().map(|s| s.name.clone()).collect(), routes, states })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    pub fn states(&self) -> &[ParamState<T>] {
        &self.states
    }

    /// Applies one update with the schedule evaluated at `step` of `total_steps`.
    pub fn step(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>], step: usize, total_steps: usize) -> Result<()> {
        let factor = lr_schedule(step, total_steps, 1.0)?;
        let (lr, scalar_lr) = (self.cfg.lr * factor, self.cfg.scalar_lr * factor);
        for (i, ((p, g), st)) in params.iter_mut().zip(grads).zip(&mut self.states).enumerate() {
            let named = |e: OptimError| match e {
                OptimError::NonFiniteGrad(_) => OptimError::NonFiniteGrad(self.names[i].clone()),
                OptimError::Shape { param, grad, .. } => OptimError::Shape { name: self.names[i].clone(), param, grad },
                e => e,
            };
            match st {
                ParamState::AdamW(s) => adamw_step(p, g, s, &self.cfg, lr),
                ParamState::Lion(s) => lion_step(p, g, s, &self.cfg, scalar_lr),
                ParamState::Muon(s) => muon_step(p, g, s, &self.cfg, lr),
                ParamState::NorMuon(s) => normuon_step(p, g, s, &self.cfg, lr),
                ParamState::Dion(s) => dion_step(p, g, s, &self.cfg, lr),
            }
            .map_err(named)?;
        }
        Ok(())
    }
}
