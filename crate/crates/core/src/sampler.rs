//! Score fields and the integrators that consume them.
//!
//! Samples are rows of a matrix. Each chain draws from its own RNG stream
//! `(seed, chain)`, so a run is reproducible regardless of how chains are
//! split into parallel blocks.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg;
use crate::rng::{self, Rng};

const CHAIN_BLOCK: usize = 512;

/// Where a score field comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    AnalyticConditional,
    AnalyticMarginal,
    AnalyticJoint,
    Equilibrium,
    Learned,
    CfgCombined,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Provenance::AnalyticConditional => "analytic-conditional",
            Provenance::AnalyticMarginal => "analytic-marginal",
            Provenance::AnalyticJoint => "analytic-joint",
            Provenance::Equilibrium => "equilibrium",
            Provenance::Learned => "learned",
            Provenance::CfgCombined => "cfg-combined",
        };
        f.write_str(name)
    }
}

/// `∇ log p(x̃_s, s [| condition])` evaluated on a batch of rows.
///
/// `condition`, when given, has either one row per input row or a single row
/// that applies to all of them.
pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    fn provenance(&self) -> Provenance;

    fn score_batch(&self, x: &DMatrix<f64>, s: f64, condition: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>>;

    /// Exact divergence `∇·score` per row, when the field knows it.
    fn divergence_batch(&self, _x: &DMatrix<f64>, _s: f64, _condition: Option<&DMatrix<f64>>) -> Option<Result<Vec<f64>>> {
        None
    }

    fn score(&self, x: &DVector<f64>, s: f64, condition: Option<&DVector<f64>>) -> Result<DVector<f64>> {
        let xm = DMatrix::from_row_slice(1, x.len(), x.as_slice());
        let cm = condition.map(|c| DMatrix::from_row_slice(1, c.len(), c.as_slice()));
        Ok(linalg::row(&self.score_batch(&xm, s, cm.as_ref())?, 0))
    }
}

/// Entropy-matching output `ε(x̃_s, s [| condition])`; for the VP process
/// `score = −x + ε`.
pub trait EpsilonField: Send + Sync {
    fn dim(&self) -> usize;

    fn provenance(&self) -> Provenance;

    fn epsilon_batch(&self, x: &DMatrix<f64>, s: f64, condition: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>>;
}

impl<T: ScoreField + ?Sized> ScoreField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn provenance(&self) -> Provenance {
        (**self).provenance()
    }
    fn score_batch(&self, x: &DMatrix<f64>, s: f64, c: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        (**self).score_batch(x, s, c)
    }
    fn divergence_batch(&self, x: &DMatrix<f64>, s: f64, c: Option<&DMatrix<f64>>) -> Option<Result<Vec<f64>>> {
        (**self).divergence_batch(x, s, c)
    }
}

impl<T: EpsilonField + ?Sized> EpsilonField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn provenance(&self) -> Provenance {
        (**self).provenance()
    }
    fn epsilon_batch(&self, x: &DMatrix<f64>, s: f64, c: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        (**self).epsilon_batch(x, s, c)
    }
}

/// Score view of an ε-field: `score = ε − x`.
#[derive(Debug, Clone)]
pub struct ScoreFromEpsilon<E>(pub E);

impl<E: EpsilonField> ScoreField for ScoreFromEpsilon<E> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn provenance(&self) -> Provenance {
        self.0.provenance()
    }
    fn score_batch(&self, x: &DMatrix<f64>, s: f64, c: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        Ok(self.0.epsilon_batch(x, s, c)? - x)
    }
}

/// ε view of a score field: `ε = score + x`.
#[derive(Debug, Clone)]
pub struct EpsilonFromScore<S>(pub S);

impl<S: ScoreField> EpsilonField for EpsilonFromScore<S> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn provenance(&self) -> Provenance {
        self.0.provenance()
    }
    fn epsilon_batch(&self, x: &DMatrix<f64>, s: f64, c: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        Ok(self.0.score_batch(x, s, c)? + x)
    }
}

/// The quasi-invariant score `−x` (equivalently `ε ≡ 0`).
#[derive(Debug, Clone, Copy)]
pub struct EquilibriumScore {
    pub dim: usize,
}

impl ScoreField for EquilibriumScore {
    fn dim(&self) -> usize {
        self.dim
    }
    fn provenance(&self) -> Provenance {
        Provenance::Equilibrium
    }
    fn score_batch(&self, x: &DMatrix<f64>, _s: f64, _c: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        check_dim("equilibrium score", self.dim, x.ncols())?;
        Ok(-x)
    }
    fn divergence_batch(&self, x: &DMatrix<f64>, _s: f64, _c: Option<&DMatrix<f64>>) -> Option<Result<Vec<f64>>> {
        Some(Ok(vec![-(self.dim as f64); x.nrows()]))
    }
}

/// Guided score `(1 + w)·cond − w·marg`, evaluated as `cond + w·(cond − marg)`
/// so that identical fields give back `cond` bit-for-bit.
pub struct CfgField<C, M> {
    pub cond: C,
    pub marg: M,
    pub weight: f64,
}

impl<C: ScoreField, M: ScoreField> ScoreField for CfgField<C, M> {
    fn dim(&self) -> usize {
        self.cond.dim()
    }
    fn provenance(&self) -> Provenance {
        Provenance::CfgCombined
    }
    fn score_batch(&self, x: &DMatrix<f64>, s: f64, c: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        let cond = self.cond.score_batch(x, s, c)?;
        if self.weight == 0.0 {
            return Ok(cond);
        }
        let marg = self.marg.score_batch(x, s, None)?;
        let diff = &cond - marg;
        Ok(cond + diff * self.weight)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Sde,
    Ode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_weight: f64,
    pub seed: u64,
    pub mode: SamplerMode,
}

impl SamplerConfig {
    pub fn sde(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            cfg_weight: 0.0,
            seed,
            mode: SamplerMode::Sde,
        }
    }

    pub fn ode(steps: usize, cfg_weight: f64, seed: u64) -> Self {
        Self {
            steps,
            cfg_weight,
            seed,
            mode: SamplerMode::Ode,
        }
    }

    fn validate(&self, mode: SamplerMode) -> Result<()> {
        if self.steps < 2 {
            return Err(invalid("steps", "need at least 2 steps"));
        }
        if self.mode != mode {
            return Err(invalid("mode", format!("expected {mode:?}, got {:?}", self.mode)));
        }
        if !(self.cfg_weight >= 0.0 && self.cfg_weight.is_finite()) {
            return Err(invalid("cfg_weight", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Euler–Maruyama path of the forward SDE on `[0, T]`, including the start.
pub fn forward_sde_em(sched: &DiffusionSchedule, x0: &DVector<f64>, rng: &mut Rng) -> Result<Vec<(f64, DVector<f64>)>> {
    sched.validate()?;
    let grid = sched.forward_grid();
    let mut x = x0.clone();
    let mut path = Vec::with_capacity(grid.len());
    path.push((grid[0], x.clone()));
    for (k, w) in grid.windows(2).enumerate() {
        let (s, h) = (w[0], w[1] - w[0]);
        let beta = sched.beta(s);
        let sd = (beta * h).sqrt();
        x = x.map(|v| v - 0.5 * beta * v * h + sd * rng::normal(rng));
        check_finite_vec(&x, "forward SDE", k + 1)?;
        path.push((w[1], x.clone()));
    }
    Ok(path)
}

fn check_finite_vec(x: &DVector<f64>, context: &'static str, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context,
            step,
            norm: x.norm(),
        })
    }
}

fn check_finite(x: &DMatrix<f64>, context: &'static str, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context,
            step,
            norm: x.norm(),
        })
    }
}

fn condition_block(condition: Option<&DMatrix<f64>>, start: usize, len: usize, total: usize) -> Result<Option<DMatrix<f64>>> {
    match condition {
        None => Ok(None),
        Some(c) if c.nrows() == 1 => Ok(Some(c.clone())),
        Some(c) if c.nrows() == total => Ok(Some(c.rows(start, len).into_owned())),
        Some(c) => Err(Error::DimensionMismatch {
            context: "condition rows",
            expected: total,
            got: c.nrows(),
        }),
    }
}

fn initial_block(seed: u64, start: usize, len: usize, dim: usize) -> (DMatrix<f64>, Vec<Rng>) {
    let mut rngs: Vec<Rng> = (start..start + len).map(|i| rng::stream(seed, i as u64)).collect();
    let mut x = DMatrix::zeros(len, dim);
    for (i, rng) in rngs.iter_mut().enumerate() {
        for j in 0..dim {
            x[(i, j)] = rng::normal(rng);
        }
    }
    (x, rngs)
}

fn run_blocks<F>(n: usize, f: F) -> Result<Vec<DMatrix<f64>>>
where
    F: Fn(usize, usize) -> Result<DMatrix<f64>> + Sync,
{
    let starts: Vec<usize> = (0..n).step_by(CHAIN_BLOCK).collect();
    starts
        .into_par_iter()
        .map(|start| f(start, CHAIN_BLOCK.min(n - start)))
        .collect()
}

fn stack(blocks: Vec<DMatrix<f64>>, dim: usize) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, dim);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, 0), (b.nrows(), dim)).copy_from(&b);
        at += b.nrows();
    }
    out
}

/// Reverse-time Euler–Maruyama: `dX = (½β X + β·score) dt + √β dB` from
/// `N(0, I)` at `s = T` down to `s = s_min`. Returns one sample per row.
pub fn reverse_sde_em(
    field: &dyn ScoreField,
    sched: &DiffusionSchedule,
    n: usize,
    cfg: &SamplerConfig,
    condition: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    sched.validate()?;
    cfg.validate(SamplerMode::Sde)?;
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    let dim = field.dim();
    let grid = sched.with_steps(cfg.steps).grid();
    let blocks = run_blocks(n, |start, len| {
        let cond = condition_block(condition, start, len, n)?;
        let (mut x, mut rngs) = initial_block(cfg.seed, start, len, dim);
        for k in (1..grid.len()).rev() {
            let (s, h) = (grid[k], grid[k] - grid[k - 1]);
            let beta = sched.beta(s);
            let score = field.score_batch(&x, s, cond.as_ref())?;
            let sd = (beta * h).sqrt();
            let drift = &x * (0.5 * beta) + score * beta;
            x += drift * h;
            for (i, rng) in rngs.iter_mut().enumerate() {
                for j in 0..dim {
                    x[(i, j)] += sd * rng::normal(rng);
                }
            }
            check_finite(&x, "reverse SDE", grid.len() - k)?;
        }
        Ok(x)
    })?;
    Ok(stack(blocks, dim))
}

/// Guided probability-flow ODE integrated with fixed-step RK4 from `N(0, I)`
/// at `s = T` down to `s_min`:
/// `dx/dt = ½β x + ½β [(1 + w) cond − w marg]`.
pub fn pf_ode_cfg(
    cond_field: &dyn ScoreField,
    marg_field: &dyn ScoreField,
    y: &DMatrix<f64>,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<DMatrix<f64>> {
    sched.validate()?;
    cfg.validate(SamplerMode::Ode)?;
    check_dim("pf-ode field dimensions", cond_field.dim(), marg_field.dim())?;
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    let dim = cond_field.dim();
    let guided = CfgField {
        cond: cond_field,
        marg: marg_field,
        weight: cfg.cfg_weight,
    };
    let grid = sched.with_steps(cfg.steps).grid();
    let velocity = |x: &DMatrix<f64>, s: f64, c: Option<&DMatrix<f64>>| -> Result<DMatrix<f64>> {
        let half_beta = 0.5 * sched.beta(s);
        Ok((x + guided.score_batch(x, s, c)?) * half_beta)
    };
    let blocks = run_blocks(n, |start, len| {
        let cond = condition_block(Some(y), start, len, n)?;
        let c = cond.as_ref();
        let (mut x, _) = initial_block(cfg.seed, start, len, dim);
        for k in (1..grid.len()).rev() {
            let (s, h) = (grid[k], grid[k] - grid[k - 1]);
            let mid = s - 0.5 * h;
            let k1 = velocity(&x, s, c)?;
            let k2 = velocity(&(&x + &k1 * (0.5 * h)), mid, c)?;
            let k3 = velocity(&(&x + &k2 * (0.5 * h)), mid, c)?;
            let k4 = velocity(&(&x + &k3 * h), grid[k - 1], c)?;
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            check_finite(&x, "probability-flow ODE", grid.len() - k)?;
        }
        Ok(x)
    })?;
    Ok(stack(blocks, dim))
}
