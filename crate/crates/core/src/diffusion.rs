//! Variance-preserving forward process.
//!
//! `dX = −½β(s) X ds + √β(s) dB` with linear `β(s) = β_min + (β_max − β_min) s / T`.
//! The perturbation kernel is `N(μ(s) x, Σ(s) I)` with `μ = √α`, `Σ = 1 − α`,
//! `α(s) = exp(−∫₀ˢ β)`. The quasi-invariant state is `N(0, I)` at every `s`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::gaussian::JointGaussianSpec;
use crate::linalg::{self, blend_with_identity, cholesky, solve_rows, Chol};
use crate::rng::{self, Rng};
use crate::sampler::{Provenance, ScoreField};

/// Linear-β VP schedule on `[0, T]` with a uniform grid of `steps` intervals
/// over `[s_min, T]`, `s_min = eps_time · T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub horizon: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub steps: usize,
    pub eps_time: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            beta_min: 0.1,
            beta_max: 20.0,
            steps: 1000,
            eps_time: 1e-3,
        }
    }
}

/// Kernel coefficients at one time: mean factor `mu = √α` and variance `sigma2 = 1 − α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub alpha: f64,
    pub mu: f64,
    pub sigma2: f64,
}

pub fn vp_schedule(beta_min: f64, beta_max: f64, horizon: f64, steps: usize, eps_time: f64) -> Result<DiffusionSchedule> {
    let sched = DiffusionSchedule {
        horizon,
        beta_min,
        beta_max,
        steps,
        eps_time,
    };
    sched.validate()?;
    Ok(sched)
}

impl DiffusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min.is_finite()) {
            return Err(invalid("beta_min", format!("must be positive, got {}", self.beta_min)));
        }
        if !(self.beta_max >= self.beta_min && self.beta_max.is_finite()) {
            return Err(invalid("beta_max", "must be finite and at least beta_min"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("horizon", "must be positive"));
        }
        if self.steps < 2 {
            return Err(invalid("steps", "need at least 2 grid intervals"));
        }
        if !(self.eps_time > 0.0 && self.eps_time < 1.0) {
            return Err(invalid("eps_time", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn beta(&self, s: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * s / self.horizon
    }

    /// `∫₀ˢ β`.
    pub fn integrated_beta(&self, s: f64) -> f64 {
        self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s * s / self.horizon
    }

    pub fn alpha(&self, s: f64) -> f64 {
        (-self.integrated_beta(s)).exp()
    }

    /// Unchecked kernel coefficients; `Σ` is computed with `expm1` so it stays
    /// accurate near `s = 0`.
    pub fn kernel(&self, s: f64) -> Kernel {
        let b = self.integrated_beta(s);
        Kernel {
            alpha: (-b).exp(),
            mu: (-0.5 * b).exp(),
            sigma2: -(-b).exp_m1(),
        }
    }

    /// `(μ(s), Σ(s))` for `0 ≤ s ≤ T`.
    pub fn kernel_params(&self, s: f64) -> Result<(f64, f64)> {
        self.check_time(s)?;
        let k = self.kernel(s);
        Ok((k.mu, k.sigma2))
    }

    pub fn check_time(&self, s: f64) -> Result<()> {
        if s.is_finite() && (0.0..=self.horizon).contains(&s) {
            Ok(())
        } else {
            Err(invalid("s", format!("time {s} outside [0, {}]", self.horizon)))
        }
    }

    /// Lower integration cutoff.
    pub fn s_min(&self) -> f64 {
        self.eps_time * self.horizon
    }

    /// `steps + 1` uniform nodes from `s_min` to `T`.
    pub fn grid(&self) -> Vec<f64> {
        uniform_nodes(self.s_min(), self.horizon, self.steps)
    }

    /// `steps + 1` uniform nodes from `0` to `T`.
    pub fn forward_grid(&self) -> Vec<f64> {
        uniform_nodes(0.0, self.horizon, self.steps)
    }

    /// `√α(s) x + √(1 − α(s)) η`.
    pub fn forward_jump_sample(&self, x: &DVector<f64>, s: f64, rng: &mut Rng) -> Result<DVector<f64>> {
        self.check_time(s)?;
        let k = self.kernel(s);
        if s == 0.0 {
            return Ok(x.clone());
        }
        let sd = k.sigma2.sqrt();
        Ok(x.map(|v| k.mu * v + sd * rng::normal(rng)))
    }

    /// Row-wise jump with caller-supplied standard-normal noise.
    pub fn forward_jump_batch(&self, x: &DMatrix<f64>, noise: &DMatrix<f64>, s: f64) -> DMatrix<f64> {
        let k = self.kernel(s);
        x * k.mu + noise * k.sigma2.sqrt()
    }

    /// `∇ log p(x̃_s | x, 0) = −(x̃_s − μ x) / Σ`.
    pub fn transition_score(&self, x_t: &DVector<f64>, x0: &DVector<f64>, s: f64) -> DVector<f64> {
        let k = self.kernel(s);
        -(x_t - x0 * k.mu) / k.sigma2
    }
}

fn uniform_nodes(start: f64, end: f64, intervals: usize) -> Vec<f64> {
    let h = (end - start) / intervals as f64;
    (0..=intervals)
        .map(|i| if i == intervals { end } else { start + h * i as f64 })
        .collect()
}

/// Standard-normal log density.
pub fn quasi_invariant_logpdf(x: &DVector<f64>) -> f64 {
    let d = x.len() as f64;
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + x.norm_squared())
}

/// Standard-normal score `−x`.
pub fn quasi_invariant_score(x: &DVector<f64>) -> DVector<f64> {
    -x
}

/// A diffused Gaussian: `N(mean, cov)` at some time `s`.
#[derive(Debug, Clone)]
pub struct DiffusedGaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

struct TimeSlice {
    s: f64,
    cond: Chol,
    marg: Chol,
}

/// Closed-form scores of the joint-Gaussian model under the VP process, with
/// Cholesky factors cached on the schedule grid.
pub struct DiffusedGaussian {
    spec: JointGaussianSpec,
    sched: DiffusionSchedule,
    cache: Vec<TimeSlice>,
}

impl std::fmt::Debug for DiffusedGaussian {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusedGaussian")
            .field("dim_x", &self.spec.dim_x())
            .field("dim_y", &self.spec.dim_y())
            .field("sched", &self.sched)
            .field("cached_times", &self.cache.len())
            .finish()
    }
}

impl DiffusedGaussian {
    /// Builds the model and factorizes on the schedule grid.
    pub fn new(spec: JointGaussianSpec, sched: DiffusionSchedule) -> Result<Self> {
        sched.validate()?;
        let mut model = Self {
            spec,
            sched,
            cache: Vec::new(),
        };
        let grid = sched.grid();
        model.prepare(&grid)?;
        Ok(model)
    }

    /// No cache; for one-off evaluations.
    pub fn uncached(spec: JointGaussianSpec, sched: DiffusionSchedule) -> Self {
        Self {
            spec,
            sched,
            cache: Vec::new(),
        }
    }

    /// Adds factorizations for `times` (must be called before sharing).
    pub fn prepare(&mut self, times: &[f64]) -> Result<()> {
        for &s in times {
            let (cond, marg) = self.factorize(s)?;
            self.cache.push(TimeSlice { s, cond, marg });
        }
        self.cache.sort_by(|a, b| a.s.total_cmp(&b.s));
        self.cache.dedup_by(|a, b| a.s == b.s);
        Ok(())
    }

    pub fn spec(&self) -> &JointGaussianSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    fn factorize(&self, s: f64) -> Result<(Chol, Chol)> {
        let a = self.sched.kernel(s).alpha;
        let cond = cholesky(&blend_with_identity(self.spec.conditional_cov(), a), "Σ_s^{X|Y}")
            .map_err(|_| Error::Singular(format!("Σ_s^(X|Y) at s={s}")))?;
        let marg = cholesky(&blend_with_identity(self.spec.cov_x(), a), "Σ_s^X")
            .map_err(|_| Error::Singular(format!("Σ_s^X at s={s}")))?;
        Ok((cond, marg))
    }

    fn with_slice<T>(&self, s: f64, f: impl FnOnce(&Chol, &Chol) -> T) -> Result<T> {
        self.sched.check_time(s)?;
        match self.cache.binary_search_by(|t| t.s.total_cmp(&s)) {
            Ok(i) => Ok(f(&self.cache[i].cond, &self.cache[i].marg)),
            Err(_) => {
                let (c, m) = self.factorize(s)?;
                Ok(f(&c, &m))
            }
        }
    }

    pub fn conditional_state(&self, y: &DVector<f64>, s: f64) -> Result<DiffusedGaussianState> {
        self.sched.check_time(s)?;
        let k = self.sched.kernel(s);
        let base = self.spec.conditional_x_given_y(y)?;
        Ok(DiffusedGaussianState {
            mean: base.mean * k.mu,
            cov: blend_with_identity(&base.cov, k.alpha),
        })
    }

    pub fn marginal_state(&self, s: f64) -> Result<DiffusedGaussianState> {
        self.sched.check_time(s)?;
        let a = self.sched.kernel(s).alpha;
        Ok(DiffusedGaussianState {
            mean: DVector::zeros(self.spec.dim_x()),
            cov: blend_with_identity(self.spec.cov_x(), a),
        })
    }

    pub fn joint_state(&self, s: f64) -> Result<DiffusedGaussianState> {
        self.sched.check_time(s)?;
        let a = self.sched.kernel(s).alpha;
        let joint = self.spec.joint_covariance();
        Ok(DiffusedGaussianState {
            mean: DVector::zeros(joint.nrows()),
            cov: blend_with_identity(&joint, a),
        })
    }

    /// `−(Σ_s^{X|Y})⁻¹ (x̃ − √α μ_{X|Y}(y))` for every row pair of `x`, `y`.
    /// `y` may hold a single row, broadcast to all of `x`.
    pub fn conditional_score_batch(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
        check_dim("conditional score input", self.spec.dim_x(), x.ncols())?;
        check_dim("conditional score condition", self.spec.dim_y(), y.ncols())?;
        let mu = self.sched.kernel(s).mu;
        let shift = y * self.spec.gain().transpose() * mu;
        let centered = if shift.nrows() == x.nrows() {
            x - shift
        } else if shift.nrows() == 1 {
            let mut c = x.clone();
            for mut r in c.row_iter_mut() {
                r -= shift.row(0);
            }
            c
        } else {
            return Err(Error::DimensionMismatch {
                context: "condition rows",
                expected: x.nrows(),
                got: y.nrows(),
            });
        };
        self.with_slice(s, |cond, _| -solve_rows(cond, &centered))
    }

    /// `−(Σ_s^X)⁻¹ x̃` row-wise.
    pub fn marginal_score_batch(&self, x: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
        check_dim("marginal score input", self.spec.dim_x(), x.ncols())?;
        self.with_slice(s, |_, marg| -solve_rows(marg, x))
    }

    /// `−(Σ_s^R)⁻¹ r̃` row-wise for the jointly diffused `(x, y)`.
    pub fn joint_score_batch(&self, r: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
        let state = self.joint_state(s)?;
        check_dim("joint score input", state.cov.nrows(), r.ncols())?;
        let chol = cholesky(&state.cov, "Σ_s^R").map_err(|_| Error::Singular(format!("Σ_s^R at s={s}")))?;
        Ok(-solve_rows(&chol, r))
    }

    /// `∇·score` of the marginal field: `−tr (Σ_s^X)⁻¹`.
    pub fn marginal_divergence(&self, s: f64) -> Result<f64> {
        self.with_slice(s, |_, marg| -trace_of_inverse(marg))
    }

    pub fn conditional_divergence(&self, s: f64) -> Result<f64> {
        self.with_slice(s, |cond, _| -trace_of_inverse(cond))
    }

    /// `E[x | x̃_s] = μ Σ_X (Σ_s^X)⁻¹ x̃`, by direct Gaussian conditioning.
    pub fn denoised_mean_batch(&self, x: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
        check_dim("denoiser input", self.spec.dim_x(), x.ncols())?;
        let k = self.sched.kernel(s);
        if !(k.mu > f64::MIN_POSITIVE) {
            return Err(Error::Singular(format!("kernel mean factor underflows at s={s}")));
        }
        let whitened = self.with_slice(s, |_, marg| solve_rows(marg, x))?;
        Ok(whitened * self.spec.cov_x() * k.mu)
    }

    pub fn conditional_field(self: &Arc<Self>) -> AnalyticScore {
        AnalyticScore {
            model: Arc::clone(self),
            kind: AnalyticKind::Conditional,
        }
    }

    pub fn marginal_field(self: &Arc<Self>) -> AnalyticScore {
        AnalyticScore {
            model: Arc::clone(self),
            kind: AnalyticKind::Marginal,
        }
    }

    pub fn joint_field(self: &Arc<Self>) -> AnalyticScore {
        AnalyticScore {
            model: Arc::clone(self),
            kind: AnalyticKind::Joint,
        }
    }
}

fn trace_of_inverse(chol: &Chol) -> f64 {
    chol.inverse().trace()
}

fn as_row(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

/// `∇ log p(x̃_s, s | y)`.
pub fn diffused_conditional_score(
    spec: &JointGaussianSpec,
    sched: &DiffusionSchedule,
    x_t: &DVector<f64>,
    s: f64,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let model = DiffusedGaussian::uncached(spec.clone(), *sched);
    Ok(linalg::row(&model.conditional_score_batch(&as_row(x_t), &as_row(y), s)?, 0))
}

/// `∇ log p(x̃_s, s)`.
pub fn diffused_marginal_score(
    spec: &JointGaussianSpec,
    sched: &DiffusionSchedule,
    x_t: &DVector<f64>,
    s: f64,
) -> Result<DVector<f64>> {
    let model = DiffusedGaussian::uncached(spec.clone(), *sched);
    Ok(linalg::row(&model.marginal_score_batch(&as_row(x_t), s)?, 0))
}

/// `∇ log p(r̃_s, s)` for the concatenated `(x, y)`.
pub fn diffused_joint_score(
    spec: &JointGaussianSpec,
    sched: &DiffusionSchedule,
    r_t: &DVector<f64>,
    s: f64,
) -> Result<DVector<f64>> {
    let model = DiffusedGaussian::uncached(spec.clone(), *sched);
    Ok(linalg::row(&model.joint_score_batch(&as_row(r_t), s)?, 0))
}

/// `E[x | x̃_s]` for the marginal of `X`.
pub fn denoised_mean_gaussian(
    spec: &JointGaussianSpec,
    sched: &DiffusionSchedule,
    x_t: &DVector<f64>,
    s: f64,
) -> Result<DVector<f64>> {
    if s >= sched.horizon {
        return Err(invalid("s", "denoised mean needs s < T"));
    }
    let model = DiffusedGaussian::uncached(spec.clone(), *sched);
    Ok(linalg::row(&model.denoised_mean_batch(&as_row(x_t), s)?, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyticKind {
    Conditional,
    Marginal,
    Joint,
}

/// A [`ScoreField`] backed by [`DiffusedGaussian`].
#[derive(Debug, Clone)]
pub struct AnalyticScore {
    model: Arc<DiffusedGaussian>,
    kind: AnalyticKind,
}

impl AnalyticScore {
    pub fn model(&self) -> &DiffusedGaussian {
        &self.model
    }

    pub fn kind(&self) -> AnalyticKind {
        self.kind
    }
}

impl ScoreField for AnalyticScore {
    fn dim(&self) -> usize {
        match self.kind {
            AnalyticKind::Joint => self.model.spec.dim_x() + self.model.spec.dim_y(),
            _ => self.model.spec.dim_x(),
        }
    }

    fn provenance(&self) -> Provenance {
        match self.kind {
            AnalyticKind::Conditional => Provenance::AnalyticConditional,
            AnalyticKind::Marginal => Provenance::AnalyticMarginal,
            AnalyticKind::Joint => Provenance::AnalyticJoint,
        }
    }

    fn score_batch(&self, x: &DMatrix<f64>, s: f64, condition: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        match self.kind {
            AnalyticKind::Conditional => {
                let y = condition.ok_or_else(|| invalid("condition", "conditional field needs a condition"))?;
                self.model.conditional_score_batch(x, y, s)
            }
            AnalyticKind::Marginal => self.model.marginal_score_batch(x, s),
            AnalyticKind::Joint => self.model.joint_score_batch(x, s),
        }
    }

    fn divergence_batch(&self, x: &DMatrix<f64>, s: f64, _condition: Option<&DMatrix<f64>>) -> Option<Result<Vec<f64>>> {
        let div = match self.kind {
            AnalyticKind::Conditional => self.model.conditional_divergence(s),
            AnalyticKind::Marginal => self.model.marginal_divergence(s),
            AnalyticKind::Joint => return None,
        };
        Some(div.map(|d| vec![d; x.nrows()]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::build_joint_spec;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn default_schedule_endpoints() {
        let s = DiffusionSchedule::default();
        assert!(rel(s.alpha(1.0), (-10.05f64).exp()) < 1e-14);
        assert!(s.alpha(1.0) < 1e-4);
        assert_eq!(s.alpha(0.0), 1.0);
        let (mu, sigma2) = s.kernel_params(1.0).unwrap();
        assert!((mu - 0.006_571).abs() < 5e-5, "mu {mu}");
        assert!((sigma2 - 0.999_957).abs() < 1e-6);
        assert_eq!(s.kernel_params(0.0).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn constant_beta_is_ou() {
        let s = vp_schedule(0.7, 0.7, 2.0, 10, 1e-3).unwrap();
        for t in [0.1, 0.5, 1.3] {
            assert!(rel(s.alpha(t), (-0.7 * t).exp()) < 1e-14);
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(vp_schedule(0.0, 1.0, 1.0, 10, 1e-3).is_err());
        assert!(vp_schedule(2.0, 1.0, 1.0, 10, 1e-3).is_err());
        assert!(vp_schedule(0.1, 1.0, 0.0, 10, 1e-3).is_err());
        assert!(vp_schedule(0.1, 1.0, 1.0, 1, 1e-3).is_err());
        assert!(vp_schedule(0.1, 1.0, 1.0, 10, 1.0).is_err());
        assert!(DiffusionSchedule::default().kernel_params(1.5).is_err());
    }

    #[test]
    fn grid_spans_cutoff_to_horizon() {
        let s = DiffusionSchedule::default().with_steps(10);
        let g = s.grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 1e-3);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert_eq!(s.forward_grid()[0], 0.0);
    }

    #[test]
    fn jump_at_zero_is_identity() {
        let s = DiffusionSchedule::default();
        let x = DVector::from_vec(vec![1.5, -2.0]);
        let mut rng = rng::seeded(1);
        assert_eq!(s.forward_jump_sample(&x, 0.0, &mut rng).unwrap(), x);
        let a = s.forward_jump_sample(&x, 0.4, &mut rng::seeded(3)).unwrap();
        let b = s.forward_jump_sample(&x, 0.4, &mut rng::seeded(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scores_at_special_points() {
        let spec = build_joint_spec(3, 2, 0.8, 1e-6, 4).unwrap();
        let sched = DiffusionSchedule::default();
        let y = DVector::from_vec(vec![0.3, -1.2]);
        let s = 0.37;
        let mu = sched.kernel(s).mu;
        let mean = spec.gain() * &y * mu;
        let at_mean = diffused_conditional_score(&spec, &sched, &mean, s, &y).unwrap();
        assert!(at_mean.amax() < 1e-12);
        let zero = DVector::zeros(3);
        assert_eq!(diffused_marginal_score(&spec, &sched, &zero, s).unwrap(), zero);
        let x = DVector::from_vec(vec![0.5, 1.0, -0.25]);
        let at_t = diffused_conditional_score(&spec, &sched, &x, 1.0, &y).unwrap();
        // at T only the tiny mean shift √α K y survives
        let shift = spec.gain() * &y * sched.kernel(1.0).mu;
        assert!((at_t + &x - shift).amax() < 1e-3);
        let r = DVector::from_vec(vec![0.5, 1.0, -0.25, 2.0, 0.1]);
        let joint_t = diffused_joint_score(&spec, &sched, &r, 1.0).unwrap();
        assert!((joint_t + &r).amax() < 1e-3);
    }

    #[test]
    fn scalar_marginal_score_matches_hand_formula() {
        let spec = JointGaussianSpec::scalar(1.0, 2f64.sqrt(), 1.0).unwrap();
        let sched = DiffusionSchedule::default();
        let s = 0.3;
        let a = sched.alpha(s);
        let x = DVector::from_element(1, 0.8);
        let got = diffused_marginal_score(&spec, &sched, &x, s).unwrap()[0];
        assert!(rel(got, -0.8 / (1.0 + a)) < 1e-13);
        let unit = JointGaussianSpec::scalar(1.0, 1.0, 1.0).unwrap();
        let at0 = diffused_marginal_score(&unit, &sched, &x, 0.0).unwrap()[0];
        assert!(rel(at0, -0.8) < 1e-15);
    }

    #[test]
    fn independence_makes_conditional_equal_marginal() {
        let cov_x = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.6]);
        let spec = JointGaussianSpec::from_matrices(DMatrix::zeros(2, 2), cov_x, 1.0).unwrap();
        let sched = DiffusionSchedule::default();
        let x = DVector::from_vec(vec![0.4, -0.9]);
        let y = DVector::from_vec(vec![3.0, 1.0]);
        for s in [0.01, 0.2, 0.9] {
            let c = diffused_conditional_score(&spec, &sched, &x, s, &y).unwrap();
            let m = diffused_marginal_score(&spec, &sched, &x, s).unwrap();
            assert_eq!(c, m);
            let r = DVector::from_vec(vec![0.4, -0.9, 3.0, 1.0]);
            let j = diffused_joint_score(&spec, &sched, &r, s).unwrap();
            assert!((j.rows(0, 2) - &m).amax() < 1e-14);
        }
    }

    #[test]
    fn denoised_mean_scalar() {
        let spec = JointGaussianSpec::scalar(1.0, 1.0, 1.0).unwrap();
        // s with α = ½
        let sched = vp_schedule(1.0, 1.0, 2.0, 10, 1e-3).unwrap();
        let s = 2f64.ln();
        let x = DVector::from_element(1, 1.3);
        let got = denoised_mean_gaussian(&spec, &sched, &x, s).unwrap()[0];
        assert!(rel(got, 1.3 / 2f64.sqrt()) < 1e-13);
        assert_eq!(denoised_mean_gaussian(&spec, &sched, &DVector::zeros(1), s).unwrap()[0], 0.0);
        let near0 = denoised_mean_gaussian(&spec, &sched, &x, 1e-12).unwrap()[0];
        assert!(rel(near0, 1.3) < 1e-10);
        assert!(denoised_mean_gaussian(&spec, &sched, &x, 2.0).is_err());
    }

    #[test]
    fn quasi_invariant_state() {
        let z = DVector::zeros(3);
        assert!(rel(quasi_invariant_logpdf(&z), -1.5 * (2.0 * std::f64::consts::PI).ln()) < 1e-15);
        assert_eq!(quasi_invariant_score(&z), z);
        let x = DVector::from_vec(vec![1.0, 2.0, -2.0]);
        assert_eq!(quasi_invariant_score(&x).norm(), x.norm());
        assert!(quasi_invariant_logpdf(&(x.clone() * 2.0)) < quasi_invariant_logpdf(&x));
    }

    #[test]
    fn cached_and_uncached_agree() {
        let spec = build_joint_spec(4, 2, 0.5, 1e-6, 8).unwrap();
        let sched = DiffusionSchedule::default().with_steps(20);
        let cached = DiffusedGaussian::new(spec.clone(), sched).unwrap();
        let plain = DiffusedGaussian::uncached(spec, sched);
        let x = DMatrix::from_fn(3, 4, |i, j| (i as f64) - 0.5 * j as f64);
        let s = sched.grid()[7];
        assert_eq!(
            cached.marginal_score_batch(&x, s).unwrap(),
            plain.marginal_score_batch(&x, s).unwrap()
        );
    }
}
