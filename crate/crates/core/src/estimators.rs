//! Information functionals estimated along the forward process.
//!
//! Every path estimator draws its clean samples and forward noise once and
//! reuses them at each time node (common random numbers), integrates with
//! the trapezoid rule on the schedule grid over `[s_min, T]`, and reports the
//! Monte-Carlo standard error of the running integral from per-sample totals.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusedGaussian, DiffusionSchedule};
use crate::error::{check_dim, invalid, Error, Result};
use crate::gaussian::{gaussian_kl, total_correlation_gaussian, GaussianDist, JointGaussianSpec};
use crate::linalg;
use crate::rng;
use crate::sampler::{EpsilonField, Provenance, ScoreField};

/// Fewer samples than this make the standard error meaningless.
pub const MIN_MC_SAMPLES: usize = 100;
/// Rademacher probes per point for randomized divergences.
pub const HUTCHINSON_PROBES: usize = 16;
const FD_STEP: f64 = 1e-3;
const ROW_CHUNK: usize = 2048;

/// Clean samples, optionally paired with conditions.
#[derive(Debug, Clone)]
pub struct Draw {
    pub x: DMatrix<f64>,
    pub y: Option<DMatrix<f64>>,
}

/// Source of clean data for the estimators.
pub trait DataSampler: Send + Sync {
    fn dim_x(&self) -> usize;

    fn sample(&self, n: usize, seed: u64) -> Result<Draw>;
}

impl DataSampler for JointGaussianSpec {
    fn dim_x(&self) -> usize {
        JointGaussianSpec::dim_x(self)
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Draw> {
        let pairs = self.sample_pairs(n, seed)?;
        Ok(Draw {
            x: pairs.x,
            y: Some(pairs.y),
        })
    }
}

impl DataSampler for GaussianDist {
    fn dim_x(&self) -> usize {
        self.dim()
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Draw> {
        let chol = linalg::cholesky(&self.cov, "sampled covariance")?;
        let l = chol.l();
        let d = self.dim();
        let mut x = DMatrix::zeros(n, d);
        for i in 0..n {
            let mut r = rng::stream(seed, i as u64);
            let z = DVector::from_fn(d, |_, _| rng::normal(&mut r));
            x.row_mut(i).copy_from(&(&self.mean + &l * z).transpose());
        }
        Ok(Draw { x, y: None })
    }
}

/// A finite dataset. Requests up to its size return a seeded permutation of
/// distinct rows; larger requests resample with replacement.
#[derive(Debug, Clone)]
pub struct EmpiricalData {
    pub x: DMatrix<f64>,
    pub y: Option<DMatrix<f64>>,
}

impl EmpiricalData {
    pub fn new(x: DMatrix<f64>, y: Option<DMatrix<f64>>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(invalid("dataset", "empty dataset"));
        }
        if let Some(y) = &y {
            check_dim("dataset pairs", x.nrows(), y.nrows())?;
        }
        Ok(Self { x, y })
    }
}

impl DataSampler for EmpiricalData {
    fn dim_x(&self) -> usize {
        self.x.ncols()
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Draw> {
        let mut r = rng::seeded(seed);
        let total = self.x.nrows();
        let idx: Vec<usize> = if n <= total {
            let mut all: Vec<usize> = (0..total).collect();
            all.shuffle(&mut r);
            all.truncate(n);
            all
        } else {
            (0..n).map(|_| r.gen_range(0..total)).collect()
        };
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(n, m.ncols(), |i, j| m[(idx[i], j)]);
        Ok(Draw {
            x: pick(&self.x),
            y: self.y.as_ref().map(pick),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub estimator: String,
    pub n_mc: usize,
    pub steps: usize,
    pub seed: u64,
    pub provenance: Vec<Provenance>,
}

/// A time-resolved integral: integrand mean per node, running trapezoid
/// integral, and the standard error of that running integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub times: Vec<f64>,
    pub rate: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub mc_stderr: Vec<f64>,
    pub total: f64,
    pub meta: ReportMeta,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    total: f64,
    stderr: f64,
    meta: &'a ReportMeta,
}

impl EntropyReport {
    pub fn stderr(&self) -> f64 {
        self.mc_stderr.last().copied().unwrap_or(0.0)
    }

    /// Time of the largest integrand value.
    pub fn peak_time(&self) -> f64 {
        let (i, _) = self
            .rate
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        self.times[i]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,rate,cumulative,stderr\n");
        for k in 0..self.times.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.times[k], self.rate[k], self.cumulative[k], self.mc_stderr[k]
            ));
        }
        out
    }

    /// Writes the CSV to `csv_path` and the metadata to a `.json` sidecar
    /// next to it; returns the sidecar path.
    pub fn write(&self, csv_path: &Path) -> Result<PathBuf> {
        std::fs::write(csv_path, self.to_csv())?;
        let side = csv_path.with_extension("json");
        let doc = Sidecar {
            total: self.total,
            stderr: self.stderr(),
            meta: &self.meta,
        };
        std::fs::write(&side, serde_json::to_string_pretty(&doc)?)?;
        Ok(side)
    }
}

/// A scalar estimate with its Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

fn check_samples(n_mc: usize) -> Result<()> {
    if n_mc < MIN_MC_SAMPLES {
        return Err(invalid("n_mc", format!("need at least {MIN_MC_SAMPLES} samples, got {n_mc}")));
    }
    Ok(())
}

/// Standard-normal noise with one RNG stream per sample row.
fn noise_rows(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, d);
    for i in 0..n {
        let mut r = rng::stream(seed, i as u64);
        for j in 0..d {
            m[(i, j)] = rng::normal(&mut r);
        }
    }
    m
}

/// Evaluates `f` on row chunks in parallel and concatenates in order.
fn per_row<F>(n: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, usize) -> Result<Vec<f64>> + Sync,
{
    let starts: Vec<usize> = (0..n).step_by(ROW_CHUNK).collect();
    let parts: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&a| f(a, (a + ROW_CHUNK).min(n) - a))
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

fn rows(m: &DMatrix<f64>, start: usize, len: usize) -> DMatrix<f64> {
    m.rows(start, len).into_owned()
}

/// Shared quadrature driver. `integrand(s, start, len)` returns the per-sample
/// integrand values for rows `start..start + len` at time `s`.
fn integrate_path<F>(sched: &DiffusionSchedule, n_mc: usize, integrand: F) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>
where
    F: Fn(f64, usize, usize) -> Result<Vec<f64>> + Sync,
{
    let times = sched.grid();
    let mut rate = Vec::with_capacity(times.len());
    let mut cumulative = Vec::with_capacity(times.len());
    let mut stderr = Vec::with_capacity(times.len());
    let mut running = vec![0.0; n_mc];
    let mut prev: Option<Vec<f64>> = None;
    let n = n_mc as f64;
    for (k, &s) in times.iter().enumerate() {
        let vals = per_row(n_mc, |a, len| integrand(s, a, len))?;
        if let Some((i, v)) = vals.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "estimator integrand",
                step: k,
                norm: if i < n_mc { *v } else { f64::NAN },
            });
        }
        if let Some(p) = &prev {
            let h = s - times[k - 1];
            for i in 0..n_mc {
                running[i] += 0.5 * h * (p[i] + vals[i]);
            }
        }
        let mean_run = running.iter().sum::<f64>() / n;
        let var = running.iter().map(|c| (c - mean_run).powi(2)).sum::<f64>() / (n - 1.0);
        rate.push(vals.iter().sum::<f64>() / n);
        cumulative.push(mean_run);
        stderr.push((var / n).sqrt());
        prev = Some(vals);
    }
    Ok((times, rate, cumulative, stderr))
}

fn report(
    sched: &DiffusionSchedule,
    n_mc: usize,
    seed: u64,
    estimator: &str,
    provenance: Vec<Provenance>,
    parts: (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
) -> EntropyReport {
    let (times, rate, cumulative, mc_stderr) = parts;
    let total = *cumulative.last().expect("grid has nodes");
    EntropyReport {
        times,
        rate,
        cumulative,
        mc_stderr,
        total,
        meta: ReportMeta {
            estimator: estimator.to_string(),
            n_mc,
            steps: sched.steps,
            seed,
            provenance,
        },
    }
}

/// Clean data and forward noise shared by all time nodes.
struct PathSamples {
    x0: DMatrix<f64>,
    y: Option<DMatrix<f64>>,
    noise: DMatrix<f64>,
}

impl PathSamples {
    fn draw<D: DataSampler + ?Sized>(sampler: &D, n_mc: usize, seed: u64) -> Result<Self> {
        let d = sampler.sample(n_mc, rng::child_seed(seed, "data"))?;
        check_dim("sampled rows", n_mc, d.x.nrows())?;
        let noise = noise_rows(n_mc, d.x.ncols(), rng::child_seed(seed, "noise"));
        Ok(Self {
            x0: d.x,
            y: d.y,
            noise,
        })
    }

    fn jumped(&self, sched: &DiffusionSchedule, s: f64, start: usize, len: usize) -> DMatrix<f64> {
        sched.forward_jump_batch(&rows(&self.x0, start, len), &rows(&self.noise, start, len), s)
    }

    fn cond(&self, start: usize, len: usize) -> Option<DMatrix<f64>> {
        self.y.as_ref().map(|y| rows(y, start, len))
    }

    fn require_cond(&self) -> Result<()> {
        if self.y.is_none() {
            return Err(invalid("pair_sampler", "sampler must yield conditions"));
        }
        Ok(())
    }
}

fn row_norms_sq(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().map(|r| r.norm_squared()).collect()
}

/// `∫ (β/2) E‖∇log p_eq − ∇log p‖²`, the entropy produced along the forward
/// path. The sampler's conditions, if any, are handed to the field.
pub fn total_entropy_path<F, D>(field: &F, sched: &DiffusionSchedule, data: &D, n_mc: usize, seed: u64) -> Result<EntropyReport>
where
    F: ScoreField + ?Sized,
    D: DataSampler + ?Sized,
{
    check_samples(n_mc)?;
    check_dim("field dimension", data.dim_x(), field.dim())?;
    let ps = PathSamples::draw(data, n_mc, seed)?;
    let parts = integrate_path(sched, n_mc, |s, a, len| {
        let xt = ps.jumped(sched, s, a, len);
        let score = field.score_batch(&xt, s, ps.cond(a, len).as_ref())?;
        let half_beta = 0.5 * sched.beta(s);
        Ok(row_norms_sq(&(score + &xt)).into_iter().map(|v| half_beta * v).collect())
    })?;
    Ok(report(sched, n_mc, seed, "total-entropy", vec![field.provenance()], parts))
}

/// `∫ (β/2) E‖ε(x̃_s, s [; y])‖²`.
pub fn neural_entropy<E, D>(field: &E, sched: &DiffusionSchedule, data: &D, n_mc: usize, seed: u64) -> Result<EntropyReport>
where
    E: EpsilonField + ?Sized,
    D: DataSampler + ?Sized,
{
    check_samples(n_mc)?;
    check_dim("field dimension", data.dim_x(), field.dim())?;
    let ps = PathSamples::draw(data, n_mc, seed)?;
    let parts = integrate_path(sched, n_mc, |s, a, len| {
        let xt = ps.jumped(sched, s, a, len);
        let eps = field.epsilon_batch(&xt, s, ps.cond(a, len).as_ref())?;
        let half_beta = 0.5 * sched.beta(s);
        Ok(row_norms_sq(&eps).into_iter().map(|v| half_beta * v).collect())
    })?;
    Ok(report(sched, n_mc, seed, "neural-entropy", vec![field.provenance()], parts))
}

/// Mutual information `E_Y ∫ (β/2) E‖score(x̃|y) − score(x̃)‖²`, with `x`
/// forward-jumped from its own `y`. The marginal field gets no condition.
pub fn minde_mi<C, M, D>(cond: &C, marg: &M, sched: &DiffusionSchedule, pairs: &D, n_mc: usize, seed: u64) -> Result<EntropyReport>
where
    C: ScoreField + ?Sized,
    M: ScoreField + ?Sized,
    D: DataSampler + ?Sized,
{
    check_samples(n_mc)?;
    check_dim("field dimensions", cond.dim(), marg.dim())?;
    check_dim("field dimension", pairs.dim_x(), cond.dim())?;
    let ps = PathSamples::draw(pairs, n_mc, seed)?;
    ps.require_cond()?;
    let parts = integrate_path(sched, n_mc, |s, a, len| {
        let xt = ps.jumped(sched, s, a, len);
        let c = cond.score_batch(&xt, s, ps.cond(a, len).as_ref())?;
        let m = marg.score_batch(&xt, s, None)?;
        let half_beta = 0.5 * sched.beta(s);
        Ok(row_norms_sq(&(c - m)).into_iter().map(|v| half_beta * v).collect())
    })?;
    Ok(report(sched, n_mc, seed, "minde", vec![cond.provenance(), marg.provenance()], parts))
}

/// [`minde_mi`] on ε-fields; the equilibrium terms cancel in the difference.
pub fn minde_mi_epsilon<C, M, D>(cond: &C, marg: &M, sched: &DiffusionSchedule, pairs: &D, n_mc: usize, seed: u64) -> Result<EntropyReport>
where
    C: EpsilonField + ?Sized,
    M: EpsilonField + ?Sized,
    D: DataSampler + ?Sized,
{
    check_samples(n_mc)?;
    check_dim("field dimensions", cond.dim(), marg.dim())?;
    check_dim("field dimension", pairs.dim_x(), cond.dim())?;
    let ps = PathSamples::draw(pairs, n_mc, seed)?;
    ps.require_cond()?;
    let parts = integrate_path(sched, n_mc, |s, a, len| {
        let xt = ps.jumped(sched, s, a, len);
        let c = cond.epsilon_batch(&xt, s, ps.cond(a, len).as_ref())?;
        let m = marg.epsilon_batch(&xt, s, None)?;
        let half_beta = 0.5 * sched.beta(s);
        Ok(row_norms_sq(&(c - m)).into_iter().map(|v| half_beta * v).collect())
    })?;
    Ok(report(sched, n_mc, seed, "minde-epsilon", vec![cond.provenance(), marg.provenance()], parts))
}

/// `KL(dist ‖ N(0, I))`.
pub fn total_entropy_closed_form(dist: &GaussianDist) -> Result<f64> {
    gaussian_kl(dist, &GaussianDist::standard(dist.dim()))
}

/// `E_Y KL(P(x|y) ‖ N(0, I))`.
pub fn total_entropy_closed_form_conditional(spec: &JointGaussianSpec) -> Result<f64> {
    let cond = linalg::cholesky(spec.conditional_cov(), "Σ_{X|Y}")?;
    let d = spec.dim_x() as f64;
    // E‖K y‖² = tr(Σ_X − Σ_{X|Y}), so the mean-shift and trace terms combine
    Ok(0.5 * (spec.cov_x().trace() - d - linalg::log_det(&cond)))
}

fn diffused_kl(cov: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    let c = linalg::blend_with_identity(cov, alpha);
    let chol = linalg::cholesky(&c, "diffused covariance")?;
    Ok(0.5 * (c.trace() - c.nrows() as f64 - linalg::log_det(&chol)))
}

/// The path integral over `[s_min, T]` in closed form:
/// `KL(P_{s_min} ‖ N(0,I)) − KL(P_T ‖ N(0,I))` for a zero-mean Gaussian.
pub fn total_entropy_window(cov: &DMatrix<f64>, sched: &DiffusionSchedule) -> Result<f64> {
    let a0 = sched.alpha(sched.s_min());
    let a1 = sched.alpha(sched.horizon);
    Ok(diffused_kl(cov, a0)? - diffused_kl(cov, a1)?)
}

/// Conditional counterpart of [`total_entropy_window`] averaged over `y`.
pub fn total_entropy_window_conditional(spec: &JointGaussianSpec, sched: &DiffusionSchedule) -> Result<f64> {
    let at = |s: f64| -> Result<f64> {
        let a = sched.alpha(s);
        let cond = linalg::blend_with_identity(spec.conditional_cov(), a);
        let chol = linalg::cholesky(&cond, "diffused conditional covariance")?;
        // the mean shift √α K y has second moment α tr(Σ_X − Σ_{X|Y})
        let shift = a * (spec.cov_x().trace() - spec.conditional_cov().trace());
        Ok(0.5 * (cond.trace() + shift - spec.dim_x() as f64 - linalg::log_det(&chol)))
    };
    Ok(at(sched.s_min())? - at(sched.horizon)?)
}

/// `I(X_{s_min}; Y) − I(X_T; Y)`, the exact value the path MI estimators target.
pub fn mi_window(spec: &JointGaussianSpec, sched: &DiffusionSchedule) -> Result<f64> {
    let at = |s: f64| -> Result<f64> {
        let a = sched.alpha(s);
        let m = linalg::cholesky(&linalg::blend_with_identity(spec.cov_x(), a), "Σ_s^X")?;
        let c = linalg::cholesky(&linalg::blend_with_identity(spec.conditional_cov(), a), "Σ_s^{X|Y}")?;
        Ok(0.5 * (linalg::log_det(&m) - linalg::log_det(&c)))
    };
    Ok(at(sched.s_min())? - at(sched.horizon)?)
}

/// Mutual information of the Gaussian with the sample covariance of `(x, y)`.
/// Exact for jointly Gaussian data up to sampling error; a lower bound otherwise.
pub fn gaussian_fit_mi(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    check_dim("paired rows", x.nrows(), y.nrows())?;
    let (dx, dy) = (x.ncols(), y.ncols());
    let mut joint = DMatrix::zeros(x.nrows(), dx + dy);
    joint.columns_mut(0, dx).copy_from(x);
    joint.columns_mut(dx, dy).copy_from(y);
    let cov = linalg::sample_covariance(&joint);
    let ld = |m: DMatrix<f64>, what: &str| -> Result<f64> { Ok(linalg::log_det(&linalg::cholesky(&m, what)?)) };
    let lx = ld(cov.view((0, 0), (dx, dx)).into_owned(), "sample Σ_X")?;
    let ly = ld(cov.view((dx, dx), (dy, dy)).into_owned(), "sample Σ_Y")?;
    let lj = ld(cov, "sample joint covariance")?;
    Ok(0.5 * (lx + ly - lj))
}

/// [`gaussian_fit_mi`] after forward-jumping `x` to time `s`:
/// `I(X_s; Y)` for the fitted Gaussian, the quantity path estimators see.
pub fn gaussian_fit_mi_at(x: &DMatrix<f64>, y: &DMatrix<f64>, sched: &DiffusionSchedule, s: f64) -> Result<f64> {
    check_dim("paired rows", x.nrows(), y.nrows())?;
    let (dx, dy) = (x.ncols(), y.ncols());
    let mut joint = DMatrix::zeros(x.nrows(), dx + dy);
    joint.columns_mut(0, dx).copy_from(x);
    joint.columns_mut(dx, dy).copy_from(y);
    let cov = linalg::sample_covariance(&joint);
    let cxx = cov.view((0, 0), (dx, dx)).into_owned();
    let cxy = cov.view((0, dx), (dx, dy)).into_owned();
    let cyy = linalg::cholesky(&cov.view((dx, dx), (dy, dy)).into_owned(), "sample Σ_Y")?;
    let mut cond = &cxx - &cxy * cyy.solve(&cxy.transpose());
    linalg::symmetrize(&mut cond);
    let a = sched.alpha(s);
    let ld = |m: &DMatrix<f64>, what: &str| -> Result<f64> {
        Ok(linalg::log_det(&linalg::cholesky(&linalg::blend_with_identity(m, a), what)?))
    };
    Ok(0.5 * (ld(&cxx, "diffused sample Σ_X")? - ld(&cond, "diffused sample Σ_{X|Y}")?))
}

/// Result of [`entropy_via_scores`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntropy {
    pub entropy: f64,
    pub stderr: f64,
    /// Entropy at the final time, added to the path integral.
    pub terminal: f64,
    pub path: EntropyReport,
}

/// Hutchinson estimate of `∇·score` per row with shared Rademacher probes.
fn hutchinson_divergence<F: ScoreField + ?Sized>(
    field: &F,
    x: &DMatrix<f64>,
    s: f64,
    cond: Option<&DMatrix<f64>>,
    probes: &[DMatrix<f64>],
) -> Result<Vec<f64>> {
    let mut div = vec![0.0; x.nrows()];
    for v in probes {
        let plus = field.score_batch(&(x + v * FD_STEP), s, cond)?;
        let minus = field.score_batch(&(x - v * FD_STEP), s, cond)?;
        let diff = (plus - minus) / (2.0 * FD_STEP);
        for (i, d) in div.iter_mut().enumerate() {
            *d += v.row(i).dot(&diff.row(i));
        }
    }
    let k = probes.len() as f64;
    Ok(div.into_iter().map(|d| d / k).collect())
}

/// Differential entropy of the data from its diffused scores:
/// `∫ E[(β/2)‖score‖² + βD/2 + β ∇·score] ds + H(P_T)`.
/// Exact divergences are used when the field provides them, otherwise a
/// Hutchinson estimate with Rademacher probes. `H(P_T)` is the cross-entropy
/// against `N(0, I)`, exact in the forward noise.
pub fn entropy_via_scores<F, D>(field: &F, sched: &DiffusionSchedule, data: &D, n_mc: usize, seed: u64) -> Result<ScoreEntropy>
where
    F: ScoreField + ?Sized,
    D: DataSampler + ?Sized,
{
    check_samples(n_mc)?;
    check_dim("field dimension", data.dim_x(), field.dim())?;
    let ps = PathSamples::draw(data, n_mc, seed)?;
    let dim = field.dim();
    let probe_seed = rng::child_seed(seed, "probes");
    let parts = integrate_path(sched, n_mc, |s, a, len| {
        let xt = ps.jumped(sched, s, a, len);
        let cond = ps.cond(a, len);
        let score = field.score_batch(&xt, s, cond.as_ref())?;
        let div = match field.divergence_batch(&xt, s, cond.as_ref()) {
            Some(d) => d?,
            None => {
                let probes: Vec<DMatrix<f64>> = (0..HUTCHINSON_PROBES)
                    .map(|k| {
                        DMatrix::from_fn(len, dim, |i, j| {
                            let mut r = rng::stream(probe_seed, ((a + i) * HUTCHINSON_PROBES + k) as u64);
                            let bits: u64 = r.gen();
                            if (bits >> (j % 64)) & 1 == 1 {
                                1.0
                            } else {
                                -1.0
                            }
                        })
                    })
                    .collect();
                hutchinson_divergence(field, &xt, s, cond.as_ref(), &probes)?
            }
        };
        let b = sched.beta(s);
        let norms = row_norms_sq(&score);
        Ok((0..len).map(|i| 0.5 * b * norms[i] + 0.5 * b * dim as f64 + b * div[i]).collect())
    })?;
    let path = report(sched, n_mc, seed, "entropy-via-scores", vec![field.provenance()], parts);
    let k = sched.kernel(sched.horizon);
    let second_moment = row_norms_sq(&ps.x0).iter().sum::<f64>() / n_mc as f64;
    let terminal = 0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * (k.alpha * second_moment + dim as f64 * k.sigma2);
    Ok(ScoreEntropy {
        entropy: path.total + terminal,
        stderr: path.stderr(),
        terminal,
        path,
    })
}

/// Decomposition `KL(N(0,Σ) ‖ N(0,I)) = Σ_i KL(N(0,Σ_ii) ‖ N(0,1)) + TC(Σ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedEntropy {
    pub marginal_kls: Vec<f64>,
    pub tc: f64,
    pub total: f64,
}

pub fn factorized_entropy_report(cov: &DMatrix<f64>) -> Result<FactorizedEntropy> {
    let total = total_entropy_closed_form(&GaussianDist::zero_mean(cov.clone())?)?;
    let marginal_kls = cov.diagonal().iter().map(|&v| 0.5 * (v - 1.0 - v.ln())).collect();
    let tc = total_correlation_gaussian(cov)?;
    Ok(FactorizedEntropy { marginal_kls, tc, total })
}

/// Posterior mean `E[x | x̃_s]` on a batch.
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    fn denoise_batch(&self, x_t: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>>;
}

impl Denoiser for DiffusedGaussian {
    fn dim(&self) -> usize {
        self.spec().dim_x()
    }

    fn denoise_batch(&self, x_t: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
        self.denoised_mean_batch(x_t, s)
    }
}

/// Denoiser from a marginal score: `(x̃ + Σ score) / μ`.
pub struct TweedieDenoiser<S> {
    pub field: S,
    pub sched: DiffusionSchedule,
}

impl<S: ScoreField> Denoiser for TweedieDenoiser<S> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn denoise_batch(&self, x_t: &DMatrix<f64>, s: f64) -> Result<DMatrix<f64>> {
        let k = self.sched.kernel(s);
        let score = self.field.score_batch(x_t, s, None)?;
        Ok((x_t + score * k.sigma2) / k.mu)
    }
}

/// `∫ B(s) E‖x̂(x̃_s) − x‖² ds` with `B = (β/2) μ²/Σ²`, which equals
/// `−log p(x)` up to an additive constant.
pub fn log_density_denoised_means<N: Denoiser + ?Sized>(
    x: &DVector<f64>,
    sched: &DiffusionSchedule,
    denoiser: &N,
    n_mc: usize,
    seed: u64,
) -> Result<Estimate> {
    check_samples(n_mc)?;
    check_dim("test point", denoiser.dim(), x.len())?;
    let x0 = DMatrix::from_fn(n_mc, x.len(), |_, j| x[j]);
    let noise = noise_rows(n_mc, x.len(), rng::child_seed(seed, "noise"));
    let parts = integrate_path(sched, n_mc, |s, a, len| {
        let k = sched.kernel(s);
        let xt = sched.forward_jump_batch(&rows(&x0, a, len), &rows(&noise, a, len), s);
        let xhat = denoiser.denoise_batch(&xt, s)?;
        let b = 0.5 * sched.beta(s) * k.alpha / (k.sigma2 * k.sigma2);
        Ok(row_norms_sq(&(xhat - rows(&x0, a, len))).into_iter().map(|v| b * v).collect())
    })?;
    Ok(Estimate {
        value: *parts.2.last().expect("grid has nodes"),
        stderr: *parts.3.last().expect("grid has nodes"),
    })
}
