//! Linear joint-Gaussian data model `Y = A X + ε` and its closed forms.
//!
//! `X ~ N(0, Σ_X)` with `Σ_X = H Hᵀ + δ I`, `ε ~ N(0, σ_ε² I)`. Everything the
//! estimators are checked against (conditionals, mutual information, KL
//! divergences, total correlation) is computed here in closed form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{self, cholesky, log_det};
use crate::rng;

/// Above this value the total correlation is reported as `+∞`.
const TC_OVERFLOW_LOG_DET: f64 = -690.775_527_898_213_7; // ln(1e-300)

/// A Gaussian with explicit mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim("gaussian covariance rows", mean.len(), cov.nrows())?;
        check_dim("gaussian covariance cols", mean.len(), cov.ncols())?;
        if !linalg::is_symmetric(&cov, 1e-10) {
            return Err(invalid("cov", "covariance must be symmetric"));
        }
        Ok(Self { mean, cov })
    }

    pub fn zero_mean(cov: DMatrix<f64>) -> Result<Self> {
        Self::new(DVector::zeros(cov.nrows()), cov)
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Differential entropy `½ log det(2πe Σ)` in nats.
    pub fn entropy(&self) -> Result<f64> {
        let chol = cholesky(&self.cov, "covariance")?;
        let d = self.dim() as f64;
        Ok(0.5 * (d * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + log_det(&chol)))
    }
}

/// Parameters and derived blocks of the joint-Gaussian model.
#[derive(Debug, Clone)]
pub struct JointGaussianSpec {
    dim_x: usize,
    dim_y: usize,
    mixing: DMatrix<f64>,
    cov_x: DMatrix<f64>,
    noise_std: f64,
    jitter: f64,
    seed: u64,
    // derived
    cov_y: DMatrix<f64>,
    cov_xy: DMatrix<f64>,
    gain: DMatrix<f64>,
    cond_cov: DMatrix<f64>,
    chol_x: DMatrix<f64>,
}

/// JSON form of a spec. Matrices are row-major; when present they replace the
/// seeded draws so an experiment can be replayed exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecDocument {
    pub dim_x: usize,
    pub dim_y: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub jitter: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_x: Option<Vec<Vec<f64>>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, name: &'static str) -> Result<DMatrix<f64>> {
    check_dim(name, nrows, rows.len())?;
    for r in rows {
        check_dim(name, ncols, r.len())?;
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Draws `A` (D_Y×D_X) and `H` (D_X×D_X) row-major from one seeded stream and
/// assembles `Σ_X = H Hᵀ + δ I`.
pub fn build_joint_spec(
    dim_x: usize,
    dim_y: usize,
    noise_std: f64,
    jitter: f64,
    seed: u64,
) -> Result<JointGaussianSpec> {
    validate_scalars(dim_x, dim_y, noise_std)?;
    if !(jitter > 0.0 && jitter.is_finite()) {
        return Err(invalid("jitter", format!("must be positive, got {jitter}")));
    }
    let mut rng = rng::seeded(seed);
    let mut mixing = DMatrix::zeros(dim_y, dim_x);
    for i in 0..dim_y {
        for j in 0..dim_x {
            mixing[(i, j)] = rng::normal(&mut rng);
        }
    }
    let scale = (dim_x as f64).sqrt();
    let mut h = DMatrix::zeros(dim_x, dim_x);
    for i in 0..dim_x {
        for j in 0..dim_x {
            h[(i, j)] = rng::normal(&mut rng) / scale;
        }
    }
    let mut cov_x = &h * h.transpose();
    for i in 0..dim_x {
        cov_x[(i, i)] += jitter;
    }
    linalg::symmetrize(&mut cov_x);
    JointGaussianSpec::assemble(mixing, cov_x, noise_std, jitter, seed)
}

fn validate_scalars(dim_x: usize, dim_y: usize, noise_std: f64) -> Result<()> {
    if dim_x == 0 {
        return Err(invalid("dim_x", "must be at least 1"));
    }
    if dim_y == 0 {
        return Err(invalid("dim_y", "must be at least 1"));
    }
    if !(noise_std > 0.0 && noise_std.is_finite()) {
        return Err(invalid("noise_std", format!("must be positive, got {noise_std}")));
    }
    Ok(())
}

impl JointGaussianSpec {
    /// Spec from explicit `A` and `Σ_X` (seed 0, jitter 0 recorded).
    pub fn from_matrices(mixing: DMatrix<f64>, cov_x: DMatrix<f64>, noise_std: f64) -> Result<Self> {
        validate_scalars(mixing.ncols(), mixing.nrows(), noise_std)?;
        Self::assemble(mixing, cov_x, noise_std, 0.0, 0)
    }

    /// The scalar model `Y = a X + ε` with `X ~ N(0, σ_X²)`.
    pub fn scalar(a: f64, sigma_x: f64, noise_std: f64) -> Result<Self> {
        if !(sigma_x > 0.0) {
            return Err(invalid("sigma_x", "must be positive"));
        }
        Self::from_matrices(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, sigma_x * sigma_x),
            noise_std,
        )
    }

    fn assemble(mixing: DMatrix<f64>, cov_x: DMatrix<f64>, noise_std: f64, jitter: f64, seed: u64) -> Result<Self> {
        let dim_x = mixing.ncols();
        let dim_y = mixing.nrows();
        check_dim("cov_x rows", dim_x, cov_x.nrows())?;
        check_dim("cov_x cols", dim_x, cov_x.ncols())?;
        if !linalg::is_symmetric(&cov_x, 1e-12) {
            return Err(invalid("cov_x", "must be symmetric"));
        }
        let chol_x = cholesky(&cov_x, "Σ_X")?;
        let cov_xy = &cov_x * mixing.transpose();
        let mut cov_y = &mixing * &cov_xy;
        for i in 0..dim_y {
            cov_y[(i, i)] += noise_std * noise_std;
        }
        linalg::symmetrize(&mut cov_y);
        let chol_y = cholesky(&cov_y, "Σ_Y").map_err(|_| Error::Singular("Σ_Y".into()))?;
        // K = Σ_XY Σ_Y⁻¹  <=>  Σ_Y Kᵀ = Σ_XYᵀ
        let mut gain_t = cov_xy.transpose();
        chol_y.solve_mut(&mut gain_t);
        let gain = gain_t.transpose();
        let mut cond_cov = &cov_x - &gain * cov_xy.transpose();
        linalg::symmetrize(&mut cond_cov);
        Ok(Self {
            dim_x,
            dim_y,
            chol_x: chol_x.l(),
            mixing,
            cov_x,
            noise_std,
            jitter,
            seed,
            cov_y,
            cov_xy,
            gain,
            cond_cov,
        })
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }
    pub fn dim_y(&self) -> usize {
        self.dim_y
    }
    pub fn mixing(&self) -> &DMatrix<f64> {
        &self.mixing
    }
    pub fn cov_x(&self) -> &DMatrix<f64> {
        &self.cov_x
    }
    pub fn cov_y(&self) -> &DMatrix<f64> {
        &self.cov_y
    }
    /// `Σ_XY = Σ_X Aᵀ` (D_X×D_Y).
    pub fn cov_xy(&self) -> &DMatrix<f64> {
        &self.cov_xy
    }
    /// Regression gain `Σ_XY Σ_Y⁻¹`, so that `E[X|y] = gain · y`.
    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }
    /// `Σ_{X|Y}`, independent of `y`.
    pub fn conditional_cov(&self) -> &DMatrix<f64> {
        &self.cond_cov
    }
    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }
    pub fn jitter(&self) -> f64 {
        self.jitter
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same `A` and `Σ_X` with a different noise level.
    pub fn with_noise_std(&self, noise_std: f64) -> Result<Self> {
        validate_scalars(self.dim_x, self.dim_y, noise_std)?;
        Self::assemble(self.mixing.clone(), self.cov_x.clone(), noise_std, self.jitter, self.seed)
    }

    /// `[[Σ_X, Σ_X Aᵀ], [A Σ_X, A Σ_X Aᵀ + Σ_ε]]`.
    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let (dx, dy) = (self.dim_x, self.dim_y);
        let mut out = DMatrix::zeros(dx + dy, dx + dy);
        out.view_mut((0, 0), (dx, dx)).copy_from(&self.cov_x);
        out.view_mut((0, dx), (dx, dy)).copy_from(&self.cov_xy);
        out.view_mut((dx, 0), (dy, dx)).copy_from(&self.cov_xy.transpose());
        out.view_mut((dx, dx), (dy, dy)).copy_from(&self.cov_y);
        out
    }

    /// `X | Y = y ~ N(Σ_XY Σ_Y⁻¹ y, Σ_X − Σ_XY Σ_Y⁻¹ Σ_XYᵀ)`.
    pub fn conditional_x_given_y(&self, y: &DVector<f64>) -> Result<GaussianDist> {
        check_dim("conditioning vector", self.dim_y, y.len())?;
        Ok(GaussianDist {
            mean: &self.gain * y,
            cov: self.cond_cov.clone(),
        })
    }

    pub fn marginal_x(&self) -> GaussianDist {
        GaussianDist {
            mean: DVector::zeros(self.dim_x),
            cov: self.cov_x.clone(),
        }
    }

    pub fn marginal_y(&self) -> GaussianDist {
        GaussianDist {
            mean: DVector::zeros(self.dim_y),
            cov: self.cov_y.clone(),
        }
    }

    /// `I(X;Y) = ½ log(det Σ_Y / det Σ_ε)` in nats.
    ///
    /// Evaluated as `½ Σ ln(1 + λ_i)` over the eigenvalues of the
    /// signal-to-noise matrix `A Σ_X Aᵀ / σ_ε²`, which stays accurate when the
    /// dependence is weak and the two determinants nearly cancel.
    pub fn analytic_mi(&self) -> Result<f64> {
        let g = &self.mixing * &self.chol_x / self.noise_std;
        let snr = if self.dim_y <= self.dim_x { &g * g.transpose() } else { g.transpose() * &g };
        let eig = nalgebra::SymmetricEigen::new(snr);
        Ok(0.5 * eig.eigenvalues.iter().map(|&v| v.max(0.0).ln_1p()).sum::<f64>())
    }

    /// Draws `n` pairs `x ~ N(0, Σ_X)`, `y = A x + ε`; one sample per row.
    /// Row `i` uses stream `i` of `seed`.
    pub fn sample_pairs(&self, n: usize, seed: u64) -> Result<PairSamples> {
        if n == 0 {
            return Err(invalid("n", "must be at least 1"));
        }
        let (dx, dy) = (self.dim_x, self.dim_y);
        let mut z = DMatrix::zeros(n, dx);
        let mut eps = DMatrix::zeros(n, dy);
        for i in 0..n {
            let mut rng = rng::stream(seed, i as u64);
            for j in 0..dx {
                z[(i, j)] = rng::normal(&mut rng);
            }
            for j in 0..dy {
                eps[(i, j)] = rng::normal(&mut rng);
            }
        }
        let x = z * self.chol_x.transpose();
        let y = &x * self.mixing.transpose() + eps * self.noise_std;
        Ok(PairSamples { x, y })
    }

    pub fn to_document(&self, include_matrices: bool) -> SpecDocument {
        SpecDocument {
            dim_x: self.dim_x,
            dim_y: self.dim_y,
            seed: self.seed,
            noise_std: self.noise_std,
            jitter: self.jitter,
            mixing: include_matrices.then(|| to_rows(&self.mixing)),
            cov_x: include_matrices.then(|| to_rows(&self.cov_x)),
        }
    }

    pub fn from_document(doc: &SpecDocument) -> Result<Self> {
        match (&doc.mixing, &doc.cov_x) {
            (Some(a), Some(c)) => {
                validate_scalars(doc.dim_x, doc.dim_y, doc.noise_std)?;
                let mixing = from_rows(a, doc.dim_y, doc.dim_x, "mixing")?;
                let cov_x = from_rows(c, doc.dim_x, doc.dim_x, "cov_x")?;
                Self::assemble(mixing, cov_x, doc.noise_std, doc.jitter, doc.seed)
            }
            (None, None) => build_joint_spec(doc.dim_x, doc.dim_y, doc.noise_std, doc.jitter, doc.seed),
            _ => Err(invalid("spec", "mixing and cov_x must be given together")),
        }
    }
}

/// Samples of `(X, Y)`, one pair per row.
#[derive(Debug, Clone)]
pub struct PairSamples {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl PairSamples {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Rows `[x, y]` stacked side by side.
    pub fn joint(&self) -> DMatrix<f64> {
        let (n, dx, dy) = (self.x.nrows(), self.x.ncols(), self.y.ncols());
        let mut out = DMatrix::zeros(n, dx + dy);
        out.view_mut((0, 0), (n, dx)).copy_from(&self.x);
        out.view_mut((0, dx), (n, dy)).copy_from(&self.y);
        out
    }
}

/// `I = ½ log(1 + a²σ_X²/σ_ε²)` for the scalar model.
pub fn mi_1d(a: f64, sigma_x: f64, sigma_eps: f64) -> Result<f64> {
    if !(sigma_x > 0.0) || !(sigma_eps > 0.0) {
        return Err(invalid("sigma", "standard deviations must be positive"));
    }
    Ok(0.5 * (a * a * sigma_x * sigma_x / (sigma_eps * sigma_eps)).ln_1p())
}

/// `KL(p ‖ q)` between Gaussians, in nats. A singular `p` has infinite
/// divergence from a nonsingular `q`.
pub fn gaussian_kl(p: &GaussianDist, q: &GaussianDist) -> Result<f64> {
    check_dim("kl dimension", q.dim(), p.dim())?;
    let chol_q = cholesky(&q.cov, "q covariance").map_err(|_| Error::Singular("q covariance".into()))?;
    let chol_p = match cholesky(&p.cov, "p covariance") {
        Ok(c) => c,
        Err(_) => return Ok(f64::INFINITY),
    };
    let k = p.dim() as f64;
    let trace = chol_q.solve(&p.cov).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&chol_q.solve(&diff));
    let kl = 0.5 * (trace + maha - k + log_det(&chol_q) - log_det(&chol_p));
    Ok(kl.max(0.0))
}

/// `TC = ½ (Σ_k log Σ_kk − log det Σ)`: KL of the joint from the product of its
/// marginals. Numerically singular (but PSD) input returns `+∞`.
pub fn total_correlation_gaussian(cov: &DMatrix<f64>) -> Result<f64> {
    if !linalg::is_symmetric(cov, 1e-10) {
        return Err(Error::NotPositiveDefinite("covariance (asymmetric)".into()));
    }
    let n = cov.nrows();
    let diag: Vec<f64> = (0..n).map(|i| cov[(i, i)]).collect();
    if diag.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::NotPositiveDefinite("covariance (non-positive variance)".into()));
    }
    // Work on the correlation matrix so the overflow threshold is scale-free.
    let corr = DMatrix::from_fn(n, n, |i, j| cov[(i, j)] / (diag[i] * diag[j]).sqrt());
    if let Ok(chol) = cholesky(&corr, "correlation") {
        let ld = log_det(&chol);
        if ld > TC_OVERFLOW_LOG_DET {
            return Ok((-0.5 * ld).max(0.0));
        }
        return Ok(f64::INFINITY);
    }
    let min_eig = corr.symmetric_eigen().eigenvalues.min();
    if min_eig >= -1e-10 {
        Ok(f64::INFINITY)
    } else {
        Err(Error::NotPositiveDefinite(format!("covariance (eigenvalue {min_eig:e})")))
    }
}
