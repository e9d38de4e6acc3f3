//! Denoising entropy matching.
//!
//! For a clean sample `x`, time `s ~ U(s_min, T)` and `x̃ = μx + √Σ η`, the
//! per-example loss is
//!
//! ```text
//! λ(s) ‖ −x̃ + (x̃ − μx)/Σ + ε_θ(x̃, s; y) ‖²
//! ```
//!
//! whose pointwise minimizer is `ε★ = x̃ + ∇log p(x̃, s | y)`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{check_dim, invalid, Error, Result};
use crate::nn::{adam_step, net_init, AdamConfig, NetInput, NetworkConfig, NetworkParams, OptimizerState};
use crate::rng::{self, Rng};
use crate::sampler::{EpsilonField, EpsilonFromScore, Provenance, ScoreField, ScoreFromEpsilon};

/// Losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Time weighting `λ(s)` of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `λ = 1`.
    Unit,
    /// `λ = β(s)/2`.
    HalfSigmaSquared,
    /// `λ = Σ(s)`; with a noise-scaled output this is the plain noise-prediction loss.
    KernelVariance,
}

impl Weighting {
    pub fn lambda(self, sched: &DiffusionSchedule, s: f64) -> f64 {
        match self {
            Weighting::Unit => 1.0,
            Weighting::HalfSigmaSquared => 0.5 * sched.beta(s),
            Weighting::KernelVariance => sched.kernel(s).sigma2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Number of optimizer steps.
    pub steps: usize,
    pub weighting: Weighting,
    /// Probability of replacing an example's condition by the null embedding.
    pub label_drop_prob: f64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub network: NetworkConfig,
    /// Loss-log interval in steps.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    100
}

impl TrainingConfig {
    pub fn new(network: NetworkConfig, steps: usize, seed: u64) -> Self {
        Self {
            batch_size: 256,
            steps,
            weighting: Weighting::Unit,
            label_drop_prob: 0.1,
            seed,
            optimizer: AdamConfig::default(),
            network,
            log_every: default_log_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.label_drop_prob) {
            return Err(invalid("label_drop_prob", "must lie in [0, 1]"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(invalid("optimizer", "need lr > 0, betas in [0, 1), eps > 0"));
        }
        if self.log_every == 0 {
            return Err(invalid("log_every", "must be at least 1"));
        }
        self.network.validate()
    }
}

/// One training minibatch with its diffusion noise.
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    pub x0: DMatrix<f64>,
    pub cond: Option<DMatrix<f64>>,
    pub dropped: Vec<bool>,
    pub s: Vec<f64>,
    pub noise: DMatrix<f64>,
    pub x_t: DMatrix<f64>,
}

impl NoisyBatch {
    /// Forward-jumps `x0` at the given times with the given standard-normal noise.
    pub fn new(
        sched: &DiffusionSchedule,
        x0: DMatrix<f64>,
        cond: Option<DMatrix<f64>>,
        dropped: Vec<bool>,
        s: Vec<f64>,
        noise: DMatrix<f64>,
    ) -> Result<Self> {
        if x0.nrows() == 0 {
            return Err(invalid("batch", "empty batch"));
        }
        check_dim("batch times", x0.nrows(), s.len())?;
        check_dim("batch drop mask", x0.nrows(), dropped.len())?;
        check_dim("batch noise", x0.len(), noise.len())?;
        if let Some(c) = &cond {
            check_dim("batch condition rows", x0.nrows(), c.nrows())?;
        }
        let s_min = sched.s_min();
        for &si in &s {
            sched.check_time(si)?;
            if si < s_min {
                return Err(invalid("s", format!("{si} is below the cutoff {s_min}")));
            }
        }
        let mut x_t = x0.clone();
        for i in 0..x0.nrows() {
            let k = sched.kernel(s[i]);
            let sd = k.sigma2.sqrt();
            for j in 0..x0.ncols() {
                x_t[(i, j)] = k.mu * x0[(i, j)] + sd * noise[(i, j)];
            }
        }
        Ok(Self {
            x0,
            cond,
            dropped,
            s,
            noise,
            x_t,
        })
    }

    /// Draws times, noise and drop flags for the given clean rows.
    pub fn sample(
        sched: &DiffusionSchedule,
        x0: DMatrix<f64>,
        cond: Option<DMatrix<f64>>,
        label_drop_prob: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n = x0.nrows();
        let (lo, hi) = (sched.s_min(), sched.horizon);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
        let noise = DMatrix::from_fn(n, x0.ncols(), |_, _| rng::normal(rng));
        let dropped: Vec<bool> = (0..n).map(|_| label_drop_prob > 0.0 && rng.gen::<f64>() < label_drop_prob).collect();
        Self::new(sched, x0, cond, dropped, s, noise)
    }

    fn input(&self) -> NetInput<'_> {
        NetInput {
            x: &self.x_t,
            s: &self.s,
            cond: self.cond.as_ref(),
            dropped: Some(&self.dropped),
        }
    }

    /// `∇log p_eq(x̃) − ∇log p(x̃ | x) = −x̃ + η/√Σ`, row-wise.
    pub fn target_offset(&self, sched: &DiffusionSchedule) -> DMatrix<f64> {
        let mut t = -&self.x_t;
        for i in 0..t.nrows() {
            let inv_sd = 1.0 / sched.kernel(self.s[i]).sigma2.sqrt();
            for j in 0..t.ncols() {
                t[(i, j)] += self.noise[(i, j)] * inv_sd;
            }
        }
        t
    }
}

/// Batch-mean loss and its gradient w.r.t. ε, given the ε output.
pub fn em_loss_from_output(batch: &NoisyBatch, sched: &DiffusionSchedule, weighting: Weighting, eps: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    check_dim("ε rows", batch.x_t.nrows(), eps.nrows())?;
    check_dim("ε cols", batch.x_t.ncols(), eps.ncols())?;
    let n = eps.nrows() as f64;
    let mut resid = batch.target_offset(sched) + eps;
    let mut loss = 0.0;
    for i in 0..resid.nrows() {
        let lam = weighting.lambda(sched, batch.s[i]);
        let mut row = resid.row_mut(i);
        loss += lam * row.norm_squared();
        row *= 2.0 * lam / n;
    }
    Ok((loss / n, resid))
}

/// Monte-Carlo denoising entropy-matching loss of a network on one batch of
/// clean rows, with fresh times, noise and drop flags drawn from `rng`.
pub fn em_denoising_loss(
    params: &NetworkParams,
    x: &DMatrix<f64>,
    y: Option<&DMatrix<f64>>,
    sched: &DiffusionSchedule,
    cfg: &TrainingConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let batch = NoisyBatch::sample(sched, x.clone(), y.cloned(), cfg.label_drop_prob, rng)?;
    let eps = params.forward_batch(&batch.input())?;
    Ok(em_loss_from_output(&batch, sched, cfg.weighting, &eps)?.0)
}

/// The same loss for any ε-field on a prepared batch (no label dropping).
pub fn em_loss_for_field<E: EpsilonField + ?Sized>(field: &E, batch: &NoisyBatch, sched: &DiffusionSchedule, weighting: Weighting) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..batch.x_t.nrows() {
        let x = batch.x_t.rows(i, 1).into_owned();
        let c = batch.cond.as_ref().map(|c| c.rows(i, 1).into_owned());
        let eps = field.epsilon_batch(&x, batch.s[i], c.as_ref())?;
        let row = NoisyBatch {
            x0: batch.x0.rows(i, 1).into_owned(),
            cond: None,
            dropped: vec![false],
            s: vec![batch.s[i]],
            noise: batch.noise.rows(i, 1).into_owned(),
            x_t: x,
        };
        total += em_loss_from_output(&row, sched, weighting, &eps)?.0;
    }
    Ok(total / batch.x_t.nrows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Mean batch loss over the preceding logging window.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub log: Vec<LossRecord>,
    pub final_loss: f64,
}

fn gather_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

/// Trains an ε-network on `(x, y)` pairs, or on `x` alone when `y` is `None`.
/// With `label_drop_prob > 0` one network learns both the conditional and the
/// null-conditioned (marginal) field.
pub fn train_conditional(x: &DMatrix<f64>, y: Option<&DMatrix<f64>>, sched: &DiffusionSchedule, cfg: &TrainingConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    sched.validate()?;
    if x.nrows() == 0 {
        return Err(invalid("dataset", "empty dataset"));
    }
    check_dim("training data", cfg.network.data_dim, x.ncols())?;
    match y {
        Some(y) => {
            check_dim("training condition", cfg.network.cond_dim, y.ncols())?;
            check_dim("training pairs", x.nrows(), y.nrows())?;
        }
        None if cfg.network.cond_dim > 0 && cfg.label_drop_prob < 1.0 => {
            return Err(invalid("dataset", "conditional network needs conditions"));
        }
        None => {}
    }
    let mut params = net_init(cfg.network.clone(), rng::child_seed(cfg.seed, "init"))?;
    let mut opt = OptimizerState::new(&params, cfg.optimizer);
    let mut r = rng::seeded(rng::child_seed(cfg.seed, "batches"));
    let mut log = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0;
    let mut last = f64::NAN;
    for step in 1..=cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| r.gen_range(0..x.nrows())).collect();
        let xb = gather_rows(x, &idx);
        let yb = y.map(|y| gather_rows(y, &idx));
        let batch = NoisyBatch::sample(sched, xb, yb, cfg.label_drop_prob, &mut r)?;
        let (loss, grads) = params
            .loss_and_grad(&batch.input(), |eps| em_loss_from_output(&batch, sched, cfg.weighting, eps))
            .map_err(|e| match e {
                Error::Divergence { loss, .. } => Error::Divergence { step, loss },
                other => other,
            })?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence { step, loss });
        }
        adam_step(&mut params, &grads, &mut opt)?;
        if !params.is_finite() {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        window += loss;
        window_len += 1;
        last = loss;
        if step % cfg.log_every == 0 || step == cfg.steps {
            log.push(LossRecord {
                step,
                loss: window / window_len as f64,
            });
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        final_loss: last,
    })
}

/// A trained network viewed as an ε-field.
///
/// `Conditional` uses the supplied condition (null embedding when absent);
/// `Null` always uses the null embedding.
#[derive(Debug, Clone)]
pub struct LearnedField {
    params: Arc<NetworkParams>,
    null_only: bool,
}

impl LearnedField {
    pub fn new(params: Arc<NetworkParams>) -> Self {
        Self { params, null_only: false }
    }

    /// The same network, always routed through the null embedding.
    pub fn null_conditioned(&self) -> Self {
        Self {
            params: Arc::clone(&self.params),
            null_only: true,
        }
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }
}

impl EpsilonField for LearnedField {
    fn dim(&self) -> usize {
        self.params.config.data_dim
    }

    fn provenance(&self) -> Provenance {
        Provenance::Learned
    }

    fn epsilon_batch(&self, x: &DMatrix<f64>, s: f64, condition: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        let times = vec![s; x.nrows()];
        let cond = if self.null_only || self.params.config.cond_dim == 0 {
            None
        } else {
            condition
        };
        let broadcast;
        let cond = match cond {
            Some(c) if c.nrows() == 1 && x.nrows() > 1 => {
                broadcast = DMatrix::from_fn(x.nrows(), c.ncols(), |_, j| c[(0, j)]);
                Some(&broadcast)
            }
            other => other,
        };
        self.params.forward_batch(&NetInput::new(x, &times, cond))
    }
}

/// Score view `−x + ε_θ` of a trained network.
pub fn score_from_entropy_param(params: Arc<NetworkParams>) -> ScoreFromEpsilon<LearnedField> {
    ScoreFromEpsilon(LearnedField::new(params))
}

/// ε view `score + x` of any score field.
pub fn em_from_score_param<S: ScoreField>(field: S, sched: &DiffusionSchedule) -> Result<EpsilonFromScore<S>> {
    sched.validate()?;
    Ok(EpsilonFromScore(field))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OutputScaling;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::default()
    }

    fn tiny_net(data_dim: usize, cond_dim: usize) -> NetworkConfig {
        NetworkConfig {
            data_dim,
            cond_dim,
            hidden: vec![16, 16],
            time_frequencies: 4,
            cond_embed: 4,
            horizon: 1.0,
            output: OutputScaling::Direct,
        }
    }

    #[test]
    fn rejects_times_below_cutoff() {
        let sc = sched();
        let x = DMatrix::zeros(1, 1);
        let r = NoisyBatch::new(&sc, x, None, vec![false], vec![sc.s_min() / 2.0], DMatrix::zeros(1, 1));
        assert!(r.is_err());
    }

    #[test]
    fn single_point_loss_by_hand() {
        let sc = sched();
        let s = 0.3;
        let k = sc.kernel(s);
        let x0 = DMatrix::from_row_slice(1, 2, &[0.5, -1.0]);
        let eta = DMatrix::from_row_slice(1, 2, &[0.2, 0.7]);
        let b = NoisyBatch::new(&sc, x0, None, vec![false], vec![s], eta).unwrap();
        let eps = DMatrix::from_row_slice(1, 2, &[0.1, -0.4]);
        let (loss, grad) = em_loss_from_output(&b, &sc, Weighting::Unit, &eps).unwrap();
        let mut by_hand = 0.0;
        for (x, e, n) in [(0.5, 0.1, 0.2), (-1.0, -0.4, 0.7)] {
            let xt = k.mu * x + k.sigma2.sqrt() * n;
            let r = -xt + (xt - k.mu * x) / k.sigma2 + e;
            by_hand += r * r;
        }
        assert!((loss - by_hand).abs() < 1e-12 * by_hand);
        // gradient is 2·residual for a single example
        let r0 = -b.x_t[(0, 0)] + 0.2 / k.sigma2.sqrt() + 0.1;
        assert!((grad[(0, 0)] - 2.0 * r0).abs() < 1e-12);
    }

    #[test]
    fn weightings() {
        let sc = sched();
        assert_eq!(Weighting::Unit.lambda(&sc, 0.4), 1.0);
        assert!((Weighting::HalfSigmaSquared.lambda(&sc, 0.4) - sc.beta(0.4) / 2.0).abs() < 1e-15);
        assert_eq!(Weighting::KernelVariance.lambda(&sc, 0.4), sc.kernel(0.4).sigma2);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainingConfig::new(tiny_net(1, 0), 10, 0);
        assert!(c.validate().is_ok());
        c.label_drop_prob = 1.5;
        assert!(c.validate().is_err());
        c.label_drop_prob = 0.1;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let sc = sched();
        let mut cfg = TrainingConfig::new(tiny_net(2, 1), 20, 4);
        cfg.batch_size = 8;
        let mut r = rng::seeded(1);
        let x = DMatrix::from_fn(50, 2, |_, _| rng::normal(&mut r));
        let y = DMatrix::from_fn(50, 1, |_, _| rng::normal(&mut r));
        let a = train_conditional(&x, Some(&y), &sc, &cfg).unwrap();
        let b = train_conditional(&x, Some(&y), &sc, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.len(), 1);
    }

    #[test]
    fn full_label_drop_ignores_condition() {
        let sc = sched();
        let mut cfg = TrainingConfig::new(tiny_net(1, 1), 30, 2);
        cfg.batch_size = 8;
        cfg.label_drop_prob = 1.0;
        let mut r = rng::seeded(3);
        let x = DMatrix::from_fn(40, 1, |_, _| rng::normal(&mut r));
        let y = x.clone();
        let out = train_conditional(&x, Some(&y), &sc, &cfg).unwrap();
        let f = LearnedField::new(Arc::new(out.params));
        let pts = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 2.0]);
        let a = f.epsilon_batch(&pts, 0.5, None).unwrap();
        let b = f.null_conditioned().epsilon_batch(&pts, 0.5, Some(&DMatrix::from_element(3, 1, 5.0))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conversions_round_trip() {
        use crate::sampler::EquilibriumScore;
        let sc = sched();
        let eps = em_from_score_param(EquilibriumScore { dim: 3 }, &sc).unwrap();
        let mut r = rng::seeded(8);
        let x = DMatrix::from_fn(100, 3, |_, _| rng::normal(&mut r));
        // ε of the equilibrium score is zero
        assert!(eps.epsilon_batch(&x, 0.5, None).unwrap().iter().all(|v| *v == 0.0));
        let back = ScoreFromEpsilon(eps);
        let s = back.score_batch(&x, 0.5, None).unwrap();
        assert!((s + &x).amax() < 1e-15);
    }
}
