//! Fully-connected ε-network with time and condition embeddings.
//!
//! Input row = `[x, sin/cos(f_k s/T)…, P(c)]` where `P` is a linear projection
//! of the condition input `c = [y, 1]`, or of the learned null embedding when
//! the condition is dropped. Hidden layers use SiLU; the output layer is
//! linear. With [`OutputScaling::NoiseScaled`] the raw output `r` is read as a
//! noise prediction and `ε = x − r / √Σ(s)`.
//!
//! Gradients are exact reverse-mode derivatives of a caller-provided loss on
//! the ε output.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{check_dim, invalid, Error, Result};
use crate::rng;

/// How the last linear layer maps to ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OutputScaling {
    /// `ε = r`.
    Direct,
    /// `ε = x − r / √Σ(s)` under the given schedule.
    NoiseScaled { schedule: DiffusionSchedule },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub data_dim: usize,
    /// Dimension of the condition `y`; 0 for an unconditional network.
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    /// Number of sinusoidal frequencies (two features each).
    pub time_frequencies: usize,
    /// Width of the condition projection.
    pub cond_embed: usize,
    pub horizon: f64,
    pub output: OutputScaling,
}

impl NetworkConfig {
    /// Three hidden layers of width 256, 16 frequencies, 32-wide condition projection.
    pub fn standard(data_dim: usize, cond_dim: usize, horizon: f64) -> Self {
        Self {
            data_dim,
            cond_dim,
            hidden: vec![256, 256, 256],
            time_frequencies: 16,
            cond_embed: 32,
            horizon,
            output: OutputScaling::Direct,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(invalid("data_dim", "must be at least 1"));
        }
        if self.hidden.is_empty() {
            return Err(invalid("hidden", "need at least one hidden layer"));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(invalid("hidden", "zero-width layer"));
        }
        if self.cond_dim > 0 && self.cond_embed == 0 {
            return Err(invalid("cond_embed", "conditional network needs a projection width"));
        }
        if !(self.horizon > 0.0) {
            return Err(invalid("horizon", "must be positive"));
        }
        if let OutputScaling::NoiseScaled { schedule } = &self.output {
            schedule.validate()?;
        }
        Ok(())
    }

    /// Input width of the condition projection (`y` plus a presence flag).
    pub fn cond_input_dim(&self) -> usize {
        if self.cond_dim == 0 {
            0
        } else {
            self.cond_dim + 1
        }
    }

    fn feature_dim(&self) -> usize {
        self.data_dim + 2 * self.time_frequencies + if self.cond_dim > 0 { self.cond_embed } else { 0 }
    }

    fn frequencies(&self) -> Vec<f64> {
        let n = self.time_frequencies;
        if n == 1 {
            return vec![1.0];
        }
        (0..n).map(|k| 1000f64.powf(k as f64 / (n - 1) as f64)).collect()
    }
}

/// A dense layer `out = in · w + b` with `w` of shape `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: DMatrix::zeros(fan_in, fan_out),
            b: DVector::zeros(fan_out),
        }
    }

    fn init(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Self {
        let scale = (1.0 / fan_in as f64).sqrt();
        let mut layer = Self::zeros(fan_in, fan_out);
        for i in 0..fan_in {
            for j in 0..fan_out {
                layer.w[(i, j)] = scale * rng::normal(rng);
            }
        }
        layer
    }

    fn apply(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = input * &self.w;
        for mut row in out.row_iter_mut() {
            row += self.b.transpose();
        }
        out
    }
}

/// Network weights. The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub seed: u64,
    pub layers: Vec<Dense>,
    pub cond_proj: Option<Dense>,
    pub null_embedding: Option<DVector<f64>>,
}

/// Deterministic fan-in scaled initialization; the null embedding starts at zero.
pub fn net_init(config: NetworkConfig, seed: u64) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = rng::seeded(seed);
    let mut layers = Vec::with_capacity(config.hidden.len() + 1);
    let mut fan_in = config.feature_dim();
    for &width in &config.hidden {
        layers.push(Dense::init(fan_in, width, &mut rng));
        fan_in = width;
    }
    layers.push(Dense::init(fan_in, config.data_dim, &mut rng));
    let (cond_proj, null_embedding) = if config.cond_dim > 0 {
        (
            Some(Dense::init(config.cond_input_dim(), config.cond_embed, &mut rng)),
            Some(DVector::zeros(config.cond_input_dim())),
        )
    } else {
        (None, None)
    };
    Ok(NetworkParams {
        config,
        seed,
        layers,
        cond_proj,
        null_embedding,
    })
}

/// A batch of network inputs. Rows of `cond` whose `dropped` flag is set (or
/// all rows, when `cond` is `None`) use the null embedding.
#[derive(Debug, Clone)]
pub struct NetInput<'a> {
    pub x: &'a DMatrix<f64>,
    pub s: &'a [f64],
    pub cond: Option<&'a DMatrix<f64>>,
    pub dropped: Option<&'a [bool]>,
}

impl<'a> NetInput<'a> {
    pub fn new(x: &'a DMatrix<f64>, s: &'a [f64], cond: Option<&'a DMatrix<f64>>) -> Self {
        Self {
            x,
            s,
            cond,
            dropped: None,
        }
    }
}

struct Tape {
    cond_input: Option<DMatrix<f64>>,
    /// Input to each dense layer.
    inputs: Vec<DMatrix<f64>>,
    /// Sigmoid of each hidden pre-activation.
    gates: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    /// `∂ε/∂r` per row (`1` or `−1/√Σ`).
    out_scale: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl NetworkParams {
    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter storage in a fixed order: layers (w, b), projection (w, b), null embedding.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        if let Some(p) = &self.cond_proj {
            out.push(p.w.as_slice());
            out.push(p.b.as_slice());
        }
        if let Some(n) = &self.null_embedding {
            out.push(n.as_slice());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        if let Some(p) = &mut self.cond_proj {
            out.push(p.w.as_mut_slice());
            out.push(p.b.as_mut_slice());
        }
        if let Some(n) = &mut self.null_embedding {
            out.push(n.as_mut_slice());
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        check_dim("flat parameter vector", self.n_params(), values.len())?;
        let mut at = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&values[at..at + s.len()]);
            at += s.len();
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn validate_input(&self, input: &NetInput<'_>) -> Result<()> {
        let c = &self.config;
        check_dim("network input", c.data_dim, input.x.ncols())?;
        check_dim("time values", input.x.nrows(), input.s.len())?;
        if let Some(cond) = input.cond {
            if c.cond_dim == 0 {
                return Err(invalid("condition", "unconditional network given a condition"));
            }
            check_dim("condition", c.cond_dim, cond.ncols())?;
            check_dim("condition rows", input.x.nrows(), cond.nrows())?;
        }
        if let Some(d) = input.dropped {
            check_dim("drop mask", input.x.nrows(), d.len())?;
        }
        if !input.x.iter().all(|v| v.is_finite()) || !input.s.iter().all(|v| v.is_finite()) {
            return Err(invalid("input", "non-finite network input"));
        }
        if let Some(cond) = input.cond {
            if !cond.iter().all(|v| v.is_finite()) {
                return Err(invalid("condition", "non-finite condition"));
            }
        }
        Ok(())
    }

    fn features(&self, input: &NetInput<'_>) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
        let c = &self.config;
        let n = input.x.nrows();
        let freqs = c.frequencies();
        let mut feats = DMatrix::zeros(n, c.feature_dim());
        feats.view_mut((0, 0), (n, c.data_dim)).copy_from(input.x);
        for i in 0..n {
            let t = input.s[i] / c.horizon;
            for (k, f) in freqs.iter().enumerate() {
                let (sin, cos) = (f * t).sin_cos();
                feats[(i, c.data_dim + 2 * k)] = sin;
                feats[(i, c.data_dim + 2 * k + 1)] = cos;
            }
        }
        let mut cond_input = None;
        if let (Some(proj), Some(null)) = (&self.cond_proj, &self.null_embedding) {
            let width = c.cond_input_dim();
            let mut ci = DMatrix::zeros(n, width);
            for i in 0..n {
                let use_null = input.cond.is_none() || input.dropped.is_some_and(|d| d[i]);
                if use_null {
                    ci.row_mut(i).copy_from(&null.transpose());
                } else {
                    let y = input.cond.expect("checked above");
                    for j in 0..c.cond_dim {
                        ci[(i, j)] = y[(i, j)];
                    }
                    ci[(i, c.cond_dim)] = 1.0;
                }
            }
            let embedded = proj.apply(&ci);
            let off = c.data_dim + 2 * c.time_frequencies;
            feats.view_mut((0, off), (n, c.cond_embed)).copy_from(&embedded);
            cond_input = Some(ci);
        }
        (feats, cond_input)
    }

    fn output_scale(&self, s: f64) -> f64 {
        match &self.config.output {
            OutputScaling::Direct => 1.0,
            OutputScaling::NoiseScaled { schedule } => -1.0 / schedule.kernel(s).sigma2.sqrt(),
        }
    }

    fn run(&self, input: &NetInput<'_>, record: bool) -> Result<(DMatrix<f64>, Option<Tape>)> {
        self.validate_input(input)?;
        let (mut h, cond_input) = self.features(input);
        let last = self.layers.len() - 1;
        let mut tape = record.then(|| Tape {
            cond_input,
            inputs: Vec::new(),
            gates: Vec::new(),
            pre: Vec::new(),
            out_scale: Vec::new(),
        });
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            let next = if l < last {
                let gate = z.map(sigmoid);
                let act = z.component_mul(&gate);
                if let Some(t) = tape.as_mut() {
                    t.gates.push(gate);
                    t.pre.push(z);
                }
                act
            } else {
                z
            };
            if let Some(t) = tape.as_mut() {
                t.inputs.push(std::mem::replace(&mut h, next));
            } else {
                h = next;
            }
        }
        let mut out = h;
        if let OutputScaling::NoiseScaled { .. } = self.config.output {
            let mut scales = Vec::with_capacity(out.nrows());
            for i in 0..out.nrows() {
                let c = self.output_scale(input.s[i]);
                for j in 0..out.ncols() {
                    out[(i, j)] = input.x[(i, j)] + c * out[(i, j)];
                }
                scales.push(c);
            }
            if let Some(t) = tape.as_mut() {
                t.out_scale = scales;
            }
        } else if let Some(t) = tape.as_mut() {
            t.out_scale = vec![1.0; out.nrows()];
        }
        Ok((out, tape))
    }

    /// ε for each input row.
    pub fn forward_batch(&self, input: &NetInput<'_>) -> Result<DMatrix<f64>> {
        Ok(self.run(input, false)?.0)
    }

    /// Loss and exact parameter gradients. `loss` receives the ε batch and
    /// returns the scalar loss with its gradient w.r.t. ε.
    pub fn loss_and_grad<F>(&self, input: &NetInput<'_>, loss: F) -> Result<(f64, NetworkParams)>
    where
        F: FnOnce(&DMatrix<f64>) -> Result<(f64, DMatrix<f64>)>,
    {
        let (out, tape) = self.run(input, true)?;
        let tape = tape.expect("recorded");
        let (value, mut delta) = loss(&out)?;
        if !value.is_finite() {
            return Err(Error::Divergence { step: 0, loss: value });
        }
        check_dim("loss gradient rows", out.nrows(), delta.nrows())?;
        check_dim("loss gradient cols", out.ncols(), delta.ncols())?;
        for (i, scale) in tape.out_scale.iter().enumerate() {
            if *scale != 1.0 {
                delta.row_mut(i).scale_mut(*scale);
            }
        }
        let mut grads = self.zeros_like();
        for l in (0..self.layers.len()).rev() {
            if l < self.layers.len() - 1 {
                // SiLU'(z) = σ(z) (1 + z (1 − σ(z)))
                let (gate, pre) = (&tape.gates[l], &tape.pre[l]);
                for k in 0..delta.len() {
                    let g = gate[k];
                    delta[k] *= g * (1.0 + pre[k] * (1.0 - g));
                }
            }
            let input_l = &tape.inputs[l];
            grads.layers[l].w = input_l.transpose() * &delta;
            grads.layers[l].b = delta.row_sum().transpose();
            if l > 0 || self.cond_proj.is_some() {
                delta = &delta * self.layers[l].w.transpose();
            }
        }
        if let (Some(proj), Some(ci)) = (&self.cond_proj, &tape.cond_input) {
            let c = &self.config;
            let off = c.data_dim + 2 * c.time_frequencies;
            let d_embed = delta.columns(off, c.cond_embed).into_owned();
            let gp = grads.cond_proj.as_mut().expect("shape mirrors params");
            gp.w = ci.transpose() * &d_embed;
            gp.b = d_embed.row_sum().transpose();
            let d_ci = &d_embed * proj.w.transpose();
            let gn = grads.null_embedding.as_mut().expect("shape mirrors params");
            for i in 0..d_ci.nrows() {
                let use_null = input.cond.is_none() || input.dropped.is_some_and(|d| d[i]);
                if use_null {
                    *gn += d_ci.row(i).transpose();
                }
            }
        }
        Ok((value, grads))
    }
}

/// ε for a single input; `None` routes through the null embedding.
pub fn net_forward(params: &NetworkParams, x: &DVector<f64>, s: f64, condition: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    let xm = DMatrix::from_row_slice(1, x.len(), x.as_slice());
    let cm = condition.map(|c| DMatrix::from_row_slice(1, c.len(), c.as_slice()));
    let out = params.forward_batch(&NetInput::new(&xm, &[s], cm.as_ref()))?;
    Ok(out.row(0).transpose())
}

/// Reverse-mode gradients of `loss` over a batch.
pub fn net_backward<F>(params: &NetworkParams, input: &NetInput<'_>, loss: F) -> Result<(f64, NetworkParams)>
where
    F: FnOnce(&DMatrix<f64>) -> Result<(f64, DMatrix<f64>)>,
{
    params.loss_and_grad(input, loss)
}
