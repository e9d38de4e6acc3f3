//! Experiment drivers. Each writes its outputs under the configured
//! directory and returns the manifest describing them.
//!
//! Seeds: the master seed fans out to named child streams per cell
//! (`data/…`, `training/…`, `estimation/…`), so changing one stage's sample
//! counts never shifts another stage's randomness.

use std::sync::Arc;

use diffinfo::diffusion::{DiffusedGaussian, DiffusionSchedule};
use diffinfo::estimators::{
    gaussian_fit_mi, gaussian_fit_mi_at, log_density_denoised_means, mi_window, minde_mi, neural_entropy, total_entropy_closed_form,
    total_entropy_closed_form_conditional, total_entropy_path, total_entropy_window, total_entropy_window_conditional,
    EmpiricalData, EntropyReport,
};
use diffinfo::gaussian::{build_joint_spec, JointGaussianSpec};
use diffinfo::kelly::{channel_rate_gain, discrete_mi, doubling_rate, simulate_wealth, BettingGame, Channel};
use diffinfo::nn::{load_checkpoint, save_checkpoint, NetworkParams};
use diffinfo::rng::child_seed;
use diffinfo::sampler::{pf_ode_cfg, EpsilonField, SamplerConfig, ScoreFromEpsilon};
use diffinfo::training::{train_conditional, LearnedField, LossRecord};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ChannelSpec, ExperimentConfig, ExperimentKind, FieldSource, Protocol, TrainingSection};
use crate::error::CliError;
use crate::manifest::{Manifest, OutputSet};

/// Runs the configured experiment and writes its manifest.
pub fn run(config: &ExperimentConfig) -> Result<Manifest, CliError> {
    config.validate()?;
    let mut out = OutputSet::new(&config.out_dir)?;
    out.write("config.toml", config.to_toml()?.as_bytes())?;
    let summary = match config.experiment {
        ExperimentKind::GaussianEntropy => run_gaussian_entropy(config, &mut out)?,
        ExperimentKind::CfgMi => run_cfg_mi(config, &mut out)?,
        ExperimentKind::Kelly => run_kelly(config, &mut out)?,
        ExperimentKind::Train => run_train(config, &mut out)?,
        ExperimentKind::Estimate => run_estimate(config, &mut out)?,
        ExperimentKind::Logdensity => run_logdensity(config, &mut out)?,
    };
    out.write_json("summary.json", &summary)?;
    out.finish(config, summary)
}

/// Named seeds for one experiment cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CellSeeds {
    pub data: u64,
    pub training: u64,
    pub estimation: u64,
    pub sampling: u64,
}

impl CellSeeds {
    pub fn new(master: u64, cell: &str) -> Self {
        Self {
            data: child_seed(master, &format!("data/{cell}")),
            training: child_seed(master, &format!("training/{cell}")),
            estimation: child_seed(master, &format!("estimation/{cell}")),
            sampling: child_seed(master, &format!("sampling/{cell}")),
        }
    }
}

/// Conditional and marginal ε-networks from either training protocol.
#[derive(Debug, Clone)]
pub struct TrainedPair {
    pub protocol: Protocol,
    pub cond: Arc<NetworkParams>,
    /// Separate unconditional network; `None` under label dropping.
    pub marg: Option<Arc<NetworkParams>>,
    pub cond_log: Vec<LossRecord>,
    pub marg_log: Vec<LossRecord>,
}

impl TrainedPair {
    pub fn cond_field(&self) -> LearnedField {
        LearnedField::new(Arc::clone(&self.cond))
    }

    pub fn marg_field(&self) -> LearnedField {
        match &self.marg {
            Some(m) => LearnedField::new(Arc::clone(m)),
            None => self.cond_field().null_conditioned(),
        }
    }

    fn final_losses(&self) -> Value {
        json!({
            "conditional": self.cond_log.last().map(|l| l.loss),
            "marginal": self.marg_log.last().map(|l| l.loss),
        })
    }

    /// Writes checkpoints and loss logs under `prefix`.
    pub fn save(&self, out: &mut OutputSet, prefix: &str) -> Result<(), CliError> {
        let mut nets = vec![("conditional", &self.cond, &self.cond_log)];
        if let Some(m) = &self.marg {
            nets.push(("marginal", m, &self.marg_log));
        }
        for (name, params, log) in nets {
            let rel = format!("{prefix}checkpoint_{name}.json");
            save_checkpoint(params, &out.path(&rel)?)?;
            out.record(&rel)?;
            let mut csv = String::from("step,loss\n");
            for l in log {
                csv.push_str(&format!("{},{}\n", l.step, l.loss));
            }
            out.write(&format!("{prefix}loss_{name}.csv"), csv.as_bytes())?;
        }
        Ok(())
    }
}

/// Trains the conditional/marginal pair on `(x, y)` under the configured protocol.
pub fn train_pair(
    section: &TrainingSection,
    sched: &DiffusionSchedule,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    seed: u64,
) -> Result<TrainedPair, diffinfo::Error> {
    let (dx, dy) = (x.ncols(), y.ncols());
    match section.protocol {
        Protocol::LabelDrop => {
            let cfg = section.training_config(sched, dx, dy, seed);
            let out = train_conditional(x, Some(y), sched, &cfg)?;
            Ok(TrainedPair {
                protocol: Protocol::LabelDrop,
                cond: Arc::new(out.params),
                marg: None,
                cond_log: out.log,
                marg_log: Vec::new(),
            })
        }
        Protocol::Pair => {
            let mut cc = section.training_config(sched, dx, dy, child_seed(seed, "conditional"));
            cc.label_drop_prob = 0.0;
            let mc = section.training_config(sched, dx, 0, child_seed(seed, "marginal"));
            let c = train_conditional(x, Some(y), sched, &cc)?;
            let m = train_conditional(x, None, sched, &mc)?;
            Ok(TrainedPair {
                protocol: Protocol::Pair,
                cond: Arc::new(c.params),
                marg: Some(Arc::new(m.params)),
                cond_log: c.log,
                marg_log: m.log,
            })
        }
    }
}

fn spec_for(config: &ExperimentConfig, dim_y: usize, noise_std: f64) -> Result<JointGaussianSpec, CliError> {
    let s = config.spec()?;
    Ok(build_joint_spec(s.dim_x, dim_y, noise_std, s.jitter, s.spec_seed)?)
}

fn write_report(out: &mut OutputSet, name: &str, report: &EntropyReport) -> Result<Value, CliError> {
    report.write(&out.path(name)?)?;
    out.record(name)?;
    out.record(&name.replace(".csv", ".json"))?;
    Ok(json!({ "total": report.total, "stderr": report.stderr(), "peak_time": report.peak_time() }))
}

fn cell_label(v: f64) -> String {
    format!("{v}")
}

/// Analytic and learned entropy/MI curves for each noise level.
pub fn run_gaussian_entropy(config: &ExperimentConfig, out: &mut OutputSet) -> Result<Value, CliError> {
    let spec_sec = config.spec()?;
    let train_sec = config.training()?;
    let est = config.estimation()?;
    let sched = config.schedule;
    let est_sched = config.estimation_schedule()?;
    let cells: Vec<f64> = spec_sec.noise_std.clone();
    let results: Vec<(f64, CellOutcome)> = cells
        .par_iter()
        .map(|&sigma| {
            let label = format!("sigma={}", cell_label(sigma));
            let started = std::time::Instant::now();
            let outcome = gaussian_entropy_cell(config, train_sec, est.n_mc, &sched, &est_sched, sigma, &label)
                .map_err(CliError::in_cell(label.clone()))?;
            eprintln!("cell {label}: done in {:.0?}", started.elapsed());
            Ok((sigma, outcome))
        })
        .collect::<Result<_, CliError>>()?;
    let mut cells_json = Vec::new();
    for (sigma, cell) in results {
        let dir = format!("sigma_{}/", cell_label(sigma));
        let mut entry = cell.summary;
        for (name, report) in &cell.reports {
            entry["curves"][*name] = write_report(out, &format!("{dir}{name}.csv"), report)?;
        }
        cell.trained.save(out, &dir)?;
        entry["final_loss"] = cell.trained.final_losses();
        cells_json.push(entry);
    }
    Ok(json!({ "experiment": "gaussian-entropy", "cells": cells_json }))
}

struct CellOutcome {
    summary: Value,
    reports: Vec<(&'static str, EntropyReport)>,
    trained: TrainedPair,
}

fn gaussian_entropy_cell(
    config: &ExperimentConfig,
    train_sec: &TrainingSection,
    n_mc: usize,
    sched: &DiffusionSchedule,
    est_sched: &DiffusionSchedule,
    sigma: f64,
    label: &str,
) -> Result<CellOutcome, diffinfo::Error> {
    let s = config.spec.as_ref().expect("validated");
    let spec = build_joint_spec(s.dim_x, s.dim_y, sigma, s.jitter, s.spec_seed)?;
    let seeds = CellSeeds::new(config.seed, label);
    let model = Arc::new(DiffusedGaussian::new(spec.clone(), *est_sched)?);
    let (ac, am) = (model.conditional_field(), model.marginal_field());
    let analytic_cond = total_entropy_path(&ac, est_sched, &spec, n_mc, seeds.estimation)?;
    let analytic_marg = total_entropy_path(&am, est_sched, &spec, n_mc, seeds.estimation)?;
    let analytic_mi = minde_mi(&ac, &am, est_sched, &spec, n_mc, seeds.estimation)?;

    let data = spec.sample_pairs(train_sec.n_train, seeds.data)?;
    let trained = train_pair(train_sec, sched, &data.x, &data.y, seeds.training)?;
    let (lc, lm) = (trained.cond_field(), trained.marg_field());
    let neural_cond = neural_entropy(&lc, est_sched, &spec, n_mc, seeds.estimation)?;
    let neural_marg = neural_entropy(&lm, est_sched, &spec, n_mc, seeds.estimation)?;
    let learned_mi = minde_mi(&ScoreFromEpsilon(&lc), &ScoreFromEpsilon(&lm), est_sched, &spec, n_mc, seeds.estimation)?;

    let summary = json!({
        "noise_std": sigma,
        "seeds": seeds,
        "closed_form": {
            "mi": spec.analytic_mi()?,
            "mi_window": mi_window(&spec, est_sched)?,
            "total_conditional": total_entropy_closed_form_conditional(&spec)?,
            "total_marginal": total_entropy_closed_form(&spec.marginal_x())?,
            "total_conditional_window": total_entropy_window_conditional(&spec, est_sched)?,
            "total_marginal_window": total_entropy_window(spec.cov_x(), est_sched)?,
        },
        "neural_entropy_difference": neural_cond.total - neural_marg.total,
    });
    Ok(CellOutcome {
        summary,
        reports: vec![
            ("analytic_total_conditional", analytic_cond),
            ("analytic_total_marginal", analytic_marg),
            ("analytic_mi", analytic_mi),
            ("neural_conditional", neural_cond),
            ("neural_marginal", neural_marg),
            ("learned_mi", learned_mi),
        ],
        trained,
    })
}

/// One `(D_Y, w)` cell of the guidance experiment.
#[derive(Debug, Clone, Serialize)]
pub struct CfgCell {
    pub dim_y: usize,
    pub weight: f64,
    /// MINDE estimate from networks trained on the guided samples.
    pub mi_learned: f64,
    pub mi_learned_stderr: f64,
    /// MI of a Gaussian fitted to the guided samples.
    pub mi_gaussian_fit: f64,
    /// The same fit seen through the noise floor at the integration cutoff.
    pub mi_gaussian_fit_window: f64,
    /// MI of the unguided model.
    pub mi_analytic_unguided: f64,
}

/// Guided samples for `(D_Y, w)` from the analytic fields.
pub fn guided_samples(
    spec: &JointGaussianSpec,
    sched: &DiffusionSchedule,
    weight: f64,
    n: usize,
    ode_steps: usize,
    seeds: &CellSeeds,
) -> Result<(DMatrix<f64>, DMatrix<f64>), diffinfo::Error> {
    let y = spec.sample_pairs(n, seeds.data)?.y;
    let ode_sched = sched.with_steps(ode_steps);
    let model = Arc::new(DiffusedGaussian::new(spec.clone(), ode_sched)?);
    let x = pf_ode_cfg(
        &model.conditional_field(),
        &model.marginal_field(),
        &y,
        &ode_sched,
        &SamplerConfig::ode(ode_steps, weight, seeds.sampling),
        n,
    )?;
    Ok((x, y))
}

/// Trains a cond/marg pair on guided samples and estimates their MI.
pub fn cfg_cell(
    config: &ExperimentConfig,
    dim_y: usize,
    weight: f64,
) -> Result<(CfgCell, TrainedPair, EntropyReport), CliError> {
    let spec_sec = config.spec()?;
    let train_sec = config.training()?;
    let cfg = config.cfg()?;
    let n_mc = config.estimation()?.n_mc;
    let est_sched = config.estimation_schedule()?;
    let label = format!("dy={dim_y}/w={}", cell_label(weight));
    let wrap = CliError::in_cell(label.clone());
    let started = std::time::Instant::now();
    let inner = || -> Result<_, diffinfo::Error> {
        let spec = build_joint_spec(spec_sec.dim_x, dim_y, spec_sec.noise_std[0], spec_sec.jitter, spec_sec.spec_seed)?;
        let seeds = CellSeeds::new(config.seed, &label);
        let (x, y) = guided_samples(&spec, &config.schedule, weight, cfg.n_samples, cfg.ode_steps, &seeds)?;
        let fit = gaussian_fit_mi(&x, &y)?;
        let fit_window = gaussian_fit_mi_at(&x, &y, &est_sched, est_sched.s_min())?;
        let trained = train_pair(train_sec, &config.schedule, &x, &y, seeds.training)?;
        let (lc, lm) = (trained.cond_field(), trained.marg_field());
        let data = EmpiricalData::new(x, Some(y))?;
        let report = minde_mi(&ScoreFromEpsilon(&lc), &ScoreFromEpsilon(&lm), &est_sched, &data, n_mc, seeds.estimation)?;
        let cell = CfgCell {
            dim_y,
            weight,
            mi_learned: report.total,
            mi_learned_stderr: report.stderr(),
            mi_gaussian_fit: fit,
            mi_gaussian_fit_window: fit_window,
            mi_analytic_unguided: spec.analytic_mi()?,
        };
        Ok((cell, trained, report))
    };
    let out = inner().map_err(wrap)?;
    eprintln!(
        "cell {label}: mi {:.3} ± {:.3} (gaussian fit {:.3}, windowed {:.3}) in {:.0?}",
        out.0.mi_learned,
        out.0.mi_learned_stderr,
        out.0.mi_gaussian_fit,
        out.0.mi_gaussian_fit_window,
        started.elapsed()
    );
    Ok(out)
}

pub fn run_cfg_mi(config: &ExperimentConfig, out: &mut OutputSet) -> Result<Value, CliError> {
    let cfg = config.cfg()?;
    let cells: Vec<(usize, f64)> = cfg
        .dim_ys
        .iter()
        .flat_map(|&dy| cfg.weights.iter().map(move |&w| (dy, w)))
        .collect();
    let results: Vec<(CfgCell, TrainedPair, EntropyReport)> =
        cells.par_iter().map(|&(dy, w)| cfg_cell(config, dy, w)).collect::<Result<_, _>>()?;
    let mut table = String::from("dim_y,w,mi_learned,mi_learned_stderr,mi_gaussian_fit,mi_gaussian_fit_window,mi_analytic_unguided\n");
    let mut rows = Vec::new();
    for (cell, trained, report) in &results {
        let dir = format!("dy_{}/w_{}/", cell.dim_y, cell_label(cell.weight));
        write_report(out, &format!("{dir}learned_mi.csv"), report)?;
        trained.save(out, &dir)?;
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            cell.dim_y,
            cell.weight,
            cell.mi_learned,
            cell.mi_learned_stderr,
            cell.mi_gaussian_fit,
            cell.mi_gaussian_fit_window,
            cell.mi_analytic_unguided
        ));
        rows.push(serde_json::to_value(cell)?);
    }
    out.write("mi_vs_w.csv", table.as_bytes())?;
    Ok(json!({ "experiment": "cfg-mi", "cells": rows }))
}

fn build_channel(spec: &ChannelSpec, n: usize) -> Result<Channel, CliError> {
    Ok(match spec {
        ChannelSpec::Identity => Channel::identity(n),
        ChannelSpec::Useless => Channel::useless(n),
        ChannelSpec::Symmetric { flip } => Channel::symmetric(n, *flip)?,
        ChannelSpec::Matrix { confusion } => Channel::new(confusion.clone())?,
    })
}

pub fn run_kelly(config: &ExperimentConfig, out: &mut OutputSet) -> Result<Value, CliError> {
    let k = config.kelly()?;
    let p_true = k.p_true.clone().unwrap_or_else(|| vec![1.0 / 6.0; 6]);
    let game = BettingGame::new(k.odds, p_true, config.seed)?;
    let analytic = doubling_rate(&game, &game.p_true)?;
    let seed = child_seed(config.seed, "kelly");
    let plain = simulate_wealth(&game, None, k.n_throws, seed)?;
    let mut result = json!({
        "experiment": "kelly",
        "odds": game.odds,
        "p_true": game.p_true,
        "n_throws": k.n_throws,
        "analytic_rate": analytic,
        "simulated_rate": plain.rate,
        "log2_wealth": plain.log2_wealth,
    });
    if let Some(spec) = &k.channel {
        let channel = build_channel(spec, game.n_outcomes())?;
        let gain = channel_rate_gain(&game, &channel)?;
        let with = simulate_wealth(&game, Some(&channel), k.n_throws, seed)?;
        result["channel"] = json!({
            "gain": gain,
            "mutual_information": discrete_mi(&channel.joint(&game.p_true)?),
            "analytic_rate": analytic + gain,
            "simulated_rate": with.rate,
            "log2_wealth": with.log2_wealth,
        });
    }
    out.write_json("kelly.json", &result)?;
    Ok(result)
}

pub fn run_train(config: &ExperimentConfig, out: &mut OutputSet) -> Result<Value, CliError> {
    let s = config.spec()?;
    let train_sec = config.training()?;
    let mut cells = Vec::new();
    for &sigma in &s.noise_std {
        let label = format!("sigma={}", cell_label(sigma));
        let seeds = CellSeeds::new(config.seed, &label);
        let spec = spec_for(config, s.dim_y, sigma)?;
        let data = spec.sample_pairs(train_sec.n_train, seeds.data)?;
        let trained =
            train_pair(train_sec, &config.schedule, &data.x, &data.y, seeds.training).map_err(CliError::in_cell(label))?;
        let dir = format!("sigma_{}/", cell_label(sigma));
        trained.save(out, &dir)?;
        cells.push(json!({
            "noise_std": sigma,
            "seeds": seeds,
            "protocol": train_sec.protocol,
            "n_train": train_sec.n_train,
            "final_loss": trained.final_losses(),
            "checkpoint_dir": dir,
        }));
    }
    Ok(json!({ "experiment": "train", "cells": cells }))
}

pub fn run_estimate(config: &ExperimentConfig, out: &mut OutputSet) -> Result<Value, CliError> {
    let s = config.spec()?;
    let est = config.estimation()?;
    let est_sched = config.estimation_schedule()?;
    let spec = spec_for(config, s.dim_y, s.noise_std[0])?;
    let seed = child_seed(config.seed, "estimation");
    let (cond_total, marg_total, mi) = match est.fields.expect("validated") {
        FieldSource::Analytic => {
            let model = Arc::new(DiffusedGaussian::new(spec.clone(), est_sched)?);
            let (c, m) = (model.conditional_field(), model.marginal_field());
            (
                total_entropy_path(&c, &est_sched, &spec, est.n_mc, seed)?,
                total_entropy_path(&m, &est_sched, &spec, est.n_mc, seed)?,
                minde_mi(&c, &m, &est_sched, &spec, est.n_mc, seed)?,
            )
        }
        FieldSource::Learned => {
            let cond = Arc::new(load_checkpoint(&est.checkpoints[0])?);
            let lc = LearnedField::new(Arc::clone(&cond));
            let lm = match est.checkpoints.get(1) {
                Some(p) => LearnedField::new(Arc::new(load_checkpoint(p)?)),
                None => lc.null_conditioned(),
            };
            if lc.dim() != spec.dim_x() {
                return Err(CliError::Config(format!(
                    "`estimation.checkpoints`: network dimension {} does not match spec.dim_x {}",
                    lc.dim(),
                    spec.dim_x()
                )));
            }
            (
                neural_entropy(&lc, &est_sched, &spec, est.n_mc, seed)?,
                neural_entropy(&lm, &est_sched, &spec, est.n_mc, seed)?,
                minde_mi(&ScoreFromEpsilon(&lc), &ScoreFromEpsilon(&lm), &est_sched, &spec, est.n_mc, seed)?,
            )
        }
    };
    let curves = json!({
        "conditional_entropy": write_report(out, "conditional_entropy.csv", &cond_total)?,
        "marginal_entropy": write_report(out, "marginal_entropy.csv", &marg_total)?,
        "mi": write_report(out, "mi.csv", &mi)?,
    });
    Ok(json!({
        "experiment": "estimate",
        "fields": est.fields,
        "noise_std": s.noise_std[0],
        "curves": curves,
        "closed_form": {
            "mi": spec.analytic_mi()?,
            "mi_window": mi_window(&spec, &est_sched)?,
            "total_conditional": total_entropy_closed_form_conditional(&spec)?,
            "total_marginal": total_entropy_closed_form(&spec.marginal_x())?,
        },
    }))
}

/// Ordinary least squares `y ≈ a + b x`; returns `(a, b)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

pub fn run_logdensity(config: &ExperimentConfig, out: &mut OutputSet) -> Result<Value, CliError> {
    let l = config.logdensity()?;
    let sched = config.schedule;
    let spec = JointGaussianSpec::scalar(1.0, l.sigma_x, 1.0)?;
    let model = DiffusedGaussian::new(spec, sched)?;
    let seed = child_seed(config.seed, "logdensity");
    let var = l.sigma_x * l.sigma_x;
    let mut csv = String::from("x,estimate,stderr,neg_log_density\n");
    let (mut est, mut truth) = (Vec::new(), Vec::new());
    for &x in &l.points {
        // the same noise at every point, so the unknown constant is shared
        let e = log_density_denoised_means(&DVector::from_element(1, x), &sched, &model, l.n_mc, seed)?;
        let nlp = 0.5 * x * x / var + 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        csv.push_str(&format!("{x},{},{},{nlp}\n", e.value, e.stderr));
        est.push(e.value);
        truth.push(nlp);
    }
    out.write("logdensity.csv", csv.as_bytes())?;
    let (intercept, slope) = fit_line(&truth, &est);
    Ok(json!({
        "experiment": "logdensity",
        "sigma_x": l.sigma_x,
        "points": l.points.len(),
        "slope": slope,
        "intercept": intercept,
    }))
}
