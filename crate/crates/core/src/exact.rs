//! Exact GP regression: posterior, negative log marginal likelihood and
//! hyperparameter optimization.

use std::io::Write;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::data::{Standardizer, TrainingSet};
use crate::error::{Error, Result};
use crate::kernels::{gram, gram_diag, gram_sym, gram_sym_backward, Input, KernelConfig};
use crate::linalg::{jittered_cholesky, JitteredCholesky};
use crate::optim::{minimize, OptimResult};
use crate::params;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Conditioned GP on a training set.
#[derive(Debug)]
pub struct ExactModel {
    pub training: TrainingSet,
    pub cfg: KernelConfig,
    pub chol: JitteredCholesky,
    pub alpha: Vec<f64>,
    inputs: Vec<Input>,
}

/// Predictions in raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl Forecast {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// CSV with header `t,mean,variance`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "t,mean,variance")?;
        for i in 0..self.len() {
            writeln!(out, "{},{},{}", self.times[i], self.mean[i], self.variance[i])?;
        }
        Ok(())
    }
}

/// `K + σ_on² I` for the training inputs.
fn noisy_gram(cfg: &KernelConfig, inputs: &[Input]) -> Result<Mat<f64>> {
    let mut k = gram_sym(cfg, inputs)?;
    for i in 0..inputs.len() {
        k[(i, i)] += cfg.noise_var;
    }
    Ok(k)
}

pub fn fit_exact(training: &TrainingSet, cfg: &KernelConfig) -> Result<ExactModel> {
    cfg.validate()?;
    let inputs = training.inputs();
    let k = noisy_gram(cfg, &inputs)?;
    let chol = jittered_cholesky(k.as_ref())?;
    let alpha = chol.solve_vec(&training.targets());
    Ok(ExactModel {
        training: training.clone(),
        cfg: cfg.clone(),
        chol,
        alpha,
        inputs,
    })
}

impl ExactModel {
    /// Posterior mean and variance in standardized units. The variance
    /// excludes observation noise unless `with_noise` is set.
    pub fn predict_standardized(&self, queries: &[Input], with_noise: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        if queries.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let ks = gram(&self.cfg, &self.inputs, queries)?;
        let prior = gram_diag(&self.cfg, queries)?;
        let v = self.chol.solve_lower(ks.as_ref());
        let mut mean = vec![0.0; queries.len()];
        let mut var = prior;
        for q in 0..queries.len() {
            let mut m = 0.0;
            let mut s = 0.0;
            for i in 0..self.inputs.len() {
                m += ks[(i, q)] * self.alpha[i];
                s += v[(i, q)] * v[(i, q)];
            }
            mean[q] = m;
            var[q] = (var[q] - s).max(0.0);
            if with_noise {
                var[q] += self.cfg.noise_var;
            }
        }
        Ok((mean, var))
    }

    pub fn inputs(&self) -> &[Input] {
        &self.inputs
    }
}

/// Posterior predictions destandardized through the training standardizer.
pub fn predict(model: &ExactModel, queries: &[Input]) -> Result<Forecast> {
    let (mean, var) = model.predict_standardized(queries, false)?;
    Ok(to_forecast(&model.training.standardizer, queries, &mean, &var))
}

/// Prior predictions (no conditioning data).
pub fn predict_prior(cfg: &KernelConfig, standardizer: &Standardizer, queries: &[Input]) -> Result<Forecast> {
    let var = gram_diag(cfg, queries)?;
    let mean = vec![0.0; queries.len()];
    Ok(to_forecast(standardizer, queries, &mean, &var))
}

pub(crate) fn to_forecast(st: &Standardizer, queries: &[Input], mean: &[f64], var: &[f64]) -> Forecast {
    Forecast {
        times: queries.iter().map(|q| q.time * st.time_scale).collect(),
        mean: mean.iter().map(|m| st.destandardize_target(*m)).collect(),
        variance: var.iter().map(|v| st.destandardize_variance(v.max(0.0))).collect(),
    }
}

/// `½ yᵀ(K+σ²I)⁻¹y + ½ log det(K+σ²I) + (N/2) log 2π`.
pub fn nll(training: &TrainingSet, cfg: &KernelConfig) -> Result<f64> {
    let model = fit_exact(training, cfg)?;
    Ok(nll_of(&model))
}

fn nll_of(model: &ExactModel) -> f64 {
    let y = model.training.targets();
    let quad: f64 = y.iter().zip(&model.alpha).map(|(a, b)| a * b).sum();
    0.5 * quad + 0.5 * model.chol.log_det() + 0.5 * y.len() as f64 * LOG_2PI
}

/// NLL and its gradient with respect to the packed hyperparameters
/// (see [`params`]).
pub fn nll_with_grad(training: &TrainingSet, cfg: &KernelConfig) -> Result<(f64, Vec<f64>)> {
    let model = fit_exact(training, cfg)?;
    let value = nll_of(&model);
    // dNLL/dK = ½ (K⁻¹ − ααᵀ).
    let mut w = model.chol.inverse();
    let n = model.alpha.len();
    for i in 0..n {
        for j in 0..n {
            w[(i, j)] = 0.5 * (w[(i, j)] - model.alpha[i] * model.alpha[j]);
        }
    }
    let d_noise: f64 = (0..n).map(|i| w[(i, i)]).sum();
    let grad = gram_sym_backward(cfg, &model.inputs, &w)?;
    let theta = params::pack(cfg);
    Ok((value, params::chain(cfg, &theta, &grad, d_noise)))
}

/// Central differences of the NLL in the packed parameters, relative step `h`.
pub fn nll_grad_fd(training: &TrainingSet, cfg: &KernelConfig, h: f64) -> Result<Vec<f64>> {
    let theta = params::pack(cfg);
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let step = h * theta[i].abs().max(1.0);
        let mut plus = theta.clone();
        plus[i] += step;
        let mut minus = theta.clone();
        minus[i] -= step;
        let fp = nll(training, &params::unpack(cfg, &plus)?)?;
        let fm = nll(training, &params::unpack(cfg, &minus)?)?;
        out.push((fp - fm) / (2.0 * step));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeOptions {
    /// Objective evaluations, including the initial one.
    pub budget: usize,
    pub learning_rate: f64,
    /// Packed entries held fixed.
    #[serde(default)]
    pub frozen: Option<Vec<bool>>,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            budget: 500,
            learning_rate: 0.1,
            frozen: None,
        }
    }
}

/// Minimizes the NLL over the packed hyperparameters and returns the best
/// configuration found (never worse than `cfg0`).
pub fn optimize_hyperparameters(training: &TrainingSet, cfg0: &KernelConfig, budget: usize) -> Result<KernelConfig> {
    let opts = OptimizeOptions {
        budget,
        ..Default::default()
    };
    Ok(optimize_with(training, cfg0, &opts)?.0)
}

pub fn optimize_with(
    training: &TrainingSet,
    cfg0: &KernelConfig,
    opts: &OptimizeOptions,
) -> Result<(KernelConfig, OptimResult)> {
    let theta0 = params::pack(cfg0);
    if let Some(f) = &opts.frozen {
        if f.len() != theta0.len() {
            return Err(Error::invalid("freeze mask length differs from the parameter count"));
        }
    }
    let objective = |theta: &[f64]| {
        let cfg = params::unpack(cfg0, theta)?;
        nll_with_grad(training, &cfg)
    };
    let result = minimize(
        objective,
        &theta0,
        opts.budget,
        opts.learning_rate,
        opts.frozen.as_deref(),
    )?;
    let cfg = if result.x == theta0 {
        cfg0.clone()
    } else {
        params::unpack(cfg0, &result.x)?
    };
    Ok((cfg, result))
}
