//! Unconstrained hyperparameter vectors and their initialization.
//!
//! Layout for `Sd`/`Kesd`: `[log ℓ_1..n, log σ_on², ρ_s, ϑ_s̄, ρ_ω, ϑ_ω̄ / U]` with
//! `ϑ_s = softplus(ρ_s)` and `ϑ_ω = U·softplus(ρ_ω)`, `U = IMAG_UNIT`. For `Contextual`:
//! `[log ℓ_1..n, log σ_on², log ℓ_t]`. The signal variance is not a parameter.

use crate::data::TrainingSet;
use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, KernelGrad, KernelKind};
use crate::spectral::{sample_spectrum, Member, SpectralPrior};

/// Smallest spectral scale representable after the softplus map.
const MIN_SCALE: f64 = 1e-9;

/// Imaginary-part scale and bias are stored in multiples of this, so optimizer
/// steps on them are relative to the initial frequency range.
const IMAG_UNIT: f64 = 15.0;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    let y = y.max(MIN_SCALE);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn param_count(kind: KernelKind, n: usize) -> usize {
    match kind {
        KernelKind::Contextual => n + 2,
        _ => n + 5,
    }
}

pub fn param_names(kind: KernelKind, n: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..n).map(|d| format!("log_lengthscale_{d}")).collect();
    names.push("log_noise_var".into());
    match kind {
        KernelKind::Contextual => names.push("log_time_lengthscale".into()),
        _ => names.extend(["rho_scale_real", "bias_real", "rho_scale_imag", "bias_imag"].map(String::from)),
    }
    names
}

/// Index of the first spectral entry, or `None` for `Contextual`.
pub fn spectral_offset(kind: KernelKind, n: usize) -> Option<usize> {
    kind.uses_spectrum().then_some(n + 1)
}

pub fn pack(cfg: &KernelConfig) -> Vec<f64> {
    let mut theta: Vec<f64> = cfg.lengthscales.iter().map(|l| l.ln()).collect();
    theta.push(cfg.noise_var.ln());
    match cfg.kind {
        KernelKind::Contextual => theta.push(cfg.context_time_lengthscale.ln()),
        _ => {
            let p = cfg.spectrum.prior.unwrap_or_default();
            theta.extend([
                softplus_inv(p.scale_real),
                p.bias_real,
                softplus_inv(p.scale_imag / IMAG_UNIT),
                p.bias_imag / IMAG_UNIT,
            ]);
        }
    }
    theta
}

/// Inverse of [`pack`]. A fixed spectrum (no base draws) is left unchanged.
pub fn unpack(template: &KernelConfig, theta: &[f64]) -> Result<KernelConfig> {
    let n = template.state_dim();
    if theta.len() != param_count(template.kind, n) {
        return Err(Error::invalid("hyperparameter vector has the wrong length"));
    }
    let mut cfg = template.clone();
    cfg.lengthscales = theta[..n].iter().map(|v| v.exp()).collect();
    cfg.noise_var = theta[n].exp();
    match cfg.kind {
        KernelKind::Contextual => cfg.context_time_lengthscale = theta[n + 1].exp(),
        _ => {
            if cfg.spectrum.is_reparameterizable() {
                let prior = SpectralPrior::new(
                    softplus(theta[n + 1]).max(MIN_SCALE),
                    theta[n + 2],
                    (IMAG_UNIT * softplus(theta[n + 3])).max(MIN_SCALE),
                    IMAG_UNIT * theta[n + 4],
                )?;
                cfg.spectrum = cfg.spectrum.reparameterize(&prior)?;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Maps a kernel gradient and a noise-variance derivative onto the packed vector.
pub fn chain(cfg: &KernelConfig, theta: &[f64], grad: &KernelGrad, d_noise_var: f64) -> Vec<f64> {
    let n = cfg.state_dim();
    let mut out = vec![0.0; theta.len()];
    out[..n].copy_from_slice(&grad.log_lengthscales);
    out[n] = d_noise_var * cfg.noise_var;
    match cfg.kind {
        KernelKind::Contextual => out[n + 1] = grad.log_time_lengthscale,
        _ => {
            if !cfg.spectrum.is_reparameterizable() {
                return out;
            }
            let ds_scale = sigmoid(theta[n + 1]);
            let dw_scale = IMAG_UNIT * sigmoid(theta[n + 3]);
            for j in 0..cfg.spectrum.len() {
                let (k, member) = cfg.spectrum.member(j);
                let [u, v] = cfg.spectrum.base_draws[k];
                out[n + 1] += grad.eig_re[j] * (2.0 * u - 1.0) * ds_scale;
                out[n + 2] += grad.eig_re[j];
                let sign = match member {
                    Member::Upper => 1.0,
                    Member::Lower => -1.0,
                    Member::Real => 0.0,
                };
                out[n + 3] += sign * grad.eig_im[j] * v * dw_scale;
                out[n + 4] += sign * grad.eig_im[j] * IMAG_UNIT;
            }
        }
    }
    out
}

/// Freeze mask that keeps the lengthscales fixed.
pub fn freeze_lengthscales(kind: KernelKind, n: usize) -> Vec<bool> {
    let mut mask = vec![false; param_count(kind, n)];
    mask[..n].iter_mut().for_each(|m| *m = true);
    mask
}

/// Initial configuration: zero mean, `σ_s² = 1`, `σ_on² = 1`, lengthscales
/// `(√n_in / 2)·std` per input coordinate, spectral prior `(1, 0, 15, 0)`.
///
/// For `Contextual` the input is `(x0, t)`, so `n_in = n + 1` and the time
/// lengthscale uses the spread of the forecast times.
pub fn initial_config(kind: KernelKind, set: &TrainingSet, d: usize, seed: u64) -> Result<KernelConfig> {
    let n = set.state_dim();
    let windows = set.windows();
    let rows = if kind == KernelKind::Kesd { set.grid.len() } else { 1 };
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); n];
    for w in &windows {
        for row in w.tail_states(rows).chunks(n) {
            for (dd, v) in row.iter().enumerate() {
                values[dd].push(*v);
            }
        }
    }
    let n_in = if kind == KernelKind::Contextual { n + 1 } else { n };
    let factor = (n_in as f64).sqrt() / 2.0;
    let lengthscales = values.iter().map(|v| factor * spread(v)).collect();
    match kind {
        KernelKind::Contextual => {
            let times: Vec<f64> = set.pairs.iter().map(|p| p.forecast_time).collect();
            KernelConfig::contextual(lengthscales, factor * spread(&times))
        }
        KernelKind::Sd => KernelConfig::sd(lengthscales, sample_spectrum(&SpectralPrior::default(), d, seed)?),
        KernelKind::Kesd => KernelConfig::kesd(
            lengthscales,
            set.grid.clone(),
            sample_spectrum(&SpectralPrior::default(), d, seed)?,
        ),
    }
}

/// Population standard deviation, or 1 when degenerate.
fn spread(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 1.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    let s = var.sqrt();
    if s > 1e-12 {
        s
    } else {
        1.0
    }
}
