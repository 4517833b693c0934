//! Empirical information gain, error metrics and experiment runners.

use std::io::Write;
use std::path::PathBuf;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{load_trajectories, standardize, window_dataset, Target, Trajectory, WindowSpec};
use crate::dynamics::{make_corpus, CorpusSpec, OdeSystem};
use crate::error::{Error, Result};
use crate::kernels::{gram_diag, gram_sym, Input, KernelConfig, KernelKind};
use crate::linalg::{cholesky, eigenvalues};
use crate::params::initial_config;
use crate::seed;
use crate::spectral::{sample_spectrum, SpectralPrior, Spectrum};

mod ablation;
mod benchmark;

pub use ablation::{run_ablation, AblationReport, AblationRow, AblationSpec};
pub use benchmark::{
    prepare_splits, run_benchmark, BenchmarkRow, BenchmarkSpec, ModelSpec, ModelSummary, Report, Splits,
};

/// Where an experiment's trajectories come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Simulated from a named system (see [`OdeSystem::by_name`]).
    Simulate { system: String, spec: CorpusSpec },
    /// Read from a trajectory CSV with `dim` state columns.
    Csv { path: PathBuf, dim: usize },
}

impl CorpusSource {
    pub fn load(&self) -> Result<Vec<Trajectory>> {
        match self {
            CorpusSource::Simulate { system, spec } => make_corpus(&OdeSystem::by_name(system)?, spec),
            CorpusSource::Csv { path, dim } => load_trajectories(path, *dim),
        }
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard deviation with divisor `n`; 0 for a single value.
pub fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Linearly interpolated sample quantile (`q` in `[0, 1]`).
pub fn quantile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("rmse of an empty set"));
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// `½ log det(I + K/σ²)` for a matrix `M = I + K/σ²` given in place.
fn half_logdet_plus_identity(mut m: faer::Mat<f64>, sigma2: f64) -> Vec<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] /= sigma2;
        }
        m[(i, i)] += 1.0;
    }
    match cholesky(m.as_ref()) {
        Some(llt) => {
            let l = llt.L();
            (0..n).map(|i| l[(i, i)].ln()).collect()
        }
        None => {
            log::warn!("Cholesky of I + K/σ² failed; clamping eigenvalues at zero");
            let mut eig: Vec<f64> = eigenvalues(m.as_ref())
                .into_iter()
                .map(|e| 0.5 * e.max(1.0).ln())
                .collect();
            eig.sort_by(|a, b| b.total_cmp(a));
            eig
        }
    }
}

/// `γ̂ = ½ log det(I + σ⁻² K)` over `inputs`.
pub fn empirical_info_gain(cfg: &KernelConfig, inputs: &[Input], sigma2: f64) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::invalid("information gain needs at least one input"));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::invalid("noise variance must be positive"));
    }
    let k = gram_sym(cfg, inputs)?;
    Ok(half_logdet_plus_identity(k, sigma2).iter().sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoGainCurve {
    pub kernel: String,
    pub spectrum: String,
    pub sizes: Vec<usize>,
    pub gains: Vec<f64>,
    /// `gains` divided by the gain at the smallest size.
    pub normalized: Vec<f64>,
}

impl InfoGainCurve {
    pub fn write_csv_rows(&self, mut out: impl Write) -> Result<()> {
        for i in 0..self.sizes.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                self.kernel, self.spectrum, self.sizes[i], self.gains[i], self.normalized[i]
            )?;
        }
        Ok(())
    }
}

/// Writes curves as CSV with header `kernel,spectrum,N,gain,normalized_gain`.
pub fn write_curves_csv(curves: &[InfoGainCurve], mut out: impl Write) -> Result<()> {
    writeln!(out, "kernel,spectrum,N,gain,normalized_gain")?;
    for c in curves {
        c.write_csv_rows(&mut out)?;
    }
    Ok(())
}

/// Random order of `n` items, fixed by `seed`.
pub fn nested_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, "info_gain_order")));
    order
}

/// Information gain on nested random subsets. One factorization of the
/// largest subset gives every prefix: `log det` of a leading block is the sum
/// of the leading `log L_ii`.
pub fn info_gain_curve(
    cfg: &KernelConfig,
    inputs: &[Input],
    sizes: &[usize],
    seed: u64,
    sigma2: f64,
    spectrum_label: &str,
) -> Result<InfoGainCurve> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[1] <= w[0]) || sizes[0] == 0 {
        return Err(Error::invalid("sizes must be positive and strictly increasing"));
    }
    let largest = *sizes.last().expect("nonempty");
    if largest > inputs.len() {
        return Err(Error::invalid(format!(
            "largest size {largest} exceeds the {} available inputs",
            inputs.len()
        )));
    }
    let order = nested_order(inputs.len(), seed);
    let chosen: Vec<Input> = order[..largest].iter().map(|&i| inputs[i].clone()).collect();
    let k = gram_sym(cfg, &chosen)?;
    let logs = half_logdet_plus_identity(k, sigma2);
    let mut prefix = Vec::with_capacity(logs.len() + 1);
    prefix.push(0.0);
    for v in &logs {
        prefix.push(prefix.last().unwrap() + v);
    }
    let gains: Vec<f64> = sizes.iter().map(|&s| prefix[s]).collect();
    let anchor = gains[0];
    let normalized = gains
        .iter()
        .map(|g| if anchor > 0.0 { g / anchor } else { 0.0 })
        .collect();
    Ok(InfoGainCurve {
        kernel: cfg.kind.label().to_string(),
        spectrum: spectrum_label.to_string(),
        sizes: sizes.to_vec(),
        gains,
        normalized,
    })
}

/// `1, 2, 4, …` up to `max`, with `max` itself appended.
pub fn geometric_sizes(max: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut s = 1;
    while s < max {
        sizes.push(s);
        s *= 2;
    }
    sizes.push(max);
    sizes
}

fn default_sigma2() -> f64 {
    1.0
}

fn default_info_eigenvalues() -> usize {
    64
}

/// Information-gain comparison of KE-SD with a known spectrum, KE-SD with a
/// random spectrum, and SD with the same random spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfoGainSpec {
    pub corpus: CorpusSource,
    pub target: Target,
    pub window: WindowSpec,
    /// Increasing subset sizes; defaults to a doubling ladder up to all inputs.
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
    /// Caps the number of inputs drawn from the corpus.
    #[serde(default)]
    pub max_inputs: Option<usize>,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    #[serde(default = "default_info_eigenvalues")]
    pub eigenvalues: usize,
    /// Known eigenvalues `[re, im]` in raw time units, conjugate-closed; tiled to `eigenvalues`.
    pub true_spectrum: Vec<[f64; 2]>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoGainReport {
    pub spec: InfoGainSpec,
    pub num_inputs: usize,
    pub curves: Vec<InfoGainCurve>,
}

impl InfoGainReport {
    pub fn curve(&self, kernel: KernelKind, spectrum: &str) -> Option<&InfoGainCurve> {
        self.curves
            .iter()
            .find(|c| c.kernel == kernel.label() && c.spectrum == spectrum)
    }
}

/// Signal variance giving `cfg` a mean prior variance of 1 over `inputs`.
fn unit_prior_variance(cfg: &KernelConfig, inputs: &[Input]) -> Result<f64> {
    let diag = gram_diag(cfg, inputs)?;
    let m = mean(&diag) / cfg.signal_var;
    if !(m.is_finite() && m > 0.0) {
        return Err(Error::invalid("kernel has no prior variance on the inputs"));
    }
    Ok(1.0 / m)
}

pub fn run_info_gain(spec: &InfoGainSpec) -> Result<InfoGainReport> {
    if spec.eigenvalues == 0 || spec.true_spectrum.is_empty() {
        return Err(Error::invalid(
            "info gain needs eigenvalues >= 1 and a nonempty true spectrum",
        ));
    }
    let raw = window_dataset(&spec.corpus.load()?, spec.target, spec.window)?;
    let (set, standardizer) = standardize(&raw)?;
    let mut inputs = set.inputs();
    if let Some(cap) = spec.max_inputs {
        inputs.truncate(cap);
    }
    let sizes = spec.sizes.clone().unwrap_or_else(|| geometric_sizes(inputs.len()));

    // Times are measured in units of `time_scale`, so eigenvalues scale by it.
    let scaled: Vec<Complex64> = spec
        .true_spectrum
        .iter()
        .map(|&[re, im]| Complex64::new(re, im) * standardizer.time_scale)
        .collect();
    let truth = Spectrum::tiled(&scaled, spec.eigenvalues)?;
    let random = sample_spectrum(
        &SpectralPrior::default(),
        spec.eigenvalues,
        seed::derive(spec.seed, "spectrum"),
    )?;
    let kesd = initial_config(KernelKind::Kesd, &set, spec.eigenvalues, 0)?;
    let sd = initial_config(KernelKind::Sd, &set, spec.eigenvalues, 0)?;
    let combos = [
        (
            KernelConfig::kesd(kesd.lengthscales.clone(), set.grid.clone(), truth)?,
            "true",
        ),
        (
            KernelConfig::kesd(kesd.lengthscales, set.grid.clone(), random.clone())?,
            "random",
        ),
        (KernelConfig::sd(sd.lengthscales, random)?, "random"),
    ];
    let mut curves = Vec::with_capacity(combos.len());
    for (mut cfg, label) in combos {
        cfg.signal_var = unit_prior_variance(&cfg, &inputs)?;
        let curve = info_gain_curve(&cfg, &inputs, &sizes, spec.seed, spec.sigma2, label)?;
        log::info!(
            "{} ({label}): gain {:.1} at N = {}",
            cfg.kind.label(),
            curve.gains.last().copied().unwrap_or(0.0),
            sizes.last().copied().unwrap_or(0)
        );
        curves.push(curve);
    }
    Ok(InfoGainReport {
        spec: spec.clone(),
        num_inputs: inputs.len(),
        curves,
    })
}
