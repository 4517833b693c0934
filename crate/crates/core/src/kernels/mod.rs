//! Covariance functions over `(forecast time, past window)` inputs.
//!
//! Three kinds share one configuration type:
//! - `Sd`: spectral decomposition kernel on the last state of the window,
//!   `Re Σ_j e^{λ_j t} e^{λ̄_j t'} k(x0, x0') / D`.
//! - `Kesd`: the same with the base kernel doubly symmetrized over the past
//!   window by quadrature weights `w_{j,g} ∝ e^{−λ_j τ_g}`.
//! - `Contextual`: separable SE over `(t, x0)`.
//!
//! [`covariance`] evaluates one entry directly and serves as the reference for
//! the grouped assembly in [`gram`].

use std::io::Write;
use std::sync::Arc;

use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::spectral::Spectrum;

mod gram;

pub use gram::{gram, gram_backward, gram_diag, gram_diag_backward, gram_sym, gram_sym_backward, KernelGrad};

/// Largest magnitude allowed for the real part of a quadrature exponent.
pub const EXPONENT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Sd,
    Kesd,
    Contextual,
}

impl KernelKind {
    pub fn label(self) -> &'static str {
        match self {
            KernelKind::Sd => "sd",
            KernelKind::Kesd => "kesd",
            KernelKind::Contextual => "contextual",
        }
    }

    pub fn uses_spectrum(self) -> bool {
        !matches!(self, KernelKind::Contextual)
    }
}

/// A GP input: forecast time (normalized units) and the past window ending at time 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Input {
    pub time: f64,
    pub past: Arc<Trajectory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
    /// Trailing time grid of the past window read by the kernel; `{0}` for `Sd`
    /// and `Contextual`.
    pub window_grid: Arc<[f64]>,
    pub spectrum: Spectrum,
    /// Only read by `Contextual`.
    pub context_time_lengthscale: f64,
}

impl KernelConfig {
    pub fn kesd(lengthscales: Vec<f64>, window_grid: Arc<[f64]>, spectrum: Spectrum) -> Result<Self> {
        let cfg = KernelConfig {
            kind: KernelKind::Kesd,
            lengthscales,
            signal_var: 1.0,
            noise_var: 1.0,
            window_grid,
            spectrum,
            context_time_lengthscale: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sd(lengthscales: Vec<f64>, spectrum: Spectrum) -> Result<Self> {
        let cfg = KernelConfig {
            kind: KernelKind::Sd,
            lengthscales,
            signal_var: 1.0,
            noise_var: 1.0,
            window_grid: Arc::from(vec![0.0]),
            spectrum,
            context_time_lengthscale: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The spectrum is carried along but never read.
    pub fn contextual(lengthscales: Vec<f64>, time_lengthscale: f64) -> Result<Self> {
        let cfg = KernelConfig {
            kind: KernelKind::Contextual,
            lengthscales,
            signal_var: 1.0,
            noise_var: 1.0,
            window_grid: Arc::from(vec![0.0]),
            spectrum: Spectrum::fixed(vec![Complex64::new(0.0, 0.0)])?,
            context_time_lengthscale: time_lengthscale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_noise(mut self, noise_var: f64) -> Result<Self> {
        self.noise_var = noise_var;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.lengthscales.is_empty() || !self.lengthscales.iter().all(|&l| positive(l)) {
            return Err(Error::invalid("lengthscales must be nonempty and positive"));
        }
        if !positive(self.signal_var) || !positive(self.noise_var) {
            return Err(Error::invalid("signal and noise variances must be positive"));
        }
        if !positive(self.context_time_lengthscale) {
            return Err(Error::invalid("time lengthscale must be positive"));
        }
        let grid = &self.window_grid;
        if grid.is_empty() || grid[grid.len() - 1] != 0.0 {
            return Err(Error::invalid("window grid must end at 0"));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("window grid must be strictly increasing"));
        }
        if self.kind != KernelKind::Kesd && grid.len() != 1 {
            return Err(Error::invalid("sd and contextual kernels use the singleton grid {0}"));
        }
        if self.spectrum.is_empty() {
            return Err(Error::invalid("spectrum must be nonempty"));
        }
        if self
            .spectrum
            .eigenvalues
            .iter()
            .any(|l| !l.re.is_finite() || !l.im.is_finite())
        {
            return Err(Error::invalid("non-finite eigenvalue"));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn weights(&self) -> QuadratureWeights {
        quadrature_weights(&self.spectrum, &self.window_grid)
    }

    /// The states the kernel reads from `past`: its trailing `window_grid.len()`
    /// rows, after checking that their times match the grid.
    pub fn window_states<'a>(&self, past: &'a Trajectory) -> Result<&'a [f64]> {
        if past.dim() != self.state_dim() {
            return Err(Error::invalid(format!(
                "past has dimension {}, kernel expects {}",
                past.dim(),
                self.state_dim()
            )));
        }
        let g = self.window_grid.len();
        if past.len() < g {
            return Err(Error::GridMismatch(format!(
                "past window has {} points, kernel grid has {g}",
                past.len()
            )));
        }
        let tail = &past.times()[past.len() - g..];
        let ok = tail
            .iter()
            .zip(self.window_grid.iter())
            .all(|(t, tau)| (t - tau).abs() <= 1e-9 * (1.0 + tau.abs()));
        if !ok {
            return Err(Error::GridMismatch(
                "past window times differ from the kernel grid".into(),
            ));
        }
        Ok(past.tail_states(g))
    }
}

/// `D × G` complex weights, row `j` for eigenvalue `λ_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureWeights {
    pub grid: Arc<[f64]>,
    pub values: Vec<Complex64>,
    pub rows: usize,
}

impl QuadratureWeights {
    pub fn row(&self, j: usize) -> &[Complex64] {
        let g = self.grid.len();
        &self.values[j * g..(j + 1) * g]
    }
}

/// Normalized trapezoid coefficients; a single point gets weight 1.
pub fn trapezoid(grid: &[f64]) -> Vec<f64> {
    let g = grid.len();
    if g == 1 {
        return vec![1.0];
    }
    let mut c = vec![0.0; g];
    for i in 0..g - 1 {
        let h = 0.5 * (grid[i + 1] - grid[i]);
        c[i] += h;
        c[i + 1] += h;
    }
    let total: f64 = c.iter().sum();
    c.iter_mut().for_each(|v| *v /= total);
    c
}

/// `w_{j,g} = e^{−λ_j τ_g} · trap_g / Σ trap`. The real part of the exponent is
/// clamped to `±EXPONENT_CLAMP`.
pub fn quadrature_weights(spectrum: &Spectrum, grid: &Arc<[f64]>) -> QuadratureWeights {
    let trap = trapezoid(grid);
    let mut values = Vec::with_capacity(spectrum.len() * grid.len());
    for lam in &spectrum.eigenvalues {
        for (tau, c) in grid.iter().zip(&trap) {
            values.push(clamped_exp(-lam * tau) * c);
        }
    }
    QuadratureWeights {
        grid: grid.clone(),
        values,
        rows: spectrum.len(),
    }
}

pub(crate) fn clamped_exp(z: Complex64) -> Complex64 {
    Complex64::new(z.re.clamp(-EXPONENT_CLAMP, EXPONENT_CLAMP), z.im).exp()
}

/// `σ_s² exp(−½ Σ_d ((x_d − x'_d)/ℓ_d)²)`.
pub fn se_base(x: &[f64], y: &[f64], lengthscales: &[f64], signal_var: f64) -> f64 {
    let r2: f64 = x
        .iter()
        .zip(y)
        .zip(lengthscales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    signal_var * (-0.5 * r2).exp()
}

/// `e^{λt} e^{λ̄t'}`.
pub fn temporal_feature(lambda: Complex64, t: f64, t_prime: f64) -> Complex64 {
    (lambda * t).exp() * (lambda.conj() * t_prime).exp()
}

/// `Σ_g Σ_h w_{j,g} w̄_{j,h} k(a_g, b_h)` for eigenvalue row `j`.
pub fn symmetrized_cross(
    weights: &QuadratureWeights,
    j: usize,
    a: &[f64],
    b: &[f64],
    lengthscales: &[f64],
    signal_var: f64,
) -> Result<Complex64> {
    let g = weights.grid.len();
    let n = lengthscales.len();
    if a.len() != g * n || b.len() != g * n {
        return Err(Error::GridMismatch(format!(
            "windows hold {} and {} values, grid needs {}",
            a.len(),
            b.len(),
            g * n
        )));
    }
    let w = weights.row(j);
    let mut acc = Complex64::new(0.0, 0.0);
    for (wg, xa) in w.iter().zip(a.chunks(n)) {
        for (wh, xb) in w.iter().zip(b.chunks(n)) {
            acc += wg * wh.conj() * se_base(xa, xb, lengthscales, signal_var);
        }
    }
    Ok(acc)
}

/// Spectral sum before the real part is taken, divided by `D`. Zero imaginary
/// part for conjugate-closed spectra. Not defined for `Contextual`.
pub fn covariance_sum(cfg: &KernelConfig, a: &Input, b: &Input) -> Result<Complex64> {
    if cfg.kind == KernelKind::Contextual {
        return Err(Error::invalid("the contextual kernel has no spectral sum"));
    }
    let xa = cfg.window_states(&a.past)?;
    let xb = cfg.window_states(&b.past)?;
    let weights = cfg.weights();
    let mut acc = Complex64::new(0.0, 0.0);
    for (j, lam) in cfg.spectrum.eigenvalues.iter().enumerate() {
        let cross = symmetrized_cross(&weights, j, xa, xb, &cfg.lengthscales, cfg.signal_var)?;
        acc += temporal_feature(*lam, a.time, b.time) * cross;
    }
    Ok(acc / cfg.spectrum.len() as f64)
}

/// One covariance entry, evaluated directly from the definition.
pub fn covariance(cfg: &KernelConfig, a: &Input, b: &Input) -> Result<f64> {
    match cfg.kind {
        KernelKind::Contextual => {
            let xa = cfg.window_states(&a.past)?;
            let xb = cfg.window_states(&b.past)?;
            Ok(se_base(&[a.time], &[b.time], &[cfg.context_time_lengthscale], 1.0)
                * se_base(xa, xb, &cfg.lengthscales, cfg.signal_var))
        }
        _ => Ok(covariance_sum(cfg, a, b)?.re),
    }
}

/// Writes a matrix as headerless CSV, one row per line.
pub fn write_matrix_csv(mut out: impl Write, m: &Mat<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
