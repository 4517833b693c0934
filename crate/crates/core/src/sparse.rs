//! Sparse variational GP whose inducing inputs are past windows.
//!
//! For spectral kernels each inducing input keeps the forecast time of the
//! training pair it was drawn from; only its window states move. The
//! contextual baseline additionally moves the inducing times.
//!
//! The training loss is the negative evidence lower bound
//! `Σ_i (N/|B|)·[½ log 2πσ² + ((y_i − μ_i)² + k̃_ii + a_iᵀ S a_i) / 2σ²] + KL(q‖p)`
//! with `a_i = K_uu⁻¹ k_i`, `μ_i = a_iᵀ m`, `k̃_ii = k_ii − k_iᵀ a_i`.

use std::io::Write;
use std::sync::Arc;

use faer::Mat;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{Standardizer, TrainingSet, Trajectory};
use crate::error::{Error, Result};
use crate::exact::{fit_exact, optimize_with, to_forecast, Forecast, OptimizeOptions};
use crate::kernels::{
    gram, gram_backward, gram_diag, gram_diag_backward, gram_sym, Input, KernelConfig, KernelGrad, KernelKind,
};
use crate::linalg::{jittered_cholesky, matmul, JitteredCholesky};
use crate::optim::Adam;
use crate::{params, seed};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseState {
    pub cfg: KernelConfig,
    pub standardizer: Standardizer,
    /// One window per inducing input, never shared between inputs.
    pub inducing_windows: Vec<Arc<Trajectory>>,
    /// Fixed for spectral kernels; optimized for the contextual kernel.
    pub inducing_times: Vec<f64>,
    pub mean: Vec<f64>,
    /// Lower-triangular factor of `S`, row-major `M × M`.
    pub factor: Vec<f64>,
}

impl SparseState {
    pub fn num_inducing(&self) -> usize {
        self.mean.len()
    }

    pub fn inducing(&self) -> Vec<Input> {
        self.inducing_windows
            .iter()
            .zip(&self.inducing_times)
            .map(|(w, &t)| Input {
                time: t,
                past: w.clone(),
            })
            .collect()
    }

    pub fn factor_mat(&self) -> Mat<f64> {
        let m = self.num_inducing();
        Mat::from_fn(m, m, |i, j| if j <= i { self.factor[i * m + j] } else { 0.0 })
    }

    /// `S = L Lᵀ`.
    pub fn covariance(&self) -> Mat<f64> {
        let l = self.factor_mat();
        matmul(l.as_ref(), l.as_ref().transpose())
    }

    /// Names of the parameter groups the trainer may move.
    pub fn trainable_groups(&self) -> Vec<&'static str> {
        let mut g = vec!["mean", "factor", "hyperparameters", "inducing_states"];
        if self.cfg.kind == KernelKind::Contextual {
            g.push("inducing_times");
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_inducing();
        if m == 0 {
            return Err(Error::invalid("at least one inducing input is required"));
        }
        if self.inducing_windows.len() != m || self.inducing_times.len() != m || self.factor.len() != m * m {
            return Err(Error::invalid("inducing arrays disagree in size"));
        }
        for (i, w) in self.inducing_windows.iter().enumerate() {
            if self.inducing_windows[..i].iter().any(|o| Arc::ptr_eq(o, w)) {
                return Err(Error::invalid("inducing windows must not be shared"));
            }
            self.cfg.window_states(w)?;
        }
        self.cfg.validate()
    }
}

/// Kernel matrices of the inducing inputs.
struct Prior {
    chol: JitteredCholesky,
    /// `K_uu⁻¹`.
    inv: Mat<f64>,
}

impl Prior {
    fn new(cfg: &KernelConfig, z: &[Input]) -> Result<Self> {
        let kuu = gram_sym(cfg, z)?;
        let chol = jittered_cholesky(kuu.as_ref())?;
        let inv = chol.inverse();
        Ok(Prior { chol, inv })
    }
}

/// Loss terms and the gradients with respect to the kernel matrices.
struct Terms {
    loss: f64,
    kl: f64,
    g_mean: Vec<f64>,
    /// Gradient with respect to the factor (lower triangle meaningful).
    g_factor: Mat<f64>,
    g_kub: Mat<f64>,
    g_kuu: Mat<f64>,
    g_kdiag: f64,
    g_noise_var: f64,
}

/// Loss for a batch given `K_ub` and `k(z_i, z_i)`, with `scale = N/|B|`.
#[allow(clippy::too_many_arguments)]
fn terms(
    state: &SparseState,
    prior: &Prior,
    kub: &Mat<f64>,
    kdiag: &[f64],
    y: &[f64],
    scale: f64,
    grads: bool,
) -> Terms {
    let mm = state.num_inducing();
    let nb = y.len();
    let noise = state.cfg.noise_var;
    let l = state.factor_mat();
    let s = matmul(l.as_ref(), l.as_ref().transpose());
    let a = &prior.inv;
    let m = &state.mean;

    let aa = matmul(a.as_ref(), kub.as_ref());
    let sa = matmul(s.as_ref(), aa.as_ref());
    let mut r = vec![0.0; nb];
    let mut data = 0.0;
    let mut d_noise = 0.0;
    for i in 0..nb {
        let mu: f64 = (0..mm).map(|p| aa[(p, i)] * m[p]).sum();
        let quad: f64 = (0..mm).map(|p| aa[(p, i)] * sa[(p, i)]).sum();
        let kk: f64 = (0..mm).map(|p| kub[(p, i)] * aa[(p, i)]).sum();
        r[i] = y[i] - mu;
        let excess = r[i] * r[i] + (kdiag[i] - kk) + quad;
        data += 0.5 * (LOG_2PI + noise.ln()) + excess / (2.0 * noise);
        d_noise += 0.5 / noise - excess / (2.0 * noise * noise);
    }
    data *= scale;
    d_noise *= scale;

    let am: Vec<f64> = (0..mm).map(|p| (0..mm).map(|q| a[(p, q)] * m[q]).sum()).collect();
    let tr_as: f64 = (0..mm)
        .map(|p| (0..mm).map(|q| a[(p, q)] * s[(q, p)]).sum::<f64>())
        .sum();
    let m_am: f64 = m.iter().zip(&am).map(|(x, y)| x * y).sum();
    let logdet_s: f64 = 2.0 * (0..mm).map(|i| l[(i, i)].abs().ln()).sum::<f64>();
    let kl = 0.5 * (tr_as + m_am - mm as f64 + prior.chol.log_det() - logdet_s);

    let mut out = Terms {
        loss: data + kl,
        kl,
        g_mean: Vec::new(),
        g_factor: Mat::zeros(0, 0),
        g_kub: Mat::zeros(0, 0),
        g_kuu: Mat::zeros(0, 0),
        g_kdiag: scale / (2.0 * noise),
        g_noise_var: d_noise,
    };
    if !grads {
        return out;
    }
    let c = scale / noise;
    out.g_mean = (0..mm)
        .map(|p| am[p] - c * (0..nb).map(|i| aa[(p, i)] * r[i]).sum::<f64>())
        .collect();

    // dLoss/dS = (c/2) Σ a_i a_iᵀ + ½ A; the log det S term adds −1/L_ii.
    let mut gs = matmul(aa.as_ref(), aa.as_ref().transpose());
    for p in 0..mm {
        for q in 0..mm {
            gs[(p, q)] = 0.5 * c * gs[(p, q)] + 0.5 * a[(p, q)];
        }
    }
    let mut gl = matmul(gs.as_ref(), l.as_ref());
    for p in 0..mm {
        for q in 0..mm {
            gl[(p, q)] *= 2.0;
        }
        gl[(p, p)] -= 1.0 / l[(p, p)];
    }
    out.g_factor = gl;

    // dLoss/dK_ub = c · A (−m rᵀ − K_ub + S a).
    let inner = Mat::from_fn(mm, nb, |p, i| -m[p] * r[i] - kub[(p, i)] + sa[(p, i)]);
    let mut gkub = matmul(a.as_ref(), inner.as_ref());
    for p in 0..mm {
        for i in 0..nb {
            gkub[(p, i)] *= c;
        }
    }
    out.g_kub = gkub;

    // Treating A as free: dLoss/dA, then dK_uu = −A (dLoss/dA) A + ½ A.
    let kr: Vec<f64> = (0..mm).map(|p| (0..nb).map(|i| kub[(p, i)] * r[i]).sum()).collect();
    let kk = matmul(kub.as_ref(), kub.as_ref().transpose());
    let ks = matmul(kub.as_ref(), sa.as_ref().transpose());
    let ga = Mat::from_fn(mm, mm, |p, q| {
        0.5 * c * (-(kr[p] * m[q] + m[p] * kr[q]) - kk[(p, q)] + ks[(p, q)] + ks[(q, p)])
            + 0.5 * (s[(p, q)] + m[p] * m[q])
    });
    let aga = matmul(matmul(a.as_ref(), ga.as_ref()).as_ref(), a.as_ref());
    out.g_kuu = Mat::from_fn(mm, mm, |p, q| -aga[(p, q)] + 0.5 * a[(p, q)]);
    out
}

/// Negative ELBO on `batch`, with data terms scaled by `total / |batch|`.
pub fn sparse_loss(state: &SparseState, batch: &TrainingSet, total: usize) -> Result<f64> {
    let z = state.inducing();
    let prior = Prior::new(&state.cfg, &z)?;
    let inputs = batch.inputs();
    let kub = gram(&state.cfg, &z, &inputs)?;
    let kdiag = gram_diag(&state.cfg, &inputs)?;
    let scale = total as f64 / batch.len() as f64;
    Ok(terms(state, &prior, &kub, &kdiag, &batch.targets(), scale, false).loss)
}

/// `KL(q(u) ‖ p(u))`.
pub fn sparse_kl(state: &SparseState) -> Result<f64> {
    let z = state.inducing();
    let prior = Prior::new(&state.cfg, &z)?;
    let empty = Mat::zeros(state.num_inducing(), 0);
    Ok(terms(state, &prior, &empty, &[], &[], 1.0, false).kl)
}

/// Which parts of the state a gradient step may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scope {
    Variational,
    Joint,
}

/// Flat parameter vector: `[m, lower(L), θ, window states, (times)]`.
struct Layout {
    m: usize,
    hyper: usize,
    states: Vec<usize>,
    times: bool,
}

impl Layout {
    fn new(state: &SparseState, scope: Scope) -> Self {
        let joint = scope == Scope::Joint;
        Layout {
            m: state.num_inducing(),
            hyper: if joint {
                params::param_count(state.cfg.kind, state.cfg.state_dim())
            } else {
                0
            },
            states: if joint {
                state.inducing_windows.iter().map(|w| w.states_flat().len()).collect()
            } else {
                Vec::new()
            },
            times: joint && state.cfg.kind == KernelKind::Contextual,
        }
    }

    fn pack(&self, state: &SparseState) -> Vec<f64> {
        let mut x = state.mean.clone();
        for i in 0..self.m {
            x.extend_from_slice(&state.factor[i * self.m..i * self.m + i + 1]);
        }
        if self.hyper > 0 {
            x.extend(params::pack(&state.cfg));
        }
        for w in state.inducing_windows.iter().take(self.states.len()) {
            x.extend_from_slice(w.states_flat());
        }
        if self.times {
            x.extend_from_slice(&state.inducing_times);
        }
        x
    }

    fn unpack(&self, template: &SparseState, x: &[f64]) -> Result<SparseState> {
        let mut s = template.clone();
        let m = self.m;
        s.mean = x[..m].to_vec();
        let mut at = m;
        for i in 0..m {
            for j in 0..=i {
                s.factor[i * m + j] = x[at];
                at += 1;
            }
        }
        if self.hyper > 0 {
            s.cfg = params::unpack(&template.cfg, &x[at..at + self.hyper])?;
            at += self.hyper;
        }
        for (k, &len) in self.states.iter().enumerate() {
            s.inducing_windows[k] = Arc::new(template.inducing_windows[k].with_states(x[at..at + len].to_vec())?);
            at += len;
        }
        if self.times {
            s.inducing_times = x[at..at + m].to_vec();
        }
        Ok(s)
    }

    fn gradient(&self, state: &SparseState, t: &Terms, kernel: Option<(&KernelGrad, &KernelGrad)>) -> Vec<f64> {
        let m = self.m;
        let mut g = t.g_mean.clone();
        for i in 0..m {
            for j in 0..=i {
                g.push(t.g_factor[(i, j)]);
            }
        }
        if let Some((params_grad, inputs_grad)) = kernel {
            if self.hyper > 0 {
                let theta = params::pack(&state.cfg);
                g.extend(params::chain(&state.cfg, &theta, params_grad, t.g_noise_var));
            }
            for k in 0..self.states.len() {
                g.extend_from_slice(&inputs_grad.window_states[k]);
            }
            if self.times {
                g.extend_from_slice(&inputs_grad.times);
            }
        }
        g
    }
}

/// Loss and flat gradient for a batch, recomputing every kernel matrix.
fn joint_step(
    state: &SparseState,
    layout: &Layout,
    inputs: &[Input],
    y: &[f64],
    scale: f64,
) -> Result<(f64, Vec<f64>)> {
    let z = state.inducing();
    let prior = Prior::new(&state.cfg, &z)?;
    let kub = gram(&state.cfg, &z, inputs)?;
    let kdiag = gram_diag(&state.cfg, inputs)?;
    let t = terms(state, &prior, &kub, &kdiag, y, scale, true);

    let mut through_kub = gram_backward(&state.cfg, &z, inputs, &t.g_kub, true)?;
    let sym = Mat::from_fn(z.len(), z.len(), |p, q| t.g_kuu[(p, q)] + t.g_kuu[(q, p)]);
    let through_kuu = gram_backward(&state.cfg, &z, &z, &sym, true)?;
    let through_diag = gram_diag_backward(&state.cfg, inputs, &vec![t.g_kdiag; inputs.len()])?;

    let mut params_grad = through_kub.clone();
    params_grad.add_params(&through_kuu, 0.5);
    params_grad.add_params(&through_diag, 1.0);
    for (dst, src) in through_kub.window_states.iter_mut().zip(&through_kuu.window_states) {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
    }
    for (dst, src) in through_kub.times.iter_mut().zip(&through_kuu.times) {
        *dst += src;
    }
    Ok((t.loss, layout.gradient(state, &t, Some((&params_grad, &through_kub)))))
}

/// Kernel columns for a fixed configuration and inducing set.
struct Cache {
    prior: Prior,
    kuf: Mat<f64>,
    kdiag: Vec<f64>,
    y: Vec<f64>,
}

impl Cache {
    fn new(state: &SparseState, data: &TrainingSet) -> Result<Self> {
        let z = state.inducing();
        let inputs = data.inputs();
        Ok(Cache {
            prior: Prior::new(&state.cfg, &z)?,
            kuf: gram(&state.cfg, &z, &inputs)?,
            kdiag: gram_diag(&state.cfg, &inputs)?,
            y: data.targets(),
        })
    }

    fn terms(&self, state: &SparseState, idx: Option<&[usize]>, grads: bool) -> Terms {
        let n = self.y.len();
        match idx {
            None => terms(state, &self.prior, &self.kuf, &self.kdiag, &self.y, 1.0, grads),
            Some(idx) => {
                let kub = Mat::from_fn(self.kuf.nrows(), idx.len(), |p, i| self.kuf[(p, idx[i])]);
                let kd: Vec<f64> = idx.iter().map(|&i| self.kdiag[i]).collect();
                let y: Vec<f64> = idx.iter().map(|&i| self.y[i]).collect();
                terms(state, &self.prior, &kub, &kd, &y, n as f64 / idx.len() as f64, grads)
            }
        }
    }
}

/// Picks `m` training pairs without replacement, fits an exact GP on them and
/// sets `q(u)` to that GP's posterior at the inducing inputs.
pub fn init_sparse(
    training: &TrainingSet,
    cfg0: &KernelConfig,
    m: usize,
    seed: u64,
    budget: usize,
) -> Result<SparseState> {
    if m == 0 || m > training.len() {
        return Err(Error::invalid(format!(
            "need 1 <= M <= N inducing inputs, got M = {m}, N = {}",
            training.len()
        )));
    }
    let mut rng = seed::rng(seed::derive(seed, "inducing"));
    let mut picks = sample(&mut rng, training.len(), m).into_vec();
    picks.sort_unstable();
    init_sparse_at(training, cfg0, &picks, budget)
}

/// As [`init_sparse`] with explicit pair indices.
pub fn init_sparse_at(
    training: &TrainingSet,
    cfg0: &KernelConfig,
    picks: &[usize],
    budget: usize,
) -> Result<SparseState> {
    let subset = training.subset(picks)?;
    let cfg = if budget > 1 {
        let opts = OptimizeOptions {
            budget,
            ..Default::default()
        };
        optimize_with(&subset, cfg0, &opts)?.0
    } else {
        cfg0.clone()
    };
    let model = fit_exact(&subset, &cfg)?;
    let z = model.inputs();
    let kzz = gram_sym(&cfg, z)?;
    // Posterior of the latent function at Z: mean K α, covariance K − K (K+σ²I)⁻¹ K.
    let mean: Vec<f64> = (0..z.len())
        .map(|i| (0..z.len()).map(|j| kzz[(i, j)] * model.alpha[j]).sum())
        .collect();
    let v = model.chol.solve_lower(kzz.as_ref());
    let vtv = matmul(v.as_ref().transpose(), v.as_ref());
    let mut s = Mat::from_fn(z.len(), z.len(), |i, j| kzz[(i, j)] - vtv[(i, j)]);
    crate::linalg::symmetrize(&mut s);
    // Jitter only when S is numerically singular: through the KL term any
    // perturbation of S is amplified by K_uu⁻¹.
    let plain = crate::linalg::cholesky(s.as_ref())
        .map(|llt| llt.L().to_owned())
        .filter(|l| (0..l.nrows()).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0));
    let l = match plain {
        Some(l) => l,
        None => jittered_cholesky(s.as_ref())?.factor().to_owned(),
    };
    let mm = z.len();
    let factor = (0..mm * mm)
        .map(|k| {
            let (i, j) = (k / mm, k % mm);
            if j <= i {
                l[(i, j)]
            } else {
                0.0
            }
        })
        .collect();
    let state = SparseState {
        cfg,
        standardizer: training.standardizer.clone(),
        inducing_windows: z.iter().map(|zi| Arc::new((*zi.past).clone())).collect(),
        inducing_times: z.iter().map(|zi| zi.time).collect(),
        mean,
        factor,
    };
    state.validate()?;
    Ok(state)
}

/// Approximate posterior in raw units; variance excludes observation noise.
pub fn sparse_predict(state: &SparseState, queries: &[Input]) -> Result<Forecast> {
    let (mean, var) = sparse_predict_standardized(state, queries)?;
    Ok(to_forecast(&state.standardizer, queries, &mean, &var))
}

pub fn sparse_predict_standardized(state: &SparseState, queries: &[Input]) -> Result<(Vec<f64>, Vec<f64>)> {
    if queries.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let z = state.inducing();
    let prior = Prior::new(&state.cfg, &z)?;
    let ku = gram(&state.cfg, &z, queries)?;
    let kzz = gram_diag(&state.cfg, queries)?;
    let a = matmul(prior.inv.as_ref(), ku.as_ref());
    let s = state.covariance();
    let sa = matmul(s.as_ref(), a.as_ref());
    let mm = z.len();
    let mut mean = vec![0.0; queries.len()];
    let mut var = vec![0.0; queries.len()];
    for q in 0..queries.len() {
        mean[q] = (0..mm).map(|p| a[(p, q)] * state.mean[p]).sum();
        let kak: f64 = (0..mm).map(|p| ku[(p, q)] * a[(p, q)]).sum();
        let asa: f64 = (0..mm).map(|p| a[(p, q)] * sa[(p, q)]).sum();
        var[q] = (kzz[q] - kak + asa).max(0.0);
    }
    Ok((mean, var))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Steps for variational-only, joint, and final variational phases.
    pub budgets: [usize; 3],
    pub learning_rate: f64,
    /// Full-data loss evaluations happen every this many steps.
    pub eval_every: usize,
    /// NLL budget of the exact fit used for initialization.
    pub init_budget: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 64,
            budgets: [300, 500, 200],
            learning_rate: 0.01,
            eval_every: 50,
            init_budget: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: usize,
    pub step: usize,
    pub batch_loss: f64,
    /// Full-data loss when it was evaluated at this step.
    pub full_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    /// CSV with header `phase,step,batch_loss,full_loss`.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "phase,step,batch_loss,full_loss")?;
        for r in &self.records {
            let full = r.full_loss.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", r.phase, r.step, r.batch_loss, full)?;
        }
        Ok(())
    }

    /// Full-data losses of the given phase, in step order.
    pub fn full_losses(&self, phase: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.phase == phase)
            .filter_map(|r| r.full_loss)
            .collect()
    }
}

/// Full-data loss on `data` for `state`, recomputing all kernel columns.
pub fn full_loss(state: &SparseState, data: &TrainingSet) -> Result<f64> {
    Ok(Cache::new(state, data)?.terms(state, None, false).loss)
}

/// Three-phase training: variational parameters on `training`; everything
/// jointly on `training`; variational parameters on `training ∪ validation`.
/// Each phase returns its best full-data iterate.
pub fn train_sparse(
    training: &TrainingSet,
    validation: Option<&TrainingSet>,
    cfg0: &KernelConfig,
    m: usize,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(SparseState, TrainLog)> {
    if opts.budgets.iter().any(|&b| b == 0) || opts.batch_size == 0 {
        return Err(Error::invalid("phase budgets and batch size must be >= 1"));
    }
    let mut state = init_sparse(training, cfg0, m, seed, opts.init_budget)?;
    let mut log = TrainLog::default();
    let mut rng = seed::rng(seed::derive(seed, "batches"));

    state = variational_phase(state, training, opts, opts.budgets[0], 1, &mut rng, &mut log)?;
    state = joint_phase(state, training, opts, &mut rng, &mut log)?;
    let union = match validation {
        Some(v) => training.concat(v)?,
        None => training.clone(),
    };
    state = variational_phase(state, &union, opts, opts.budgets[2], 3, &mut rng, &mut log)?;
    Ok((state, log))
}

fn batch_indices(rng: &mut impl rand::Rng, n: usize, b: usize) -> Option<Vec<usize>> {
    if b >= n {
        None
    } else {
        Some(sample(rng, n, b).into_vec())
    }
}

fn variational_phase(
    state: SparseState,
    data: &TrainingSet,
    opts: &TrainOptions,
    budget: usize,
    phase: usize,
    rng: &mut impl rand::Rng,
    log: &mut TrainLog,
) -> Result<SparseState> {
    let cache = Cache::new(&state, data)?;
    let layout = Layout::new(&state, Scope::Variational);
    let mut x = layout.pack(&state);
    let mut adam = Adam::new(x.len(), opts.learning_rate);
    let mut best = (state.clone(), cache.terms(&state, None, false).loss);
    log.records.push(LossRecord {
        phase,
        step: 0,
        batch_loss: best.1,
        full_loss: Some(best.1),
    });
    let mut current = state;
    for step in 1..=budget {
        let idx = batch_indices(rng, data.len(), opts.batch_size);
        let t = cache.terms(&current, idx.as_deref(), true);
        let g = layout.gradient(&current, &t, None);
        adam.step(&mut x, &g, None);
        current = layout.unpack(&current, &x)?;
        let mut record = LossRecord {
            phase,
            step,
            batch_loss: t.loss,
            full_loss: None,
        };
        if step % opts.eval_every == 0 || step == budget {
            let full = cache.terms(&current, None, false).loss;
            record.full_loss = Some(full);
            if full.is_finite() && full < best.1 {
                best = (current.clone(), full);
            }
        }
        log.records.push(record);
    }
    Ok(best.0)
}

fn joint_phase(
    state: SparseState,
    data: &TrainingSet,
    opts: &TrainOptions,
    rng: &mut impl rand::Rng,
    log: &mut TrainLog,
) -> Result<SparseState> {
    let layout = Layout::new(&state, Scope::Joint);
    let inputs = data.inputs();
    let targets = data.targets();
    let mut x = layout.pack(&state);
    let mut adam = Adam::new(x.len(), opts.learning_rate);
    let initial = full_loss(&state, data)?;
    let mut best = (state.clone(), initial);
    log.records.push(LossRecord {
        phase: 2,
        step: 0,
        batch_loss: initial,
        full_loss: Some(initial),
    });
    let mut current = state;
    let budget = opts.budgets[1];
    for step in 1..=budget {
        let idx = batch_indices(rng, data.len(), opts.batch_size).unwrap_or_else(|| (0..data.len()).collect());
        let bi: Vec<Input> = idx.iter().map(|&i| inputs[i].clone()).collect();
        let by: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
        let scale = data.len() as f64 / idx.len() as f64;
        let mut record = LossRecord {
            phase: 2,
            step,
            batch_loss: f64::NAN,
            full_loss: None,
        };
        match joint_step(&current, &layout, &bi, &by, scale) {
            Ok((loss, g)) if loss.is_finite() && g.iter().all(|v| v.is_finite()) => {
                record.batch_loss = loss;
                let before = x.clone();
                adam.step(&mut x, &g, None);
                match layout.unpack(&current, &x) {
                    Ok(next) => current = next,
                    Err(_) => {
                        x = before;
                        adam.learning_rate *= 0.5;
                    }
                }
            }
            _ => {
                // Step back to the best iterate and shrink the step.
                current = best.0.clone();
                x = layout.pack(&current);
                adam.learning_rate *= 0.5;
            }
        }
        if step % opts.eval_every == 0 || step == budget {
            let full = full_loss(&current, data).unwrap_or(f64::NAN);
            record.full_loss = Some(full);
            if full.is_finite() && full < best.1 {
                best = (current.clone(), full);
            }
        }
        log.records.push(record);
    }
    Ok(best.0)
}
