//! Gram assembly and its reverse-mode derivative.
//!
//! Inputs are grouped by past window (pointer identity). For every pair of
//! windows `(p, q)` the `G × G` base block and the per-eigenvalue crosses
//! `C_j(p, q)` are formed once; the temporal features then enter through one
//! real matrix product per row window.

use std::collections::HashMap;

use faer::Mat;
use num_complex::Complex64;

use super::{Input, KernelConfig, KernelKind};
use crate::data::Trajectory;
use crate::error::Result;
use crate::linalg::{matmul_into, symmetrize};

/// Inputs grouped by past window, in order of first appearance.
struct Groups {
    /// Window states divided by the lengthscales, `G × n` row-major.
    scaled: Vec<Vec<f64>>,
    members: Vec<Vec<usize>>,
    /// Row offset of the kernel window inside the full past, in values.
    offsets: Vec<usize>,
    past_lens: Vec<usize>,
}

fn group(cfg: &KernelConfig, inputs: &[Input]) -> Result<Groups> {
    let mut index: HashMap<*const Trajectory, usize> = HashMap::new();
    let mut groups = Groups {
        scaled: Vec::new(),
        members: Vec::new(),
        offsets: Vec::new(),
        past_lens: Vec::new(),
    };
    let n = cfg.state_dim();
    for (i, z) in inputs.iter().enumerate() {
        let key = std::sync::Arc::as_ptr(&z.past);
        let slot = match index.get(&key) {
            Some(&s) => s,
            None => {
                let states = cfg.window_states(&z.past)?;
                let scaled = states
                    .chunks(n)
                    .flat_map(|row| row.iter().zip(&cfg.lengthscales).map(|(x, l)| x / l))
                    .collect();
                groups.scaled.push(scaled);
                groups.members.push(Vec::new());
                groups.offsets.push(z.past.states_flat().len() - states.len());
                groups.past_lens.push(z.past.states_flat().len());
                index.insert(key, groups.members.len() - 1);
                groups.members.len() - 1
            }
        };
        groups.members[slot].push(i);
    }
    Ok(groups)
}

/// `B[g,h] = σ_s² exp(−½‖x̃_g − ỹ_h‖²)` on pre-scaled states.
fn base_block(xa: &[f64], xb: &[f64], n: usize, signal_var: f64, out: &mut Mat<f64>) {
    for (g, ra) in xa.chunks(n).enumerate() {
        for (h, rb) in xb.chunks(n).enumerate() {
            let r2: f64 = ra.iter().zip(rb).map(|(a, b)| (a - b) * (a - b)).sum();
            out[(g, h)] = signal_var * (-0.5 * r2).exp();
        }
    }
}

/// Real and imaginary parts of `e^{λ_j t_i}`, `D × N`.
fn features(cfg: &KernelConfig, inputs: &[Input]) -> (Mat<f64>, Mat<f64>) {
    let d = cfg.spectrum.len();
    let mut er = Mat::zeros(d, inputs.len());
    let mut ei = Mat::zeros(d, inputs.len());
    for (i, z) in inputs.iter().enumerate() {
        for (j, lam) in cfg.spectrum.eigenvalues.iter().enumerate() {
            let e = (lam * z.time).exp();
            er[(j, i)] = e.re;
            ei[(j, i)] = e.im;
        }
    }
    (er, ei)
}

/// Quadrature weights as `G × D` real and imaginary matrices.
fn weight_mats(cfg: &KernelConfig) -> (Mat<f64>, Mat<f64>) {
    let w = cfg.weights();
    let g = cfg.window_grid.len();
    let d = cfg.spectrum.len();
    let wr = Mat::from_fn(g, d, |gi, j| w.row(j)[gi].re);
    let wi = Mat::from_fn(g, d, |gi, j| w.row(j)[gi].im);
    (wr, wi)
}

/// Scratch space for the per-window-pair cross computation.
struct Cross {
    base: Mat<f64>,
    p: Mat<f64>,
    q: Mat<f64>,
}

impl Cross {
    fn new(g: usize, d: usize) -> Self {
        Cross {
            base: Mat::zeros(g, g),
            p: Mat::zeros(g, d),
            q: Mat::zeros(g, d),
        }
    }

    /// Fills `base` and returns `C_j = Σ_gh w_jg w̄_jh B[g,h]` for all `j`.
    fn compute(
        &mut self,
        cfg: &KernelConfig,
        xa: &[f64],
        xb: &[f64],
        wr: &Mat<f64>,
        wi: &Mat<f64>,
        out: &mut [Complex64],
    ) {
        base_block(xa, xb, cfg.state_dim(), cfg.signal_var, &mut self.base);
        matmul_into(self.p.as_mut(), self.base.as_ref(), wr.as_ref(), false);
        matmul_into(self.q.as_mut(), self.base.as_ref(), wi.as_ref(), false);
        contract(wr, wi, &self.p, &self.q, None, out);
    }
}

/// `Σ_g s_g w_gj (P − iQ)_gj` with optional per-row factors `s`.
fn contract(wr: &Mat<f64>, wi: &Mat<f64>, p: &Mat<f64>, q: &Mat<f64>, scale: Option<&[f64]>, out: &mut [Complex64]) {
    for (j, c) in out.iter_mut().enumerate() {
        let (mut re, mut im) = (0.0, 0.0);
        for g in 0..wr.nrows() {
            let s = scale.map_or(1.0, |s| s[g]);
            let (a, b) = (wr[(g, j)], wi[(g, j)]);
            let (pv, qv) = (p[(g, j)], q[(g, j)]);
            re += s * (a * pv + b * qv);
            im += s * (b * pv - a * qv);
        }
        *c = Complex64::new(re, im);
    }
}

/// `|A| × |B|` covariance matrix.
pub fn gram(cfg: &KernelConfig, a: &[Input], b: &[Input]) -> Result<Mat<f64>> {
    match cfg.kind {
        KernelKind::Contextual => contextual_gram(cfg, a, b),
        _ => spectral_gram(cfg, a, b, false),
    }
}

/// Gram of a set with itself, symmetrized as `(K + Kᵀ)/2`.
pub fn gram_sym(cfg: &KernelConfig, a: &[Input]) -> Result<Mat<f64>> {
    let mut k = match cfg.kind {
        KernelKind::Contextual => contextual_gram(cfg, a, a)?,
        _ => spectral_gram(cfg, a, a, true)?,
    };
    symmetrize(&mut k);
    Ok(k)
}

/// Column inputs ordered by group: `order[start[q]..start[q + 1]]` are the
/// members of group `q`.
fn column_order(groups: &Groups) -> (Vec<usize>, Vec<usize>) {
    let mut order = Vec::new();
    let mut start = vec![0];
    for cols in &groups.members {
        order.extend_from_slice(cols);
        start.push(order.len());
    }
    (order, start)
}

/// With `symmetric`, `b` must equal `a` and only window pairs `q ≥ p` are
/// evaluated; the rest is mirrored.
fn spectral_gram(cfg: &KernelConfig, a: &[Input], b: &[Input], symmetric: bool) -> Result<Mat<f64>> {
    let ga = group(cfg, a)?;
    let gb = if symmetric { None } else { Some(group(cfg, b)?) };
    let gb = gb.as_ref().unwrap_or(&ga);
    let d = cfg.spectrum.len();
    let g = cfg.window_grid.len();
    let inv_d = 1.0 / d as f64;
    let (wr, wi) = weight_mats(cfg);
    let (ear, eai) = features(cfg, a);
    let (ebr, ebi) = features(cfg, b);
    let (order, start) = column_order(gb);

    let mut k = Mat::zeros(a.len(), b.len());
    let mut cross = Cross::new(g, d);
    let mut c = vec![Complex64::new(0.0, 0.0); d];
    // Column `pos` holds Re and Im of C_j(p, q) · conj(e^{λ_j t_b}) for `b = order[pos]`.
    let mut v = Mat::<f64>::zeros(2 * d, b.len());
    for (p, rows) in ga.members.iter().enumerate() {
        let first = if symmetric { p } else { 0 };
        for q in first..gb.members.len() {
            cross.compute(cfg, &ga.scaled[p], &gb.scaled[q], &wr, &wi, &mut c);
            for pos in start[q]..start[q + 1] {
                let col = order[pos];
                for (j, cj) in c.iter().enumerate() {
                    let (er, ei) = (ebr[(j, col)], ebi[(j, col)]);
                    v[(j, pos)] = cj.re * er + cj.im * ei;
                    v[(d + j, pos)] = cj.im * er - cj.re * ei;
                }
            }
        }
        let lhs = Mat::from_fn(rows.len(), 2 * d, |r, j| {
            if j < d {
                ear[(j, rows[r])] * inv_d
            } else {
                -eai[(j - d, rows[r])] * inv_d
            }
        });
        let from = start[first];
        let mut block = Mat::zeros(rows.len(), b.len() - from);
        matmul_into(
            block.as_mut(),
            lhs.as_ref(),
            v.as_ref().subcols(from, b.len() - from),
            false,
        );
        for (off, &col) in order[from..].iter().enumerate() {
            for (r, &row) in rows.iter().enumerate() {
                k[(row, col)] = block[(r, off)];
            }
        }
        if symmetric {
            for (r, &row) in rows.iter().enumerate() {
                for (off, &col) in order[start[p + 1]..].iter().enumerate() {
                    k[(col, row)] = block[(r, off + start[p + 1] - from)];
                }
            }
        }
    }
    Ok(k)
}

fn contextual_gram(cfg: &KernelConfig, a: &[Input], b: &[Input]) -> Result<Mat<f64>> {
    let ga = group(cfg, a)?;
    let gb = group(cfg, b)?;
    let n = cfg.state_dim();
    let lt = cfg.context_time_lengthscale;
    let mut k = Mat::zeros(a.len(), b.len());
    let mut base = Mat::zeros(1, 1);
    for (p, rows) in ga.members.iter().enumerate() {
        for (q, cols) in gb.members.iter().enumerate() {
            base_block(&ga.scaled[p], &gb.scaled[q], n, cfg.signal_var, &mut base);
            let spatial = base[(0, 0)];
            for &row in rows {
                for &col in cols {
                    let dt = (a[row].time - b[col].time) / lt;
                    k[(row, col)] = spatial * (-0.5 * dt * dt).exp();
                }
            }
        }
    }
    Ok(k)
}

/// Prior variances `k(z, z)`.
pub fn gram_diag(cfg: &KernelConfig, a: &[Input]) -> Result<Vec<f64>> {
    let ga = group(cfg, a)?;
    if cfg.kind == KernelKind::Contextual {
        return Ok(vec![cfg.signal_var; a.len()]);
    }
    let d = cfg.spectrum.len();
    let (wr, wi) = weight_mats(cfg);
    let mut cross = Cross::new(cfg.window_grid.len(), d);
    let mut c = vec![Complex64::new(0.0, 0.0); d];
    let mut out = vec![0.0; a.len()];
    for (p, rows) in ga.members.iter().enumerate() {
        cross.compute(cfg, &ga.scaled[p], &ga.scaled[p], &wr, &wi, &mut c);
        for &row in rows {
            let t = a[row].time;
            let total: f64 = cfg
                .spectrum
                .eigenvalues
                .iter()
                .zip(&c)
                .map(|(lam, cj)| (lam * t).exp().norm_sqr() * cj.re)
                .sum();
            out[row] = total / d as f64;
        }
    }
    Ok(out)
}

/// Gradient of `Σ_ab U_ab K_ab` for an upstream matrix `U`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KernelGrad {
    pub log_lengthscales: Vec<f64>,
    /// With respect to `Re λ_j`.
    pub eig_re: Vec<f64>,
    /// With respect to `Im λ_j`.
    pub eig_im: Vec<f64>,
    pub log_time_lengthscale: f64,
    /// Per distinct row window (first-appearance order in the row inputs),
    /// gradient with respect to its flattened states. Only through the row
    /// argument; empty unless requested.
    pub window_states: Vec<Vec<f64>>,
    /// Per row input, with respect to its forecast time (contextual only).
    pub times: Vec<f64>,
}

/// Reverse-mode derivative of [`gram`]`(cfg, a, b)` contracted with `upstream`.
///
/// Input gradients cover the dependence through `a` only. For a symmetric
/// Gram `k(Z, Z)` pass `U + Uᵀ` to obtain the full input gradient.
pub fn gram_backward(
    cfg: &KernelConfig,
    a: &[Input],
    b: &[Input],
    upstream: &Mat<f64>,
    want_inputs: bool,
) -> Result<KernelGrad> {
    assert_eq!((upstream.nrows(), upstream.ncols()), (a.len(), b.len()));
    match cfg.kind {
        KernelKind::Contextual => contextual_backward(cfg, a, b, upstream, want_inputs),
        _ => spectral_backward(cfg, a, b, upstream, want_inputs, false),
    }
}

/// Hyperparameter gradient of `Σ_ab U_ab K_ab` for `K = k(A, A)` and a
/// symmetric `U`, visiting each window pair once.
pub fn gram_sym_backward(cfg: &KernelConfig, a: &[Input], upstream: &Mat<f64>) -> Result<KernelGrad> {
    assert_eq!((upstream.nrows(), upstream.ncols()), (a.len(), a.len()));
    match cfg.kind {
        KernelKind::Contextual => contextual_backward(cfg, a, a, upstream, false),
        _ => spectral_backward(cfg, a, a, upstream, false, true),
    }
}

/// Reverse-mode derivative of [`gram_diag`] contracted with `upstream`
/// (hyperparameters only).
pub fn gram_diag_backward(cfg: &KernelConfig, a: &[Input], upstream: &[f64]) -> Result<KernelGrad> {
    assert_eq!(a.len(), upstream.len());
    let mut index: HashMap<*const Trajectory, usize> = HashMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, z) in a.iter().enumerate() {
        let slot = *index.entry(std::sync::Arc::as_ptr(&z.past)).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[slot].push(i);
    }
    let mut total = KernelGrad {
        log_lengthscales: vec![0.0; cfg.state_dim()],
        eig_re: vec![0.0; cfg.spectrum.len()],
        eig_im: vec![0.0; cfg.spectrum.len()],
        ..Default::default()
    };
    if cfg.kind == KernelKind::Contextual {
        return Ok(total);
    }
    for rows in members {
        let sub: Vec<Input> = rows.iter().map(|&i| a[i].clone()).collect();
        let u = Mat::from_fn(
            rows.len(),
            rows.len(),
            |r, c| if r == c { upstream[rows[r]] } else { 0.0 },
        );
        let g = spectral_backward(cfg, &sub, &sub, &u, false, true)?;
        total.add_params(&g, 1.0);
    }
    Ok(total)
}

impl KernelGrad {
    /// Adds `factor` times the hyperparameter parts of `other`.
    pub fn add_params(&mut self, other: &KernelGrad, factor: f64) {
        let axpy = |dst: &mut Vec<f64>, src: &[f64]| {
            if dst.len() < src.len() {
                dst.resize(src.len(), 0.0);
            }
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += factor * s);
        };
        axpy(&mut self.log_lengthscales, &other.log_lengthscales);
        axpy(&mut self.eig_re, &other.eig_re);
        axpy(&mut self.eig_im, &other.eig_im);
        self.log_time_lengthscale += factor * other.log_time_lengthscale;
    }
}

/// With `symmetric`, `b` must equal `a`, `upstream` must be symmetric, and
/// input gradients are not available.
fn spectral_backward(
    cfg: &KernelConfig,
    a: &[Input],
    b: &[Input],
    upstream: &Mat<f64>,
    want_inputs: bool,
    symmetric: bool,
) -> Result<KernelGrad> {
    debug_assert!(!(symmetric && want_inputs));
    let ga = group(cfg, a)?;
    let gb = if symmetric { None } else { Some(group(cfg, b)?) };
    let gb = gb.as_ref().unwrap_or(&ga);
    let n = cfg.state_dim();
    let d = cfg.spectrum.len();
    let g = cfg.window_grid.len();
    let inv_d = 1.0 / d as f64;
    let tau: Vec<f64> = cfg.window_grid.to_vec();
    let (wr, wi) = weight_mats(cfg);
    let wr_tau = Mat::from_fn(g, d, |gi, j| tau[gi] * wr[(gi, j)]);
    let wi_tau = Mat::from_fn(g, d, |gi, j| tau[gi] * wi[(gi, j)]);
    let (ear, eai) = features(cfg, a);
    let (ebr, ebi) = features(cfg, b);

    let mut grad = KernelGrad {
        log_lengthscales: vec![0.0; n],
        eig_re: vec![0.0; d],
        eig_im: vec![0.0; d],
        log_time_lengthscale: 0.0,
        window_states: if want_inputs {
            ga.past_lens.iter().map(|&len| vec![0.0; len]).collect()
        } else {
            Vec::new()
        },
        times: vec![0.0; a.len()],
    };

    let mut cross = Cross::new(g, d);
    let mut p2 = Mat::<f64>::zeros(g, d);
    let mut q2 = Mat::<f64>::zeros(g, d);
    let mut ur = Mat::<f64>::zeros(g, d);
    let mut ui = Mat::<f64>::zeros(g, d);
    let mut omega = Mat::<f64>::zeros(g, g);
    let zero = Complex64::new(0.0, 0.0);
    let mut c = vec![zero; d];
    let mut c_left = vec![zero; d];
    let mut c_right = vec![zero; d];

    let mut g0 = vec![zero; d];
    let mut gt = vec![zero; d];
    let mut gd = vec![zero; d];
    for (p, rows) in ga.members.iter().enumerate() {
        // Z = [Er, Ei, t·Er, t·Ei]ᵀ U_p: per column b, Σ_a U_ab e^{λ t_a} (and × t_a).
        let up = Mat::from_fn(rows.len(), b.len(), |r, col| upstream[(rows[r], col)]);
        let fp = Mat::from_fn(4 * d, rows.len(), |j, r| {
            let row = rows[r];
            let t = a[row].time;
            match j / d {
                0 => ear[(j, row)],
                1 => eai[(j - d, row)],
                2 => t * ear[(j - 2 * d, row)],
                _ => t * eai[(j - 3 * d, row)],
            }
        });
        let mut zm = Mat::zeros(4 * d, b.len());
        matmul_into(zm.as_mut(), fp.as_ref(), up.as_ref(), false);

        let first = if symmetric { p } else { 0 };
        for q in first..gb.members.len() {
            let cols = &gb.members[q];
            // Off-diagonal pairs stand for both (p, q) and (q, p).
            let weight = if symmetric && q != p { 2.0 * inv_d } else { inv_d };
            let xa = &ga.scaled[p];
            let xb = &gb.scaled[q];
            cross.compute(cfg, xa, xb, &wr, &wi, &mut c);
            contract(&wr, &wi, &cross.p, &cross.q, Some(&tau), &mut c_left);
            matmul_into(p2.as_mut(), cross.base.as_ref(), wr_tau.as_ref(), false);
            matmul_into(q2.as_mut(), cross.base.as_ref(), wi_tau.as_ref(), false);
            contract(&wr, &wi, &p2, &q2, None, &mut c_right);

            g0.fill(zero);
            gt.fill(zero);
            gd.fill(zero);
            for &col in cols {
                let tb = b[col].time;
                for j in 0..d {
                    let eb = Complex64::new(ebr[(j, col)], -ebi[(j, col)]);
                    let z = Complex64::new(zm[(j, col)], zm[(d + j, col)]);
                    let zt = Complex64::new(zm[(2 * d + j, col)], zm[(3 * d + j, col)]);
                    g0[j] += z * eb;
                    gt[j] += (zt + z * tb) * eb;
                    gd[j] += (zt - z * tb) * eb;
                }
            }
            for j in 0..d {
                let ds = gt[j] * c[j] - g0[j] * (c_left[j] + c_right[j]);
                let dw = gd[j] * c[j] - g0[j] * (c_left[j] - c_right[j]);
                grad.eig_re[j] += ds.re * weight;
                grad.eig_im[j] -= dw.im * weight;
                let scaled = g0[j] * weight;
                for gi in 0..g {
                    let u = Complex64::new(wr[(gi, j)], wi[(gi, j)]) * scaled;
                    ur[(gi, j)] = u.re;
                    ui[(gi, j)] = u.im;
                }
            }
            // Ω = Re(U W̄ᵀ): upstream of the base block.
            matmul_into(omega.as_mut(), ur.as_ref(), wr.as_ref().transpose(), false);
            matmul_into(omega.as_mut(), ui.as_ref(), wi.as_ref().transpose(), true);
            for (gi, ra) in xa.chunks(n).enumerate() {
                for (hi, rb) in xb.chunks(n).enumerate() {
                    let coef = omega[(gi, hi)] * cross.base[(gi, hi)];
                    for dd in 0..n {
                        let delta = ra[dd] - rb[dd];
                        grad.log_lengthscales[dd] += coef * delta * delta;
                        if want_inputs {
                            grad.window_states[p][ga.offsets[p] + gi * n + dd] -= coef * delta / cfg.lengthscales[dd];
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

fn contextual_backward(
    cfg: &KernelConfig,
    a: &[Input],
    b: &[Input],
    upstream: &Mat<f64>,
    want_inputs: bool,
) -> Result<KernelGrad> {
    let ga = group(cfg, a)?;
    let gb = group(cfg, b)?;
    let n = cfg.state_dim();
    let lt = cfg.context_time_lengthscale;
    let mut grad = KernelGrad {
        log_lengthscales: vec![0.0; n],
        eig_re: vec![0.0; cfg.spectrum.len()],
        eig_im: vec![0.0; cfg.spectrum.len()],
        log_time_lengthscale: 0.0,
        window_states: if want_inputs {
            ga.past_lens.iter().map(|&len| vec![0.0; len]).collect()
        } else {
            Vec::new()
        },
        times: vec![0.0; a.len()],
    };
    let mut base = Mat::zeros(1, 1);
    for (p, rows) in ga.members.iter().enumerate() {
        for (q, cols) in gb.members.iter().enumerate() {
            let xa = &ga.scaled[p];
            let xb = &gb.scaled[q];
            base_block(xa, xb, n, cfg.signal_var, &mut base);
            let spatial = base[(0, 0)];
            let mut spatial_up = 0.0;
            for &row in rows {
                for &col in cols {
                    let dt = (a[row].time - b[col].time) / lt;
                    let kv = spatial * (-0.5 * dt * dt).exp();
                    let coef = upstream[(row, col)] * kv;
                    spatial_up += coef;
                    grad.log_time_lengthscale += coef * dt * dt;
                    if want_inputs {
                        grad.times[row] -= coef * dt / lt;
                    }
                }
            }
            for dd in 0..n {
                let delta = xa[dd] - xb[dd];
                grad.log_lengthscales[dd] += spatial_up * delta * delta;
                if want_inputs {
                    grad.window_states[p][ga.offsets[p] + dd] -= spatial_up * delta / cfg.lengthscales[dd];
                }
            }
        }
    }
    Ok(grad)
}
