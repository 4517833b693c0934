//! Dense symmetric positive-definite numerics on top of `faer`.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Accum, Mat, MatRef, Par, Side};

use crate::error::{Error, Result};

/// Clears the upper halves of the vector registers.
///
/// faer's SIMD kernels return with dirty upper AVX state, after which every
/// legacy-SSE libm call (`exp`, `ln`) pays a transition penalty of roughly 30x.
/// Every faer call in this crate goes through a wrapper that ends with this.
#[inline]
pub(crate) fn settle() {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx")]
        unsafe fn zero_upper() {
            std::arch::x86_64::_mm256_zeroupper();
        }
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: AVX support was checked at runtime.
            unsafe { zero_upper() };
        }
    }
}

/// Cholesky factor of a symmetric matrix without jitter; `None` when it is not
/// numerically positive definite.
pub fn cholesky(a: MatRef<'_, f64>) -> Option<faer::linalg::solvers::Llt<f64>> {
    let out = a.llt(Side::Lower).ok();
    settle();
    out
}

/// Relative jitter added before the first factorization attempt.
pub const JITTER_START: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-2;

/// Cholesky factor of `A + jitter * I`.
pub struct JitteredCholesky {
    llt: faer::linalg::solvers::Llt<f64>,
    /// Absolute jitter that was added to the diagonal.
    pub jitter: f64,
}

impl std::fmt::Debug for JitteredCholesky {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JitteredCholesky")
            .field("n", &self.dim())
            .field("jitter", &self.jitter)
            .finish()
    }
}

/// Factorizes a symmetric matrix, adding `1e-8 * mean(diag)` to the diagonal
/// and escalating ×10 up to `1e-2 * mean(diag)`.
pub fn jittered_cholesky(a: MatRef<'_, f64>) -> Result<JitteredCholesky> {
    let n = a.nrows();
    if n == 0 {
        return Ok(JitteredCholesky {
            llt: Mat::<f64>::zeros(0, 0)
                .llt(Side::Lower)
                .map_err(|_| Error::invalid("empty factorization"))?,
            jitter: 0.0,
        });
    }
    let mean_diag = (0..n).map(|i| a[(i, i)]).sum::<f64>() / n as f64;
    let scale = if mean_diag.is_finite() && mean_diag > 0.0 {
        mean_diag
    } else {
        1.0
    };
    let mut rel = JITTER_START;
    let mut work = a.to_owned();
    while rel <= JITTER_MAX * (1.0 + 1e-12) {
        let jitter = rel * scale;
        for i in 0..n {
            work[(i, i)] = a[(i, i)] + jitter;
        }
        if let Some(llt) = cholesky(work.as_ref()) {
            let ok = (0..n).all(|i| llt.L()[(i, i)].is_finite() && llt.L()[(i, i)] > 0.0);
            if ok {
                return Ok(JitteredCholesky { llt, jitter });
            }
        }
        rel *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        min_eigenvalue: min_eigenvalue(a),
    })
}

impl JitteredCholesky {
    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    /// Lower-triangular factor.
    pub fn factor(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        self.llt.solve_in_place(rhs.as_mut());
        settle();
        (0..b.len()).map(|i| rhs[(i, 0)]).collect()
    }

    pub fn solve_mat(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        let mut rhs = b.to_owned();
        self.llt.solve_in_place(rhs.as_mut());
        settle();
        rhs
    }

    /// `L⁻¹ b` for a block of right-hand sides.
    pub fn solve_lower(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        let mut rhs = b.to_owned();
        self.llt.L().solve_lower_triangular_in_place(rhs.as_mut());
        settle();
        rhs
    }

    /// `log det(A + jitter I) = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> Mat<f64> {
        let out = self.llt.inverse();
        settle();
        out
    }

    pub fn reconstruct(&self) -> Mat<f64> {
        let out = self.llt.reconstruct();
        settle();
        out
    }
}

/// Smallest eigenvalue of a symmetric matrix (lower triangle is read).
pub fn min_eigenvalue(a: MatRef<'_, f64>) -> f64 {
    eigenvalues(a).into_iter().fold(f64::INFINITY, f64::min)
}

/// Eigenvalues of a symmetric matrix in nondecreasing order.
pub fn eigenvalues(a: MatRef<'_, f64>) -> Vec<f64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    let out = a
        .self_adjoint_eigenvalues(Side::Lower)
        .unwrap_or_else(|_| vec![f64::NAN; a.nrows()]);
    settle();
    out
}

pub fn matmul(lhs: MatRef<'_, f64>, rhs: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(lhs.nrows(), rhs.ncols());
    matmul_into(out.as_mut(), lhs, rhs, false);
    out
}

/// `out = lhs·rhs` or `out += lhs·rhs`.
pub fn matmul_into(out: faer::MatMut<'_, f64>, lhs: MatRef<'_, f64>, rhs: MatRef<'_, f64>, add: bool) {
    let accum = if add { Accum::Add } else { Accum::Replace };
    faer::linalg::matmul::matmul(out, accum, lhs, rhs, 1.0, Par::Seq);
    settle();
}

pub fn symmetrize(m: &mut Mat<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn trace(m: MatRef<'_, f64>) -> f64 {
    (0..m.nrows().min(m.ncols())).map(|i| m[(i, i)]).sum()
}

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Mat<f64> {
    let ncols = rows.first().map_or(0, |r| r.len());
    Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}
