mod common;

use std::f64::consts::PI;
use std::sync::Arc;

use koopgp_core::kernels::{covariance, covariance_sum, gram_sym, quadrature_weights, symmetrized_cross};
use koopgp_core::linalg::{min_eigenvalue, trace};
use koopgp_core::{gram, sample_spectrum, KernelConfig, KernelKind, SpectralPrior, Spectrum, Trajectory};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prior_strategy() -> impl Strategy<Value = SpectralPrior> {
    (0.0..2.0f64, -1.0..1.0f64, 0.0..20.0f64, -3.0..3.0f64)
        .prop_map(|(s, sb, w, wb)| SpectralPrior::new(s, sb, w, wb).unwrap())
}

fn config(
    kind: KernelKind,
    grid: &Arc<[f64]>,
    prior: &SpectralPrior,
    d: usize,
    seed: u64,
    ls: [f64; 2],
) -> KernelConfig {
    let spectrum = sample_spectrum(prior, d, seed).unwrap();
    match kind {
        KernelKind::Kesd => KernelConfig::kesd(ls.to_vec(), grid.clone(), spectrum).unwrap(),
        KernelKind::Sd => KernelConfig::sd(ls.to_vec(), spectrum).unwrap(),
        KernelKind::Contextual => KernelConfig::contextual(ls.to_vec(), 0.2 + ls[0]).unwrap(),
    }
}

const KINDS: [KernelKind; 3] = [KernelKind::Kesd, KernelKind::Sd, KernelKind::Contextual];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gram_matrices_are_psd(
        kind in 0..3usize,
        windows in 1..11usize,
        per in 1..6usize,
        g in 1..9usize,
        prior in prior_strategy(),
        d in 1..40usize,
        ls in (0.2..3.0f64, 0.2..3.0f64),
        seed in any::<u64>(),
    ) {
        let windows = windows.max(5usize.div_ceil(per));
        let grid = common::grid(g, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = common::random_inputs(&mut rng, &grid, windows, per);
        prop_assume!((5..=50).contains(&inputs.len()));
        let cfg = config(KINDS[kind], &grid, &prior, d, seed, [ls.0, ls.1]);
        let k = gram_sym(&cfg, &inputs).unwrap();
        let tr = trace(k.as_ref());
        prop_assert!(min_eigenvalue(k.as_ref()) >= -1e-8 * tr);
    }

    #[test]
    fn spectral_sum_is_real(
        g in 1..9usize,
        prior in prior_strategy(),
        d in 1..65usize,
        ls in (0.2..3.0f64, 0.2..3.0f64),
        seed in any::<u64>(),
    ) {
        let grid = common::grid(g, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = common::random_inputs(&mut rng, &grid, 2, 1);
        let cfg = config(KernelKind::Kesd, &grid, &prior, d, seed, [ls.0, ls.1]);
        let sum = covariance_sum(&cfg, &inputs[0], &inputs[1]).unwrap();
        let scale = (covariance(&cfg, &inputs[0], &inputs[0]).unwrap()
            * covariance(&cfg, &inputs[1], &inputs[1]).unwrap()).sqrt();
        prop_assert!(sum.im.abs() <= 1e-10 * scale.max(sum.re.abs()).max(f64::MIN_POSITIVE));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn singleton_grid_collapses_to_sd_bitwise(
        windows in 1..8usize,
        per in 1..4usize,
        prior in prior_strategy(),
        d in 1..33usize,
        seed in any::<u64>(),
    ) {
        let grid = common::grid(1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = common::random_inputs(&mut rng, &grid, windows, per);
        let kesd = config(KernelKind::Kesd, &grid, &prior, d, seed, [0.7, 1.2]);
        let sd = config(KernelKind::Sd, &grid, &prior, d, seed, [0.7, 1.2]);
        prop_assert_eq!(gram(&kesd, &inputs, &inputs).unwrap(), gram(&sd, &inputs, &inputs).unwrap());
    }

    #[test]
    fn cross_term_is_hermitian(
        g in 1..9usize,
        re in -2.0..2.0f64,
        im in -20.0..20.0f64,
        seed in any::<u64>(),
    ) {
        let grid = common::grid(g, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = common::random_inputs(&mut rng, &grid, 2, 1);
        let spectrum = Spectrum::fixed(vec![Complex64::new(re, im), Complex64::new(re, -im)]).unwrap();
        let w = quadrature_weights(&spectrum, &grid);
        let (a, b) = (&inputs[0].past, &inputs[1].past);
        let ab = symmetrized_cross(&w, 0, a.states_flat(), b.states_flat(), &[0.8, 1.1], 1.3).unwrap();
        let ba = symmetrized_cross(&w, 0, b.states_flat(), a.states_flat(), &[0.8, 1.1], 1.3).unwrap();
        prop_assert!((ab - ba.conj()).norm() <= 1e-12 * (1.0 + ab.norm()));
    }

    #[test]
    fn cross_gram_transposes(
        kind in 0..3usize,
        prior in prior_strategy(),
        seed in any::<u64>(),
    ) {
        let grid = common::grid(5, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = common::random_inputs(&mut rng, &grid, 3, 2);
        let b = common::random_inputs(&mut rng, &grid, 2, 3);
        let cfg = config(KINDS[kind], &grid, &prior, 12, seed, [0.9, 0.6]);
        let ab = gram(&cfg, &a, &b).unwrap();
        let ba = gram(&cfg, &b, &a).unwrap();
        for i in 0..a.len() {
            for j in 0..b.len() {
                prop_assert!((ab[(i, j)] - ba[(j, i)]).abs() <= 1e-12 * (1.0 + ab[(i, j)].abs()));
            }
        }
    }

    #[test]
    fn spectra_stay_conjugate_closed(
        p in prior_strategy(),
        q in prior_strategy(),
        d in 1..80usize,
        seed in any::<u64>(),
    ) {
        let s = sample_spectrum(&p, d, seed).unwrap();
        prop_assert!(s.is_conjugate_closed(1e-12));
        let r = s.reparameterize(&q).unwrap();
        prop_assert!(r.is_conjugate_closed(1e-12));
        prop_assert_eq!(r, sample_spectrum(&q, d, seed).unwrap());
    }
}

/// Closed-form `linear2d` state at time `t` from `x0` (rotation at rate 6).
fn rotate(x0: [f64; 2], t: f64) -> [f64; 2] {
    let (s, c) = (6.0 * t).sin_cos();
    [c * x0[0] - s * x0[1], s * x0[0] + c * x0[1]]
}

/// Past window of the rotation ending at time `end`, sampled on `grid`.
fn rotation_window(grid: &Arc<[f64]>, x0: [f64; 2], end: f64) -> Trajectory {
    let states = grid.iter().flat_map(|&tau| rotate(x0, end + tau)).collect();
    Trajectory::from_shared(grid.clone(), states, 2, None).unwrap()
}

/// `Σ_g w_g f(x(τ_g))` for the single eigenvalue `λ`.
fn project(lambda: Complex64, window: &Trajectory, f: impl Fn(&[f64]) -> Complex64) -> Complex64 {
    let spectrum = Spectrum::fixed(vec![lambda, lambda.conj()]).unwrap();
    let w = quadrature_weights(&spectrum, window.shared_times());
    (0..window.len()).map(|g| w.row(0)[g] * f(window.state(g))).sum()
}

fn eigenfunction(x: &[f64]) -> Complex64 {
    Complex64::new(x[0], x[1])
}

#[test]
fn analytic_eigenfunction_is_reproduced() {
    let lambda = Complex64::new(0.0, 6.0);
    let grid = common::grid(33, 1.0);
    for x0 in [[1.0, 0.0], [0.3, -0.8], [-0.5, 0.25]] {
        let window = rotation_window(&grid, x0, 0.0);
        let err = (project(lambda, &window, eigenfunction) - eigenfunction(&x0)).norm();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn shifted_window_picks_up_the_eigenvalue_phase() {
    // One full period: the integrand e^{-λτ} g(x(τ)) is periodic over the window.
    let lambda = Complex64::new(0.0, 6.0);
    let grid = common::grid(33, 2.0 * PI / 6.0);
    let g = |x: &[f64]| Complex64::new(x[0] * x[0] + 0.5 * x[1], 0.0);
    let x0 = [0.7, -0.2];
    let base = project(lambda, &rotation_window(&grid, x0, 0.0), g);
    for t in [0.05, 0.3, 0.9] {
        let shifted = project(lambda, &rotation_window(&grid, x0, t), g);
        let err = (shifted - (lambda * t).exp() * base).norm();
        assert!(err < 1e-4, "t = {t}: {err}");
    }
}

#[test]
fn trapezoid_error_is_second_order() {
    // g = x1 along the rotation: e^{-λτ} x1(τ) has a closed-form mean over [-1, 0].
    let lambda = Complex64::new(0.0, 6.0);
    let x0 = [0.6, 0.4];
    let z0 = Complex64::new(x0[0], x0[1]);
    // x1(τ) = Re(z0 e^{6iτ}) = (z0 e^{λτ} + z̄0 e^{-λτ}) / 2.
    let mean_exp = |mu: Complex64| {
        if mu.norm() == 0.0 {
            Complex64::new(1.0, 0.0)
        } else {
            (Complex64::new(1.0, 0.0) - (-mu).exp()) / mu
        }
    };
    let exact = 0.5 * z0 + 0.5 * z0.conj() * mean_exp(-2.0 * lambda);
    let g = |x: &[f64]| Complex64::new(x[0], 0.0);
    let errors: Vec<f64> = [17, 33, 65]
        .iter()
        .map(|&points| (project(lambda, &rotation_window(&common::grid(points, 1.0), x0, 0.0), g) - exact).norm())
        .collect();
    for pair in errors.windows(2) {
        assert!(pair[0] / pair[1] >= 3.5, "{errors:?}");
    }
}
