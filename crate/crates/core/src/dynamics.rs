//! Benchmark ODE systems and a fixed-step RK4 integrator.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::seed;

/// Largest internal RK4 step (time units).
pub const MAX_SUBSTEP: f64 = 0.01;

/// Sign convention of the predator–prey equations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LvConvention {
    /// `ẋ1 = r1 x1 − c γ1 x1 x2`, `ẋ2 = −r2 x2 + c γ2 x1 x2`.
    Classical,
    /// `ẋ1 = r1 x1 + c γ1 x1 x1`, `ẋ2 = r2 x2 + c γ2 x1 x2`, all coefficients
    /// positive. Diverges; kept for auditing the literal equation.
    Printed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemKind {
    PredatorPrey {
        r1: f64,
        gamma1: f64,
        r2: f64,
        gamma2: f64,
        c: f64,
        convention: LvConvention,
    },
    /// `ẋ1 = −ω x2`, `ẋ2 = ω x1`.
    Linear2d { omega: f64 },
}

/// An autonomous ODE `ẋ = f(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeSystem {
    pub name: String,
    pub kind: SystemKind,
}

impl OdeSystem {
    pub fn predator_prey() -> Self {
        Self::predator_prey_with(LvConvention::Classical)
    }

    pub fn predator_prey_with(convention: LvConvention) -> Self {
        OdeSystem {
            name: "predator_prey".into(),
            kind: SystemKind::PredatorPrey {
                r1: 0.2,
                gamma1: 0.4,
                r2: 0.25,
                gamma2: 0.2,
                c: 2.0,
                convention,
            },
        }
    }

    pub fn linear2d() -> Self {
        OdeSystem {
            name: "linear2d".into(),
            kind: SystemKind::Linear2d { omega: 6.0 },
        }
    }

    /// Looks a system up by its configuration name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "predator_prey" => Ok(Self::predator_prey()),
            "predator_prey_printed" => Ok(Self::predator_prey_with(LvConvention::Printed)),
            "linear2d" => Ok(Self::linear2d()),
            other => Err(Error::invalid(format!(
                "unknown system {other:?} (expected predator_prey, predator_prey_printed or linear2d)"
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        2
    }

    pub fn params(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        match &self.kind {
            SystemKind::PredatorPrey {
                r1,
                gamma1,
                r2,
                gamma2,
                c,
                ..
            } => {
                out.insert("r1".into(), *r1);
                out.insert("gamma1".into(), *gamma1);
                out.insert("r2".into(), *r2);
                out.insert("gamma2".into(), *gamma2);
                out.insert("c".into(), *c);
            }
            SystemKind::Linear2d { omega } => {
                out.insert("omega".into(), *omega);
            }
        }
        out
    }

    pub fn rhs(&self, x: &[f64], dx: &mut [f64]) {
        match self.kind {
            SystemKind::PredatorPrey {
                r1,
                gamma1,
                r2,
                gamma2,
                c,
                convention,
            } => match convention {
                LvConvention::Classical => {
                    dx[0] = r1 * x[0] - c * gamma1 * x[0] * x[1];
                    dx[1] = -r2 * x[1] + c * gamma2 * x[0] * x[1];
                }
                LvConvention::Printed => {
                    dx[0] = r1 * x[0] + c * gamma1 * x[0] * x[0];
                    dx[1] = r2 * x[1] + c * gamma2 * x[0] * x[1];
                }
            },
            SystemKind::Linear2d { omega } => {
                dx[0] = -omega * x[1];
                dx[1] = omega * x[0];
            }
        }
    }
}

pub fn predator_prey_rhs(x: [f64; 2]) -> [f64; 2] {
    let mut dx = [0.0; 2];
    OdeSystem::predator_prey().rhs(&x, &mut dx);
    dx
}

pub fn linear2d_rhs(x: [f64; 2]) -> [f64; 2] {
    let mut dx = [0.0; 2];
    OdeSystem::linear2d().rhs(&x, &mut dx);
    dx
}

/// Integrates `steps` intervals of length `dt` with RK4, substepping so the
/// internal step never exceeds [`MAX_SUBSTEP`]. Returns `steps + 1` samples.
pub fn simulate(system: &OdeSystem, x0: &[f64], dt: f64, steps: usize) -> Result<Trajectory> {
    simulate_with_substep(system, x0, dt, steps, MAX_SUBSTEP)
}

pub fn simulate_with_substep(
    system: &OdeSystem,
    x0: &[f64],
    dt: f64,
    steps: usize,
    max_substep: f64,
) -> Result<Trajectory> {
    let n = system.dim();
    if x0.len() != n {
        return Err(Error::invalid(format!(
            "initial state has dimension {}, system {}",
            x0.len(),
            n
        )));
    }
    if !(dt > 0.0) || steps == 0 || !(max_substep > 0.0) {
        return Err(Error::invalid("dt and max_substep must be > 0 and steps >= 1"));
    }
    let sub = (dt / max_substep).ceil().max(1.0) as usize;
    let h = dt / sub as f64;

    let mut x = x0.to_vec();
    let mut states = Vec::with_capacity((steps + 1) * n);
    states.extend_from_slice(&x);
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for step in 0..steps {
        for s in 0..sub {
            system.rhs(&x, &mut k1);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            system.rhs(&tmp, &mut k2);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            system.rhs(&tmp, &mut k3);
            for i in 0..n {
                tmp[i] = x[i] + h * k3[i];
            }
            system.rhs(&tmp, &mut k4);
            for i in 0..n {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    time: step as f64 * dt + (s + 1) as f64 * h,
                });
            }
        }
        states.extend_from_slice(&x);
    }
    let times = (0..=steps).map(|i| i as f64 * dt).collect();
    Trajectory::from_flat(times, states, n)
}

/// Simulation recipe for a corpus of trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_traj: usize,
    /// Per-dimension `[low, high]` box for initial conditions.
    pub x0_box: Vec<[f64; 2]>,
    pub dt: f64,
    pub steps: usize,
    #[serde(default)]
    pub noise_std: f64,
    pub seed: u64,
}

/// Simulates `n_traj` trajectories from uniform initial conditions in the box,
/// adding i.i.d. Gaussian observation noise to the recorded states. Each
/// trajectory draws from its own stream derived from `(seed, index)`.
pub fn make_corpus(system: &OdeSystem, spec: &CorpusSpec) -> Result<Vec<Trajectory>> {
    if spec.x0_box.len() != system.dim() {
        return Err(Error::invalid("x0_box dimension does not match the system"));
    }
    if spec
        .x0_box
        .iter()
        .any(|[lo, hi]| !(lo <= hi) || !lo.is_finite() || !hi.is_finite())
    {
        return Err(Error::invalid("x0_box intervals must satisfy low <= high"));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be >= 0"));
    }
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("nonnegative std");
    (0..spec.n_traj)
        .map(|i| {
            let mut rng = seed::rng(seed::derive_indexed(spec.seed, "trajectory", i as u64));
            let x0: Vec<f64> = spec
                .x0_box
                .iter()
                .map(|&[lo, hi]| if hi > lo { rng.random_range(lo..hi) } else { lo })
                .collect();
            let clean = simulate(system, &x0, spec.dt, spec.steps)?;
            if spec.noise_std == 0.0 {
                return Ok(clean);
            }
            let noisy: Vec<f64> = clean.states_flat().iter().map(|v| v + noise.sample(&mut rng)).collect();
            clean.with_states(noisy)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn predator_prey_substitution() {
        assert_eq!(predator_prey_rhs([0.0, 0.0]), [0.0, 0.0]);
        let d = predator_prey_rhs([1.0, 1.0]);
        assert!((d[0] + 0.6).abs() < 1e-15);
        assert!((d[1] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn linear2d_substitution() {
        assert_eq!(linear2d_rhs([1.0, 0.0]), [0.0, 6.0]);
    }

    #[test]
    fn linear2d_generator_has_eigenvalues_pm_6i() {
        // columns of the system matrix from unit-vector responses
        let c0 = linear2d_rhs([1.0, 0.0]);
        let c1 = linear2d_rhs([0.0, 1.0]);
        let (a, b, c, d) = (c0[0], c1[0], c0[1], c1[1]);
        let trace = a + d;
        let det = a * d - b * c;
        // s² − trace·s + det = s² + 36
        assert_eq!(trace, 0.0);
        assert_eq!(det, 36.0);
    }

    #[test]
    fn half_turn_rotation() {
        let traj = simulate(&OdeSystem::linear2d(), &[1.0, 0.0], PI / 6.0, 1).unwrap();
        assert_eq!(traj.len(), 2);
        let x = traj.last_state();
        assert!((x[0] + 1.0).abs() < 1e-6 && x[1].abs() < 1e-6, "{x:?}");
    }

    #[test]
    fn rotation_conserves_norm() {
        let traj = simulate(&OdeSystem::linear2d(), &[0.3, -0.8], 0.06, 16).unwrap();
        let r0 = 0.3f64.hypot(0.8);
        // RK4 shrinks the radius by about (ωh)⁶/144 per step.
        for i in 0..traj.len() {
            let x = traj.state(i);
            assert!((x[0].hypot(x[1]) - r0).abs() < 1e-7 * r0);
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let sys = OdeSystem::linear2d();
        let t_end: f64 = 1.0;
        let exact = [(6.0 * t_end).cos(), (6.0 * t_end).sin()];
        let err = |h: f64| {
            let tr = simulate_with_substep(&sys, &[1.0, 0.0], t_end, 1, h).unwrap();
            let x = tr.last_state();
            (x[0] - exact[0]).hypot(x[1] - exact[1])
        };
        let mut h = 0.05;
        let mut prev = err(h);
        while prev > 1e-12 {
            h /= 2.0;
            let next = err(h);
            if next < 1e-12 {
                break;
            }
            assert!(prev / next >= 8.0, "ratio {} at h={h}", prev / next);
            prev = next;
        }
    }

    #[test]
    fn predator_prey_bounded_oscillation() {
        let sys = OdeSystem::predator_prey();
        let coarse = simulate(&sys, &[1.0, 0.5], 3.0, 64).unwrap();
        let fine = simulate_with_substep(&sys, &[1.0, 0.5], 3.0, 64, 1e-3).unwrap();
        let mut x2_min = f64::INFINITY;
        let mut x2_max = f64::NEG_INFINITY;
        for i in 0..fine.len() {
            let (a, b) = (coarse.state(i), fine.state(i));
            assert!(a[0].hypot(a[1]) < 10.0);
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
            x2_min = x2_min.min(b[1]);
            x2_max = x2_max.max(b[1]);
        }
        assert!(x2_max - x2_min > 0.1, "no oscillation");
    }

    #[test]
    fn predator_prey_first_integral() {
        let (r1, g1, r2, g2, c) = (0.2, 0.4, 0.25, 0.2, 2.0);
        let v = |x: &[f64]| c * g2 * x[0] - r2 * x[0].ln() + c * g1 * x[1] - r1 * x[1].ln();
        let traj = simulate(&OdeSystem::predator_prey(), &[1.5, 0.7], 3.0, 64).unwrap();
        let v0 = v(traj.state(0));
        for i in 0..traj.len() {
            assert!((v(traj.state(i)) - v0).abs() < 1e-3);
        }
    }

    #[test]
    fn printed_convention_blows_up() {
        let sys = OdeSystem::predator_prey_with(LvConvention::Printed);
        assert!(matches!(
            simulate(&sys, &[1.0, 0.5], 3.0, 64),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn benchmark_corpus_shape() {
        let spec = CorpusSpec {
            n_traj: 8,
            x0_box: vec![[0.0, 2.0], [0.0, 1.0]],
            dt: 3.0,
            steps: 64,
            noise_std: 0.0,
            seed: 1,
        };
        let corpus = make_corpus(&OdeSystem::predator_prey(), &spec).unwrap();
        assert_eq!(corpus.len(), 8);
        for t in &corpus {
            assert_eq!(t.len(), 65);
            assert!(t.states_flat().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn corpus_determinism_and_empty() {
        let mut spec = CorpusSpec {
            n_traj: 5,
            x0_box: vec![[-1.0, 1.0], [-1.0, 1.0]],
            dt: 0.06,
            steps: 16,
            noise_std: 0.0,
            seed: 42,
        };
        let sys = OdeSystem::linear2d();
        assert_eq!(make_corpus(&sys, &spec).unwrap(), make_corpus(&sys, &spec).unwrap());
        spec.n_traj = 0;
        assert!(make_corpus(&sys, &spec).unwrap().is_empty());
    }

    #[test]
    fn observation_noise_statistics() {
        let mut spec = CorpusSpec {
            n_traj: 400,
            x0_box: vec![[-1.0, 1.0], [-1.0, 1.0]],
            dt: 0.06,
            steps: 16,
            noise_std: 0.0,
            seed: 3,
        };
        let sys = OdeSystem::linear2d();
        let clean = make_corpus(&sys, &spec).unwrap();
        spec.noise_std = 0.1;
        let noisy = make_corpus(&sys, &spec).unwrap();
        let diffs: Vec<f64> = clean
            .iter()
            .zip(&noisy)
            .flat_map(|(a, b)| {
                a.states_flat()
                    .iter()
                    .zip(b.states_flat())
                    .map(|(x, y)| y - x)
                    .collect::<Vec<_>>()
            })
            .collect();
        assert!(diffs.len() >= 10_000);
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.02, "std {std}");
    }
}
