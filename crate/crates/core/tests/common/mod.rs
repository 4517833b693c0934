#![allow(dead_code)]

use std::sync::Arc;

use koopgp_core::{
    make_corpus, standardize, window_dataset, CorpusSpec, Input, OdeSystem, Standardizer, Target, TrainingPair,
    TrainingSet, Trajectory, WindowSpec,
};
use rand::Rng;

/// Evenly spaced grid on `[-span, 0]` with `points` samples.
pub fn grid(points: usize, span: f64) -> Arc<[f64]> {
    if points == 1 {
        return Arc::from(vec![0.0]);
    }
    let step = span / (points - 1) as f64;
    Arc::from((0..points).map(|g| -span + g as f64 * step).collect::<Vec<_>>())
}

/// `windows` random 2-D past windows on `grid`, each read at `per` random times.
pub fn random_inputs(rng: &mut impl Rng, grid: &Arc<[f64]>, windows: usize, per: usize) -> Vec<Input> {
    let mut out = Vec::with_capacity(windows * per);
    for _ in 0..windows {
        let states = (0..grid.len() * 2).map(|_| rng.random_range(-1.5..1.5)).collect();
        let past = Arc::new(Trajectory::from_shared(grid.clone(), states, 2, None).unwrap());
        for _ in 0..per {
            out.push(Input {
                time: rng.random_range(0.0..1.0),
                past: past.clone(),
            });
        }
    }
    out
}

/// Standardized predator-prey windows: `n_traj` trajectories of 17 samples,
/// 8 past points and 8 forecast offsets each.
pub fn small_pp(n_traj: usize, seed: u64) -> TrainingSet {
    let spec = CorpusSpec {
        n_traj,
        x0_box: vec![[0.2, 2.0], [0.2, 1.0]],
        dt: 3.0,
        steps: 16,
        noise_std: 0.0,
        seed,
    };
    let corpus = make_corpus(&OdeSystem::predator_prey(), &spec).unwrap();
    let raw = window_dataset(&corpus, Target::State(1), WindowSpec::disjoint(8, 8)).unwrap();
    standardize(&raw).unwrap().0
}

/// Linear rotation windows (eigenvalues ±6i in raw time).
pub fn small_linear(n_traj: usize, past: usize, horizon: usize, seed: u64) -> TrainingSet {
    let spec = CorpusSpec {
        n_traj,
        x0_box: vec![[0.0, 1.0], [0.0, 1.0]],
        dt: 0.06,
        steps: past + horizon - 1,
        noise_std: 0.0,
        seed,
    };
    let corpus = make_corpus(&OdeSystem::linear2d(), &spec).unwrap();
    let raw = window_dataset(&corpus, Target::State(0), WindowSpec::disjoint(past, horizon)).unwrap();
    standardize(&raw).unwrap().0
}

/// Unstandardized training set on `inputs` (which must share one grid).
pub fn training_set(inputs: &[Input], targets: &[f64]) -> TrainingSet {
    let grid = inputs[0].past.shared_times().clone();
    let pairs = inputs
        .iter()
        .zip(targets)
        .map(|(x, &y)| TrainingPair {
            past: x.past.clone(),
            forecast_time: x.time,
            target: y,
        })
        .collect();
    TrainingSet::new(pairs, grid, Standardizer::identity(inputs[0].past.dim(), 1.0)).unwrap()
}

/// Single-sample 1-D window at state `x`, read at time `t`.
pub fn point_input(x: f64, t: f64) -> Input {
    let grid: Arc<[f64]> = Arc::from(vec![0.0]);
    Input {
        time: t,
        past: Arc::new(Trajectory::from_shared(grid, vec![x], 1, None).unwrap()),
    }
}

/// Dense lower Cholesky factor, row-major; the test oracle for factorizations.
pub fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][i] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

/// Solves `L Lᵀ x = b` for the factor returned by [`cholesky`].
pub fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}
