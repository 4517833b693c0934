//! Fixtures shared by the benchmarks.

use koopgp_core::params::initial_config;
use koopgp_core::{
    make_corpus, standardize, window_dataset, CorpusSpec, KernelConfig, KernelKind, OdeSystem, Target, TrainingSet,
    WindowSpec,
};

/// Standardized predator-prey training set with `n` pairs: 32 past points,
/// one pair per trajectory at a random horizon offset.
pub fn predator_prey(n: usize, seed: u64) -> TrainingSet {
    let spec = CorpusSpec {
        n_traj: n.div_ceil(32),
        x0_box: vec![[0.0, 2.0], [0.0, 1.0]],
        dt: 3.0,
        steps: 63,
        noise_std: 0.0,
        seed,
    };
    let corpus = make_corpus(&OdeSystem::predator_prey(), &spec).expect("corpus");
    let raw = window_dataset(&corpus, Target::State(1), WindowSpec::disjoint(32, 32)).expect("windows");
    let (set, _) = standardize(&raw).expect("standardize");
    set.subset(&(0..n).collect::<Vec<_>>()).expect("subset")
}

pub fn config(kind: KernelKind, set: &TrainingSet, eigenvalues: usize) -> KernelConfig {
    initial_config(kind, set, eigenvalues, 0).expect("initial config")
}
