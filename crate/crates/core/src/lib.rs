//! Gaussian-process forecasting of nonlinear dynamical systems whose temporal
//! structure is a finite Koopman mode decomposition.
//!
//! The crate is organized bottom-up:
//!
//! - [`data`]: trajectory ingestion, windowing into training pairs, standardization.
//! - [`dynamics`]: benchmark ODEs and a fixed-step RK4 integrator.
//! - [`spectral`]: the four-parameter uniform spectral prior and conjugate-closed sampling.
//! - [`kernels`]: base SE kernel, LTI temporal features, trapezoid symmetrization
//!   weights and the SD / KE-SD / contextual covariances.
//! - [`exact`]: exact GP posterior, negative log marginal likelihood and
//!   hyperparameter optimization.
//! - [`sparse`]: sparse variational GP with inducing trajectories.
//! - [`analysis`]: information gain, RMSE and the benchmark / ablation runners.

pub mod analysis;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod exact;
pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod seed;
pub mod sparse;
pub mod spectral;

pub use analysis::{
    empirical_info_gain, info_gain_curve, rmse, run_ablation, run_benchmark, run_info_gain, AblationSpec,
    BenchmarkSpec, CorpusSource, InfoGainCurve, InfoGainSpec, Report,
};
pub use data::{
    load_trajectories, standardize, window_dataset, Standardizer, Target, TrainingPair, TrainingSet, Trajectory,
    WindowSpec,
};
pub use dynamics::{make_corpus, simulate, CorpusSpec, LvConvention, OdeSystem};
pub use error::{Error, Result};
pub use exact::{fit_exact, nll, optimize_hyperparameters, predict, ExactModel, Forecast, OptimizeOptions};
pub use kernels::{gram, Input, KernelConfig, KernelKind, QuadratureWeights};
pub use sparse::{init_sparse, sparse_loss, sparse_predict, train_sparse, SparseState, TrainOptions};
pub use spectral::{sample_spectrum, SpectralPrior, Spectrum};
