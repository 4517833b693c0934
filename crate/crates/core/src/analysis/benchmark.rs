use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean, population_std, rmse, CorpusSource};
use crate::data::{standardize, window_dataset, Target, TrainingSet, WindowSpec};
use crate::error::{Error, Result};
use crate::exact::{fit_exact, optimize_with, OptimizeOptions};
use crate::kernels::KernelKind;
use crate::params::initial_config;
use crate::seed;
use crate::sparse::{sparse_predict_standardized, train_sparse, TrainOptions};

fn default_eigenvalues() -> usize {
    64
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_validation_fraction() -> f64 {
    0.1
}

fn default_exact_threshold() -> usize {
    4096
}

fn default_inducing() -> usize {
    32
}

fn default_timings() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: KernelKind,
    /// Number of eigenvalues `D`; ignored by the contextual kernel.
    #[serde(default = "default_eigenvalues")]
    pub eigenvalues: usize,
}

impl ModelSpec {
    pub fn label(&self) -> &'static str {
        self.kind.label()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub dataset: String,
    pub corpus: CorpusSource,
    pub target: Target,
    pub window: WindowSpec,
    pub models: Vec<ModelSpec>,
    /// Training windows per repeat.
    pub n_train: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Trailing share of trajectories held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Caps the number of test windows (leading ones are kept).
    #[serde(default)]
    pub max_test_windows: Option<usize>,
    /// Exact inference is used while `n_train · horizon` stays at or below this.
    #[serde(default = "default_exact_threshold")]
    pub exact_threshold: usize,
    #[serde(default)]
    pub exact: OptimizeOptions,
    #[serde(default)]
    pub sparse: TrainOptions,
    #[serde(default = "default_inducing")]
    pub num_inducing: usize,
    /// Share of training windows used as validation data by the sparse model.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// When false, `seconds` is reported as 0 so reports are byte-reproducible.
    #[serde(default = "default_timings")]
    pub timings: bool,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::invalid("benchmark needs at least one model"));
        }
        if self.n_train == 0 || self.repeats == 0 {
            return Err(Error::invalid("n_train and repeats must be >= 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid("test_fraction must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
        }
        if self.models.iter().any(|m| m.kind.uses_spectrum() && m.eigenvalues == 0) {
            return Err(Error::invalid("spectral models need at least one eigenvalue"));
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].iter().any(|o| o.kind == m.kind) {
                return Err(Error::invalid(format!("model {} listed twice", m.label())));
            }
        }
        Ok(())
    }

    fn uses_exact(&self) -> bool {
        self.n_train * self.window.horizon_points <= self.exact_threshold
    }
}

/// Raw-unit training and test pairs.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: TrainingSet,
    pub test: TrainingSet,
}

/// Windows the corpus and holds out the trailing trajectories.
pub fn prepare_splits(spec: &BenchmarkSpec) -> Result<Splits> {
    let trajectories = spec.corpus.load()?;
    let n_test = ((trajectories.len() as f64) * spec.test_fraction).round() as usize;
    if n_test == 0 || n_test >= trajectories.len() {
        return Err(Error::invalid(format!(
            "{} trajectories cannot be split with test_fraction {}",
            trajectories.len(),
            spec.test_fraction
        )));
    }
    let cut = trajectories.len() - n_test;
    let train = window_dataset(&trajectories[..cut], spec.target, spec.window)?;
    let mut test = window_dataset(&trajectories[cut..], spec.target, spec.window)?;
    if let Some(cap) = spec.max_test_windows {
        let keep: Vec<usize> = (0..cap.min(test.windows().len())).collect();
        test = test.select_windows(&keep)?;
    }
    if spec.n_train > train.windows().len() {
        return Err(Error::invalid(format!(
            "n_train = {} exceeds the {} available training windows",
            spec.n_train,
            train.windows().len()
        )));
    }
    Ok(Splits { train, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub dataset: String,
    pub model: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub repeat: usize,
    pub rmse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub inference: String,
    pub mean_rmse: f64,
    /// Population standard deviation over repeats.
    pub std_rmse: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub spec: BenchmarkSpec,
    /// Per-repeat seeds, in repeat order.
    pub repeat_seeds: Vec<u64>,
    pub rows: Vec<BenchmarkRow>,
    pub summaries: Vec<ModelSummary>,
}

impl Report {
    /// CSV with header `dataset,model,N,H,repeat,rmse,seconds`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self, model: &str) -> Option<&ModelSummary> {
        self.summaries.iter().find(|s| s.model == model)
    }
}

/// Fits one model on standardized training windows and returns its test RMSE
/// in standardized units.
fn evaluate(
    spec: &BenchmarkSpec,
    model: &ModelSpec,
    train: &TrainingSet,
    test: &TrainingSet,
    seed: u64,
) -> Result<f64> {
    let cfg0 = initial_config(model.kind, train, model.eigenvalues, seed::derive(seed, "spectrum"))?;
    let queries = test.inputs();
    let (mean, _) = if spec.uses_exact() {
        let (cfg, _) = optimize_with(train, &cfg0, &spec.exact)?;
        fit_exact(train, &cfg)?.predict_standardized(&queries, false)?
    } else {
        let windows = train.windows().len();
        let n_val = ((windows as f64) * spec.validation_fraction).round() as usize;
        let n_val = n_val.min(windows - 1);
        let fit: Vec<usize> = (0..windows - n_val).collect();
        let held: Vec<usize> = (windows - n_val..windows).collect();
        let fit_set = train.select_windows(&fit)?;
        let validation = if n_val > 0 {
            Some(train.select_windows(&held)?)
        } else {
            None
        };
        let (state, _) = train_sparse(
            &fit_set,
            validation.as_ref(),
            &cfg0,
            spec.num_inducing,
            &spec.sparse,
            seed::derive(seed, "sparse"),
        )?;
        sparse_predict_standardized(&state, &queries)?
    };
    rmse(&mean, &test.targets())
}

fn run_repeat(spec: &BenchmarkSpec, splits: &Splits, repeat_seed: u64, repeat: usize) -> Result<Vec<BenchmarkRow>> {
    let pool = splits.train.windows().len();
    let mut rng = seed::rng(seed::derive(repeat_seed, "windows"));
    let mut picks = rand::seq::index::sample(&mut rng, pool, spec.n_train).into_vec();
    picks.sort_unstable();
    let raw = splits.train.select_windows(&picks)?;
    let (train, standardizer) = standardize(&raw)?;
    let test = standardizer.apply(&splits.test)?;
    spec.models
        .iter()
        .map(|model| {
            let start = Instant::now();
            let err = evaluate(spec, model, &train, &test, seed::derive(repeat_seed, model.label()))?;
            let seconds = if spec.timings {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            log::info!(
                "{} repeat {repeat}: {} rmse {err:.4} ({seconds:.1}s)",
                spec.dataset,
                model.label()
            );
            Ok(BenchmarkRow {
                dataset: spec.dataset.clone(),
                model: model.label().to_string(),
                n: spec.n_train,
                h: spec.window.horizon_points,
                repeat,
                rmse: err,
                seconds,
            })
        })
        .collect()
}

/// Runs every model on `repeats` independent training subsets. Repeats run in
/// parallel on the ambient rayon pool; results do not depend on scheduling.
pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<Report> {
    spec.validate()?;
    let splits = prepare_splits(spec)?;
    let repeat_seeds: Vec<u64> = (0..spec.repeats)
        .map(|r| seed::derive_indexed(spec.seed, "repeat", r as u64))
        .collect();
    let per_repeat: Vec<Vec<BenchmarkRow>> = repeat_seeds
        .par_iter()
        .enumerate()
        .map(|(r, &s)| run_repeat(spec, &splits, s, r))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for m in 0..spec.models.len() {
        rows.extend(per_repeat.iter().map(|rep| rep[m].clone()));
    }
    let inference = if spec.uses_exact() { "exact" } else { "sparse" };
    let summaries = spec
        .models
        .iter()
        .map(|model| {
            let errs: Vec<f64> = rows
                .iter()
                .filter(|r| r.model == model.label())
                .map(|r| r.rmse)
                .collect();
            ModelSummary {
                model: model.label().to_string(),
                inference: inference.to_string(),
                mean_rmse: mean(&errs),
                std_rmse: population_std(&errs),
                repeats: errs.len(),
            }
        })
        .collect();
    Ok(Report {
        spec: spec.clone(),
        repeat_seeds,
        rows,
        summaries,
    })
}
