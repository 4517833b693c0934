use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean, quantile, rmse, CorpusSource};
use crate::data::{standardize, window_dataset, Target, WindowSpec};
use crate::error::{Error, Result};
use crate::exact::{fit_exact, optimize_with, OptimizeOptions};
use crate::kernels::KernelKind;
use crate::params::{freeze_lengthscales, initial_config};
use crate::seed;

fn default_train() -> usize {
    32
}

fn default_test() -> usize {
    256
}

/// Eigenspace-size sweep: for each seed, disjoint train and test windows are
/// drawn from the whole corpus and a KE-SD exact GP is fitted for every `D`
/// with the base-kernel lengthscales frozen at their initial values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub dataset: String,
    pub corpus: CorpusSource,
    pub target: Target,
    pub window: WindowSpec,
    pub eigenvalues: Vec<usize>,
    pub seeds: usize,
    pub seed: u64,
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_test")]
    pub n_test: usize,
    #[serde(default)]
    pub optimizer: OptimizeOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(rename = "D")]
    pub d: usize,
    pub mean_rmse: f64,
    pub q25: f64,
    pub q75: f64,
    pub iqr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub spec: AblationSpec,
    /// `rmse[i][s]`: eigenvalue count `i`, seed `s`.
    pub rmse: Vec<Vec<f64>>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// CSV with header `D,mean_rmse,q25,q75,iqr`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn row(&self, d: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.d == d)
    }
}

fn run_seed(spec: &AblationSpec, all: &crate::data::TrainingSet, s: usize) -> Result<Vec<f64>> {
    let run_seed = seed::derive_indexed(spec.seed, "ablation_run", s as u64);
    let pool = all.windows().len();
    let mut rng = seed::rng(seed::derive(run_seed, "windows"));
    let picks = rand::seq::index::sample(&mut rng, pool, spec.n_train + spec.n_test).into_vec();
    let mut train_idx = picks[..spec.n_train].to_vec();
    let mut test_idx = picks[spec.n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let (train, standardizer) = standardize(&all.select_windows(&train_idx)?)?;
    let test = standardizer.apply(&all.select_windows(&test_idx)?)?;
    let queries = test.inputs();
    let truth = test.targets();
    let mut opts = spec.optimizer.clone();
    opts.frozen = Some(freeze_lengthscales(KernelKind::Kesd, train.state_dim()));
    spec.eigenvalues
        .iter()
        .map(|&d| {
            let cfg0 = initial_config(
                KernelKind::Kesd,
                &train,
                d,
                seed::derive_indexed(run_seed, "spectrum", d as u64),
            )?;
            let (cfg, _) = optimize_with(&train, &cfg0, &opts)?;
            let (pred, _) = fit_exact(&train, &cfg)?.predict_standardized(&queries, false)?;
            let err = rmse(&pred, &truth)?;
            log::info!("{} seed {s} D={d}: rmse {err:.4}", spec.dataset);
            Ok(err)
        })
        .collect()
}

pub fn run_ablation(spec: &AblationSpec) -> Result<AblationReport> {
    if spec.eigenvalues.is_empty() || spec.eigenvalues.contains(&0) {
        return Err(Error::invalid("eigenvalue counts must be nonempty and positive"));
    }
    if spec.seeds == 0 || spec.n_train == 0 || spec.n_test == 0 {
        return Err(Error::invalid("seeds, n_train and n_test must be >= 1"));
    }
    let all = window_dataset(&spec.corpus.load()?, spec.target, spec.window)?;
    if spec.n_train + spec.n_test > all.windows().len() {
        return Err(Error::invalid(format!(
            "{} train + {} test windows requested, corpus has {}",
            spec.n_train,
            spec.n_test,
            all.windows().len()
        )));
    }
    let per_seed: Vec<Vec<f64>> = (0..spec.seeds)
        .into_par_iter()
        .map(|s| run_seed(spec, &all, s))
        .collect::<Result<_>>()?;
    let rmse: Vec<Vec<f64>> = (0..spec.eigenvalues.len())
        .map(|i| per_seed.iter().map(|r| r[i]).collect())
        .collect();
    let rows = spec
        .eigenvalues
        .iter()
        .zip(&rmse)
        .map(|(&d, errs)| {
            let q25 = quantile(errs, 0.25);
            let q75 = quantile(errs, 0.75);
            AblationRow {
                d,
                mean_rmse: mean(errs),
                q25,
                q75,
                iqr: q75 - q25,
            }
        })
        .collect();
    Ok(AblationReport {
        spec: spec.clone(),
        rmse,
        rows,
    })
}
