use std::path::{Path, PathBuf};

use koopgp_core::analysis::{write_curves_csv, ModelSpec};
use koopgp_core::exact::optimize_with;
use koopgp_core::params::initial_config;
use koopgp_core::{
    make_corpus, run_ablation, run_benchmark, run_info_gain, seed, standardize, train_sparse, window_dataset,
    AblationSpec, BenchmarkSpec, CorpusSource, CorpusSpec, InfoGainSpec, OdeSystem, OptimizeOptions, Target,
    TrainOptions, WindowSpec,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;
use crate::model::{ModelFile, SavedModel};
use crate::output::OutputDir;
use crate::Command;

pub fn run(command: Command, config: &Path, out: &Path) -> Result<(), Failure> {
    let raw =
        std::fs::read(config).map_err(|e| Failure::Config(format!("cannot read config {}: {e}", config.display())))?;
    let mut dir = match command {
        Command::Simulate => simulate(&parse(&raw)?, out)?,
        Command::Fit => fit(&parse(&raw)?, out)?,
        Command::Forecast => forecast(&parse(&raw)?, out)?,
        Command::Benchmark => benchmark(&parse(&raw)?, out)?,
        Command::Infogain => infogain(&parse(&raw)?, out)?,
        Command::Ablate => ablate(&parse(&raw)?, out)?,
    };
    dir.write("config.json", &raw)?;
    dir.finish(command.name(), &raw)
}

fn parse<T: DeserializeOwned>(raw: &[u8]) -> Result<T, Failure> {
    serde_json::from_slice(raw).map_err(|e| Failure::Config(e.to_string()))
}

fn check_exists(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Config(format!("{what} {} does not exist", path.display())))
    }
}

/// Rejects unknown systems and missing CSV inputs before any work starts.
fn check_corpus(source: &CorpusSource) -> Result<(), Failure> {
    match source {
        CorpusSource::Simulate { system, .. } => OdeSystem::by_name(system).map(|_| ()).map_err(Failure::from),
        CorpusSource::Csv { path, .. } => check_exists(path, "corpus"),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    system: String,
    corpus: CorpusSpec,
}

#[derive(Serialize)]
struct CorpusMeta<'a> {
    system: &'a OdeSystem,
    corpus: &'a CorpusSpec,
    trajectories: usize,
    points_per_trajectory: usize,
}

fn simulate(cfg: &SimulateConfig, out: &Path) -> Result<OutputDir, Failure> {
    let system = OdeSystem::by_name(&cfg.system)?;
    let trajectories = make_corpus(&system, &cfg.corpus)?;
    let mut csv = Vec::new();
    koopgp_core::data::write_trajectories(&mut csv, &trajectories)?;
    let mut dir = OutputDir::create(out)?;
    dir.write("corpus.csv", &csv)?;
    dir.write_json(
        "meta.json",
        &CorpusMeta {
            system: &system,
            corpus: &cfg.corpus,
            trajectories: trajectories.len(),
            points_per_trajectory: cfg.corpus.steps + 1,
        },
    )?;
    Ok(dir)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Inference {
    /// Exact while `windows · horizon` stays at or below `exact_threshold`.
    #[default]
    Auto,
    Exact,
    Sparse,
}

fn default_threshold() -> usize {
    4096
}

fn default_inducing() -> usize {
    32
}

fn default_validation() -> f64 {
    0.1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    corpus: CorpusSource,
    target: Target,
    window: WindowSpec,
    model: ModelSpec,
    /// Training windows drawn without replacement; all windows when absent.
    #[serde(default)]
    n_train: Option<usize>,
    seed: u64,
    #[serde(default)]
    inference: Inference,
    #[serde(default = "default_threshold")]
    exact_threshold: usize,
    #[serde(default)]
    optimizer: OptimizeOptions,
    #[serde(default)]
    sparse: TrainOptions,
    #[serde(default = "default_inducing")]
    num_inducing: usize,
    #[serde(default = "default_validation")]
    validation_fraction: f64,
}

fn fit(cfg: &FitConfig, out: &Path) -> Result<OutputDir, Failure> {
    check_corpus(&cfg.corpus)?;
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Failure::Config("validation_fraction must lie in [0, 1)".into()));
    }
    let all = window_dataset(&cfg.corpus.load()?, cfg.target, cfg.window)?;
    let windows = all.windows().len();
    let raw = match cfg.n_train {
        Some(n) if n > windows => {
            return Err(Failure::Config(format!(
                "n_train = {n} exceeds the {windows} available windows"
            )));
        }
        Some(0) => return Err(Failure::Config("n_train must be >= 1".into())),
        Some(n) => {
            let mut rng = seed::rng(seed::derive(cfg.seed, "windows"));
            let mut picks = rand::seq::index::sample(&mut rng, windows, n).into_vec();
            picks.sort_unstable();
            all.select_windows(&picks)?
        }
        None => all,
    };
    let (train, _) = standardize(&raw)?;
    let cfg0 = initial_config(
        cfg.model.kind,
        &train,
        cfg.model.eigenvalues,
        seed::derive(cfg.seed, "spectrum"),
    )?;
    let exact = match cfg.inference {
        Inference::Exact => true,
        Inference::Sparse => false,
        Inference::Auto => train.windows().len() * cfg.window.horizon_points <= cfg.exact_threshold,
    };
    let mut dir = OutputDir::create(out)?;
    let model = if exact {
        let (fitted, result) = optimize_with(&train, &cfg0, &cfg.optimizer)?;
        log::info!("nll {:.4} -> {:.4}", result.initial_value, result.value);
        let mut log_csv = String::from("step,nll\n");
        for (step, v) in result.history.iter().enumerate() {
            log_csv.push_str(&format!("{step},{v}\n"));
        }
        dir.write("fit_log.csv", log_csv.as_bytes())?;
        SavedModel::Exact {
            cfg: fitted,
            training: train,
        }
    } else {
        let n = train.windows().len();
        let n_val = (((n as f64) * cfg.validation_fraction).round() as usize).min(n - 1);
        let fit_set = train.select_windows(&(0..n - n_val).collect::<Vec<_>>())?;
        let validation = if n_val > 0 {
            Some(train.select_windows(&(n - n_val..n).collect::<Vec<_>>())?)
        } else {
            None
        };
        let (state, log) = train_sparse(
            &fit_set,
            validation.as_ref(),
            &cfg0,
            cfg.num_inducing,
            &cfg.sparse,
            seed::derive(cfg.seed, "sparse"),
        )?;
        let mut log_csv = Vec::new();
        log.write_csv(&mut log_csv)?;
        dir.write("fit_log.csv", &log_csv)?;
        SavedModel::Sparse { state }
    };
    dir.write_json(
        "model.json",
        &ModelFile {
            target: cfg.target,
            window: cfg.window,
            model,
        },
    )?;
    Ok(dir)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForecastConfig {
    model: PathBuf,
    corpus: CorpusSource,
    /// Zero-based trajectory index in the corpus.
    trajectory: usize,
    /// Index of the last past sample.
    anchor: usize,
    /// Forecast offsets after the anchor in raw time; defaults to the model's
    /// horizon at the trajectory's sampling step.
    #[serde(default)]
    times: Option<Vec<f64>>,
    /// Adds observation noise to the predictive variance.
    #[serde(default)]
    with_noise: bool,
}

fn forecast(cfg: &ForecastConfig, out: &Path) -> Result<OutputDir, Failure> {
    check_exists(&cfg.model, "model")?;
    check_corpus(&cfg.corpus)?;
    let text = std::fs::read(&cfg.model)?;
    let model: ModelFile = serde_json::from_slice(&text)
        .map_err(|e| Failure::Config(format!("{} is not a model file: {e}", cfg.model.display())))?;
    model.cfg().validate()?;
    let trajectories = cfg.corpus.load()?;
    let traj = trajectories.get(cfg.trajectory).ok_or_else(|| {
        Failure::Config(format!(
            "trajectory {} not in a corpus of {}",
            cfg.trajectory,
            trajectories.len()
        ))
    })?;
    let offsets = match &cfg.times {
        Some(t) if t.iter().any(|v| !v.is_finite() || *v < 0.0) => {
            return Err(Failure::Config("forecast times must be finite and >= 0".into()));
        }
        Some(t) => t.clone(),
        None => {
            let dt = model.standardizer().time_scale / model.window.horizon_points as f64;
            (1..=model.window.horizon_points).map(|k| k as f64 * dt).collect()
        }
    };
    let forecast = model.forecast(traj, cfg.anchor, &offsets, cfg.with_noise)?;
    let mut csv = Vec::new();
    forecast.write_csv(&mut csv)?;
    let mut dir = OutputDir::create(out)?;
    dir.write("forecast.csv", &csv)?;
    Ok(dir)
}

fn benchmark(spec: &BenchmarkSpec, out: &Path) -> Result<OutputDir, Failure> {
    check_corpus(&spec.corpus)?;
    spec.validate()?;
    let report = run_benchmark(spec)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let mut dir = OutputDir::create(out)?;
    dir.write("report.csv", &csv)?;
    dir.write_json("report.json", &report)?;
    Ok(dir)
}

fn infogain(spec: &InfoGainSpec, out: &Path) -> Result<OutputDir, Failure> {
    check_corpus(&spec.corpus)?;
    let report = run_info_gain(spec)?;
    let mut csv = Vec::new();
    write_curves_csv(&report.curves, &mut csv)?;
    let mut dir = OutputDir::create(out)?;
    dir.write("infogain.csv", &csv)?;
    dir.write_json("infogain.json", &report)?;
    Ok(dir)
}

fn ablate(spec: &AblationSpec, out: &Path) -> Result<OutputDir, Failure> {
    check_corpus(&spec.corpus)?;
    let report = run_ablation(spec)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let mut dir = OutputDir::create(out)?;
    dir.write("ablation.csv", &csv)?;
    dir.write_json("ablation.json", &report)?;
    Ok(dir)
}
