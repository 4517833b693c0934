use std::sync::Arc;

use koopgp_core::kernels::KernelConfig;
use koopgp_core::sparse::sparse_predict_standardized;
use koopgp_core::{fit_exact, Forecast, Input, SparseState, Standardizer, Target, TrainingSet, Trajectory, WindowSpec};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// A fitted model as stored in `model.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "inference", rename_all = "snake_case")]
pub enum SavedModel {
    /// Hyperparameters plus the standardized training set; the posterior is
    /// refactorized on load.
    Exact {
        cfg: KernelConfig,
        training: TrainingSet,
    },
    Sparse {
        state: SparseState,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub target: Target,
    pub window: WindowSpec,
    pub model: SavedModel,
}

impl ModelFile {
    pub fn standardizer(&self) -> &Standardizer {
        match &self.model {
            SavedModel::Exact { training, .. } => &training.standardizer,
            SavedModel::Sparse { state } => &state.standardizer,
        }
    }

    pub fn cfg(&self) -> &KernelConfig {
        match &self.model {
            SavedModel::Exact { cfg, .. } => cfg,
            SavedModel::Sparse { state } => &state.cfg,
        }
    }

    /// Past-window grid in normalized time.
    pub fn grid(&self) -> Arc<[f64]> {
        match &self.model {
            SavedModel::Exact { training, .. } => training.grid.clone(),
            SavedModel::Sparse { state } => state.inducing_windows[0].shared_times().clone(),
        }
    }

    /// Forecasts `offsets` (raw time after the anchor) from the past window of
    /// `trajectory` ending at sample `anchor`.
    pub fn forecast(
        &self,
        trajectory: &Trajectory,
        anchor: usize,
        offsets: &[f64],
        with_noise: bool,
    ) -> Result<Forecast, Failure> {
        let st = self.standardizer();
        let grid = self.grid();
        let past_points = grid.len();
        if anchor >= trajectory.len() || anchor + 1 < past_points {
            return Err(Failure::Config(format!(
                "anchor {anchor} needs {past_points} past samples inside a trajectory of {} points",
                trajectory.len()
            )));
        }
        let first = anchor + 1 - past_points;
        let t0 = trajectory.times()[anchor];
        let mut states = Vec::with_capacity(past_points * trajectory.dim());
        for (g, i) in (first..=anchor).enumerate() {
            let tau = (trajectory.times()[i] - t0) / st.time_scale;
            if (tau - grid[g]).abs() > 1e-9 * (1.0 + grid[g].abs()) {
                return Err(Failure::Config(format!(
                    "trajectory sampling does not match the model window grid at sample {i}"
                )));
            }
            states.extend(st.standardize_state(trajectory.state(i)));
        }
        let past = Arc::new(Trajectory::from_shared(grid, states, trajectory.dim(), None)?);
        let queries: Vec<Input> = offsets
            .iter()
            .map(|&t| Input {
                time: t / st.time_scale,
                past: past.clone(),
            })
            .collect();
        let (mean, mut var) = match &self.model {
            SavedModel::Exact { cfg, training } => {
                fit_exact(training, cfg)?.predict_standardized(&queries, with_noise)?
            }
            SavedModel::Sparse { state } => {
                let (m, mut v) = sparse_predict_standardized(state, &queries)?;
                if with_noise {
                    v.iter_mut().for_each(|x| *x += state.cfg.noise_var);
                }
                (m, v)
            }
        };
        var.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(Forecast {
            times: offsets.to_vec(),
            mean: mean.iter().map(|&m| st.destandardize_target(m)).collect(),
            variance: var.iter().map(|&v| st.destandardize_variance(v)).collect(),
        })
    }
}
