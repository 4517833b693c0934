//! Trajectory ingestion, windowing into training pairs and standardization.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Input;

/// Sampled state trajectory on a strictly increasing time grid.
///
/// States are stored row-major, one row of `dim` values per time point. An
/// optional scalar output column travels alongside the states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory")]
pub struct Trajectory {
    times: Arc<[f64]>,
    states: Vec<f64>,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outputs: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawTrajectory {
    times: Arc<[f64]>,
    states: Vec<f64>,
    dim: usize,
    #[serde(default)]
    outputs: Option<Vec<f64>>,
}

impl TryFrom<RawTrajectory> for Trajectory {
    type Error = Error;

    fn try_from(raw: RawTrajectory) -> Result<Self> {
        Trajectory::from_shared(raw.times, raw.states, raw.dim, raw.outputs)
    }
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        let dim = states.first().map_or(0, |s| s.len());
        if states.iter().any(|s| s.len() != dim) {
            return Err(Error::invalid("inconsistent state dimension"));
        }
        let flat = states.into_iter().flatten().collect();
        Self::from_flat(times, flat, dim)
    }

    pub fn from_flat(times: Vec<f64>, states: Vec<f64>, dim: usize) -> Result<Self> {
        Self::from_shared(times.into(), states, dim, None)
    }

    /// Builds a trajectory that shares its time grid with other trajectories.
    pub fn from_shared(times: Arc<[f64]>, states: Vec<f64>, dim: usize, outputs: Option<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("state dimension must be at least 1"));
        }
        if times.is_empty() {
            return Err(Error::invalid("trajectory must contain at least one point"));
        }
        if states.len() != times.len() * dim {
            return Err(Error::invalid(format!(
                "{} state values for {} time points of dimension {dim}",
                states.len(),
                times.len()
            )));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::invalid(format!(
                "times not strictly increasing at index {}",
                i + 1
            )));
        }
        if times.iter().chain(states.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value in trajectory"));
        }
        if let Some(out) = &outputs {
            if out.len() != times.len() {
                return Err(Error::invalid("output column length differs from time grid"));
            }
        }
        Ok(Trajectory {
            times,
            states,
            dim,
            outputs,
        })
    }

    pub fn with_outputs(mut self, outputs: Vec<f64>) -> Result<Self> {
        if outputs.len() != self.len() {
            return Err(Error::invalid("output column length differs from time grid"));
        }
        self.outputs = Some(outputs);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn shared_times(&self) -> &Arc<[f64]> {
        &self.times
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.states
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn outputs(&self) -> Option<&[f64]> {
        self.outputs.as_deref()
    }

    /// Trailing `count` samples as row-major states.
    pub fn tail_states(&self, count: usize) -> &[f64] {
        &self.states[(self.len() - count) * self.dim..]
    }

    /// Copy with the state values replaced (same grid, same dimension).
    pub fn with_states(&self, states: Vec<f64>) -> Result<Self> {
        Self::from_shared(self.times.clone(), states, self.dim, self.outputs.clone())
    }
}

/// Reads trajectories from CSV with header `traj_id,t,x1,...,xn[,y]`.
///
/// Trajectories are returned in order of first appearance of their id.
pub fn load_trajectories(path: impl AsRef<Path>, n: usize) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_trajectories(file, n)
}

pub fn read_trajectories(reader: impl Read, n: usize) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::invalid("state dimension must be at least 1"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    struct Acc {
        times: Vec<f64>,
        states: Vec<f64>,
        outputs: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Acc> = HashMap::new();
    let mut has_output = None;

    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(idx as u64 + 1, |p| p.line()) as usize;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if has_output.is_none() {
            // header row
            let expected = [n + 2, n + 3];
            if !expected.contains(&record.len()) {
                return Err(Error::Parse {
                    line,
                    msg: format!("header has {} columns, expected traj_id,t,x1..x{n}[,y]", record.len()),
                });
            }
            if &record[0] != "traj_id" || &record[1] != "t" {
                return Err(Error::Parse {
                    line,
                    msg: "header must start with traj_id,t".into(),
                });
            }
            has_output = Some(record.len() == n + 3);
            continue;
        }
        let with_y = has_output == Some(true);
        let width = n + 2 + usize::from(with_y);
        if record.len() != width {
            return Err(Error::Parse {
                line,
                msg: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let parse = |i: usize| -> Result<f64> {
            let v: f64 = record[i].parse().map_err(|_| Error::Parse {
                line,
                msg: format!("cannot parse {:?} as a number", &record[i]),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse {
                    line,
                    msg: format!("non-finite value {:?}", &record[i]),
                })
            }
        };
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty traj_id".into(),
            });
        }
        let t = parse(1)?;
        let acc = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Acc {
                times: Vec::new(),
                states: Vec::new(),
                outputs: Vec::new(),
            }
        });
        if let Some(&last) = acc.times.last() {
            if t == last {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate time {t} for trajectory {id}"),
                });
            }
            if t < last {
                return Err(Error::Parse {
                    line,
                    msg: format!("time {t} not increasing for trajectory {id} (previous {last})"),
                });
            }
        }
        acc.times.push(t);
        for i in 0..n {
            acc.states.push(parse(2 + i)?);
        }
        if with_y {
            acc.outputs.push(parse(n + 2)?);
        }
    }

    let with_y = has_output == Some(true);
    order
        .into_iter()
        .map(|id| {
            let acc = groups.remove(&id).expect("grouped id");
            let traj = Trajectory::from_flat(acc.times, acc.states, n)?;
            if with_y {
                traj.with_outputs(acc.outputs)
            } else {
                Ok(traj)
            }
        })
        .collect()
}

/// Writes trajectories in the CSV layout read by [`load_trajectories`].
/// Trajectory ids are their indices.
pub fn write_trajectories(mut out: impl Write, trajectories: &[Trajectory]) -> Result<()> {
    let dim = trajectories.first().map_or(0, |t| t.dim());
    let with_y = trajectories.first().is_some_and(|t| t.outputs().is_some());
    let mut header = String::from("traj_id,t");
    for i in 1..=dim {
        header.push_str(&format!(",x{i}"));
    }
    if with_y {
        header.push_str(",y");
    }
    writeln!(out, "{header}")?;
    for (id, traj) in trajectories.iter().enumerate() {
        if traj.dim() != dim || traj.outputs().is_some() != with_y {
            return Err(Error::invalid("trajectories differ in layout"));
        }
        for i in 0..traj.len() {
            let mut row = format!("{id},{}", traj.times()[i]);
            for v in traj.state(i) {
                row.push_str(&format!(",{v}"));
            }
            if let Some(y) = traj.outputs() {
                row.push_str(&format!(",{}", y[i]));
            }
            writeln!(out, "{row}")?;
        }
    }
    Ok(())
}

/// Which scalar is forecast.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Zero-based state coordinate.
    State(usize),
    /// The trajectory's extra output column.
    Output,
}

/// Window geometry: `past_points` samples ending at the anchor, `horizon_points`
/// future targets, anchors `stride` samples apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub past_points: usize,
    pub horizon_points: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn overlapping(past_points: usize, horizon_points: usize) -> Self {
        WindowSpec {
            past_points,
            horizon_points,
            stride: 1,
        }
    }

    /// Non-overlapping windows: each sample belongs to at most one window.
    pub fn disjoint(past_points: usize, horizon_points: usize) -> Self {
        WindowSpec {
            past_points,
            horizon_points,
            stride: past_points + horizon_points,
        }
    }
}

/// One regression example: a past window re-anchored at time 0, a forecast
/// time, and the target value at that time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub past: Arc<Trajectory>,
    pub forecast_time: f64,
    pub target: f64,
}

impl TrainingPair {
    pub fn input(&self) -> Input {
        Input {
            time: self.forecast_time,
            past: self.past.clone(),
        }
    }
}

/// Training pairs sharing one past-window grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingSet {
    pub pairs: Vec<TrainingPair>,
    pub grid: Arc<[f64]>,
    pub standardizer: Standardizer,
}

impl TrainingSet {
    pub fn new(pairs: Vec<TrainingPair>, grid: Arc<[f64]>, standardizer: Standardizer) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("training set must be nonempty"));
        }
        for p in &pairs {
            if p.past.times() != &grid[..] {
                return Err(Error::GridMismatch(
                    "training pair past grid differs from the set grid".into(),
                ));
            }
            if !(p.forecast_time >= 0.0) || !p.target.is_finite() {
                return Err(Error::invalid("forecast time must be >= 0 and target finite"));
            }
        }
        Ok(TrainingSet {
            pairs,
            grid,
            standardizer,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn inputs(&self) -> Vec<Input> {
        self.pairs.iter().map(TrainingPair::input).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.target).collect()
    }

    pub fn state_dim(&self) -> usize {
        self.pairs[0].past.dim()
    }

    /// Distinct past windows in order of first appearance.
    pub fn windows(&self) -> Vec<Arc<Trajectory>> {
        let mut seen = std::collections::HashSet::new();
        self.pairs
            .iter()
            .filter(|p| seen.insert(Arc::as_ptr(&p.past)))
            .map(|p| p.past.clone())
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<TrainingSet> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.pairs.len()) {
            return Err(Error::invalid(format!(
                "pair index {i} out of range for {} pairs",
                self.pairs.len()
            )));
        }
        let pairs = indices.iter().map(|&i| self.pairs[i].clone()).collect();
        TrainingSet::new(pairs, self.grid.clone(), self.standardizer.clone())
    }

    /// Pairs belonging to the chosen windows (indices into [`TrainingSet::windows`]),
    /// grouped by window in the given order.
    pub fn select_windows(&self, window_indices: &[usize]) -> Result<TrainingSet> {
        let windows = self.windows();
        if let Some(&i) = window_indices.iter().find(|&&i| i >= windows.len()) {
            return Err(Error::invalid(format!(
                "window index {i} out of range for {} windows",
                windows.len()
            )));
        }
        let chosen: Vec<*const Trajectory> = window_indices.iter().map(|&i| Arc::as_ptr(&windows[i])).collect();
        let mut pairs = Vec::new();
        for ptr in chosen {
            pairs.extend(self.pairs.iter().filter(|p| Arc::as_ptr(&p.past) == ptr).cloned());
        }
        TrainingSet::new(pairs, self.grid.clone(), self.standardizer.clone())
    }

    /// Splits off the last `fraction` of pairs (at least one when `fraction > 0`
    /// and more than one pair exists).
    pub fn split_tail(&self, fraction: f64) -> Result<(TrainingSet, Option<TrainingSet>)> {
        let n = self.len();
        let tail = ((n as f64) * fraction).round() as usize;
        let tail = tail.min(n.saturating_sub(1));
        if tail == 0 {
            return Ok((self.clone(), None));
        }
        let head: Vec<usize> = (0..n - tail).collect();
        let rest: Vec<usize> = (n - tail..n).collect();
        Ok((self.subset(&head)?, Some(self.subset(&rest)?)))
    }

    pub fn concat(&self, other: &TrainingSet) -> Result<TrainingSet> {
        if self.grid[..] != other.grid[..] {
            return Err(Error::GridMismatch("cannot join sets with different grids".into()));
        }
        let mut pairs = self.pairs.clone();
        pairs.extend(other.pairs.iter().cloned());
        TrainingSet::new(pairs, self.grid.clone(), self.standardizer.clone())
    }
}

/// Cuts trajectories into training pairs.
///
/// For each anchor index `a` (the last past sample) the past window holds the
/// `past_points` samples ending at `a`, shifted so that `a` is time 0, and one
/// pair is emitted per future offset `k = 1..=horizon_points` with target
/// taken at `a + k`. Times are divided by `horizon_points · Δt`, so the last
/// forecast time is exactly 1 and the past grid is `(g - past_points + 1) /
/// horizon_points`.
pub fn window_dataset(trajectories: &[Trajectory], target: Target, spec: WindowSpec) -> Result<TrainingSet> {
    let WindowSpec {
        past_points,
        horizon_points,
        stride,
    } = spec;
    if past_points == 0 || horizon_points == 0 || stride == 0 {
        return Err(Error::invalid("past_points, horizon_points and stride must be >= 1"));
    }
    if trajectories.is_empty() {
        return Err(Error::invalid("no trajectories to window"));
    }
    let need = past_points + horizon_points;
    let mut dt_shared: Option<f64> = None;
    for (i, traj) in trajectories.iter().enumerate() {
        if traj.len() < need {
            return Err(Error::invalid(format!(
                "trajectory {i} has {} points, need at least {need}",
                traj.len()
            )));
        }
        let dt = equidistant_step(traj.times())
            .ok_or_else(|| Error::invalid(format!("trajectory {i} is not on an equidistant grid")))?;
        match dt_shared {
            None => dt_shared = Some(dt),
            Some(d) if ((dt - d) / d).abs() > 1e-9 => {
                return Err(Error::invalid(format!(
                    "trajectory {i} has step {dt}, others {d}; one shared grid is required"
                )))
            }
            _ => {}
        }
        if let Target::State(c) = target {
            if c >= traj.dim() {
                return Err(Error::invalid(format!(
                    "target coordinate {c} out of range for dimension {}",
                    traj.dim()
                )));
            }
        } else if traj.outputs().is_none() {
            return Err(Error::invalid(format!("trajectory {i} has no output column")));
        }
    }
    let dt = dt_shared.expect("nonempty");
    let time_scale = horizon_points as f64 * dt;
    let grid: Arc<[f64]> = (0..past_points)
        .map(|g| (g as f64 - (past_points - 1) as f64) / horizon_points as f64)
        .collect();

    let dim = trajectories[0].dim();
    let mut pairs = Vec::new();
    for traj in trajectories {
        if traj.dim() != dim {
            return Err(Error::invalid("trajectories differ in state dimension"));
        }
        let value = |i: usize| match target {
            Target::State(c) => traj.state(i)[c],
            Target::Output => traj.outputs().expect("checked")[i],
        };
        let mut anchor = past_points - 1;
        while anchor + horizon_points < traj.len() {
            let start = anchor + 1 - past_points;
            let states = traj.states_flat()[start * dim..(anchor + 1) * dim].to_vec();
            let past = Arc::new(Trajectory::from_shared(grid.clone(), states, dim, None)?);
            for k in 1..=horizon_points {
                pairs.push(TrainingPair {
                    past: past.clone(),
                    forecast_time: k as f64 / horizon_points as f64,
                    target: value(anchor + k),
                });
            }
            anchor += stride;
        }
    }
    TrainingSet::new(pairs, grid, Standardizer::identity(dim, time_scale))
}

fn equidistant_step(times: &[f64]) -> Option<f64> {
    let dt = times[1] - times[0];
    times
        .windows(2)
        .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.abs().max(1e-300))
        .then_some(dt)
}

/// Affine maps between raw units and the standardized units used for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub target_mean: f64,
    pub target_std: f64,
    /// Raw time units per normalized time unit.
    pub time_scale: f64,
    pub state_means: Vec<f64>,
    pub state_stds: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize, time_scale: f64) -> Self {
        Standardizer {
            target_mean: 0.0,
            target_std: 1.0,
            time_scale,
            state_means: vec![0.0; dim],
            state_stds: vec![1.0; dim],
        }
    }

    pub fn standardize_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn destandardize_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }

    pub fn destandardize_variance(&self, v: f64) -> f64 {
        v * self.target_std * self.target_std
    }

    pub fn standardize_state(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.state_means.iter().zip(&self.state_stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn destandardize_state(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.state_means.iter().zip(&self.state_stds))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    /// Maps a set expressed in `set.standardizer` units into this standardizer's units.
    pub fn apply(&self, set: &TrainingSet) -> Result<TrainingSet> {
        let from = &set.standardizer;
        if from.state_means.len() != self.state_means.len() {
            return Err(Error::invalid("standardizer dimension mismatch"));
        }
        let rescale_time = from.time_scale / self.time_scale;
        let grid: Arc<[f64]> = set.grid.iter().map(|t| t * rescale_time).collect();
        let mut converted: HashMap<*const Trajectory, Arc<Trajectory>> = HashMap::new();
        let mut pairs = Vec::with_capacity(set.len());
        for p in &set.pairs {
            let past = converted
                .entry(Arc::as_ptr(&p.past))
                .or_insert_with(|| {
                    let dim = p.past.dim();
                    let states: Vec<f64> = p
                        .past
                        .states_flat()
                        .chunks(dim)
                        .flat_map(|row| self.standardize_state(&from.destandardize_state(row)))
                        .collect();
                    Arc::new(
                        Trajectory::from_shared(grid.clone(), states, dim, None)
                            .expect("affine image of a valid trajectory"),
                    )
                })
                .clone();
            pairs.push(TrainingPair {
                past,
                forecast_time: p.forecast_time * rescale_time,
                target: self.standardize_target(from.destandardize_target(p.target)),
            });
        }
        TrainingSet::new(pairs, grid, self.clone())
    }
}

/// Standardizes targets to zero mean / unit variance, states per coordinate,
/// and forecast times so the largest is 1. The returned standardizer maps raw
/// units (before windowing) to the new units.
pub fn standardize(set: &TrainingSet) -> Result<(TrainingSet, Standardizer)> {
    if set.is_empty() {
        return Err(Error::invalid("cannot standardize an empty set"));
    }
    let n = set.len() as f64;
    let mean = set.pairs.iter().map(|p| p.target).sum::<f64>() / n;
    let var = set.pairs.iter().map(|p| (p.target - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-300) {
        return Err(Error::invalid("target is constant; cannot standardize"));
    }

    let dim = set.state_dim();
    let windows = set.windows();
    let mut s_mean = vec![0.0; dim];
    let mut s_sq = vec![0.0; dim];
    let mut count = 0.0;
    for w in &windows {
        for row in w.states_flat().chunks(dim) {
            for d in 0..dim {
                s_mean[d] += row[d];
            }
            count += 1.0;
        }
    }
    s_mean.iter_mut().for_each(|m| *m /= count);
    for w in &windows {
        for row in w.states_flat().chunks(dim) {
            for d in 0..dim {
                s_sq[d] += (row[d] - s_mean[d]).powi(2);
            }
        }
    }
    let s_std: Vec<f64> = s_sq
        .iter()
        .map(|v| {
            let s = (v / count).sqrt();
            if s > 1e-300 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let t_max = set.pairs.iter().map(|p| p.forecast_time).fold(0.0, f64::max);
    let t_factor = if t_max > 0.0 { t_max } else { 1.0 };

    let prev = &set.standardizer;
    let total = Standardizer {
        target_mean: prev.target_mean + prev.target_std * mean,
        target_std: prev.target_std * std,
        time_scale: prev.time_scale * t_factor,
        state_means: (0..dim)
            .map(|d| prev.state_means[d] + prev.state_stds[d] * s_mean[d])
            .collect(),
        state_stds: (0..dim).map(|d| prev.state_stds[d] * s_std[d]).collect(),
    };
    let out = total.apply(set)?;
    Ok((out, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_traj(n: usize, dt: f64) -> Trajectory {
        let times = (0..n).map(|i| i as f64 * dt).collect();
        let states = (0..n).map(|i| vec![i as f64, -(i as f64)]).collect();
        Trajectory::new(times, states).unwrap()
    }

    #[test]
    fn csv_groups_one_trajectory() {
        let csv = "traj_id,t,x1,x2\na,0,1,2\na,1,3,4\na,2,5,6\n";
        let trajs = read_trajectories(csv.as_bytes(), 2).unwrap();
        assert_eq!(trajs.len(), 1);
        assert_eq!(trajs[0].len(), 3);
        assert_eq!(trajs[0].state(2), &[5.0, 6.0]);
    }

    #[test]
    fn csv_empty_file_is_empty_list() {
        assert!(read_trajectories("".as_bytes(), 2).unwrap().is_empty());
    }

    #[test]
    fn csv_duplicate_time_names_line() {
        let csv = "traj_id,t,x1\na,0,1\na,1,2\na,1,3\n";
        let err = read_trajectories(csv.as_bytes(), 1).unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 4);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_bad_rows() {
        let bad_num = "traj_id,t,x1\na,0,abc\n";
        assert!(matches!(
            read_trajectories(bad_num.as_bytes(), 1),
            Err(Error::Parse { line: 2, .. })
        ));
        let decreasing = "traj_id,t,x1\na,1,0\na,0,0\n";
        assert!(matches!(
            read_trajectories(decreasing.as_bytes(), 1),
            Err(Error::Parse { line: 3, .. })
        ));
        let wrong_width = "traj_id,t,x1,x2\na,0,1\n";
        assert!(matches!(
            read_trajectories(wrong_width.as_bytes(), 2),
            Err(Error::Parse { line: 2, .. })
        ));
        let missing = "traj_id,t,x1\na,0,\n";
        assert!(read_trajectories(missing.as_bytes(), 1).is_err());
    }

    #[test]
    fn csv_output_column_round_trip() {
        let traj = line_traj(4, 0.5).with_outputs(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &[traj.clone()]).unwrap();
        let back = read_trajectories(buf.as_slice(), 2).unwrap();
        assert_eq!(back, vec![traj]);
    }

    #[test]
    fn single_anchor_64_points() {
        let traj = line_traj(64, 3.0);
        let set = window_dataset(&[traj], Target::State(1), WindowSpec::disjoint(32, 32)).unwrap();
        assert_eq!(set.len(), 32);
        assert_eq!(set.windows().len(), 1);
        assert_eq!(set.pairs.last().unwrap().forecast_time, 1.0);
        assert_eq!(set.standardizer.time_scale, 96.0);
    }

    #[test]
    fn horizon_one_gives_one_pair_per_anchor() {
        let traj = line_traj(10, 1.0);
        let set = window_dataset(&[traj], Target::State(0), WindowSpec::overlapping(3, 1)).unwrap();
        // anchors 2..=8
        assert_eq!(set.len(), 7);
        assert_eq!(set.windows().len(), 7);
    }

    #[test]
    fn minimal_trajectory_enumerated_by_hand() {
        // 5 points, H_p = 3, H_f = 2: the only anchor is index 2 (past 0,1,2;
        // targets at 3 and 4).
        let traj = line_traj(5, 0.1);
        let set = window_dataset(&[traj], Target::State(0), WindowSpec::overlapping(3, 2)).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.pairs[0].target, 3.0);
        assert_eq!(set.pairs[1].target, 4.0);
        assert_eq!(set.pairs[0].forecast_time, 0.5);
        assert_eq!(set.pairs[1].forecast_time, 1.0);
        assert_eq!(set.pairs[0].past.state(0), &[0.0, 0.0]);
        assert_eq!(set.pairs[0].past.last_state(), &[2.0, -2.0]);
        assert_eq!(set.grid.as_ref(), &[-1.0, -0.5, 0.0]);
    }

    #[test]
    fn windows_share_one_grid_array() {
        let trajs = vec![line_traj(12, 1.0), line_traj(12, 1.0)];
        let set = window_dataset(&trajs, Target::State(0), WindowSpec::overlapping(4, 3)).unwrap();
        assert!(set.pairs.iter().all(|p| Arc::ptr_eq(p.past.shared_times(), &set.grid)));
    }

    #[test]
    fn windowing_errors() {
        let short = line_traj(4, 1.0);
        assert!(window_dataset(&[short], Target::State(0), WindowSpec::overlapping(3, 2)).is_err());
        let uneven = Trajectory::new(vec![0.0, 1.0, 3.0, 4.0], vec![vec![0.0]; 4]).unwrap();
        assert!(window_dataset(&[uneven], Target::State(0), WindowSpec::overlapping(2, 1)).is_err());
        let traj = line_traj(6, 1.0);
        assert!(window_dataset(&[traj], Target::Output, WindowSpec::overlapping(2, 1)).is_err());
    }

    fn set_with_targets(targets: &[f64]) -> TrainingSet {
        let grid: Arc<[f64]> = vec![-0.5, 0.0].into();
        let pairs = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| TrainingPair {
                past: Arc::new(Trajectory::from_shared(grid.clone(), vec![i as f64, 1.0 + i as f64], 1, None).unwrap()),
                forecast_time: 0.5 + 0.5 * (i % 2) as f64,
                target: y,
            })
            .collect();
        TrainingSet::new(pairs, grid, Standardizer::identity(1, 1.0)).unwrap()
    }

    #[test]
    fn two_point_standardization() {
        let (z, s) = standardize(&set_with_targets(&[1.0, 3.0])).unwrap();
        assert_eq!(z.targets(), vec![-1.0, 1.0]);
        assert_eq!(s.target_mean, 2.0);
        assert_eq!(s.target_std, 1.0);
    }

    #[test]
    fn constant_target_rejected() {
        assert!(standardize(&set_with_targets(&[2.0, 2.0])).is_err());
    }

    #[test]
    fn standardizing_twice_is_identity() {
        let (once, _) = standardize(&set_with_targets(&[0.3, -1.2, 4.0, 2.2])).unwrap();
        let mut reset = once.clone();
        reset.standardizer = Standardizer::identity(1, 1.0);
        let (twice, s) = standardize(&reset).unwrap();
        assert!((s.target_mean).abs() < 1e-12 && (s.target_std - 1.0).abs() < 1e-12);
        assert!((s.state_means[0]).abs() < 1e-12 && (s.state_stds[0] - 1.0).abs() < 1e-12);
        assert!((s.time_scale - 1.0).abs() < 1e-12);
        for (a, b) in once.pairs.iter().zip(&twice.pairs) {
            assert!((a.target - b.target).abs() < 1e-12);
            assert!((a.forecast_time - b.forecast_time).abs() < 1e-12);
        }
    }

    #[test]
    fn standardizer_json_has_all_fields() {
        let s = Standardizer::identity(2, 3.0);
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        for key in ["target_mean", "target_std", "time_scale", "state_means", "state_stds"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn standardize_round_trips(ys in proptest::collection::vec(-1e3f64..1e3, 2..40)) {
                prop_assume!(ys.iter().any(|y| (y - ys[0]).abs() > 1e-6));
                let set = set_with_targets(&ys);
                let (z, s) = standardize(&set).unwrap();
                let n = ys.len() as f64;
                let mean = z.targets().iter().sum::<f64>() / n;
                let var = z.targets().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-10);
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-10);
                for (p, y) in z.pairs.iter().zip(&ys) {
                    prop_assert!((s.destandardize_target(p.target) - y).abs() < 1e-10 * (1.0 + y.abs()));
                }
            }
        }
    }
}
