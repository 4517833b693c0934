//! First-order minimization with adaptive moments and a best-iterate guarantee.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// One update in place. Entries with `frozen[i] == true` are left untouched.
    pub fn step(&mut self, x: &mut [f64], grad: &[f64], frozen: Option<&[bool]>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            if frozen.is_some_and(|f| f[i]) || !grad[i].is_finite() {
                continue;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    /// Objective value at every evaluation, NaN for failed ones.
    pub history: Vec<f64>,
}

/// Minimizes `f` (returning value and gradient) with at most `budget`
/// evaluations. Returns the best evaluated iterate, so the result is never
/// worse than `x0`. A failed or non-finite evaluation reverts to the previous
/// iterate and halves the learning rate.
pub fn minimize<F>(
    mut f: F,
    x0: &[f64],
    budget: usize,
    learning_rate: f64,
    frozen: Option<&[bool]>,
) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if budget == 0 {
        return Err(Error::invalid("optimization budget must be at least 1"));
    }
    let (v0, mut g) = f(x0)?;
    if !v0.is_finite() {
        return Err(Error::invalid("objective is not finite at the initial point"));
    }
    let mut adam = Adam::new(x0.len(), learning_rate);
    let mut history = vec![v0];
    let mut best = (x0.to_vec(), v0);
    let mut last_good = x0.to_vec();
    let mut x = x0.to_vec();
    for _ in 1..budget {
        adam.step(&mut x, &g, frozen);
        match f(&x) {
            Ok((v, grad)) if v.is_finite() && grad.iter().all(|d| d.is_finite()) => {
                history.push(v);
                if v < best.1 {
                    best = (x.clone(), v);
                }
                last_good.clone_from(&x);
                g = grad;
            }
            _ => {
                history.push(f64::NAN);
                log::debug!("objective failed; reverting and halving the step");
                x.clone_from(&last_good);
                adam.learning_rate *= 0.5;
            }
        }
    }
    Ok(OptimResult {
        x: best.0,
        value: best.1,
        initial_value: v0,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_converges() {
        let f = |x: &[f64]| {
            Ok((
                (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2),
                vec![2.0 * (x[0] - 3.0), 4.0 * (x[1] + 1.0)],
            ))
        };
        let r = minimize(f, &[0.0, 0.0], 2000, 0.05, None).unwrap();
        assert!((r.x[0] - 3.0).abs() < 1e-3 && (r.x[1] + 1.0).abs() < 1e-3);
        assert!(r.value <= r.initial_value);
    }

    #[test]
    fn single_evaluation_returns_start() {
        let f = |x: &[f64]| Ok((x[0] * x[0], vec![2.0 * x[0]]));
        let r = minimize(f, &[1.5], 1, 0.1, None).unwrap();
        assert_eq!(r.x, vec![1.5]);
        assert_eq!(r.history.len(), 1);
    }

    #[test]
    fn frozen_entries_stay() {
        let f = |x: &[f64]| Ok((x[0] * x[0] + x[1] * x[1], vec![2.0 * x[0], 2.0 * x[1]]));
        let r = minimize(f, &[1.0, 1.0], 50, 0.1, Some(&[true, false])).unwrap();
        assert_eq!(r.x[0], 1.0);
        assert!(r.x[1].abs() < 1.0);
    }

    #[test]
    fn non_finite_step_is_reverted() {
        // The objective is undefined beyond x = 0.5.
        let f = |x: &[f64]| {
            if x[0] > 0.5 {
                Ok((f64::NAN, vec![0.0]))
            } else {
                Ok((-x[0], vec![-1.0]))
            }
        };
        let r = minimize(f, &[0.0], 100, 0.3, None).unwrap();
        assert!(r.x[0] <= 0.5 && r.value <= 0.0);
        assert!(r.history.iter().any(|v| v.is_nan()));
    }
}
