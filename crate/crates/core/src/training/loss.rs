//! Per-timestep losses and class prediction from readout traces.

use serde::{Deserialize, Serialize};

use crate::error::{HyprError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy of the softmax of the readout at every active step.
    #[default]
    CrossEntropy,
    /// `½‖u − y‖²` at every active step.
    SquaredError,
}

/// Supervision attached to one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Same class at every step.
    Class(usize),
    /// One class per step.
    PerStep(Vec<usize>),
    /// Row-major `T × C` regression targets.
    Values(Vec<f64>),
}

impl Target {
    pub fn class_at(&self, t: usize) -> Option<usize> {
        match self {
            Target::Class(c) => Some(*c),
            Target::PerStep(v) => v.get(t).copied(),
            Target::Values(_) => None,
        }
    }

    /// Sequence-level label used by the aggregate prediction modes.
    pub fn label(&self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(*c),
            Target::PerStep(v) => v.last().copied(),
            Target::Values(_) => None,
        }
    }
}

/// Loss applied to steps `t >= t0` (0-based), each weighted by `1/(T - t0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    #[serde(default)]
    pub kind: LossKind,
    #[serde(default)]
    pub t0: usize,
}

impl LossSpec {
    pub fn new(kind: LossKind, t0: usize) -> Self {
        LossSpec { kind, t0 }
    }

    pub fn check(&self, t_len: usize) -> Result<()> {
        if self.t0 >= t_len {
            return Err(HyprError::config(format!(
                "t0 = {} leaves no active step in a sequence of length {t_len}",
                self.t0
            )));
        }
        Ok(())
    }

    /// Loss `L^t` and `dL^t/du^t` written into `grad`.
    pub fn step_loss<T: Scalar>(
        &self,
        t: usize,
        t_len: usize,
        target: &Target,
        u: &[T],
        grad: &mut [T],
    ) -> T {
        grad.fill(T::zero());
        if t < self.t0 {
            return T::zero();
        }
        let weight = T::c(1.0 / (t_len - self.t0) as f64);
        match (self.kind, target) {
            (LossKind::SquaredError, Target::Values(y)) => {
                let c = u.len();
                let row: Vec<T> = y[t * c..(t + 1) * c].iter().map(|v| T::c(*v)).collect();
                squared_error(u, &row, weight, grad)
            }
            (_, target) => {
                let class = target.class_at(t).expect("class target for cross-entropy");
                cross_entropy(u, class, weight, grad)
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(u: &[T], out: &mut [T]) {
    let mx = u.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(u) {
        *o = (v - mx).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Weighted cross-entropy `w · CE(softmax(u), class)` and its gradient.
pub fn cross_entropy<T: Scalar>(u: &[T], class: usize, weight: T, grad: &mut [T]) -> T {
    let top = argmax(u);
    let mx = u[top];
    // log-sum-exp relative to the maximum, kept accurate for confident logits
    let rest = u
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != top)
        .map(|(_, &v)| (v - mx).exp())
        .fold(T::zero(), |a, b| a + b);
    let lse = rest.ln_1p();
    softmax(u, grad);
    grad[class] -= T::one();
    for g in grad.iter_mut() {
        *g *= weight;
    }
    weight * (lse - (u[class] - mx))
}

/// Weighted `½‖u − y‖²` and its gradient.
pub fn squared_error<T: Scalar>(u: &[T], y: &[T], weight: T, grad: &mut [T]) -> T {
    let mut l = T::zero();
    for ((g, &a), &b) in grad.iter_mut().zip(u).zip(y) {
        let r = a - b;
        l += r * r;
        *g = weight * r;
    }
    weight * l * T::c(0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    #[default]
    MeanOverSequence,
    SumOfSoftmax,
    PerTimestep,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    Class(usize),
    PerStep(Vec<usize>),
}

/// Running aggregates of a readout trace over the active steps.
#[derive(Clone, Debug)]
pub struct PredictionAccumulator<T> {
    mode: PredictionMode,
    t0: usize,
    sum: Vec<T>,
    scratch: Vec<T>,
    steps: Vec<usize>,
}

impl<T: Scalar> PredictionAccumulator<T> {
    pub fn new(mode: PredictionMode, t0: usize, n_classes: usize) -> Self {
        PredictionAccumulator {
            mode,
            t0,
            sum: vec![T::zero(); n_classes],
            scratch: vec![T::zero(); n_classes],
            steps: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.sum.fill(T::zero());
        self.steps.clear();
    }

    pub fn push(&mut self, t: usize, u: &[T]) {
        if t < self.t0 {
            return;
        }
        match self.mode {
            PredictionMode::MeanOverSequence => {
                for (s, &v) in self.sum.iter_mut().zip(u) {
                    *s += v;
                }
            }
            PredictionMode::SumOfSoftmax => {
                softmax(u, &mut self.scratch);
                for (s, &v) in self.sum.iter_mut().zip(&self.scratch) {
                    *s += v;
                }
            }
            PredictionMode::PerTimestep => self.steps.push(argmax(u)),
        }
    }

    pub fn finish(&self) -> Prediction {
        match self.mode {
            PredictionMode::PerTimestep => Prediction::PerStep(self.steps.clone()),
            _ => Prediction::Class(argmax(&self.sum)),
        }
    }

    /// Fraction of correct decisions against `target`.
    pub fn accuracy(&self, target: &Target) -> f64 {
        match self.finish() {
            Prediction::Class(c) => (Some(c) == target.label()) as u8 as f64,
            Prediction::PerStep(p) => {
                if p.is_empty() {
                    return 0.0;
                }
                let hits = p
                    .iter()
                    .enumerate()
                    .filter(|(j, &c)| target.class_at(self.t0 + j) == Some(c))
                    .count();
                hits as f64 / p.len() as f64
            }
        }
    }
}

/// Prediction from a full row-major `T × C` readout trace.
pub fn predict<T: Scalar>(
    trace: &[T],
    n_classes: usize,
    mode: PredictionMode,
    t0: usize,
) -> Result<Prediction> {
    let t_len = trace.len() / n_classes.max(1);
    if n_classes == 0 || trace.len() != t_len * n_classes || t_len <= t0 {
        return Err(HyprError::config(format!(
            "trace of {} values with {n_classes} classes has no step after t0 = {t0}",
            trace.len()
        )));
    }
    let mut acc = PredictionAccumulator::new(mode, t0, n_classes);
    for (t, row) in trace.chunks(n_classes).enumerate() {
        acc.push(t, row);
    }
    Ok(acc.finish())
}
