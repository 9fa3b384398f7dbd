//! Datasets: in-memory samples, the cue task generator, IDX pixel
//! sequences and seeded splitting.

pub mod cue;
pub mod idx;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HyprError, Result};
use crate::scalar::Scalar;
use crate::sstage::SequenceRef;
use crate::training::loss::Target;

/// One input sequence (row-major `T × d`) with its supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub x: Vec<T>,
    pub t_len: usize,
    pub target: Target,
}

impl<T: Scalar> Sample<T> {
    pub fn seq(&self) -> SequenceRef<'_, T> {
        SequenceRef::new(&self.x, self.t_len, &self.target)
    }

    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            x: self.x.iter().map(|v| U::c(v.f64())).collect(),
            t_len: self.t_len,
            target: self.target.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub d: usize,
    pub n_classes: usize,
    /// First supervised step, when the task defines one.
    pub t0: Option<usize>,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            name: self.name.clone(),
            d: self.d,
            n_classes: self.n_classes,
            t0: self.t0,
            samples: self.samples.iter().map(Sample::cast).collect(),
        }
    }

    /// Copies the samples at `idx` into a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Dataset {
            name: self.name.clone(),
            d: self.d,
            n_classes: self.n_classes,
            t0: self.t0,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Checks shapes, value range and class ids.
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(HyprError::EmptyDataset);
        }
        for (n, s) in self.samples.iter().enumerate() {
            if s.t_len == 0 || s.x.len() != s.t_len * self.d {
                return Err(HyprError::dim(format!(
                    "sample {n}: {} values for {} steps of {} channels",
                    s.x.len(),
                    s.t_len,
                    self.d
                )));
            }
            if s.x
                .iter()
                .any(|v| !v.is_finite() || *v < T::zero() || *v > T::one())
            {
                return Err(HyprError::config(format!(
                    "sample {n}: input outside [0, 1]"
                )));
            }
            let bad = match &s.target {
                Target::Class(c) => *c >= self.n_classes,
                Target::PerStep(v) => v.len() != s.t_len || v.iter().any(|c| *c >= self.n_classes),
                Target::Values(v) => v.len() != s.t_len * self.n_classes,
            };
            if bad {
                return Err(HyprError::config(format!(
                    "sample {n}: target does not fit {} classes",
                    self.n_classes
                )));
            }
        }
        Ok(())
    }
}

/// Seeded shuffle of `0..n` cut into contiguous parts.
///
/// Every part but the last gets `floor(f · n)` samples; the last gets the
/// remainder.
pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(HyprError::config("split fractions must lie in [0, 1]"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(HyprError::config(format!(
            "split fractions sum to {total}, not 1"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (j, f) in fractions.iter().enumerate() {
        let len = if j + 1 == fractions.len() {
            n - start
        } else {
            ((f * n as f64).floor() as usize).min(n - start)
        };
        if len == 0 {
            return Err(HyprError::config(format!(
                "split {j} of {n} samples with fraction {f} is empty"
            )));
        }
        parts.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(parts)
}

/// [`split_indices`] applied to a dataset.
pub fn split_dataset<T: Scalar>(
    data: &Dataset<T>,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Dataset<T>>> {
    if data.is_empty() {
        return Err(HyprError::EmptyDataset);
    }
    Ok(split_indices(data.len(), fractions, seed)?
        .iter()
        .map(|p| data.subset(p))
        .collect())
}
