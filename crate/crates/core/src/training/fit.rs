//! Epoch loop: seeded shuffling, parallel per-sample APGs, pairwise batch
//! reduction, clipping, ADAM and validation-based model selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{LossSpec, PredictionAccumulator, PredictionMode};
use super::optim::{clip_gradient, lr_schedule, Adam, AdamConfig, Schedule};
use crate::data::Sample;
use crate::engine::{train_sequence, EngineOptions, Fault, Gradients, Workspace};
use crate::error::{HyprError, Result};
use crate::network::Network;
use crate::pool::BufferPool;
use crate::scalar::Scalar;
use crate::sstage::evaluate;

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: usize,
    pub lr: f64,
    pub schedule: Schedule,
    /// Global-norm clipping threshold.
    pub clip: Option<f64>,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossSpec,
    pub prediction: PredictionMode,
    /// Stop once the training accuracy of an epoch reaches this value.
    pub stop_at_train_acc: Option<f64>,
    /// Record wall-clock time per epoch (makes metrics run-dependent).
    pub record_timing: bool,
    pub fault: Fault,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 10,
            batch_size: 32,
            lambda: 64,
            lr: 0.01,
            schedule: Schedule::Constant,
            clip: Some(10.0),
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossSpec::default(),
            prediction: PredictionMode::MeanOverSequence,
            stop_at_train_acc: None,
            record_timing: false,
            fault: Fault::None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lambda == 0 {
            return Err(HyprError::config(
                "epochs, batch size and subsequence length must be at least 1",
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(HyprError::config(
                "learning rate must be finite and non-negative",
            ));
        }
        if matches!(self.clip, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(HyprError::config("clipping threshold must be positive"));
        }
        self.adam.validate()
    }
}

/// One JSON line per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub valid_acc: Option<f64>,
    pub grad_norm: f64,
    pub wall_ms: Option<u64>,
    pub peak_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    pub best: Network<T>,
    pub best_epoch: usize,
    pub best_acc: f64,
    pub history: Vec<EpochMetrics>,
    pub adam: Adam<T>,
}

/// Sum of `items` by a fixed balanced tree, independent of thread timing.
pub fn pairwise_sum<T: Scalar>(mut items: Vec<Gradients<T>>) -> Option<Gradients<T>> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.add_assign(&b);
            }
            next.push(a);
        }
        items = next;
    }
    items.pop()
}

/// Per-sample outcome of the training pass.
struct SampleOut<T> {
    grads: Gradients<T>,
    loss: f64,
    acc: f64,
}

fn check_samples<T: Scalar>(
    net: &Network<T>,
    samples: &[Sample<T>],
    loss: &LossSpec,
) -> Result<()> {
    for (n, s) in samples.iter().enumerate() {
        s.seq().check(net, loss).map_err(|e| match e {
            HyprError::Config(m) => HyprError::Config(format!("sample {n}: {m}")),
            HyprError::Dimension(m) => HyprError::Dimension(format!("sample {n}: {m}")),
            other => other,
        })?;
    }
    Ok(())
}

/// Accounted bytes of one training workspace.
pub fn workspace_bytes<T: Scalar>(net: &Network<T>, lambda: usize) -> Result<usize> {
    let pool = BufferPool::new();
    let _ws = Workspace::new(net, lambda, &pool)?;
    Ok(pool.stats().peak_bytes)
}

/// APG of every sample in `batch` (in order) with losses and accuracies.
fn batch_pass<T: Scalar>(
    net: &Network<T>,
    batch: &[&Sample<T>],
    cfg: &FitConfig,
    n_classes: usize,
) -> Result<Vec<SampleOut<T>>> {
    // Either samples or neurons are spread over workers, never both.
    let opts = EngineOptions {
        parallel: batch.len() == 1,
        fault: cfg.fault,
    };
    let run = |ws: &mut Result<Workspace<T>>, s: &&Sample<T>| -> Result<SampleOut<T>> {
        let ws = ws.as_mut().map_err(|e| HyprError::config(e.to_string()))?;
        let mut g = Gradients::zeros(net);
        let mut pred = PredictionAccumulator::new(cfg.prediction, cfg.loss.t0, n_classes);
        let loss = train_sequence(net, s.seq(), &cfg.loss, ws, &mut g, opts, Some(&mut pred))?;
        Ok(SampleOut {
            grads: g,
            loss: loss.f64(),
            acc: pred.accuracy(&s.target),
        })
    };
    let init = || Workspace::new(net, cfg.lambda, &BufferPool::new());
    if batch.len() == 1 {
        let mut ws = init();
        return Ok(vec![run(&mut ws, &batch[0])?]);
    }
    batch.par_iter().map_init(init, run).collect()
}

/// Mean loss and accuracy of `net` over `samples`.
pub fn evaluate_samples<T: Scalar>(
    net: &Network<T>,
    samples: &[Sample<T>],
    loss: &LossSpec,
    mode: PredictionMode,
    window: usize,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(HyprError::EmptyDataset);
    }
    let n_classes = net.n_out();
    let out: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| -> Result<(f64, f64)> {
            let mut pred = PredictionAccumulator::new(mode, loss.t0, n_classes);
            let l = evaluate(net, s.seq(), loss, window, &mut pred, &BufferPool::new())?;
            Ok((l.f64(), pred.accuracy(&s.target)))
        })
        .collect::<Result<_>>()?;
    let n = out.len() as f64;
    let (l, a) = out.iter().fold((0.0, 0.0), |(l, a), (x, y)| (l + x, a + y));
    Ok((l / n, a / n))
}

/// Trains `net` in place and returns the best validation snapshot.
///
/// Without a validation set the best epoch is chosen on training accuracy.
/// Ties go to the earlier epoch. `on_epoch` sees each metrics record as it
/// is produced.
pub fn fit<T: Scalar>(
    net: &mut Network<T>,
    train: &[Sample<T>],
    valid: &[Sample<T>],
    cfg: &FitConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<FitResult<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(HyprError::EmptyDataset);
    }
    check_samples(net, train, &cfg.loss)?;
    check_samples(net, valid, &cfg.loss)?;
    let n_classes = net.n_out();
    let peak_bytes = workspace_bytes(net, cfg.lambda)?;
    let mut adam = Adam::new(net, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (net.clone(), 0usize, f64::NEG_INFINITY);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_schedule(cfg.schedule, cfg.lr, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut acc_sum, mut norm_sum, mut n_batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let outs = batch_pass(net, &batch, cfg, n_classes)?;
            let b = outs.len();
            let mut grads = Vec::with_capacity(b);
            for o in outs {
                loss_sum += o.loss;
                acc_sum += o.acc;
                grads.push(o.grads);
            }
            let mut g = pairwise_sum(grads).expect("non-empty batch");
            g.scale(T::one() / T::c(b as f64));
            let norm = clip_gradient(&mut g, cfg.clip);
            if !norm.is_finite() {
                return Err(HyprError::non_finite());
            }
            norm_sum += norm.f64();
            n_batches += 1;
            adam.update(net, &g, lr)?;
            net.project();
        }
        let n = train.len() as f64;
        let train_acc = acc_sum / n;
        let valid_acc = if valid.is_empty() {
            None
        } else {
            Some(evaluate_samples(net, valid, &cfg.loss, cfg.prediction, cfg.lambda)?.1)
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc,
            valid_acc,
            grad_norm: norm_sum / n_batches as f64,
            wall_ms: cfg
                .record_timing
                .then(|| start.elapsed().as_millis() as u64),
            peak_bytes,
        };
        // Validation is measured after the epoch's updates, so the
        // snapshot is the current network.
        let score = valid_acc.unwrap_or(train_acc);
        if score > best.2 {
            best = (net.clone(), epoch, score);
        }
        on_epoch(&m)?;
        history.push(m);
        if matches!(cfg.stop_at_train_acc, Some(s) if train_acc >= s) {
            break;
        }
    }
    Ok(FitResult {
        best: best.0,
        best_epoch: best.1,
        best_acc: best.2,
        history,
        adam,
    })
}
