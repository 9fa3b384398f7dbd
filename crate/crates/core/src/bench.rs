//! Timing and memory matrix over sequence length, window length and
//! worker count. One row per cell, serialised as JSON lines.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{train_sequence, EngineOptions, Gradients, Workspace};
use crate::error::{HyprError, Result};
use crate::neuron::ModelKind;
use crate::oracles::eprop_reference;
use crate::pool::BufferPool;
use crate::training::optim::{clip_gradient, Adam, AdamConfig};
use crate::verify::{gain_for, random_problem, Problem};

/// Version of the row layout below; bumped on any field change.
pub const BENCH_SCHEMA: u32 = 1;

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub t_lens: Vec<usize>,
    pub lambdas: Vec<usize>,
    pub workers: Vec<usize>,
    pub model: ModelKind,
    pub width: usize,
    pub d_in: usize,
    /// Timed batches per cell; the minimum is reported.
    pub reps: usize,
    /// Also time the step-by-step e-prop reference (once per length).
    pub reference: bool,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            t_lens: vec![1024],
            lambdas: vec![512],
            workers: vec![1],
            model: ModelKind::Brf,
            width: 128,
            d_in: 16,
            reps: 1,
            reference: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub schema: u32,
    pub model: ModelKind,
    pub t_len: usize,
    pub lambda: usize,
    pub workers: usize,
    pub width: usize,
    /// One batch of one sequence: S-stage, P-stage, clipping and ADAM.
    pub ms_per_batch: Option<f64>,
    pub reference_ms: Option<f64>,
    pub speedup: Option<f64>,
    /// Peak bytes held by the engine's pool during the batch.
    pub peak_bytes: Option<usize>,
    pub error: Option<String>,
}

fn time_batch(p: &Problem, lambda: usize, reps: usize) -> Result<(f64, usize)> {
    let pool = BufferPool::new();
    let mut ws = Workspace::new(&p.net, lambda, &pool)?;
    let mut g = Gradients::zeros(&p.net);
    let mut net = p.net.clone();
    let mut adam = Adam::new(&net, AdamConfig::default());
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        ws.reset();
        g.clear();
        train_sequence(
            &p.net,
            p.seq(),
            &p.loss,
            &mut ws,
            &mut g,
            EngineOptions::default(),
            None,
        )?;
        clip_gradient(&mut g, Some(10.0));
        adam.update(&mut net, &g, 1e-3)?;
        net.project();
        best = best.min(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok((best, pool.stats().peak_bytes))
}

fn time_reference(p: &Problem) -> Result<f64> {
    let t0 = Instant::now();
    eprop_reference(&p.net, p.seq(), &p.loss)?;
    Ok(t0.elapsed().as_secs_f64() * 1e3)
}

/// Runs every `(T, λ, workers)` cell, calling `on_row` as rows complete.
/// Failures inside a cell are recorded in its `error` field.
pub fn run_bench(opts: &BenchOptions, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    if opts.t_lens.is_empty() || opts.lambdas.is_empty() || opts.workers.is_empty() {
        return Err(HyprError::config(
            "bench needs at least one T, lambda and worker count",
        ));
    }
    if opts.t_lens.contains(&0) || opts.lambdas.contains(&0) || opts.workers.contains(&0) {
        return Err(HyprError::config(
            "bench T, lambda and worker counts must be positive",
        ));
    }
    let mut rows = Vec::new();
    let mut reference: HashMap<usize, std::result::Result<f64, String>> = HashMap::new();
    for &t_len in &opts.t_lens {
        let p = random_problem(
            &[opts.model],
            opts.width,
            opts.d_in,
            true,
            2,
            t_len,
            gain_for(opts.model),
            opts.seed,
        )?;
        for &lambda in &opts.lambdas {
            for &workers in &opts.workers {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| HyprError::config(e.to_string()))?;
                let cell = pool.install(|| time_batch(&p, lambda, opts.reps));
                if opts.reference && !reference.contains_key(&t_len) {
                    reference.insert(t_len, time_reference(&p).map_err(|e| e.to_string()));
                }
                let ref_ms = reference.get(&t_len).and_then(|r| r.as_ref().ok().copied());
                let mut row = BenchRow {
                    schema: BENCH_SCHEMA,
                    model: opts.model,
                    t_len,
                    lambda,
                    workers,
                    width: opts.width,
                    ms_per_batch: None,
                    reference_ms: ref_ms,
                    speedup: None,
                    peak_bytes: None,
                    error: reference
                        .get(&t_len)
                        .and_then(|r| r.as_ref().err().cloned()),
                };
                match cell {
                    Ok((ms, peak)) => {
                        row.ms_per_batch = Some(ms);
                        row.peak_bytes = Some(peak);
                        row.speedup = ref_ms.map(|r| r / ms);
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Checks that peak bytes depend on λ only. Returns the offending
/// `(λ, T_a, bytes_a, T_b, bytes_b)` on a mismatch.
pub fn constant_memory_violation(rows: &[BenchRow]) -> Option<(usize, usize, usize, usize, usize)> {
    let mut first: HashMap<usize, (usize, usize)> = HashMap::new();
    for r in rows {
        let Some(b) = r.peak_bytes else { continue };
        match first.get(&r.lambda) {
            Some(&(t, b0)) if b0 != b => return Some((r.lambda, t, b0, r.t_len, b)),
            Some(_) => {}
            None => {
                first.insert(r.lambda, (r.t_len, b));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_bytes_depend_on_lambda_only() {
        let opts = BenchOptions {
            t_lens: vec![64, 512],
            lambdas: vec![16, 32],
            workers: vec![1, 2],
            width: 8,
            d_in: 3,
            reference: true,
            ..Default::default()
        };
        let mut seen = 0;
        let rows = run_bench(&opts, |_| seen += 1).unwrap();
        assert_eq!((rows.len(), seen), (8, 8));
        assert_eq!(constant_memory_violation(&rows), None);
        let b16 = rows
            .iter()
            .find(|r| r.lambda == 16)
            .unwrap()
            .peak_bytes
            .unwrap();
        let b32 = rows
            .iter()
            .find(|r| r.lambda == 32)
            .unwrap()
            .peak_bytes
            .unwrap();
        assert!(b32 > b16);
        assert!(rows
            .iter()
            .all(|r| r.error.is_none() && r.speedup.unwrap() > 0.0 && r.schema == BENCH_SCHEMA));
    }

    #[test]
    fn violation_is_reported() {
        let row = |t_len, peak| BenchRow {
            schema: BENCH_SCHEMA,
            model: ModelKind::Brf,
            t_len,
            lambda: 4,
            workers: 1,
            width: 2,
            ms_per_batch: Some(1.0),
            reference_ms: None,
            speedup: None,
            peak_bytes: Some(peak),
            error: None,
        };
        assert_eq!(
            constant_memory_violation(&[row(8, 10), row(16, 12)]),
            Some((4, 8, 10, 16, 12))
        );
    }

    #[test]
    fn invalid_matrix_is_rejected() {
        let opts = BenchOptions {
            width: 0,
            ..Default::default()
        };
        assert!(run_bench(&opts, |_| {}).is_err());
        let opts = BenchOptions {
            lambdas: vec![0],
            ..Default::default()
        };
        assert!(run_bench(&opts, |_| {}).unwrap_err().is_config());
    }
}
