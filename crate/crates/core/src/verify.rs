//! Equivalence suites run by `hypr verify` and the acceptance tests.
//!
//! Each suite produces rows of `(case, worst relative error, tolerance)`;
//! a row passes when the error is within tolerance (or, for gap rows,
//! when the error exceeds it).

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::{
    max_layer_rel_diff, train_sequence, EngineOptions, Fault, Gradients, Workspace,
};
use crate::error::{HyprError, Result};
use crate::network::{LayerSpec, Network, NetworkConfig};
use crate::neuron::{
    jacobians, spike_argument, step_unchecked, ModelConstants, ModelKind, NeuronParams,
};
use crate::oracles::{eprop_reference, rtrl_reference, RtrlScope};
use crate::pool::BufferPool;
use crate::sstage::SequenceRef;
use crate::tensor::fd::finite_difference_jacobian;
use crate::tensor::{reverse_scan_q, scan_matprod_suffix, MatK, ScanPair, VecK};
use crate::training::loss::{LossSpec, Target};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Lambda,
    MultiLayer,
    Rtrl,
    Jacobian,
    Scan,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Lambda,
        Suite::MultiLayer,
        Suite::Rtrl,
        Suite::Jacobian,
        Suite::Scan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lambda => "lambda",
            Suite::MultiLayer => "multilayer",
            Suite::Rtrl => "rtrl",
            Suite::Jacobian => "jacobian",
            Suite::Scan => "scan",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = HyprError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| HyprError::config(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub suites: Vec<Suite>,
    pub models: Vec<ModelKind>,
    pub lambdas: Vec<usize>,
    /// Replaces the tolerance of the gradient-equivalence suites.
    pub tol: Option<f64>,
    pub fault: Fault,
    pub seed: u64,
    pub width: usize,
    pub d_in: usize,
    pub t_len: usize,
    pub jacobian_points: usize,
    pub scan_instances: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            suites: Suite::ALL.to_vec(),
            models: vec![ModelKind::Brf, ModelKind::Seadlif, ModelKind::Alif],
            lambdas: vec![1, 2, 8, 32, 128],
            tol: None,
            fault: Fault::None,
            seed: 0,
            width: 12,
            d_in: 6,
            t_len: 128,
            jacobian_points: 100,
            scan_instances: 1000,
        }
    }
}

pub const LAMBDA_TOL: f64 = 1e-10;
pub const RTRL_TOL: f64 = 1e-9;
pub const FD_TOL: f64 = 1e-5;
pub const SPIKE_ROW_TOL: f64 = 1e-12;
pub const SCAN_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub suite: Suite,
    pub case: String,
    pub error: f64,
    pub tol: f64,
    /// The row checks that `error` exceeds `tol` rather than stays below.
    pub expect_gap: bool,
    pub passed: bool,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Report {
    pub rows: Vec<Row>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn suites_run(&self) -> usize {
        let mut seen: Vec<Suite> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.suite) {
                seen.push(r.suite);
            }
        }
        seen.len()
    }

    /// Failing row with the largest error-to-tolerance ratio.
    pub fn worst_failure(&self) -> Option<&Row> {
        self.rows
            .iter()
            .filter(|r| !r.passed)
            .max_by(|a, b| (a.error / a.tol).total_cmp(&(b.error / b.tol)))
    }

    fn push(
        &mut self,
        suite: Suite,
        case: String,
        error: f64,
        tol: f64,
        expect_gap: bool,
        t0: Instant,
    ) {
        let passed = if expect_gap {
            error > tol
        } else {
            error <= tol
        };
        self.rows.push(Row {
            suite,
            case,
            error,
            tol,
            expect_gap,
            passed: passed && error.is_finite(),
            elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<11} {:<28} {:>11} {:>10}  result",
            "suite", "case", "error", "tol"
        )?;
        for r in &self.rows {
            let cmp = if r.expect_gap { ">" } else { "<=" };
            writeln!(
                f,
                "{:<11} {:<28} {:>11.3e} {cmp}{:>9.1e}  {}",
                r.suite.name(),
                r.case,
                r.error,
                r.tol,
                if r.passed { "pass" } else { "FAIL" }
            )?;
        }
        let n = self.rows.iter().filter(|r| r.passed).count();
        write!(
            f,
            "{n}/{} rows passed in {} suites",
            self.rows.len(),
            self.suites_run()
        )
    }
}

/// A random network and labelled input sequence.
#[derive(Clone, Debug)]
pub struct Problem {
    pub net: Network<f64>,
    pub x: Vec<f64>,
    pub target: Target,
    pub loss: LossSpec,
}

impl Problem {
    pub fn seq(&self) -> SequenceRef<'_, f64> {
        SequenceRef::new(&self.x, self.x.len() / self.net.d_in(), &self.target)
    }
}

/// Hidden layers of the given kinds and width plus an LI readout, with
/// random biases, Bernoulli(0.4) inputs and per-step class targets.
#[allow(clippy::too_many_arguments)]
pub fn random_problem(
    kinds: &[ModelKind],
    m: usize,
    d: usize,
    recurrent: bool,
    n_out: usize,
    t_len: usize,
    gain: f64,
    seed: u64,
) -> Result<Problem> {
    let hidden = kinds
        .iter()
        .map(|&k| {
            let mut s = LayerSpec::new(k, m, recurrent);
            s.init.ff_gain = gain;
            s
        })
        .collect();
    let cfg = NetworkConfig {
        d_in: d,
        hidden,
        readout: LayerSpec::new(ModelKind::Li, n_out, false),
    };
    let mut net = Network::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for layer in &mut net.layers {
        for i in 0..layer.m {
            layer.set_bias(i, rng.gen_range(-0.2..0.4));
        }
    }
    let x = (0..t_len * d)
        .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
        .collect();
    let target = Target::PerStep((0..t_len).map(|_| rng.gen_range(0..n_out)).collect());
    Ok(Problem {
        net,
        x,
        target,
        loss: LossSpec::default(),
    })
}

/// Whole-sequence APG from the windowed engine.
pub fn engine_gradient(p: &Problem, lambda: usize, opts: EngineOptions) -> Result<Gradients<f64>> {
    let pool = BufferPool::new();
    let mut ws = Workspace::new(&p.net, lambda, &pool)?;
    let mut g = Gradients::zeros(&p.net);
    train_sequence(&p.net, p.seq(), &p.loss, &mut ws, &mut g, opts, None)?;
    Ok(g)
}

/// Feed-forward gain that makes a random layer spike regularly.
pub fn gain_for(kind: ModelKind) -> f64 {
    match kind {
        // Integration with dt = 0.01 needs inputs on a larger scale.
        ModelKind::Brf => 100.0,
        ModelKind::Seadlif => 16.0,
        _ => 2.0,
    }
}

pub fn run(opts: &VerifyOptions) -> Result<Report> {
    let mut report = Report::default();
    if opts.models.is_empty() || opts.lambdas.is_empty() {
        return Err(HyprError::config(
            "verify needs at least one model and one lambda",
        ));
    }
    if let Some(&l) = opts.lambdas.iter().find(|&&l| l == 0) {
        return Err(HyprError::config(format!(
            "lambda must be positive, got {l}"
        )));
    }
    let eng = EngineOptions {
        fault: opts.fault,
        ..Default::default()
    };
    for &suite in &opts.suites {
        match suite {
            Suite::Lambda | Suite::MultiLayer => {
                let depth = if suite == Suite::Lambda { 1 } else { 2 };
                let tol = opts.tol.unwrap_or(LAMBDA_TOL);
                for (mi, &kind) in opts.models.iter().enumerate() {
                    let p = random_problem(
                        &vec![kind; depth],
                        opts.width,
                        opts.d_in,
                        true,
                        3,
                        opts.t_len,
                        gain_for(kind),
                        opts.seed + 10 * mi as u64 + depth as u64,
                    )?;
                    let (reference, _) = eprop_reference(&p.net, p.seq(), &p.loss)?;
                    let reference = reference.to_f64();
                    for &lam in &opts.lambdas {
                        let t0 = Instant::now();
                        let g = engine_gradient(&p, lam, eng)?;
                        let err = max_layer_rel_diff(&g.to_f64(), &reference);
                        report.push(suite, format!("{kind} λ={lam}"), err, tol, false, t0);
                    }
                }
            }
            Suite::Rtrl => {
                let tol = opts.tol.unwrap_or(RTRL_TOL);
                let t_len = opts.t_len.min(64);
                let lam = opts
                    .lambdas
                    .iter()
                    .copied()
                    .filter(|&l| l <= t_len)
                    .max()
                    .unwrap_or(t_len);
                for (mi, &kind) in opts.models.iter().enumerate() {
                    let seed = opts.seed + 100 + mi as u64;
                    let t0 = Instant::now();
                    let mut p = random_problem(
                        &[kind],
                        8,
                        opts.d_in,
                        false,
                        3,
                        t_len,
                        gain_for(kind),
                        seed,
                    )?;
                    // A memoryless readout removes the only temporal path the
                    // layer-local gradient cannot see.
                    for f in &mut p.net.layers[1].fixed {
                        f[0] = 0.0;
                    }
                    let (exact, _) = rtrl_reference(&p.net, p.seq(), &p.loss, RtrlScope::Full)?;
                    let g = engine_gradient(&p, lam, eng)?;
                    let err = max_layer_rel_diff(&g.to_f64(), &exact.to_f64());
                    report.push(
                        suite,
                        format!("{kind} W_rec=0 λ={lam}"),
                        err,
                        tol,
                        false,
                        t0,
                    );

                    let t0 = Instant::now();
                    let p = random_problem(
                        &[kind],
                        8,
                        opts.d_in,
                        true,
                        3,
                        t_len,
                        gain_for(kind),
                        seed,
                    )?;
                    let (exact, _) =
                        rtrl_reference(&p.net, p.seq(), &p.loss, RtrlScope::IntraLayer)?;
                    let g = engine_gradient(&p, lam, eng)?;
                    let err = max_layer_rel_diff(&g.to_f64(), &exact.to_f64());
                    report.push(suite, format!("{kind} W_rec≠0 gap"), err, 1e-6, true, t0);
                }
            }
            Suite::Jacobian => {
                for (mi, &kind) in opts.models.iter().enumerate() {
                    let t0 = Instant::now();
                    let (smooth, spike) =
                        jacobian_check(kind, opts.jacobian_points, opts.seed + 1000 + mi as u64)?;
                    report.push(
                        suite,
                        format!("{kind} smooth vs FD"),
                        smooth,
                        FD_TOL,
                        false,
                        t0,
                    );
                    if kind.is_spiking() {
                        report.push(
                            suite,
                            format!("{kind} spike rows"),
                            spike,
                            SPIKE_ROW_TOL,
                            false,
                            t0,
                        );
                    }
                }
            }
            Suite::Scan => {
                let t0 = Instant::now();
                let (q, phi, assoc) = scan_check(opts.scan_instances, opts.seed + 2000)?;
                report.push(suite, "reverse_scan_q".into(), q, SCAN_TOL, false, t0);
                report.push(
                    suite,
                    "scan_matprod_suffix".into(),
                    phi,
                    SCAN_TOL,
                    false,
                    t0,
                );
                report.push(suite, "associativity".into(), assoc, SCAN_TOL, false, t0);
            }
        }
    }
    Ok(report)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Random state and parameters in the range the models are used in.
pub fn random_point(kind: ModelKind, rng: &mut ChaCha8Rng) -> (NeuronParams<f64>, VecK<f64>, f64) {
    let z = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    let mut p = NeuronParams::default();
    let s: Vec<f64> = match kind {
        ModelKind::Brf => {
            p.c[0] = rng.gen_range(0.01..50.0);
            p.c[1] = rng.gen_range(0.0..1.0);
            vec![
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.0..2.0),
                z,
            ]
        }
        ModelKind::Seadlif => {
            p.c = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            vec![rng.gen_range(-1.0..1.5), rng.gen_range(-1.0..1.0), z]
        }
        ModelKind::Alif => {
            p.f = [rng.gen_range(0.5..0.99), rng.gen_range(0.5..0.99)];
            vec![rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0), z]
        }
        ModelKind::Li => {
            p.f[0] = rng.gen_range(0.5..0.99);
            vec![rng.gen_range(-1.0..1.0)]
        }
    };
    // BRF integrates with dt = 0.01, so its inputs live on a larger scale.
    let scale = if kind == ModelKind::Brf { 100.0 } else { 1.0 };
    let i = rng.gen_range(-3.0..3.0) * scale;
    (p, VecK::from_slice(&s).expect("k <= 4"), i)
}

/// Gradient of the spike argument with respect to `(s^{t-1}, I^t)`,
/// written out per model.
fn argument_gradient(
    kind: ModelKind,
    mc: &ModelConstants,
    p: &NeuronParams<f64>,
    s: &VecK<f64>,
) -> Vec<f64> {
    match kind {
        ModelKind::Brf => {
            let dt = mc.dt;
            let w = p.c[0];
            let pb = ((1.0 - (dt * w).powi(2)).sqrt() - 1.0) / dt;
            let b = pb - p.c[1] - s.get(2);
            vec![1.0 + dt * b, -dt * w, -dt * s.get(0) - 1.0, 0.0, dt]
        }
        ModelKind::Seadlif => {
            let tau = mc.tau_u_range[0]
                + (mc.tau_u_range[1] - mc.tau_u_range[0]) / (1.0 + (-p.c[2]).exp());
            let a = (-1.0 / tau).exp();
            vec![a, -(1.0 - a), 0.0, 1.0 - a]
        }
        ModelKind::Alif => {
            let (a, r, z) = (p.f[0], p.f[1], s.get(2));
            let beta = mc.beta_alif;
            let thr = mc.b_j0 + beta * (r * s.get(1) + (1.0 - r) * z);
            let (reset_a, reset_z) = if mc.detach_reset {
                (0.0, 0.0)
            } else {
                (-beta * r * z, -beta * (1.0 - r) * z - thr)
            };
            vec![a, reset_a - beta * r, reset_z - beta * (1.0 - r), 1.0 - a]
        }
        ModelKind::Li => vec![0.0, 0.0],
    }
}

/// Worst relative errors of (smooth rows against central differences,
/// spike rows against surrogate × argument gradient) over `n` points with
/// the spike argument at least 0.1 from threshold.
pub fn jacobian_check(kind: ModelKind, n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = kind.state_dim();
    let smooth_mc = ModelConstants {
        detach_reset: false,
        ..Default::default()
    };
    let (mut smooth, mut spike) = (0.0f64, 0.0f64);
    let mut done = 0;
    while done < n {
        let (p, s, i) = random_point(kind, &mut rng);
        if kind.is_spiking() && spike_argument(kind, &smooth_mc, &p, &s, i).abs() <= 0.1 {
            continue;
        }
        done += 1;
        let j = jacobians(kind, &smooth_mc, &p, &s, i, Some(0.0));
        let f = |x: &[f64]| {
            let sp = VecK::from_slice(&x[..k]).expect("k");
            step_unchecked(kind, &smooth_mc, &p, &sp, x[k])
                .as_slice()
                .to_vec()
        };
        let mut x = s.as_slice().to_vec();
        x.push(i);
        let fd = finite_difference_jacobian(f, &x, 1e-5)?;
        for r in 0..k {
            for c in 0..k {
                smooth = smooth.max(rel(j.a.get(r, c), fd[r][c]));
            }
            smooth = smooth.max(rel(j.d_inp.get(r), fd[r][k]));
        }
        for cj in 0..kind.n_consts() {
            let g = |c: &[f64]| {
                let mut q = p;
                q.c[cj] = c[0];
                step_unchecked(kind, &smooth_mc, &q, &s, i)
                    .as_slice()
                    .to_vec()
            };
            let fd = finite_difference_jacobian(g, &[p.c[cj]], 1e-5)?;
            for (r, row) in fd.iter().enumerate() {
                smooth = smooth.max(rel(j.d_consts[cj].get(r), row[0]));
            }
        }
        if !kind.is_spiking() {
            continue;
        }
        for detach in [true, false] {
            let mc = ModelConstants {
                detach_reset: detach,
                ..Default::default()
            };
            let x = spike_argument(kind, &mc, &p, &s, i);
            let sg = slayer(&mc, x);
            let grad = argument_gradient(kind, &mc, &p, &s);
            let j = jacobians(kind, &mc, &p, &s, i, None);
            let zi = kind.output_index();
            for c in 0..k {
                spike = spike.max(rel(j.a.get(zi, c), sg * grad[c]));
            }
            spike = spike.max(rel(j.d_inp.get(zi), sg * grad[k]));
        }
    }
    Ok((smooth, spike))
}

fn slayer(mc: &ModelConstants, x: f64) -> f64 {
    match mc.surrogate {
        crate::neuron::Surrogate::Slayer { alpha, c } => alpha * c * (-alpha * x.abs()).exp(),
        other => other.deriv(x),
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, k: usize) -> MatK<f64> {
    // Entries bounded by 1/k keep long products from overflowing.
    let s = 1.0 / k as f64;
    let v: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-s..s)).collect();
    MatK::from_rows(k, &v).expect("square")
}

fn rand_vec(rng: &mut ChaCha8Rng, k: usize) -> VecK<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    VecK::from_slice(&v).expect("k <= 4")
}

fn mat_err(a: &MatK<f64>, b: &MatK<f64>) -> f64 {
    let scale = (0..b.k())
        .flat_map(|r| b.row(r).iter())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / scale
}

fn vec_err(a: &VecK<f64>, b: &VecK<f64>) -> f64 {
    let scale = b.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / scale
}

/// Worst errors of (q scan, suffix products, associativity) against
/// sequential recursions over `n` random instances with `k ≤ 3`, `λ ≤ 256`.
pub fn scan_check(n: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut eq, mut ephi, mut eassoc) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n {
        let k = rng.gen_range(1..=3);
        let lam = rng.gen_range(1..=256);
        let a: Vec<MatK<f64>> = (0..lam).map(|_| rand_mat(&mut rng, k)).collect();
        let l: Vec<VecK<f64>> = (0..lam).map(|_| rand_vec(&mut rng, k)).collect();

        let q = reverse_scan_q(&a, &l)?;
        let mut want = l[lam - 1];
        eq = eq.max(vec_err(&q[lam], &want));
        for t in (1..lam).rev() {
            want = want.mul_mat(&a[t]).add(&l[t - 1]);
            eq = eq.max(vec_err(&q[t], &want));
        }
        eq = eq.max(vec_err(&q[0], &want.mul_mat(&a[0])));

        let phi = scan_matprod_suffix(&a)?;
        let mut prod = a[lam - 1];
        ephi = ephi.max(mat_err(&phi[lam - 1], &prod));
        for t in (0..lam - 1).rev() {
            prod = prod.mul(&a[t]);
            ephi = ephi.max(mat_err(&phi[t], &prod));
        }

        let mut pair =
            || ScanPair::new(rand_mat(&mut rng, k), rand_vec(&mut rng, k)).expect("same k");
        let (x, y, z) = (pair(), pair(), pair());
        let left = x.combine(&y).combine(&z);
        let right = x.combine(&y.combine(&z));
        eassoc = eassoc
            .max(mat_err(&left.m, &right.m))
            .max(vec_err(&left.v, &right.v));
    }
    Ok((eq, ephi, eassoc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VerifyOptions {
        VerifyOptions {
            lambdas: vec![1, 5, 16],
            t_len: 32,
            width: 4,
            d_in: 3,
            jacobian_points: 20,
            scan_instances: 50,
            ..Default::default()
        }
    }

    #[test]
    fn all_suites_pass_on_a_small_matrix() {
        let r = run(&small()).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.suites_run(), 5);
    }

    #[test]
    fn flipped_q_sign_is_caught() {
        let opts = VerifyOptions {
            fault: Fault::FlipQSign,
            suites: vec![Suite::Lambda, Suite::Rtrl],
            ..small()
        };
        let r = run(&opts).unwrap();
        assert!(!r.passed());
        let worst = r.worst_failure().unwrap();
        assert!(worst.error > worst.tol);
    }

    #[test]
    fn restricted_matrix() {
        let opts = VerifyOptions {
            models: vec![ModelKind::Brf],
            lambdas: vec![1, 4, 16],
            suites: vec![Suite::Lambda],
            ..small()
        };
        let r = run(&opts).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.rows.iter().all(|row| row.case.starts_with("brf")));
    }

    #[test]
    fn problems_exercise_most_parameters() {
        for kind in [ModelKind::Brf, ModelKind::Seadlif, ModelKind::Alif] {
            let p = random_problem(&[kind], 12, 6, true, 3, 128, gain_for(kind), 1).unwrap();
            let pool = BufferPool::new();
            let mut ws = Workspace::new(&p.net, 128, &pool).unwrap();
            let mut g = Gradients::zeros(&p.net);
            train_sequence(
                &p.net,
                p.seq(),
                &p.loss,
                &mut ws,
                &mut g,
                EngineOptions::default(),
                None,
            )
            .unwrap();
            let nz = g.layers[0].iter().filter(|v| **v != 0.0).count();
            assert!(
                nz * 4 >= g.layers[0].len() * 3,
                "{kind}: {nz}/{}",
                g.layers[0].len()
            );
        }
    }

    #[test]
    fn bad_options() {
        let opts = VerifyOptions {
            lambdas: vec![0],
            ..small()
        };
        assert!(run(&opts).unwrap_err().is_config());
        assert!("nope".parse::<Suite>().is_err());
        assert_eq!("scan".parse::<Suite>().unwrap(), Suite::Scan);
    }
}
