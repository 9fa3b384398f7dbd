//! Parallel stage: low-rank parameter factors, cumulative transitions,
//! backward coefficients, eligibility carry and cumulative APG assembly,
//! plus the window driver over a whole sequence.
//!
//! For neuron `i` of a layer and a window of length λ, with `A^t` the state
//! Jacobian, `ℓ^t` the learning signal and `δ^t = D^t ⊗ x^t` the factored
//! parameter derivative,
//!
//! ```text
//! q^λ = ℓ^λ,  q^t = q^{t+1} A^{t+1} + ℓ^t,  q^0 = q^1 A^1
//! APG = q^0 e^0 + Σ_t (q^t · D^t) x^t
//! e^λ = φ^{λ:1} e^0 + Σ_t φ^{λ:t+1} D^t ⊗ x^t
//! ```
//!
//! Both `q^t` and `φ^{λ:t+1}` come out of one reverse associative scan.

use rayon::prelude::*;

use crate::error::{HyprError, Result};
use crate::network::{Layer, Network};
use crate::neuron::jacobians;
use crate::pool::{Buf, BufferPool};
use crate::scalar::Scalar;
use crate::sstage::{run_s_stage, CarryState, LayerCache, SequenceRef, SubsequenceCache};
use crate::tensor::{
    reverse_scan_pairs_into, reverse_scan_q, scan_matprod_suffix, tree_len, MatK, ScanPair, VecK,
};
use crate::training::loss::{LossSpec, PredictionAccumulator};

/// Deliberate corruption used to check that the verification harness
/// detects a broken engine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Negates the transition inside the backward recursion.
    FlipQSign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EngineOptions {
    /// Spread neurons of a layer over the worker pool.
    pub parallel: bool,
    pub fault: Fault,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            parallel: true,
            fault: Fault::None,
        }
    }
}

impl EngineOptions {
    pub fn sequential() -> Self {
        EngineOptions {
            parallel: false,
            ..Default::default()
        }
    }
}

/// Parameter-shaped gradient storage (one `m × p` block per layer).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(net: &Network<T>) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| vec![T::zero(); l.w.len()])
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.layers {
            g.fill(T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers.iter_mut().flatten()
    }

    pub fn norm(&self) -> T {
        self.iter()
            .map(|v| *v * *v)
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn scale(&mut self, c: T) {
        for v in self.iter_mut() {
            *v *= c;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| l.iter().map(|v| v.f64()).collect())
            .collect()
    }
}

/// Normwise relative difference `‖a − b‖ / ‖b‖` of one block.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Worst per-layer normwise relative difference.
pub fn max_layer_rel_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| rel_diff(x, y))
        .fold(0.0, f64::max)
}

/// Per-neuron `k × p` eligibility matrices carried across windows.
#[derive(Debug)]
pub struct EligibilityCarry<T> {
    pub layers: Vec<Buf<T>>,
}

impl<T: Scalar> EligibilityCarry<T> {
    pub fn new(net: &Network<T>, pool: &BufferPool) -> Self {
        EligibilityCarry {
            layers: net
                .layers
                .iter()
                .map(|l| pool.take(l.m * l.k() * l.p(), T::zero()))
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for e in &mut self.layers {
            e.fill(T::zero());
        }
    }

    /// Eligibility matrix of neuron `i` in layer `l`, row-major `k × p`.
    pub fn neuron<'a>(&'a self, net: &Network<T>, l: usize, i: usize) -> &'a [T] {
        let layer = &net.layers[l];
        let sz = layer.k() * layer.p();
        &self.layers[l][i * sz..(i + 1) * sz]
    }
}

#[derive(Debug)]
struct LayerWork<T> {
    a: Buf<MatK<T>>,
    d: Buf<VecK<T>>,
    dc: Buf<VecK<T>>,
    ell: Buf<VecK<T>>,
    tree: Buf<ScanPair<T>>,
    pairs: Buf<ScanPair<T>>,
    g: Buf<T>,
    e_next: Buf<T>,
}

impl<T: Scalar> LayerWork<T> {
    fn new(layer: &Layer<T>, cap: usize, pool: &BufferPool) -> Self {
        let (m, k) = (layer.m, layer.k());
        LayerWork {
            a: pool.take(m * cap, MatK::zeros(k)),
            d: pool.take(m * cap, VecK::zeros(k)),
            dc: pool.take(m * cap * layer.n_consts().max(1), VecK::zeros(k)),
            ell: pool.take(m * cap, VecK::zeros(k)),
            tree: pool.take(m * tree_len(cap), ScanPair::identity(k)),
            pairs: pool.take(m * cap, ScanPair::identity(k)),
            g: pool.take(m * cap, T::zero()),
            e_next: pool.take(m * k * layer.p(), T::zero()),
        }
    }
}

/// All buffers needed to train on sequences with window length λ.
///
/// Sized by λ and the network dimensions only; reused across windows and
/// sequences.
#[derive(Debug)]
pub struct Workspace<T> {
    pub lambda: usize,
    pub cache: SubsequenceCache<T>,
    pub carry: CarryState<T>,
    pub elig: EligibilityCarry<T>,
    work: Vec<LayerWork<T>>,
    shape: Vec<(usize, usize, usize)>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new(net: &Network<T>, lambda: usize, pool: &BufferPool) -> Result<Self> {
        if lambda == 0 {
            return Err(HyprError::config("subsequence length must be at least 1"));
        }
        Ok(Workspace {
            lambda,
            cache: SubsequenceCache::new(net, lambda, pool)?,
            carry: CarryState::zeros(net),
            elig: EligibilityCarry::new(net, pool),
            work: net
                .layers
                .iter()
                .map(|l| LayerWork::new(l, lambda, pool))
                .collect(),
            shape: shape_of(net),
        })
    }

    /// Zeroes carried state and eligibilities for a new sequence.
    pub fn reset(&mut self) {
        self.carry.reset();
        self.elig.reset();
    }

    fn check(&self, net: &Network<T>) -> Result<()> {
        if self.shape != shape_of(net) {
            return Err(HyprError::dim(
                "workspace was built for a different network",
            ));
        }
        Ok(())
    }
}

fn shape_of<T: Scalar>(net: &Network<T>) -> Vec<(usize, usize, usize)> {
    net.layers.iter().map(|l| (l.m, l.k(), l.p())).collect()
}

/// Runs one window: S-stage rollout followed by the parallel stage for
/// every layer, top to bottom. Adds the window APG into `grads` and, when
/// `need_elig` is set, advances the eligibility carry.
#[allow(clippy::too_many_arguments)]
pub fn process_subsequence<T: Scalar>(
    net: &Network<T>,
    seq: SequenceRef<'_, T>,
    loss: &LossSpec,
    t_begin: usize,
    n: usize,
    ws: &mut Workspace<T>,
    grads: &mut Gradients<T>,
    need_elig: bool,
    opts: EngineOptions,
    pred: Option<&mut PredictionAccumulator<T>>,
) -> Result<T> {
    let window_loss = run_s_stage(
        net,
        seq,
        loss,
        t_begin,
        n,
        &mut ws.carry,
        &mut ws.cache,
        pred,
    )?;
    let n_layers = net.layers.len();
    let cap = ws.lambda;
    let n_out = net.n_out();
    for l in (0..n_layers).rev() {
        let layer = &net.layers[l];
        let (below, above) = ws.work.split_at_mut(l + 1);
        let work = &mut below[l];
        if l + 1 == n_layers {
            for c in 0..n_out {
                for t in 0..n {
                    work.ell[c * cap + t] =
                        VecK::from_slice(&[ws.cache.dl_du[t * n_out + c]]).expect("k=1");
                }
            }
        } else {
            fill_spatial_signal(
                layer,
                &net.layers[l + 1],
                &above[0].g,
                &mut work.ell,
                cap,
                n,
                opts.parallel,
            );
        }
        let ctx = NeuronCtx {
            layer,
            lc: &ws.cache.layers[l],
            n,
            need_elig,
            fault: opts.fault,
        };
        run_layer(
            &ctx,
            work,
            &ws.elig.layers[l],
            &mut grads.layers[l],
            cap,
            opts.parallel,
        )
        .map_err(|e| e.at(l, None, t_begin))?;
        if need_elig {
            std::mem::swap(&mut ws.elig.layers[l], &mut work.e_next);
        }
    }
    Ok(window_loss)
}

/// Accumulates the APG of a whole sequence into `grads`.
///
/// Carried state and eligibilities start at zero; the sequence is cut into
/// windows of `ws.lambda` steps (the last one may be shorter). Returns the
/// total loss.
pub fn train_sequence<T: Scalar>(
    net: &Network<T>,
    seq: SequenceRef<'_, T>,
    loss: &LossSpec,
    ws: &mut Workspace<T>,
    grads: &mut Gradients<T>,
    opts: EngineOptions,
    mut pred: Option<&mut PredictionAccumulator<T>>,
) -> Result<T> {
    seq.check(net, loss)?;
    ws.check(net)?;
    ws.reset();
    if let Some(p) = pred.as_deref_mut() {
        p.reset();
    }
    let mut total = T::zero();
    let mut t = 0;
    while t < seq.t_len {
        let n = ws.lambda.min(seq.t_len - t);
        let need_elig = t + n < seq.t_len;
        total += process_subsequence(
            net,
            seq,
            loss,
            t,
            n,
            ws,
            grads,
            need_elig,
            opts,
            pred.as_deref_mut(),
        )?;
        t += n;
    }
    Ok(total)
}

/// Spike-coordinate learning signal of layer `l` from the same-step input
/// sensitivities `g` of the layer above.
fn fill_spatial_signal<T: Scalar>(
    layer: &Layer<T>,
    up: &Layer<T>,
    g_up: &[T],
    ell: &mut [VecK<T>],
    cap: usize,
    n: usize,
    parallel: bool,
) {
    let (k, out) = (layer.k(), layer.kind.output_index());
    let fill = |(i, row): (usize, &mut [VecK<T>])| {
        for v in row[..n].iter_mut() {
            *v = VecK::zeros(k);
        }
        for j in 0..up.m {
            let w = up.w_ff(j, i);
            if w == T::zero() {
                continue;
            }
            let g = &g_up[j * cap..j * cap + n];
            for (v, &gj) in row[..n].iter_mut().zip(g) {
                v.set(out, v.get(out) + gj * w);
            }
        }
    };
    if parallel {
        ell.par_chunks_mut(cap).enumerate().for_each(fill);
    } else {
        ell.chunks_mut(cap).enumerate().for_each(fill);
    }
}

struct NeuronCtx<'a, T> {
    layer: &'a Layer<T>,
    lc: &'a LayerCache<T>,
    n: usize,
    need_elig: bool,
    fault: Fault,
}

struct NeuronBufs<'a, T> {
    a: &'a mut [MatK<T>],
    d: &'a mut [VecK<T>],
    dc: &'a mut [VecK<T>],
    ell: &'a [VecK<T>],
    tree: &'a mut [ScanPair<T>],
    pairs: &'a mut [ScanPair<T>],
    g: &'a mut [T],
    e0: &'a [T],
    e_next: &'a mut [T],
    grad: &'a mut [T],
}

#[allow(clippy::type_complexity)]
fn run_layer<T: Scalar>(
    ctx: &NeuronCtx<'_, T>,
    work: &mut LayerWork<T>,
    e0: &[T],
    grad: &mut [T],
    cap: usize,
    parallel: bool,
) -> Result<()> {
    let layer = ctx.layer;
    let (k, p, nc) = (layer.k(), layer.p(), layer.n_consts());
    let tl = tree_len(cap);
    let ell: &[VecK<T>] = &work.ell;
    // Constant columns use a stride of at least one so every neuron gets a chunk.
    let dc_chunk = cap * nc.max(1);
    let task = |(i, ((((((a, d), dc), tree), pairs), g), (e_next, grad))): (
        usize,
        (
            (
                (
                    (
                        ((&mut [MatK<T>], &mut [VecK<T>]), &mut [VecK<T>]),
                        &mut [ScanPair<T>],
                    ),
                    &mut [ScanPair<T>],
                ),
                &mut [T],
            ),
            (&mut [T], &mut [T]),
        ),
    )| {
        let bufs = NeuronBufs {
            a,
            d,
            dc,
            ell: &ell[i * cap..(i + 1) * cap],
            tree,
            pairs,
            g,
            e0: &e0[i * k * p..(i + 1) * k * p],
            e_next,
            grad,
        };
        neuron_window(ctx, i, bufs)
    };
    if parallel {
        work.a
            .par_chunks_mut(cap)
            .zip(work.d.par_chunks_mut(cap))
            .zip(work.dc.par_chunks_mut(dc_chunk))
            .zip(work.tree.par_chunks_mut(tl))
            .zip(work.pairs.par_chunks_mut(cap))
            .zip(work.g.par_chunks_mut(cap))
            .zip(
                work.e_next
                    .par_chunks_mut(k * p)
                    .zip(grad.par_chunks_mut(p)),
            )
            .enumerate()
            .try_for_each(task)
    } else {
        work.a
            .chunks_mut(cap)
            .zip(work.d.chunks_mut(cap))
            .zip(work.dc.chunks_mut(dc_chunk))
            .zip(work.tree.chunks_mut(tl))
            .zip(work.pairs.chunks_mut(cap))
            .zip(work.g.chunks_mut(cap))
            .zip(work.e_next.chunks_mut(k * p).zip(grad.chunks_mut(p)))
            .enumerate()
            .try_for_each(task)
    }
}

fn neuron_fault(i: usize) -> HyprError {
    HyprError::NonFinite {
        layer: None,
        neuron: Some(i),
        step: None,
    }
}

/// Parallel stage of one neuron over one window.
fn neuron_window<T: Scalar>(ctx: &NeuronCtx<'_, T>, i: usize, b: NeuronBufs<'_, T>) -> Result<()> {
    let layer = ctx.layer;
    let lc = ctx.lc;
    let n = ctx.n;
    let (k, p, p_in, nc) = (layer.k(), layer.p(), layer.p_in(), layer.n_consts());
    let np = layer.neuron_params(i);

    for t in 0..n {
        let jac = jacobians(
            layer.kind,
            &layer.mc,
            &np,
            lc.state(i, t),
            lc.current(i, t),
            None,
        );
        b.a[t] = jac.a;
        b.d[t] = jac.d_inp;
        b.dc[t * nc..(t + 1) * nc].copy_from_slice(&jac.d_consts[..nc]);
        b.g[t] = b.ell[t].dot(&jac.d_inp);
    }
    if ctx.fault == Fault::FlipQSign {
        for a in b.a[..n].iter_mut() {
            for r in 0..k {
                for v in a.row_mut(r) {
                    *v = -*v;
                }
            }
        }
    }
    reverse_scan_pairs_into(&b.a[..n], &b.ell[..n], b.tree, &mut b.pairs[..n], false);

    // Carry credit q^0 · e^0.
    let q0 = b.pairs[0].v.mul_mat(&b.a[0]);
    for r in 0..k {
        let qr = q0.get(r);
        if qr != T::zero() {
            let er = &b.e0[r * p..(r + 1) * p];
            for (gc, &ec) in b.grad.iter_mut().zip(er) {
                *gc += qr * ec;
            }
        }
    }
    // In-window credit Σ_t q^t δ^t through the factors.
    for t in 0..n {
        let q = b.pairs[t].v;
        let coef = q.dot(&b.d[t]);
        if coef != T::zero() {
            let x = lc.input_row(t);
            for &j in lc.nonzeros(t) {
                let j = j as usize;
                b.grad[j] += coef * x[j];
            }
        }
        for j in 0..nc {
            b.grad[p_in + j] += q.dot(&b.dc[t * nc + j]);
        }
    }
    if b.grad.iter().any(|v| !v.is_finite()) {
        return Err(neuron_fault(i));
    }

    if ctx.need_elig {
        let phi1 = b.pairs[0].m.mul(&b.a[0]);
        for r in 0..k {
            let out = &mut b.e_next[r * p..(r + 1) * p];
            out.fill(T::zero());
            for rr in 0..k {
                let f = phi1.get(r, rr);
                if f != T::zero() {
                    for (o, &e) in out.iter_mut().zip(&b.e0[rr * p..(rr + 1) * p]) {
                        *o += f * e;
                    }
                }
            }
        }
        for t in 0..n {
            let phi = &b.pairs[t].m;
            let v = phi.mul_col(&b.d[t]);
            let x = lc.input_row(t);
            let nz = lc.nonzeros(t);
            for r in 0..k {
                let vr = v.get(r);
                if vr == T::zero() {
                    continue;
                }
                let out = &mut b.e_next[r * p..(r + 1) * p];
                for &j in nz {
                    let j = j as usize;
                    out[j] += vr * x[j];
                }
            }
            for j in 0..nc {
                let w = phi.mul_col(&b.dc[t * nc + j]);
                for r in 0..k {
                    b.e_next[r * p + p_in + j] += w.get(r);
                }
            }
        }
        if b.e_next.iter().any(|v| !v.is_finite()) {
            return Err(neuron_fault(i));
        }
    }
    Ok(())
}

/// Factored parameter derivatives of one neuron over a window:
/// `δ^t = D^t ⊗ x^t` for the weight and bias columns, and dense
/// `∂s^t/∂c_j` columns for trainable constants.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaFactors<T> {
    pub d: Vec<VecK<T>>,
    pub x: Vec<Vec<T>>,
    pub dc: Vec<Vec<VecK<T>>>,
}

impl<T: Scalar> DeltaFactors<T> {
    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn k(&self) -> usize {
        self.d.first().map_or(0, VecK::k)
    }

    pub fn p(&self) -> usize {
        self.x.first().map_or(0, Vec::len) + self.dc.first().map_or(0, Vec::len)
    }

    /// Dense `k × p` derivative at local step `t`.
    pub fn dense(&self, t: usize) -> Vec<T> {
        let (k, p) = (self.k(), self.p());
        let p_in = self.x[t].len();
        let mut out = vec![T::zero(); k * p];
        for r in 0..k {
            for (c, &xc) in self.x[t].iter().enumerate() {
                out[r * p + c] = self.d[t].get(r) * xc;
            }
            for (j, col) in self.dc[t].iter().enumerate() {
                out[r * p + p_in + j] = col.get(r);
            }
        }
        out
    }
}

/// Transitions and factors of neuron `i` from a filled cache.
pub fn delta_factors<T: Scalar>(
    layer: &Layer<T>,
    cache: &LayerCache<T>,
    i: usize,
    n: usize,
) -> (Vec<MatK<T>>, DeltaFactors<T>) {
    let np = layer.neuron_params(i);
    let nc = layer.n_consts();
    let mut a = Vec::with_capacity(n);
    let mut f = DeltaFactors {
        d: Vec::with_capacity(n),
        x: Vec::with_capacity(n),
        dc: Vec::with_capacity(n),
    };
    for t in 0..n {
        let jac = jacobians(
            layer.kind,
            &layer.mc,
            &np,
            cache.state(i, t),
            cache.current(i, t),
            None,
        );
        a.push(jac.a);
        f.d.push(jac.d_inp);
        f.x.push(cache.input_row(t).to_vec());
        f.dc.push(jac.d_consts[..nc].to_vec());
    }
    (a, f)
}

/// `[φ^{λ:1}, …, φ^{λ:λ}]`.
pub fn cumulative_transitions<T: Scalar>(a_seq: &[MatK<T>]) -> Result<Vec<MatK<T>>> {
    scan_matprod_suffix(a_seq)
}

/// `[q^0, …, q^λ]`.
pub fn backward_coefficients<T: Scalar>(
    a_seq: &[MatK<T>],
    l_seq: &[VecK<T>],
) -> Result<Vec<VecK<T>>> {
    reverse_scan_q(a_seq, l_seq)
}

fn check_window<T: Scalar>(e0: &[T], f: &DeltaFactors<T>, n: usize, what: &str) -> Result<()> {
    if f.len() != n || e0.len() != f.k() * f.p() {
        return Err(HyprError::config(format!(
            "{what}: window of {} factors, {n} coefficients and a carry of {} values (expected {}x{})",
            f.len(),
            e0.len(),
            f.k(),
            f.p()
        )));
    }
    Ok(())
}

/// `e^λ = δ^λ + Σ_{t<λ} φ^{λ:t+1} δ^t + φ^{λ:1} e^0`, from
/// `phis = [φ^{λ:1}, …, φ^{λ:λ}]`, applying each δ in factored form.
pub fn propagate_eligibility<T: Scalar>(
    e0: &[T],
    f: &DeltaFactors<T>,
    phis: &[MatK<T>],
) -> Result<Vec<T>> {
    check_window(e0, f, phis.len(), "propagate_eligibility")?;
    let (k, p) = (f.k(), f.p());
    let n = phis.len();
    let mut e = vec![T::zero(); k * p];
    if n == 0 {
        e.copy_from_slice(e0);
        return Ok(e);
    }
    for r in 0..k {
        for rr in 0..k {
            let w = phis[0].get(r, rr);
            for c in 0..p {
                e[r * p + c] += w * e0[rr * p + c];
            }
        }
    }
    let ident = MatK::identity(k);
    for t in 0..n {
        let phi = if t + 1 < n { &phis[t + 1] } else { &ident };
        let v = phi.mul_col(&f.d[t]);
        let p_in = f.x[t].len();
        for r in 0..k {
            for (c, &xc) in f.x[t].iter().enumerate() {
                e[r * p + c] += v.get(r) * xc;
            }
            for (j, col) in f.dc[t].iter().enumerate() {
                e[r * p + p_in + j] += phi.mul_col(col).get(r);
            }
        }
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(HyprError::non_finite());
    }
    Ok(e)
}

/// `q^0 · e^0 + Σ_t q^t · δ^t` with `q = [q^0, …, q^λ]`.
pub fn cumulative_apg<T: Scalar>(q: &[VecK<T>], f: &DeltaFactors<T>, e0: &[T]) -> Result<Vec<T>> {
    if q.is_empty() {
        return Err(HyprError::config("cumulative_apg needs q^0"));
    }
    check_window(e0, f, q.len() - 1, "cumulative_apg")?;
    let (k, p) = (f.k(), f.p());
    let mut g = vec![T::zero(); p];
    for r in 0..k {
        for c in 0..p {
            g[c] += q[0].get(r) * e0[r * p + c];
        }
    }
    for t in 0..f.len() {
        let qt = &q[t + 1];
        let coef = qt.dot(&f.d[t]);
        let p_in = f.x[t].len();
        for (c, &xc) in f.x[t].iter().enumerate() {
            g[c] += coef * xc;
        }
        for (j, col) in f.dc[t].iter().enumerate() {
            g[p_in + j] += qt.dot(col);
        }
    }
    Ok(g)
}
