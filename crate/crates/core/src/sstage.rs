//! Sequential rollout of one subsequence and the per-step spatial
//! learning signals derived from it.

use crate::error::{HyprError, Result};
use crate::network::{Layer, Network};
use crate::neuron::{jacobians, step_unchecked};
use crate::pool::{Buf, BufferPool};
use crate::scalar::Scalar;
use crate::tensor::VecK;
use crate::training::loss::{LossSpec, PredictionAccumulator, Target};

/// Cached rollout of one layer over a window of at most `cap` steps.
///
/// States are stored neuron-major with `cap + 1` slots per neuron; slot 0
/// holds the carried-in state. Input factors `[x̄ | y^{t-1} | 1]` are stored
/// dense per step together with the list of their nonzero positions.
#[derive(Debug)]
pub struct LayerCache<T> {
    pub cap: usize,
    pub p_in: usize,
    pub s: Buf<VecK<T>>,
    pub cur: Buf<T>,
    pub xin: Buf<T>,
    pub nz: Buf<u32>,
    pub nnz: Buf<u32>,
}

impl<T: Scalar> LayerCache<T> {
    fn new(layer: &Layer<T>, cap: usize, pool: &BufferPool) -> Self {
        let p_in = layer.p_in();
        LayerCache {
            cap,
            p_in,
            s: pool.take(layer.m * (cap + 1), VecK::zeros(layer.k())),
            cur: pool.take(layer.m * cap, T::zero()),
            xin: pool.take(cap * p_in, T::zero()),
            nz: pool.take(cap * p_in, 0u32),
            nnz: pool.take(cap, 0u32),
        }
    }

    /// State of neuron `i` after local step `t` (`t = 0` is the carry).
    #[inline]
    pub fn state(&self, i: usize, t: usize) -> &VecK<T> {
        &self.s[i * (self.cap + 1) + t]
    }

    /// Input current of neuron `i` at local step `t` (0-based).
    #[inline]
    pub fn current(&self, i: usize, t: usize) -> T {
        self.cur[i * self.cap + t]
    }

    #[inline]
    pub fn input_row(&self, t: usize) -> &[T] {
        &self.xin[t * self.p_in..(t + 1) * self.p_in]
    }

    #[inline]
    pub fn nonzeros(&self, t: usize) -> &[u32] {
        &self.nz[t * self.p_in..t * self.p_in + self.nnz[t] as usize]
    }
}

/// Everything the parallel stage needs about one window.
#[derive(Debug)]
pub struct SubsequenceCache<T> {
    pub cap: usize,
    /// Steps filled by the last rollout.
    pub len: usize,
    /// Global index of the first cached step.
    pub t_begin: usize,
    pub layers: Vec<LayerCache<T>>,
    /// Row-major `cap × C` loss gradients w.r.t. the readout.
    pub dl_du: Buf<T>,
    pub loss: Buf<T>,
    readout: Buf<T>,
}

impl<T: Scalar> SubsequenceCache<T> {
    pub fn new(net: &Network<T>, cap: usize, pool: &BufferPool) -> Result<Self> {
        if cap == 0 {
            return Err(HyprError::config("subsequence length must be at least 1"));
        }
        let c = net.n_out();
        Ok(SubsequenceCache {
            cap,
            len: 0,
            t_begin: 0,
            layers: net
                .layers
                .iter()
                .map(|l| LayerCache::new(l, cap, pool))
                .collect(),
            dl_du: pool.take(cap * c, T::zero()),
            loss: pool.take(cap, T::zero()),
            readout: pool.take(c, T::zero()),
        })
    }
}

/// Final state of every neuron, seeding the next window.
#[derive(Clone, Debug, PartialEq)]
pub struct CarryState<T> {
    pub s: Vec<Vec<VecK<T>>>,
}

impl<T: Scalar> CarryState<T> {
    pub fn zeros(net: &Network<T>) -> Self {
        CarryState {
            s: net
                .layers
                .iter()
                .map(|l| vec![VecK::zeros(l.k()); l.m])
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for layer in &mut self.s {
            for s in layer.iter_mut() {
                *s = VecK::zeros(s.k());
            }
        }
    }

    fn check(&self, net: &Network<T>) -> Result<()> {
        let ok = self.s.len() == net.layers.len()
            && self
                .s
                .iter()
                .zip(&net.layers)
                .all(|(c, l)| c.len() == l.m && c.iter().all(|s| s.k() == l.k()));
        if ok {
            Ok(())
        } else {
            Err(HyprError::dim("carry state does not match the network"))
        }
    }
}

/// One input sequence with its supervision.
#[derive(Clone, Copy, Debug)]
pub struct SequenceRef<'a, T> {
    /// Row-major `t_len × d` inputs.
    pub x: &'a [T],
    pub t_len: usize,
    pub target: &'a Target,
}

impl<'a, T: Scalar> SequenceRef<'a, T> {
    pub fn new(x: &'a [T], t_len: usize, target: &'a Target) -> Self {
        SequenceRef { x, t_len, target }
    }

    pub(crate) fn check(&self, net: &Network<T>, loss: &LossSpec) -> Result<()> {
        let d = net.d_in();
        if self.t_len == 0 || self.x.len() != self.t_len * d {
            return Err(HyprError::dim(format!(
                "sequence holds {} values, expected {} steps of width {d}",
                self.x.len(),
                self.t_len
            )));
        }
        loss.check(self.t_len)?;
        match self.target {
            Target::Class(c) if *c >= net.n_out() => Err(HyprError::config(format!(
                "class {c} out of range for {} outputs",
                net.n_out()
            ))),
            Target::PerStep(v) if v.len() != self.t_len || v.iter().any(|c| *c >= net.n_out()) => {
                Err(HyprError::config(
                    "per-step targets must cover every step with valid classes",
                ))
            }
            Target::Values(v) if v.len() != self.t_len * net.n_out() => {
                Err(HyprError::dim("regression targets must be t_len x outputs"))
            }
            _ => Ok(()),
        }
    }
}

/// Rolls the network forward over steps `[t_begin, t_begin + n)`.
///
/// Feed-forward input is same-step, recurrent input is previous-step.
/// Returns the summed loss of the window.
#[allow(clippy::too_many_arguments)]
pub fn run_s_stage<T: Scalar>(
    net: &Network<T>,
    seq: SequenceRef<'_, T>,
    loss: &LossSpec,
    t_begin: usize,
    n: usize,
    carry: &mut CarryState<T>,
    cache: &mut SubsequenceCache<T>,
    mut pred: Option<&mut PredictionAccumulator<T>>,
) -> Result<T> {
    if n == 0 || n > cache.cap || t_begin + n > seq.t_len {
        return Err(HyprError::dim(format!(
            "window [{t_begin}, {}) does not fit cache of {} steps in a sequence of {}",
            t_begin + n,
            cache.cap,
            seq.t_len
        )));
    }
    carry.check(net)?;
    let cap = cache.cap;
    for (lc, cs) in cache.layers.iter_mut().zip(&carry.s) {
        for (i, s) in cs.iter().enumerate() {
            lc.s[i * (cap + 1)] = *s;
        }
    }
    let d0 = net.d_in();
    let n_out = net.n_out();
    let mut total = T::zero();
    for t in 0..n {
        let tg = t_begin + t;
        for (l, layer) in net.layers.iter().enumerate() {
            let (lower, upper) = cache.layers.split_at_mut(l);
            let lc = &mut upper[0];
            let p_in = lc.p_in;
            let row = &mut lc.xin[t * p_in..(t + 1) * p_in];
            if l == 0 {
                row[..d0].copy_from_slice(&seq.x[tg * d0..(tg + 1) * d0]);
            } else {
                let below = &lower[l - 1];
                let out = net.layers[l - 1].kind.output_index();
                for (j, v) in row[..layer.d].iter_mut().enumerate() {
                    *v = below.s[j * (cap + 1) + t + 1].get(out);
                }
            }
            if layer.recurrent {
                let out = layer.kind.output_index();
                for j in 0..layer.m {
                    row[layer.d + j] = lc.s[j * (cap + 1) + t].get(out);
                }
            }
            row[p_in - 1] = T::one();
            let nz = &mut lc.nz[t * p_in..(t + 1) * p_in];
            let mut cnt = 0;
            for (j, v) in row.iter().enumerate() {
                if *v != T::zero() {
                    nz[cnt] = j as u32;
                    cnt += 1;
                }
            }
            lc.nnz[t] = cnt as u32;
            let p = layer.p();
            for i in 0..layer.m {
                let w = &layer.w[i * p..i * p + p_in];
                let mut cur = T::zero();
                for &j in &nz[..cnt] {
                    cur += w[j as usize] * row[j as usize];
                }
                let prev = lc.s[i * (cap + 1) + t];
                let next =
                    step_unchecked(layer.kind, &layer.mc, &layer.neuron_params(i), &prev, cur);
                if !next.is_finite() || !cur.is_finite() {
                    return Err(HyprError::NonFinite {
                        layer: Some(l),
                        neuron: Some(i),
                        step: Some(tg),
                    });
                }
                lc.cur[i * cap + t] = cur;
                lc.s[i * (cap + 1) + t + 1] = next;
            }
        }
        let rl = cache.layers.last().expect("readout cache");
        for (c, u) in cache.readout.iter_mut().enumerate() {
            *u = rl.s[c * (cap + 1) + t + 1].get(0);
        }
        let grad = &mut cache.dl_du[t * n_out..(t + 1) * n_out];
        let lt = loss.step_loss(tg, seq.t_len, seq.target, &cache.readout, grad);
        cache.loss[t] = lt;
        total += lt;
        if let Some(p) = pred.as_deref_mut() {
            p.push(tg, &cache.readout);
        }
    }
    for (lc, cs) in cache.layers.iter().zip(carry.s.iter_mut()) {
        for (i, s) in cs.iter_mut().enumerate() {
            *s = lc.s[i * (cap + 1) + n];
        }
    }
    cache.len = n;
    cache.t_begin = t_begin;
    Ok(total)
}

/// Loss gradient on each neuron's output coordinate for every cached step.
///
/// Returns, per layer, a neuron-major `m × len` array. The readout gets
/// `dL^t/du^t`; a hidden layer gets the same-step signal routed through the
/// layer above, `Σ_j (ℓ_{l+1}^t[j] · ∂s_{l+1,j}^t/∂I^t) · W_ff,l+1[j, i]`.
/// Temporal paths through deeper layers are dropped.
pub fn spatial_loss_grads<T: Scalar>(net: &Network<T>, cache: &SubsequenceCache<T>) -> Vec<Vec<T>> {
    let n = cache.len;
    let n_layers = net.layers.len();
    let mut out: Vec<Vec<T>> = net
        .layers
        .iter()
        .map(|l| vec![T::zero(); l.m * n])
        .collect();
    let n_out = net.n_out();
    for c in 0..n_out {
        for t in 0..n {
            out[n_layers - 1][c * n + t] = cache.dl_du[t * n_out + c];
        }
    }
    for l in (0..n_layers - 1).rev() {
        let up = &net.layers[l + 1];
        let uc = &cache.layers[l + 1];
        let out_idx = up.kind.output_index();
        let mut g = vec![T::zero(); up.m * n];
        for j in 0..up.m {
            let np = up.neuron_params(j);
            for t in 0..n {
                let jac = jacobians(up.kind, &up.mc, &np, uc.state(j, t), uc.current(j, t), None);
                g[j * n + t] = out[l + 1][j * n + t] * jac.d_inp.get(out_idx);
            }
        }
        let sig = &mut out[l];
        for i in 0..net.layers[l].m {
            for j in 0..up.m {
                let w = up.w_ff(j, i);
                if w == T::zero() {
                    continue;
                }
                for t in 0..n {
                    sig[i * n + t] += g[j * n + t] * w;
                }
            }
        }
    }
    out
}

/// Forward pass over a whole sequence without gradients.
///
/// Runs in windows of `window` steps so memory stays bounded.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    seq: SequenceRef<'_, T>,
    loss: &LossSpec,
    window: usize,
    pred: &mut PredictionAccumulator<T>,
    pool: &BufferPool,
) -> Result<T> {
    seq.check(net, loss)?;
    let cap = window.min(seq.t_len).max(1);
    let mut cache = SubsequenceCache::new(net, cap, pool)?;
    let mut carry = CarryState::zeros(net);
    pred.reset();
    let mut total = T::zero();
    let mut t = 0;
    while t < seq.t_len {
        let n = cap.min(seq.t_len - t);
        total += run_s_stage(net, seq, loss, t, n, &mut carry, &mut cache, Some(pred))?;
        t += n;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, NetworkConfig};
    use crate::neuron::{ModelConstants, ModelKind};
    use crate::training::loss::{LossKind, PredictionMode};

    fn li_chain(alpha: f64) -> Network<f64> {
        let mut hidden = Layer::zeros(ModelKind::Li, 1, 1, false, ModelConstants::default());
        hidden.fixed[0] = [alpha, 0.0];
        hidden.set_w_ff(0, 0, 1.0);
        let mut out = Layer::zeros(ModelKind::Li, 1, 1, false, ModelConstants::default());
        out.fixed[0] = [0.0, 0.0];
        out.set_w_ff(0, 0, 1.0);
        Network::from_layers(vec![hidden, out]).unwrap()
    }

    fn random_net(seed: u64) -> Network<f64> {
        let cfg = NetworkConfig {
            d_in: 3,
            hidden: vec![
                LayerSpec::new(ModelKind::Alif, 5, true),
                LayerSpec::new(ModelKind::Brf, 4, true),
            ],
            readout: LayerSpec::new(ModelKind::Li, 2, false),
        };
        let mut net = Network::init(&cfg, seed).unwrap();
        for w in &mut net.layers[1].w {
            *w *= 40.0;
        }
        net.layers[1].project();
        net
    }

    fn random_input(t_len: usize, d: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..t_len * d)
            .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
            .collect()
    }

    #[test]
    fn leaky_integrator_hand_recursion() {
        let net = li_chain(0.5);
        let x = vec![1.0; 3];
        let target = Target::Class(0);
        let pool = BufferPool::new();
        let mut cache = SubsequenceCache::new(&net, 3, &pool).unwrap();
        let mut carry = CarryState::zeros(&net);
        let seq = SequenceRef::new(&x, 3, &target);
        let loss = LossSpec::default();
        run_s_stage(&net, seq, &loss, 0, 3, &mut carry, &mut cache, None).unwrap();
        let u: Vec<f64> = (1..=3)
            .map(|t| cache.layers[0].state(0, t).get(0))
            .collect();
        assert_eq!(u, vec![0.5, 0.75, 0.875]);
    }

    #[test]
    fn zero_network_gives_uniform_loss() {
        let mut net = random_net(1);
        for l in &mut net.layers {
            l.w.fill(0.0);
        }
        let x = random_input(10, 3, 2);
        let target = Target::Class(1);
        let pool = BufferPool::new();
        let mut cache = SubsequenceCache::new(&net, 10, &pool).unwrap();
        let mut carry = CarryState::zeros(&net);
        let loss = LossSpec::new(LossKind::CrossEntropy, 0);
        let total = run_s_stage(
            &net,
            SequenceRef::new(&x, 10, &target),
            &loss,
            0,
            10,
            &mut carry,
            &mut cache,
            None,
        )
        .unwrap();
        assert!((total - 2f64.ln()).abs() < 1e-12);
        for lc in &cache.layers {
            assert!(lc.s.iter().all(|s| s.as_slice().iter().all(|v| *v == 0.0)));
        }
    }

    #[test]
    fn split_windows_match_single_window() {
        let net = random_net(3);
        let x = random_input(64, 3, 4);
        let target = Target::Class(0);
        let loss = LossSpec::default();
        let seq = SequenceRef::new(&x, 64, &target);
        let pool = BufferPool::new();
        let mut whole = SubsequenceCache::new(&net, 64, &pool).unwrap();
        let mut carry = CarryState::zeros(&net);
        run_s_stage(&net, seq, &loss, 0, 64, &mut carry, &mut whole, None).unwrap();
        let mut half = SubsequenceCache::new(&net, 32, &pool).unwrap();
        let mut carry2 = CarryState::zeros(&net);
        for w in 0..2 {
            run_s_stage(&net, seq, &loss, 32 * w, 32, &mut carry2, &mut half, None).unwrap();
            for (a, b) in whole.layers.iter().zip(&half.layers) {
                let m = a.s.len() / 65;
                for i in 0..m {
                    for t in 0..=32 {
                        assert_eq!(a.state(i, 32 * w + t), b.state(i, t));
                    }
                }
            }
        }
        assert_eq!(carry, carry2);
        let spikes: f64 = whole.layers[1].s.iter().map(|s| s.get(3)).sum();
        assert!(spikes > 0.0, "test network should spike");
    }

    #[test]
    fn spatial_signal_hand_chain() {
        // Hidden LI (α_h) → readout LI (α_o); single neuron each.
        let (ah, ao, w) = (0.3, 0.6, 2.0);
        let mut net = li_chain(ah);
        net.layers[1].fixed[0] = [ao, 0.0];
        net.layers[1].set_w_ff(0, 0, w);
        let x = vec![1.0, -2.0];
        let target = Target::Values(vec![0.0, 0.5]);
        let loss = LossSpec::new(LossKind::SquaredError, 0);
        let pool = BufferPool::new();
        let mut cache = SubsequenceCache::new(&net, 2, &pool).unwrap();
        let mut carry = CarryState::zeros(&net);
        run_s_stage(
            &net,
            SequenceRef::new(&x, 2, &target),
            &loss,
            0,
            2,
            &mut carry,
            &mut cache,
            None,
        )
        .unwrap();
        let sig = spatial_loss_grads(&net, &cache);
        for t in 0..2 {
            let want = sig[1][t] * (1.0 - ao) * w;
            assert!((sig[0][t] - want).abs() < 1e-12);
        }
        // u_o^t = α_o u_o^{t-1} + (1-α_o) w u_h^t; the readout signal is u_o - y.
        let uh = [(1.0 - ah) * 1.0, ah * (1.0 - ah) * 1.0 + (1.0 - ah) * -2.0];
        let uo1 = (1.0 - ao) * w * uh[0];
        let uo2 = ao * uo1 + (1.0 - ao) * w * uh[1];
        assert!((sig[1][0] - 0.5 * uo1).abs() < 1e-12);
        assert!((sig[1][1] - 0.5 * (uo2 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_readout_gradient_gives_zero_hidden_signal() {
        let net = random_net(5);
        let x = random_input(8, 3, 6);
        let target = Target::Class(0);
        let loss = LossSpec::new(LossKind::CrossEntropy, 7);
        let pool = BufferPool::new();
        let mut cache = SubsequenceCache::new(&net, 8, &pool).unwrap();
        let mut carry = CarryState::zeros(&net);
        run_s_stage(
            &net,
            SequenceRef::new(&x, 8, &target),
            &loss,
            0,
            8,
            &mut carry,
            &mut cache,
            None,
        )
        .unwrap();
        let sig = spatial_loss_grads(&net, &cache);
        for l in 0..3 {
            let n = 8;
            for i in 0..net.layers[l].m {
                for t in 0..7 {
                    assert_eq!(sig[l][i * n + t], 0.0);
                }
            }
        }
    }

    #[test]
    fn evaluate_windows_agree() {
        let net = random_net(9);
        let x = random_input(50, 3, 10);
        let target = Target::Class(1);
        let loss = LossSpec::default();
        let pool = BufferPool::new();
        let mut p1 = PredictionAccumulator::new(PredictionMode::MeanOverSequence, 0, 2);
        let mut p2 = p1.clone();
        let a = evaluate(
            &net,
            SequenceRef::new(&x, 50, &target),
            &loss,
            50,
            &mut p1,
            &pool,
        )
        .unwrap();
        let b = evaluate(
            &net,
            SequenceRef::new(&x, 50, &target),
            &loss,
            7,
            &mut p2,
            &pool,
        )
        .unwrap();
        assert!((a - b).abs() <= 1e-14 * a.abs());
        assert_eq!(p1.finish(), p2.finish());
        assert!(evaluate(
            &net,
            SequenceRef::new(&x[..10], 50, &target),
            &loss,
            7,
            &mut p2,
            &pool
        )
        .is_err());
    }

    #[test]
    fn non_finite_state_reports_location() {
        let mut net = random_net(11);
        net.layers[0].set_w_ff(2, 1, f64::INFINITY);
        let x = vec![1.0; 3 * 4];
        let target = Target::Class(0);
        let pool = BufferPool::new();
        let mut cache = SubsequenceCache::new(&net, 4, &pool).unwrap();
        let mut carry = CarryState::zeros(&net);
        let err = run_s_stage(
            &net,
            SequenceRef::new(&x, 4, &target),
            &LossSpec::default(),
            0,
            4,
            &mut carry,
            &mut cache,
            None,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            HyprError::NonFinite {
                layer: Some(0),
                neuron: Some(2),
                step: Some(0)
            }
        ));
    }
}
