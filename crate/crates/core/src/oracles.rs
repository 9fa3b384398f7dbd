//! Dense, step-by-step reference gradients.
//!
//! [`eprop_reference`] carries every eligibility matrix forward one step at
//! a time and contracts it with the immediate learning signal, the plain
//! online form of the approximate gradient. [`rtrl_reference`] carries the
//! full state sensitivity to every parameter and is exact under the chosen
//! scope. Neither shares code with the windowed engine beyond the neuron
//! models themselves.

use crate::engine::Gradients;
use crate::error::{HyprError, Result};
use crate::network::{Layer, Network};
use crate::neuron::{jacobians, step_unchecked, JacobianSlices};
use crate::sstage::SequenceRef;
use crate::tensor::VecK;
use crate::training::loss::LossSpec;

/// Largest layer width accepted by [`rtrl_reference`].
pub const RTRL_MAX_WIDTH: usize = 16;
/// Longest sequence accepted by [`rtrl_reference`].
pub const RTRL_MAX_STEPS: usize = 256;

/// Which dependency paths the exact gradient follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RtrlScope {
    /// Exact within each layer (own state and lateral recurrence), with
    /// the same-step learning signal from the layer above. Inter-layer
    /// temporal paths are dropped.
    IntraLayer,
    /// Every path through the whole network, including readout leak and
    /// inter-layer propagation over time.
    Full,
}

struct Step {
    s: Vec<Vec<VecK<f64>>>,
    x: Vec<Vec<f64>>,
    jac: Vec<Vec<JacobianSlices<f64>>>,
    dl_du: Vec<f64>,
    loss: f64,
}

/// One forward step of every layer from the previous states.
fn forward_step(
    net: &Network<f64>,
    seq: &SequenceRef<'_, f64>,
    loss: &LossSpec,
    t: usize,
    prev: &[Vec<VecK<f64>>],
) -> Result<Step> {
    let d0 = net.d_in();
    let mut s: Vec<Vec<VecK<f64>>> = Vec::with_capacity(net.layers.len());
    let mut xs = Vec::with_capacity(net.layers.len());
    let mut jacs = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate() {
        let mut x = Vec::with_capacity(layer.p_in());
        if l == 0 {
            x.extend_from_slice(&seq.x[t * d0..(t + 1) * d0]);
        } else {
            let out = net.layers[l - 1].kind.output_index();
            x.extend(s[l - 1].iter().map(|v| v.get(out)));
        }
        if layer.recurrent {
            let out = layer.kind.output_index();
            x.extend(prev[l].iter().map(|v| v.get(out)));
        }
        x.push(1.0);
        let mut sl = Vec::with_capacity(layer.m);
        let mut jl = Vec::with_capacity(layer.m);
        for i in 0..layer.m {
            let w = &layer.row(i)[..layer.p_in()];
            let cur: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            let np = layer.neuron_params(i);
            let next = step_unchecked(layer.kind, &layer.mc, &np, &prev[l][i], cur);
            if !next.is_finite() {
                return Err(HyprError::NonFinite {
                    layer: Some(l),
                    neuron: Some(i),
                    step: Some(t),
                });
            }
            jl.push(jacobians(
                layer.kind,
                &layer.mc,
                &np,
                &prev[l][i],
                cur,
                None,
            ));
            sl.push(next);
        }
        s.push(sl);
        xs.push(x);
        jacs.push(jl);
    }
    let u: Vec<f64> = s
        .last()
        .expect("readout")
        .iter()
        .map(|v| v.get(0))
        .collect();
    let mut dl_du = vec![0.0; u.len()];
    let lt = loss.step_loss(t, seq.t_len, seq.target, &u, &mut dl_du);
    Ok(Step {
        s,
        x: xs,
        jac: jacs,
        dl_du,
        loss: lt,
    })
}

/// Same-step learning signal on each neuron's output coordinate.
fn immediate_signals(net: &Network<f64>, st: &Step) -> Vec<Vec<f64>> {
    let n = net.layers.len();
    let mut sig: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.m]).collect();
    sig[n - 1].copy_from_slice(&st.dl_du);
    for l in (0..n - 1).rev() {
        let up = &net.layers[l + 1];
        let out_up = up.kind.output_index();
        for j in 0..up.m {
            let gj = sig[l + 1][j] * st.jac[l + 1][j].d_inp.get(out_up);
            for i in 0..net.layers[l].m {
                sig[l][i] += gj * up.w_ff(j, i);
            }
        }
    }
    sig
}

/// Dense `k × p` immediate derivative `∂s^t/∂θ_i` holding `s^{t−1}` fixed.
fn dense_delta(layer: &Layer<f64>, jac: &JacobianSlices<f64>, x: &[f64]) -> Vec<f64> {
    let (k, p, p_in) = (layer.k(), layer.p(), layer.p_in());
    let mut d = vec![0.0; k * p];
    for r in 0..k {
        for c in 0..p_in {
            d[r * p + c] = jac.d_inp.get(r) * x[c];
        }
        for j in 0..layer.n_consts() {
            d[r * p + p_in + j] = jac.d_consts[j].get(r);
        }
    }
    d
}

fn zero_states(net: &Network<f64>) -> Vec<Vec<VecK<f64>>> {
    net.layers
        .iter()
        .map(|l| vec![VecK::zeros(l.k()); l.m])
        .collect()
}

/// Sequential e-prop: `e^t = A^t e^{t−1} + δ^t`, `∇̃θ += ℓ^t · e^t`.
///
/// Returns the accumulated gradient and the total loss.
pub fn eprop_reference(
    net: &Network<f64>,
    seq: SequenceRef<'_, f64>,
    loss: &LossSpec,
) -> Result<(Gradients<f64>, f64)> {
    seq.check(net, loss)?;
    let mut grads = Gradients::zeros(net);
    let mut elig: Vec<Vec<Vec<f64>>> = net
        .layers
        .iter()
        .map(|l| vec![vec![0.0; l.k() * l.p()]; l.m])
        .collect();
    let mut prev = zero_states(net);
    let mut total = 0.0;
    for t in 0..seq.t_len {
        let st = forward_step(net, &seq, loss, t, &prev)?;
        total += st.loss;
        let sig = immediate_signals(net, &st);
        for (l, layer) in net.layers.iter().enumerate() {
            let (k, p) = (layer.k(), layer.p());
            let out = layer.kind.output_index();
            for i in 0..layer.m {
                let jac = &st.jac[l][i];
                let delta = dense_delta(layer, jac, &st.x[l]);
                let e = &mut elig[l][i];
                let mut next = delta;
                for r in 0..k {
                    for rr in 0..k {
                        let a = jac.a.get(r, rr);
                        if a != 0.0 {
                            for c in 0..p {
                                next[r * p + c] += a * e[rr * p + c];
                            }
                        }
                    }
                }
                *e = next;
                let s = sig[l][i];
                if s != 0.0 {
                    let g = &mut grads.layers[l][i * p..(i + 1) * p];
                    for c in 0..p {
                        g[c] += s * e[out * p + c];
                    }
                }
            }
        }
        prev = st.s;
    }
    Ok((grads, total))
}

/// Real-time recurrent learning: carries `∂s^t/∂θ` for every state and
/// parameter and returns the gradient under `scope` with the total loss.
///
/// Cost grows with the square of the state count, so widths above
/// [`RTRL_MAX_WIDTH`] and sequences above [`RTRL_MAX_STEPS`] are rejected.
pub fn rtrl_reference(
    net: &Network<f64>,
    seq: SequenceRef<'_, f64>,
    loss: &LossSpec,
    scope: RtrlScope,
) -> Result<(Gradients<f64>, f64)> {
    seq.check(net, loss)?;
    if let Some(l) = net.layers.iter().find(|l| l.m > RTRL_MAX_WIDTH) {
        return Err(HyprError::config(format!(
            "RTRL reference supports layers of at most {RTRL_MAX_WIDTH} neurons, got {}",
            l.m
        )));
    }
    if seq.t_len > RTRL_MAX_STEPS {
        return Err(HyprError::config(format!(
            "RTRL reference supports at most {RTRL_MAX_STEPS} steps, got {}",
            seq.t_len
        )));
    }
    // Global parameter offsets per layer.
    let mut offset = Vec::with_capacity(net.layers.len());
    let mut n_par = 0;
    for layer in &net.layers {
        offset.push(n_par);
        n_par += layer.w.len();
    }
    // sens[l][i] is a k × n_par matrix ∂s_{l,i}/∂θ, row-major.
    let mut sens: Vec<Vec<Vec<f64>>> = net
        .layers
        .iter()
        .map(|l| vec![vec![0.0; l.k() * n_par]; l.m])
        .collect();
    let mut flat = vec![0.0; n_par];
    let mut prev = zero_states(net);
    let mut total = 0.0;
    for t in 0..seq.t_len {
        let st = forward_step(net, &seq, loss, t, &prev)?;
        total += st.loss;
        let mut next: Vec<Vec<Vec<f64>>> = Vec::with_capacity(net.layers.len());
        for (l, layer) in net.layers.iter().enumerate() {
            let (k, p) = (layer.k(), layer.p());
            let lower_out = (l > 0).then(|| net.layers[l - 1].kind.output_index());
            let out = layer.kind.output_index();
            let mut nl = Vec::with_capacity(layer.m);
            for i in 0..layer.m {
                let jac = &st.jac[l][i];
                // dI/dθ through inputs that themselves depend on parameters.
                let mut di = vec![0.0; n_par];
                if let (Some(lo), RtrlScope::Full) = (lower_out, scope) {
                    for (j, sj) in next[l - 1].iter().enumerate() {
                        let w = layer.w_ff(i, j);
                        if w != 0.0 {
                            for (v, s) in di.iter_mut().zip(&sj[lo * n_par..(lo + 1) * n_par]) {
                                *v += w * s;
                            }
                        }
                    }
                }
                if layer.recurrent {
                    for (j, sj) in sens[l].iter().enumerate() {
                        let w = layer.w_rec(i, j);
                        if w != 0.0 {
                            for (v, s) in di.iter_mut().zip(&sj[out * n_par..(out + 1) * n_par]) {
                                *v += w * s;
                            }
                        }
                    }
                }
                let mut m = vec![0.0; k * n_par];
                for r in 0..k {
                    let row = &mut m[r * n_par..(r + 1) * n_par];
                    for rr in 0..k {
                        let a = jac.a.get(r, rr);
                        if a != 0.0 {
                            for (v, s) in row
                                .iter_mut()
                                .zip(&sens[l][i][rr * n_par..(rr + 1) * n_par])
                            {
                                *v += a * s;
                            }
                        }
                    }
                    let dr = jac.d_inp.get(r);
                    if dr != 0.0 {
                        for (v, s) in row.iter_mut().zip(&di) {
                            *v += dr * s;
                        }
                    }
                }
                let own = dense_delta(layer, jac, &st.x[l]);
                let base = offset[l] + i * p;
                for r in 0..k {
                    for c in 0..p {
                        m[r * n_par + base + c] += own[r * p + c];
                    }
                }
                nl.push(m);
            }
            next.push(nl);
        }
        sens = next;
        match scope {
            RtrlScope::Full => {
                let ro = sens.last().expect("readout");
                for (c, &g) in st.dl_du.iter().enumerate() {
                    if g != 0.0 {
                        for (f, s) in flat.iter_mut().zip(&ro[c][..n_par]) {
                            *f += g * s;
                        }
                    }
                }
            }
            RtrlScope::IntraLayer => {
                let sig = immediate_signals(net, &st);
                for (l, layer) in net.layers.iter().enumerate() {
                    let out = layer.kind.output_index();
                    for i in 0..layer.m {
                        let g = sig[l][i];
                        if g != 0.0 {
                            for (f, s) in flat
                                .iter_mut()
                                .zip(&sens[l][i][out * n_par..(out + 1) * n_par])
                            {
                                *f += g * s;
                            }
                        }
                    }
                }
            }
        }
        prev = st.s;
    }
    let mut grads = Gradients::zeros(net);
    for (l, g) in grads.layers.iter_mut().enumerate() {
        let n = g.len();
        g.copy_from_slice(&flat[offset[l]..offset[l] + n]);
    }
    Ok((grads, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{max_layer_rel_diff, train_sequence, EngineOptions, Workspace};
    use crate::neuron::{ModelConstants, ModelKind};
    use crate::pool::BufferPool;
    use crate::testutil::{random_input, random_net, random_per_step};
    use crate::training::loss::{LossKind, Target};

    fn engine(
        net: &Network<f64>,
        seq: SequenceRef<'_, f64>,
        loss: &LossSpec,
        lam: usize,
    ) -> Vec<Vec<f64>> {
        let pool = BufferPool::new();
        let mut ws = Workspace::new(net, lam, &pool).unwrap();
        let mut g = Gradients::zeros(net);
        train_sequence(
            net,
            seq,
            loss,
            &mut ws,
            &mut g,
            EngineOptions::default(),
            None,
        )
        .unwrap();
        g.to_f64()
    }

    /// Two LI layers with squared error: every gradient entry by hand.
    #[test]
    fn linear_chain_closed_form() {
        let (a1, a2, w1, w2, b1) = (0.6, 0.3, 0.8, 1.5, 0.1);
        let mut h = Layer::zeros(ModelKind::Li, 1, 1, false, ModelConstants::default());
        h.fixed[0] = [a1, 0.0];
        h.set_w_ff(0, 0, w1);
        h.set_bias(0, b1);
        let mut o = Layer::zeros(ModelKind::Li, 1, 1, false, ModelConstants::default());
        o.fixed[0] = [a2, 0.0];
        o.set_w_ff(0, 0, w2);
        let net = Network::from_layers(vec![h, o]).unwrap();
        let x = [1.0, 2.0];
        let y = [0.5, -1.0];
        let target = Target::Values(y.to_vec());
        let loss = LossSpec::new(LossKind::SquaredError, 0);
        let seq = SequenceRef::new(&x, 2, &target);

        // Forward by hand.
        let h1 = (1.0 - a1) * (w1 * x[0] + b1);
        let h2 = a1 * h1 + (1.0 - a1) * (w1 * x[1] + b1);
        let u1 = (1.0 - a2) * w2 * h1;
        let u2 = a2 * u1 + (1.0 - a2) * w2 * h2;
        let mut gu = [0.0; 2];
        for (t, u) in [u1, u2].into_iter().enumerate() {
            let mut g = [0.0];
            loss.step_loss(t, 2, &target, &[u], &mut g);
            gu[t] = g[0];
        }
        // Exact: dL/dw2 = Σ_t gu_t du_t/dw2.
        let du1_w2 = (1.0 - a2) * h1;
        let du2_w2 = a2 * du1_w2 + (1.0 - a2) * h2;
        let gw2 = gu[0] * du1_w2 + gu[1] * du2_w2;
        let dh1_w1 = (1.0 - a1) * x[0];
        let dh2_w1 = a1 * dh1_w1 + (1.0 - a1) * x[1];
        let du1_w1 = (1.0 - a2) * w2 * dh1_w1;
        let du2_w1 = a2 * du1_w1 + (1.0 - a2) * w2 * dh2_w1;
        let gw1 = gu[0] * du1_w1 + gu[1] * du2_w1;
        // e-prop drops the readout leak for the hidden layer.
        let gw1_eprop = gu[0] * (1.0 - a2) * w2 * dh1_w1 + gu[1] * (1.0 - a2) * w2 * dh2_w1;

        let (full, _) = rtrl_reference(&net, seq, &loss, RtrlScope::Full).unwrap();
        assert!((full.layers[1][0] - gw2).abs() < 1e-14);
        assert!((full.layers[0][0] - gw1).abs() < 1e-14);
        let (ep, total) = eprop_reference(&net, seq, &loss).unwrap();
        assert!((ep.layers[1][0] - gw2).abs() < 1e-14);
        assert!((ep.layers[0][0] - gw1_eprop).abs() < 1e-14);
        let expect_loss = 0.5 * ((u1 - y[0]).powi(2) + (u2 - y[1]).powi(2)) / 2.0;
        assert!(
            (total - expect_loss).abs() < 1e-14,
            "{total} vs {expect_loss}"
        );
        let (intra, _) = rtrl_reference(&net, seq, &loss, RtrlScope::IntraLayer).unwrap();
        assert!(max_layer_rel_diff(&intra.to_f64(), &ep.to_f64()) < 1e-14);
    }

    #[test]
    fn running_example_through_eprop() {
        // Hidden LI neuron with A = 0.5 and δ = (1 − α)·w-input = 1 per step;
        // a memoryless unit readout passes ℓ = dL/du = 1 at both steps.
        let mut h = Layer::zeros(ModelKind::Li, 1, 1, false, ModelConstants::default());
        h.fixed[0] = [0.5, 0.0];
        h.set_w_ff(0, 0, 2.0);
        let mut o = Layer::zeros(ModelKind::Li, 1, 1, false, ModelConstants::default());
        o.fixed[0] = [0.0, 0.0];
        o.set_w_ff(0, 0, 1.0);
        let net = Network::from_layers(vec![h, o]).unwrap();
        let x = [2.0, 2.0];
        // u = (2, 3); targets two below give dL/du = 1 under the 1/T weight.
        let target = Target::Values(vec![0.0, 1.0]);
        let loss = LossSpec::new(LossKind::SquaredError, 0);
        let seq = SequenceRef::new(&x, 2, &target);
        let (ep, _) = eprop_reference(&net, seq, &loss).unwrap();
        assert!((ep.layers[0][0] - 2.5).abs() < 1e-15, "{}", ep.layers[0][0]);
    }

    #[test]
    fn eprop_matches_engine_for_every_model() {
        for (s, kind) in [ModelKind::Brf, ModelKind::Seadlif, ModelKind::Alif]
            .into_iter()
            .enumerate()
        {
            let net = random_net(&[kind, kind], 5, 3, true, 3, 3.0, 40 + s as u64);
            let x = random_input(40, 3, 2);
            let target = random_per_step(40, 3, 3);
            let loss = LossSpec::default();
            let seq = SequenceRef::new(&x, 40, &target);
            let (ep, _) = eprop_reference(&net, seq, &loss).unwrap();
            for lam in [1, 7, 40] {
                let d = max_layer_rel_diff(&engine(&net, seq, &loss, lam), &ep.to_f64());
                assert!(d < 1e-10, "{kind} lambda={lam}: {d:e}");
            }
        }
    }

    #[test]
    fn intra_layer_rtrl_equals_eprop_without_recurrence() {
        for kind in [ModelKind::Brf, ModelKind::Seadlif, ModelKind::Alif] {
            let net = random_net(&[kind], 6, 3, false, 2, 3.0, 8);
            let x = random_input(30, 3, 4);
            let target = random_per_step(30, 2, 5);
            let loss = LossSpec::default();
            let seq = SequenceRef::new(&x, 30, &target);
            let (r, _) = rtrl_reference(&net, seq, &loss, RtrlScope::IntraLayer).unwrap();
            let d = max_layer_rel_diff(&engine(&net, seq, &loss, 10), &r.to_f64());
            assert!(d < 1e-10, "{kind}: {d:e}");
        }
    }

    #[test]
    fn full_rtrl_equals_eprop_with_memoryless_readout() {
        let mut net = random_net(&[ModelKind::Brf], 6, 3, false, 2, 3.0, 8);
        for f in &mut net.layers[1].fixed {
            f[0] = 0.0;
        }
        let x = random_input(30, 3, 4);
        let target = random_per_step(30, 2, 5);
        let loss = LossSpec::default();
        let seq = SequenceRef::new(&x, 30, &target);
        let (r, _) = rtrl_reference(&net, seq, &loss, RtrlScope::Full).unwrap();
        let d = max_layer_rel_diff(&engine(&net, seq, &loss, 10), &r.to_f64());
        assert!(d < 1e-10, "{d:e}");
    }

    #[test]
    fn recurrence_makes_the_approximation_visible() {
        let net = random_net(&[ModelKind::Alif], 6, 3, true, 2, 3.0, 8);
        let x = random_input(30, 3, 4);
        let target = random_per_step(30, 2, 5);
        let loss = LossSpec::default();
        let seq = SequenceRef::new(&x, 30, &target);
        let (r, _) = rtrl_reference(&net, seq, &loss, RtrlScope::IntraLayer).unwrap();
        let (ep, _) = eprop_reference(&net, seq, &loss).unwrap();
        assert!(max_layer_rel_diff(&ep.to_f64(), &r.to_f64()) > 1e-6);
    }

    #[test]
    fn rtrl_guard() {
        let net = random_net(&[ModelKind::Alif], 17, 2, false, 2, 1.0, 1);
        let x = random_input(4, 2, 1);
        let target = Target::Class(0);
        let seq = SequenceRef::new(&x, 4, &target);
        assert!(
            rtrl_reference(&net, seq, &LossSpec::default(), RtrlScope::Full)
                .unwrap_err()
                .is_config()
        );
        let net = random_net(&[ModelKind::Alif], 4, 2, false, 2, 1.0, 1);
        let x = random_input(300, 2, 1);
        let seq = SequenceRef::new(&x, 300, &target);
        assert!(
            rtrl_reference(&net, seq, &LossSpec::default(), RtrlScope::Full)
                .unwrap_err()
                .is_config()
        );
    }

    #[test]
    fn zero_loss_signal_gives_zero_gradient() {
        let mut net = random_net(&[ModelKind::Brf], 4, 3, true, 2, 1.0, 1);
        net.layers[1].w.iter_mut().for_each(|w| *w = 0.0);
        let x = random_input(10, 3, 1);
        // Two classes with equal logits everywhere; the CE gradient is ±0.5
        // on the readout but the readout weights into the hidden layer are 0.
        let target = Target::Class(0);
        let seq = SequenceRef::new(&x, 10, &target);
        let (ep, _) = eprop_reference(&net, seq, &LossSpec::default()).unwrap();
        assert!(ep.layers[0].iter().all(|v| *v == 0.0));
    }
}
