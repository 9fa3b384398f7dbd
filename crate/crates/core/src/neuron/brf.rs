use super::{heaviside, JacobianSlices, ModelConstants, NeuronParams};
use crate::scalar::Scalar;
use crate::tensor::{MatK, VecK};

const U: usize = 0;
const V: usize = 1;
const Q: usize = 2;
const Z: usize = 3;

struct Pre<T> {
    dt: T,
    omega: T,
    b: T,
    u_new: T,
    v_new: T,
    x: T,
}

#[inline(always)]
fn divergence_boundary<T: Scalar>(dt: T, omega: T) -> (T, T) {
    let r = (T::one() - (dt * omega) * (dt * omega)).sqrt();
    ((r - T::one()) / dt, -(dt * omega) / r)
}

#[inline(always)]
fn pre<T: Scalar>(mc: &ModelConstants, np: &NeuronParams<T>, s: &VecK<T>, i: T) -> Pre<T> {
    let dt = T::c(mc.dt);
    let omega = np.c[0];
    let (p, _) = divergence_boundary(dt, omega);
    let b = p - np.c[1] - s.get(Q);
    let (u, v) = (s.get(U), s.get(V));
    let u_new = u + dt * (b * u - omega * v + i);
    let v_new = v + dt * (omega * u + b * v);
    let x = u_new - T::c(mc.theta) - s.get(Q);
    Pre {
        dt,
        omega,
        b,
        u_new,
        v_new,
        x,
    }
}

pub(super) fn spike_argument<T: Scalar>(
    mc: &ModelConstants,
    np: &NeuronParams<T>,
    s: &VecK<T>,
    i: T,
) -> T {
    pre(mc, np, s, i).x
}

pub(super) fn step<T: Scalar>(
    mc: &ModelConstants,
    np: &NeuronParams<T>,
    s: &VecK<T>,
    i: T,
) -> VecK<T> {
    let p = pre(mc, np, s, i);
    let z = heaviside(p.x);
    let mut out = VecK::zeros(4);
    out.set(U, p.u_new);
    out.set(V, p.v_new);
    out.set(Q, T::c(mc.gamma_brf) * s.get(Q) + z);
    out.set(Z, z);
    out
}

pub(super) fn jacobians<T: Scalar>(
    mc: &ModelConstants,
    np: &NeuronParams<T>,
    s: &VecK<T>,
    i: T,
    sigma: Option<T>,
) -> JacobianSlices<T> {
    let p = pre(mc, np, s, i);
    let sg = sigma.unwrap_or_else(|| mc.surrogate.deriv(p.x));
    let (dt, w, b) = (p.dt, p.omega, p.b);
    let (u, v) = (s.get(U), s.get(V));
    let gamma = T::c(mc.gamma_brf);

    let du = [T::one() + dt * b, -dt * w, -dt * u, T::zero()];
    let dv = [dt * w, T::one() + dt * b, -dt * v, T::zero()];
    let mut a = MatK::zeros(4);
    for c in 0..4 {
        let dz = sg * (du[c] - if c == Q { T::one() } else { T::zero() });
        a.set(U, c, du[c]);
        a.set(V, c, dv[c]);
        a.set(Z, c, dz);
        a.set(Q, c, dz + if c == Q { gamma } else { T::zero() });
    }

    let mut d_inp = VecK::zeros(4);
    d_inp.set(U, dt);
    d_inp.set(Q, sg * dt);
    d_inp.set(Z, sg * dt);

    let (_, dp) = divergence_boundary(dt, w);
    let col = |du: T, dv: T| {
        let mut c = VecK::zeros(4);
        c.set(U, du);
        c.set(V, dv);
        c.set(Q, sg * du);
        c.set(Z, sg * du);
        c
    };
    let d_omega = col(dt * (dp * u - v), dt * (u + dp * v));
    let d_boff = col(-dt * u, -dt * v);

    JacobianSlices {
        a,
        d_inp,
        d_consts: [d_omega, d_boff, VecK::zeros(4), VecK::zeros(4)],
    }
}
