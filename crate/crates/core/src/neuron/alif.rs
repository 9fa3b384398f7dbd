use super::{heaviside, JacobianSlices, ModelConstants, NeuronParams};
use crate::scalar::Scalar;
use crate::tensor::{MatK, VecK};

const U: usize = 0;
const A: usize = 1;
const Z: usize = 2;

struct Pre<T> {
    a_new: T,
    thr: T,
    u_new: T,
}

#[inline(always)]
fn pre<T: Scalar>(mc: &ModelConstants, np: &NeuronParams<T>, s: &VecK<T>, i: T) -> Pre<T> {
    let (alpha, rho) = (np.f[0], np.f[1]);
    let z_prev = s.get(Z);
    let a_new = rho * s.get(A) + (T::one() - rho) * z_prev;
    let thr = T::c(mc.b_j0) + T::c(mc.beta_alif) * a_new;
    let u_new = alpha * s.get(U) + (T::one() - alpha) * i - thr * z_prev;
    Pre { a_new, thr, u_new }
}

pub(super) fn spike_argument<T: Scalar>(
    mc: &ModelConstants,
    np: &NeuronParams<T>,
    s: &VecK<T>,
    i: T,
) -> T {
    let p = pre(mc, np, s, i);
    p.u_new - p.thr
}

pub(super) fn step<T: Scalar>(
    mc: &ModelConstants,
    np: &NeuronParams<T>,
    s: &VecK<T>,
    i: T,
) -> VecK<T> {
    let p = pre(mc, np, s, i);
    let mut out = VecK::zeros(3);
    out.set(U, p.u_new);
    out.set(A, p.a_new);
    out.set(Z, heaviside(p.u_new - p.thr));
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
    let sg = sigma.unwrap_or_else(|| mc.surrogate.deriv(p.u_new - p.thr));
    let (alpha, rho) = (np.f[0], np.f[1]);
    let beta = T::c(mc.beta_alif);
    let z_prev = s.get(Z);
    let zero = T::zero();

    let da = [zero, rho, T::one() - rho];
    let mut du = [alpha, zero, zero];
    if !mc.detach_reset {
        du[A] = -beta * da[A] * z_prev;
        du[Z] = -beta * da[Z] * z_prev - p.thr;
    }
    let mut a = MatK::zeros(3);
    for c in 0..3 {
        a.set(U, c, du[c]);
        a.set(A, c, da[c]);
        a.set(Z, c, sg * (du[c] - beta * da[c]));
    }
    let mut j = JacobianSlices::zeros(3);
    j.a = a;
    j.d_inp.set(U, T::one() - alpha);
    j.d_inp.set(Z, sg * (T::one() - alpha));
    j
}
