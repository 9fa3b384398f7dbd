use super::{heaviside, interp_tau, JacobianSlices, ModelConstants, NeuronParams};
use crate::scalar::Scalar;
use crate::tensor::{MatK, VecK};

const U: usize = 0;
const W: usize = 1;
const Z: usize = 2;

struct Pre<T> {
    alpha: T,
    dalpha: T,
    beta: T,
    dbeta: T,
    a: T,
    b: T,
    u_hat: T,
    x: T,
}

#[inline(always)]
fn pre<T: Scalar>(mc: &ModelConstants, np: &NeuronParams<T>, s: &VecK<T>, i: T) -> Pre<T> {
    let (tau_u, dtau_u) = interp_tau(np.c[2], mc.tau_u_range);
    let (tau_w, dtau_w) = interp_tau(np.c[3], mc.tau_w_range);
    let alpha = (-tau_u.recip()).exp();
    let beta = (-tau_w.recip()).exp();
    let rho = T::c(mc.rho_se);
    let u_hat = alpha * s.get(U) + (T::one() - alpha) * (i - s.get(W));
    Pre {
        alpha,
        dalpha: alpha * dtau_u / (tau_u * tau_u),
        beta,
        dbeta: beta * dtau_w / (tau_w * tau_w),
        a: rho * np.c[0],
        b: rho * np.c[1],
        u_hat,
        x: u_hat - T::c(mc.theta),
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
    let u = p.u_hat * (T::one() - z);
    let w = p.beta * s.get(W) + (T::one() - p.beta) * (p.a * u + p.b * z);
    let mut out = VecK::zeros(3);
    out.set(U, u);
    out.set(W, w);
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
    let one = T::one();
    let z = heaviside(p.x);
    let u = p.u_hat * (one - z);
    // ∂u/∂û, with or without the path through the reset factor.
    let gu = if mc.detach_reset {
        one - z
    } else {
        one - z - p.u_hat * sg
    };
    let ob = one - p.beta;

    // Propagates a perturbation of û (plus a direct w term) to all rows.
    let rows = |dh: T, dw_direct: T| {
        let du = gu * dh;
        let dz = sg * dh;
        let mut c = VecK::zeros(3);
        c.set(U, du);
        c.set(Z, dz);
        c.set(W, dw_direct + ob * (p.a * du + p.b * dz));
        c
    };

    let mut a = MatK::zeros(3);
    let cols = [
        rows(p.alpha, T::zero()),
        rows(-(one - p.alpha), p.beta),
        rows(T::zero(), T::zero()),
    ];
    for (c, col) in cols.iter().enumerate() {
        for r in 0..3 {
            a.set(r, c, col.get(r));
        }
    }

    let rho = T::c(mc.rho_se);
    let mut d_ahat = VecK::zeros(3);
    d_ahat.set(W, ob * rho * u);
    let mut d_bhat = VecK::zeros(3);
    d_bhat.set(W, ob * rho * z);
    let dh_dalpha = s.get(U) - (i - s.get(W));
    let d_kappa_u = rows(dh_dalpha * p.dalpha, T::zero());
    let mut d_kappa_w = VecK::zeros(3);
    d_kappa_w.set(W, p.dbeta * (s.get(W) - (p.a * u + p.b * z)));

    JacobianSlices {
        a,
        d_inp: rows(one - p.alpha, T::zero()),
        d_consts: [d_ahat, d_bhat, d_kappa_u, d_kappa_w],
    }
}
