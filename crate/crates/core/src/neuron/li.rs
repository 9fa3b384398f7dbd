use super::{JacobianSlices, NeuronParams};
use crate::scalar::Scalar;
use crate::tensor::{MatK, VecK};

pub(super) fn step<T: Scalar>(np: &NeuronParams<T>, s: &VecK<T>, i: T) -> VecK<T> {
    let alpha = np.f[0];
    let mut out = VecK::zeros(1);
    out.set(0, alpha * s.get(0) + (T::one() - alpha) * i);
    out
}

pub(super) fn jacobians<T: Scalar>(np: &NeuronParams<T>) -> JacobianSlices<T> {
    let alpha = np.f[0];
    let mut j = JacobianSlices::zeros(1);
    j.a = MatK::scaled_identity(1, alpha);
    j.d_inp.set(0, T::one() - alpha);
    j
}
