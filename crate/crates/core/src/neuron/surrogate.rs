use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Pseudo-derivative used in place of dΘ(x)/dx.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Surrogate {
    /// `alpha · c · exp(-alpha |x|)`.
    Slayer { alpha: f64, c: f64 },
    /// `gamma · [(1 + p) G(x; sigma1) - 2p G(x; sigma2)]` with zero-mean
    /// Gaussian densities G.
    DoubleGaussian {
        sigma1: f64,
        sigma2: f64,
        p: f64,
        gamma: f64,
    },
}

impl Default for Surrogate {
    fn default() -> Self {
        Surrogate::slayer()
    }
}

fn gaussian<T: Scalar>(x: T, sigma: f64) -> T {
    let s = T::c(sigma);
    let z = x / s;
    (-(z * z) * T::c(0.5)).exp() / (s * T::c((2.0 * std::f64::consts::PI).sqrt()))
}

impl Surrogate {
    pub fn slayer() -> Self {
        Surrogate::Slayer { alpha: 5.0, c: 0.2 }
    }

    pub fn double_gaussian() -> Self {
        Surrogate::DoubleGaussian {
            sigma1: 0.5,
            sigma2: 3.0,
            p: 0.15,
            gamma: 0.5,
        }
    }

    #[inline]
    pub fn deriv<T: Scalar>(&self, x: T) -> T {
        match *self {
            Surrogate::Slayer { alpha, c } => {
                let a = T::c(alpha);
                a * T::c(c) * (-a * x.abs()).exp()
            }
            Surrogate::DoubleGaussian {
                sigma1,
                sigma2,
                p,
                gamma,
            } => {
                T::c(gamma)
                    * (T::c(1.0 + p) * gaussian(x, sigma1) - T::c(2.0 * p) * gaussian(x, sigma2))
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            Surrogate::Slayer { alpha, c } => alpha > 0.0 && c.is_finite() && alpha.is_finite(),
            Surrogate::DoubleGaussian {
                sigma1,
                sigma2,
                p,
                gamma,
            } => sigma1 > 0.0 && sigma2 > 0.0 && p.is_finite() && gamma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid surrogate parameters {self:?}"))
        }
    }
}

/// Strict Heaviside step: 1 iff `x > 0`.
#[inline]
pub fn heaviside<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}
