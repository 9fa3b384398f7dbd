//! Neuron state transitions, analytic Jacobians and surrogate gradients.
//!
//! Every spiking model carries its spike as the last state coordinate, so
//! the output is plain extraction and all surrogate derivatives live in
//! the Jacobians `∂s^t/∂s^{t-1}`, `∂s^t/∂I^t` and `∂s^t/∂c`.

mod alif;
mod brf;
mod li;
mod seadlif;
pub mod surrogate;

use serde::{Deserialize, Serialize};

use crate::error::{HyprError, Result};
use crate::scalar::Scalar;
use crate::tensor::{MatK, VecK};

pub use surrogate::{heaviside, Surrogate};

/// Maximum number of trainable per-neuron constants of any model.
pub const MAX_CONSTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Balanced resonate-and-fire; state `(u, v, q, z)`.
    Brf,
    /// Symplectic-Euler adaptive LIF; state `(u, w, z)`.
    Seadlif,
    /// Adaptive-threshold LIF; state `(u, a, z)`.
    Alif,
    /// Leaky integrator readout; state `(u)`.
    Li,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Brf,
        ModelKind::Seadlif,
        ModelKind::Alif,
        ModelKind::Li,
    ];

    pub fn state_dim(self) -> usize {
        match self {
            ModelKind::Brf => 4,
            ModelKind::Seadlif | ModelKind::Alif => 3,
            ModelKind::Li => 1,
        }
    }

    /// Number of trainable per-neuron constants.
    pub fn n_consts(self) -> usize {
        match self {
            ModelKind::Brf => 2,
            ModelKind::Seadlif => 4,
            ModelKind::Alif | ModelKind::Li => 0,
        }
    }

    /// Index of the state coordinate that is the neuron output.
    pub fn output_index(self) -> usize {
        match self {
            ModelKind::Li => 0,
            k => k.state_dim() - 1,
        }
    }

    pub fn is_spiking(self) -> bool {
        self != ModelKind::Li
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Brf => "brf",
            ModelKind::Seadlif => "seadlif",
            ModelKind::Alif => "alif",
            ModelKind::Li => "li",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = HyprError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "brf" => Ok(ModelKind::Brf),
            "seadlif" => Ok(ModelKind::Seadlif),
            "alif" => Ok(ModelKind::Alif),
            "li" => Ok(ModelKind::Li),
            _ => Err(HyprError::config(format!("unknown neuron model '{s}'"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Layer-wide constants shared by all neurons of a layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConstants {
    /// BRF integration step.
    pub dt: f64,
    /// Base firing threshold (BRF, SE-adLIF).
    pub theta: f64,
    /// BRF adaptation decay.
    pub gamma_brf: f64,
    /// SE-adLIF adaptation scale.
    pub rho_se: f64,
    /// SE-adLIF membrane time-constant interpolation range.
    pub tau_u_range: [f64; 2],
    /// SE-adLIF adaptation time-constant interpolation range.
    pub tau_w_range: [f64; 2],
    /// ALIF threshold adaptation strength.
    pub beta_alif: f64,
    /// ALIF base threshold.
    pub b_j0: f64,
    pub surrogate: Surrogate,
    /// Treat hard-reset factors as constants in the Jacobians.
    pub detach_reset: bool,
}

impl Default for ModelConstants {
    fn default() -> Self {
        ModelConstants {
            dt: 0.01,
            theta: 1.0,
            gamma_brf: 0.9,
            rho_se: 120.0,
            tau_u_range: [5.0, 25.0],
            tau_w_range: [60.0, 300.0],
            beta_alif: 1.8,
            b_j0: 0.01,
            surrogate: Surrogate::slayer(),
            detach_reset: true,
        }
    }
}

impl ModelConstants {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(HyprError::config(what.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !self.theta.is_finite() || !self.b_j0.is_finite() || !self.beta_alif.is_finite() {
            return bad("thresholds must be finite");
        }
        if !(0.0..=1.0).contains(&self.gamma_brf) {
            return bad("gamma_brf must lie in [0, 1]");
        }
        if !self.rho_se.is_finite() {
            return bad("rho_se must be finite");
        }
        for (name, [lo, hi]) in [
            ("tau_u_range", self.tau_u_range),
            ("tau_w_range", self.tau_w_range),
        ] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(HyprError::config(format!(
                    "{name} must satisfy 0 < min <= max, got [{lo}, {hi}]"
                )));
            }
        }
        self.surrogate.validate().map_err(HyprError::Config)
    }
}

/// Per-neuron values.
///
/// `c` holds trainable constants: BRF `(ω, b_offset)`, SE-adLIF
/// `(â, b̂, κ_u, κ_w)`. `f` holds fixed decay factors: ALIF `(α, ρ)`,
/// LI `(α)`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct NeuronParams<T> {
    pub c: [T; MAX_CONSTS],
    pub f: [T; 2],
}

/// Local derivatives of one state transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianSlices<T> {
    /// `∂s^t/∂s^{t-1}`.
    pub a: MatK<T>,
    /// `∂s^t/∂I^t`.
    pub d_inp: VecK<T>,
    /// `∂s^t/∂c_j` for each trainable constant.
    pub d_consts: [VecK<T>; MAX_CONSTS],
}

impl<T: Scalar> JacobianSlices<T> {
    pub fn zeros(k: usize) -> Self {
        JacobianSlices {
            a: MatK::zeros(k),
            d_inp: VecK::zeros(k),
            d_consts: [VecK::zeros(k); MAX_CONSTS],
        }
    }
}

/// Membrane time constant from the squashed trainable parameter.
pub fn interp_tau<T: Scalar>(kappa: T, range: [f64; 2]) -> (T, T) {
    let sig = T::one() / (T::one() + (-kappa).exp());
    let span = T::c(range[1] - range[0]);
    let tau = T::c(range[0]) + span * sig;
    (tau, span * sig * (T::one() - sig))
}

/// Inverse of [`interp_tau`], clamped so the result stays finite.
pub fn tau_to_kappa(tau: f64, range: [f64; 2]) -> f64 {
    let span = range[1] - range[0];
    if span <= 0.0 {
        return 0.0;
    }
    let r = ((tau - range[0]) / span).clamp(1e-6, 1.0 - 1e-6);
    (r / (1.0 - r)).ln()
}

/// Decay factor `exp(-1/τ)` for a time constant in steps.
pub fn decay(tau: f64) -> f64 {
    (-1.0 / tau).exp()
}

/// One state update `s^t = f(s^{t-1}, I^t)`.
pub fn step<T: Scalar>(
    kind: ModelKind,
    mc: &ModelConstants,
    np: &NeuronParams<T>,
    s_prev: &VecK<T>,
    i_t: T,
) -> Result<VecK<T>> {
    if s_prev.k() != kind.state_dim() {
        return Err(HyprError::dim(format!(
            "{kind} expects state dimension {}, got {}",
            kind.state_dim(),
            s_prev.k()
        )));
    }
    let s = step_unchecked(kind, mc, np, s_prev, i_t);
    if s.is_finite() {
        Ok(s)
    } else {
        Err(HyprError::non_finite())
    }
}

#[inline]
pub fn step_unchecked<T: Scalar>(
    kind: ModelKind,
    mc: &ModelConstants,
    np: &NeuronParams<T>,
    s_prev: &VecK<T>,
    i_t: T,
) -> VecK<T> {
    match kind {
        ModelKind::Brf => brf::step(mc, np, s_prev, i_t),
        ModelKind::Seadlif => seadlif::step(mc, np, s_prev, i_t),
        ModelKind::Alif => alif::step(mc, np, s_prev, i_t),
        ModelKind::Li => li::step(np, s_prev, i_t),
    }
}

/// Signed distance of the spike argument from threshold at this step.
/// Zero for the leaky integrator.
pub fn spike_argument<T: Scalar>(
    kind: ModelKind,
    mc: &ModelConstants,
    np: &NeuronParams<T>,
    s_prev: &VecK<T>,
    i_t: T,
) -> T {
    match kind {
        ModelKind::Brf => brf::spike_argument(mc, np, s_prev, i_t),
        ModelKind::Seadlif => seadlif::spike_argument(mc, np, s_prev, i_t),
        ModelKind::Alif => alif::spike_argument(mc, np, s_prev, i_t),
        ModelKind::Li => T::zero(),
    }
}

/// Analytic Jacobians at `(s_prev, i_t)`.
///
/// `sigma_override` replaces the surrogate value; passing zero isolates
/// the smooth part of the dynamics.
#[inline]
pub fn jacobians<T: Scalar>(
    kind: ModelKind,
    mc: &ModelConstants,
    np: &NeuronParams<T>,
    s_prev: &VecK<T>,
    i_t: T,
    sigma_override: Option<T>,
) -> JacobianSlices<T> {
    match kind {
        ModelKind::Brf => brf::jacobians(mc, np, s_prev, i_t, sigma_override),
        ModelKind::Seadlif => seadlif::jacobians(mc, np, s_prev, i_t, sigma_override),
        ModelKind::Alif => alif::jacobians(mc, np, s_prev, i_t, sigma_override),
        ModelKind::Li => li::jacobians(np),
    }
}

/// Keeps trainable constants inside their admissible set after an update.
pub fn project_consts<T: Scalar>(kind: ModelKind, mc: &ModelConstants, c: &mut [T]) {
    match kind {
        ModelKind::Brf => {
            let lim = T::c((1.0 - 1e-6) / mc.dt);
            c[0] = c[0].max(-lim).min(lim);
        }
        ModelKind::Seadlif => {
            c[0] = c[0].max(T::zero()).min(T::one());
            c[1] = c[1].max(T::zero()).min(T::one());
        }
        ModelKind::Alif | ModelKind::Li => {}
    }
}

/// Checks per-neuron values against model constraints.
pub fn validate_params<T: Scalar>(
    kind: ModelKind,
    mc: &ModelConstants,
    np: &NeuronParams<T>,
) -> Result<()> {
    match kind {
        ModelKind::Brf => {
            let w = np.c[0].f64();
            if (mc.dt * w).abs() >= 1.0 {
                return Err(HyprError::config(format!(
                    "BRF requires |dt*omega| < 1, got dt={} omega={w}",
                    mc.dt
                )));
            }
        }
        ModelKind::Alif | ModelKind::Li => {
            for (j, v) in
                np.f.iter()
                    .take(if kind == ModelKind::Li { 1 } else { 2 })
                    .enumerate()
            {
                let v = v.f64();
                if !(0.0..=1.0).contains(&v) {
                    return Err(HyprError::config(format!(
                        "{kind} decay factor {j} = {v} outside [0, 1]"
                    )));
                }
            }
        }
        ModelKind::Seadlif => {}
    }
    if np.c.iter().chain(np.f.iter()).any(|v| !v.is_finite()) {
        return Err(HyprError::non_finite());
    }
    Ok(())
}
