//! Layer parameters, network topology and initialization.
//!
//! Each neuron owns one parameter row laid out as
//! `[w_ff (d) | w_rec (m, recurrent layers only) | bias | consts (nc)]`.
//! Gradients and eligibility columns share that layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HyprError, Result};
use crate::neuron::{
    decay, project_consts, tau_to_kappa, validate_params, ModelConstants, ModelKind, NeuronParams,
};
use crate::scalar::Scalar;

/// Scalar initialization distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Dist {
    Uniform([f64; 2]),
    Normal([f64; 2]),
    Const(f64),
}

impl Dist {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Dist::Uniform([lo, hi]) if hi > lo => rng.gen_range(lo..hi),
            Dist::Uniform([lo, _]) => lo,
            Dist::Normal([mean, std]) if std > 0.0 => Normal::new(mean, std)
                .map(|n| n.sample(rng))
                .unwrap_or(mean),
            Dist::Normal([mean, _]) => mean,
            Dist::Const(v) => v,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            Dist::Uniform([lo, hi]) => lo.is_finite() && hi.is_finite() && hi >= lo,
            Dist::Normal([m, s]) => m.is_finite() && s.is_finite() && s >= 0.0,
            Dist::Const(v) => v.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(HyprError::config(format!(
                "invalid distribution for {what}: {self:?}"
            )))
        }
    }
}

/// Initialization of one layer's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerInit {
    /// Feed-forward weights are drawn from `U(-g/√d, g/√d)`.
    pub ff_gain: f64,
    /// Recurrent weights are drawn from `U(-g/√m, g/√m)`.
    pub rec_gain: f64,
    pub bias: Dist,
    pub omega: Dist,
    pub b_offset: Dist,
    pub tau_u: Dist,
    pub tau_w: Dist,
    pub tau_a: Dist,
    pub tau_out: Dist,
}

impl Default for LayerInit {
    fn default() -> Self {
        LayerInit {
            ff_gain: 1.0,
            rec_gain: 1.0,
            bias: Dist::Const(0.0),
            omega: Dist::Uniform([5.0, 10.0]),
            b_offset: Dist::Uniform([0.1, 1.0]),
            tau_u: Dist::Uniform([5.0, 25.0]),
            tau_w: Dist::Uniform([60.0, 300.0]),
            tau_a: Dist::Normal([150.0, 10.0]),
            tau_out: Dist::Uniform([15.0, 25.0]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: ModelKind,
    pub m: usize,
    #[serde(default)]
    pub recurrent: bool,
    #[serde(default)]
    pub constants: ModelConstants,
    #[serde(default)]
    pub init: LayerInit,
}

impl LayerSpec {
    pub fn new(kind: ModelKind, m: usize, recurrent: bool) -> Self {
        LayerSpec {
            kind,
            m,
            recurrent,
            constants: ModelConstants::default(),
            init: LayerInit::default(),
        }
    }
}

/// Topology: hidden layers followed by exactly one leaky-integrator readout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub d_in: usize,
    pub hidden: Vec<LayerSpec>,
    pub readout: LayerSpec,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(HyprError::config("input dimension must be at least 1"));
        }
        if self.hidden.is_empty() {
            return Err(HyprError::config("at least one hidden layer is required"));
        }
        for (l, spec) in self.hidden.iter().enumerate() {
            if spec.kind == ModelKind::Li {
                return Err(HyprError::config(format!(
                    "hidden layer {l}: leaky integrators are only allowed as the readout"
                )));
            }
        }
        if self.readout.kind != ModelKind::Li {
            return Err(HyprError::config(
                "the readout layer must be a leaky integrator",
            ));
        }
        if self.readout.recurrent {
            return Err(HyprError::config("the readout layer cannot be recurrent"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub kind: ModelKind,
    /// Neuron count.
    pub m: usize,
    /// Input width.
    pub d: usize,
    pub recurrent: bool,
    pub mc: ModelConstants,
    /// Row-major `m × p` parameters.
    pub w: Vec<T>,
    /// Fixed per-neuron decay factors.
    pub fixed: Vec<[T; 2]>,
}

impl<T: Scalar> Layer<T> {
    /// A layer with all-zero weights and default per-neuron values.
    pub fn zeros(kind: ModelKind, m: usize, d: usize, recurrent: bool, mc: ModelConstants) -> Self {
        let m_rec = if recurrent { m } else { 0 };
        let p = d + m_rec + 1 + kind.n_consts();
        Layer {
            kind,
            m,
            d,
            recurrent,
            mc,
            w: vec![T::zero(); m * p],
            fixed: vec![[T::zero(); 2]; m],
        }
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.kind.state_dim()
    }

    #[inline]
    pub fn m_rec(&self) -> usize {
        if self.recurrent {
            self.m
        } else {
            0
        }
    }

    /// Width of the input-current factor `[x̄ | y^{t-1} | 1]`.
    #[inline]
    pub fn p_in(&self) -> usize {
        self.d + self.m_rec() + 1
    }

    #[inline]
    pub fn n_consts(&self) -> usize {
        self.kind.n_consts()
    }

    /// Parameters per neuron.
    #[inline]
    pub fn p(&self) -> usize {
        self.p_in() + self.n_consts()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        let p = self.p();
        &self.w[i * p..(i + 1) * p]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let p = self.p();
        &mut self.w[i * p..(i + 1) * p]
    }

    #[inline]
    pub fn w_ff(&self, i: usize, j: usize) -> T {
        self.w[i * self.p() + j]
    }

    #[inline]
    pub fn w_rec(&self, i: usize, j: usize) -> T {
        debug_assert!(self.recurrent);
        self.w[i * self.p() + self.d + j]
    }

    #[inline]
    pub fn bias(&self, i: usize) -> T {
        self.w[i * self.p() + self.d + self.m_rec()]
    }

    pub fn set_w_ff(&mut self, i: usize, j: usize, v: T) {
        let p = self.p();
        self.w[i * p + j] = v;
    }

    pub fn set_w_rec(&mut self, i: usize, j: usize, v: T) {
        assert!(self.recurrent, "layer has no recurrent weights");
        let (p, d) = (self.p(), self.d);
        self.w[i * p + d + j] = v;
    }

    pub fn set_bias(&mut self, i: usize, v: T) {
        let (p, off) = (self.p(), self.d + self.m_rec());
        self.w[i * p + off] = v;
    }

    /// Trainable constants of neuron `i`.
    pub fn consts(&self, i: usize) -> &[T] {
        &self.row(i)[self.p_in()..]
    }

    pub fn consts_mut(&mut self, i: usize) -> &mut [T] {
        let p_in = self.p_in();
        &mut self.row_mut(i)[p_in..]
    }

    #[inline]
    pub fn neuron_params(&self, i: usize) -> NeuronParams<T> {
        let mut np = NeuronParams::default();
        let c = self.consts(i);
        np.c[..c.len()].copy_from_slice(c);
        np.f = self.fixed[i];
        np
    }

    /// Zeroes every recurrent weight.
    pub fn clear_recurrent(&mut self) {
        if !self.recurrent {
            return;
        }
        let (p, d, m) = (self.p(), self.d, self.m);
        for i in 0..m {
            self.w[i * p + d..i * p + d + m].fill(T::zero());
        }
    }

    /// Clips trainable constants into their admissible set.
    pub fn project(&mut self) {
        let (kind, mc) = (self.kind, self.mc.clone());
        for i in 0..self.m {
            project_consts(kind, &mc, self.consts_mut(i));
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.len() != self.m * self.p() || self.fixed.len() != self.m {
            return Err(HyprError::dim(format!(
                "layer storage holds {} weights for {} neurons of width {}",
                self.w.len(),
                self.m,
                self.p()
            )));
        }
        self.mc.validate()?;
        for i in 0..self.m {
            validate_params(self.kind, &self.mc, &self.neuron_params(i))?;
        }
        if self.w.iter().any(|v| !v.is_finite()) {
            return Err(HyprError::non_finite());
        }
        Ok(())
    }

    /// Casts to another precision.
    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            kind: self.kind,
            m: self.m,
            d: self.d,
            recurrent: self.recurrent,
            mc: self.mc.clone(),
            w: self.w.iter().map(|v| U::c(v.f64())).collect(),
            fixed: self
                .fixed
                .iter()
                .map(|f| [U::c(f[0].f64()), U::c(f[1].f64())])
                .collect(),
        }
    }
}

/// Hidden layers followed by the readout (always last).
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    /// Builds a network from explicit layers; the last one is the readout.
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(HyprError::config(
                "a network needs a hidden layer and a readout",
            ));
        }
        for w in layers.windows(2) {
            if w[1].d != w[0].m {
                return Err(HyprError::dim(format!(
                    "layer of width {} feeds a layer expecting {} inputs",
                    w[0].m, w[1].d
                )));
            }
        }
        let net = Network { layers };
        for l in &net.layers {
            l.validate()?;
        }
        Ok(net)
    }

    /// Draws parameters for `cfg` from a seeded generator.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(cfg.hidden.len() + 1);
        let mut d = cfg.d_in;
        for spec in cfg.hidden.iter().chain(std::iter::once(&cfg.readout)) {
            layers.push(init_layer(spec, d, &mut rng)?);
            d = spec.m;
        }
        Network::from_layers(layers)
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d
    }

    pub fn n_out(&self) -> usize {
        self.readout().m
    }

    pub fn readout(&self) -> &Layer<T> {
        self.layers.last().expect("network has a readout")
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len()).sum()
    }

    pub fn project(&mut self) {
        for l in &mut self.layers {
            l.project();
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }
}

fn sample_tau(d: &Dist, rng: &mut ChaCha8Rng) -> f64 {
    d.sample(rng).max(1e-3)
}

fn init_layer<T: Scalar>(spec: &LayerSpec, d: usize, rng: &mut ChaCha8Rng) -> Result<Layer<T>> {
    if spec.m == 0 {
        return Err(HyprError::config("layers need at least one neuron"));
    }
    let init = &spec.init;
    for (name, dist) in [
        ("bias", &init.bias),
        ("omega", &init.omega),
        ("b_offset", &init.b_offset),
        ("tau_u", &init.tau_u),
        ("tau_w", &init.tau_w),
        ("tau_a", &init.tau_a),
        ("tau_out", &init.tau_out),
    ] {
        dist.validate(name)?;
    }
    spec.constants.validate()?;
    let mut layer = Layer::zeros(spec.kind, spec.m, d, spec.recurrent, spec.constants.clone());
    let ff = init.ff_gain / (d as f64).sqrt();
    let rec = init.rec_gain / (spec.m as f64).sqrt();
    for i in 0..spec.m {
        for j in 0..d {
            layer.set_w_ff(i, j, T::c(uniform_sym(rng, ff)));
        }
        if spec.recurrent {
            for j in 0..spec.m {
                layer.set_w_rec(i, j, T::c(uniform_sym(rng, rec)));
            }
        }
        layer.set_bias(i, T::c(init.bias.sample(rng)));
        let mc = &spec.constants;
        match spec.kind {
            ModelKind::Brf => {
                let c = layer.consts_mut(i);
                c[0] = T::c(init.omega.sample(rng));
                c[1] = T::c(init.b_offset.sample(rng));
            }
            ModelKind::Seadlif => {
                let vals = [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    tau_to_kappa(sample_tau(&init.tau_u, rng), mc.tau_u_range),
                    tau_to_kappa(sample_tau(&init.tau_w, rng), mc.tau_w_range),
                ];
                for (c, v) in layer.consts_mut(i).iter_mut().zip(vals) {
                    *c = T::c(v);
                }
            }
            ModelKind::Alif => {
                let alpha = decay(sample_tau(&init.tau_u, rng));
                let rho = decay(sample_tau(&init.tau_a, rng));
                layer.fixed[i] = [T::c(alpha), T::c(rho)];
            }
            ModelKind::Li => {
                layer.fixed[i] = [T::c(decay(sample_tau(&init.tau_out, rng))), T::zero()];
            }
        }
    }
    layer.validate()?;
    Ok(layer)
}

fn uniform_sym(rng: &mut ChaCha8Rng, a: f64) -> f64 {
    if a > 0.0 {
        rng.gen_range(-a..a)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            d_in: 3,
            hidden: vec![LayerSpec::new(ModelKind::Brf, 4, true)],
            readout: LayerSpec::new(ModelKind::Li, 2, false),
        }
    }

    #[test]
    fn row_layout_addresses_each_block() {
        let mut l = Layer::<f64>::zeros(ModelKind::Brf, 2, 3, true, ModelConstants::default());
        assert_eq!((l.p_in(), l.p()), (6, 8));
        l.set_w_ff(1, 2, 1.0);
        l.set_w_rec(1, 0, 2.0);
        l.set_bias(1, 3.0);
        l.consts_mut(1)[1] = 4.0;
        assert_eq!(l.row(1), &[0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 0.0, 4.0]);
        assert_eq!(l.neuron_params(1).c[1], 4.0);
        l.clear_recurrent();
        assert_eq!(l.w_rec(1, 0), 0.0);
    }

    #[test]
    fn init_is_seeded_and_valid() {
        let a = Network::<f64>::init(&cfg(), 7).unwrap();
        let b = Network::<f64>::init(&cfg(), 7).unwrap();
        let c = Network::<f64>::init(&cfg(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.n_out(), 2);
        assert_eq!(a.n_params(), 4 * (3 + 4 + 1 + 2) + 2 * (4 + 1));
        let alpha = a.readout().fixed[0][0];
        assert!(alpha > (-1.0_f64 / 15.0).exp() && alpha < (-1.0_f64 / 25.0).exp());
    }

    #[test]
    fn topology_rules() {
        let mut c = cfg();
        c.hidden[0].kind = ModelKind::Li;
        assert!(Network::<f64>::init(&c, 0).is_err());
        let mut c = cfg();
        c.readout.kind = ModelKind::Alif;
        assert!(Network::<f64>::init(&c, 0).is_err());
        let mut c = cfg();
        c.hidden.clear();
        assert!(Network::<f64>::init(&c, 0).is_err());
        let mut c = cfg();
        c.hidden[0].init.omega = Dist::Const(150.0);
        assert!(Network::<f64>::init(&c, 0).is_err());
    }

    #[test]
    fn cast_round_trip_preserves_shape() {
        let a = Network::<f64>::init(&cfg(), 1).unwrap();
        let b: Network<f32> = a.cast();
        assert_eq!(b.n_params(), a.n_params());
        let c: Network<f64> = b.cast();
        for (x, y) in a.layers[0].w.iter().zip(&c.layers[0].w) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
