use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::network::{LayerSpec, Network, NetworkConfig};
use crate::neuron::ModelKind;
use crate::training::loss::Target;

/// Random network with the given hidden kinds (width `m` each) and an LI
/// readout of `n_out` units. Feed-forward weights are scaled by `gain`.
pub fn random_net(
    kinds: &[ModelKind],
    m: usize,
    d: usize,
    recurrent: bool,
    n_out: usize,
    gain: f64,
    seed: u64,
) -> Network<f64> {
    let mut hidden: Vec<LayerSpec> = kinds
        .iter()
        .map(|&k| LayerSpec::new(k, m, recurrent))
        .collect();
    for h in &mut hidden {
        h.init.ff_gain = gain;
    }
    let cfg = NetworkConfig {
        d_in: d,
        hidden,
        readout: LayerSpec::new(ModelKind::Li, n_out, false),
    };
    let mut net = Network::init(&cfg, seed).unwrap();
    // Nonzero biases so every parameter column is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for layer in &mut net.layers {
        for i in 0..layer.m {
            layer.set_bias(i, rng.gen_range(-0.2..0.4));
        }
    }
    net
}

pub fn random_input(t_len: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..t_len * d)
        .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
        .collect()
}

pub fn random_per_step(t_len: usize, n_out: usize, seed: u64) -> Target {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Target::PerStep((0..t_len).map(|_| rng.gen_range(0..n_out)).collect())
}
