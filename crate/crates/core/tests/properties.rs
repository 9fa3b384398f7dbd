use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hypr::container::{decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset};
use hypr::data::cue::{generate_cue_dataset, CueTaskSpec};
use hypr::data::split_indices;
use hypr::engine::{EngineOptions, Gradients};
use hypr::neuron::ModelKind;
use hypr::tensor::mat::{MatK, ScanPair, VecK};
use hypr::tensor::scan::inclusive_scan;
use hypr::training::loss::Target;
use hypr::training::optim::{clip_gradient, Adam, AdamConfig};
use hypr::verify::{engine_gradient, gain_for, random_problem};

fn rel_err(a: &Gradients<f64>, b: &Gradients<f64>) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b.iter()) {
        num = num.max((x - y).abs());
        den = den.max(y.abs());
    }
    num / den.max(1e-300)
}

fn pair(k: usize, rng: &mut ChaCha8Rng) -> ScanPair<f64> {
    let m: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ScanPair::new(
        MatK::from_rows(k, &m).unwrap(),
        VecK::from_slice(&v).unwrap(),
    )
    .unwrap()
}

fn max_diff(a: &ScanPair<f64>, b: &ScanPair<f64>) -> f64 {
    let k = a.m.k();
    let mut d = 0.0f64;
    for r in 0..k {
        d = d.max((a.v.get(r) - b.v.get(r)).abs());
        for c in 0..k {
            d = d.max((a.m.get(r, c) - b.m.get(r, c)).abs());
        }
    }
    d
}

/// Hidden-layer models; the LI readout is present in every problem.
fn kind() -> impl Strategy<Value = ModelKind> {
    prop_oneof![
        Just(ModelKind::Brf),
        Just(ModelKind::Seadlif),
        Just(ModelKind::Alif)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scan_pairs_associate(k in 1usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (pair(k, &mut rng), pair(k, &mut rng), pair(k, &mut rng));
        let left = a.combine(&b).combine(&c);
        let right = a.combine(&b.combine(&c));
        prop_assert!(max_diff(&left, &right) <= 1e-12);
    }

    #[test]
    fn scan_matches_left_fold(k in 1usize..=4, n in 1usize..80, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<_> = (0..n).map(|_| pair(k, &mut rng)).collect();
        let out = inclusive_scan(&items, ScanPair::identity(k));
        let mut acc = ScanPair::identity(k);
        for (j, it) in items.iter().enumerate() {
            acc = acc.combine(it);
            let scale = 1.0 + max_diff(&acc, &ScanPair::identity(k));
            prop_assert!(max_diff(&out[j], &acc) <= 1e-12 * scale);
        }
    }

    #[test]
    fn splits_partition_the_index_set(n in 3usize..500, a in 0.1f64..0.5, seed in any::<u64>()) {
        let parts = split_indices(n, &[a, 1.0 - a], seed).unwrap();
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(parts, split_indices(n, &[a, 1.0 - a], seed).unwrap());
    }

    #[test]
    fn cue_classes_are_balanced(half in 1usize..40, delay in 0usize..30, seed in any::<u64>()) {
        let spec = CueTaskSpec { n_samples: 2 * half, t_pat: 4, t_delay: delay, p_active: 0.5, seed };
        let ds = generate_cue_dataset(&spec).unwrap();
        let ones = ds.samples.iter().filter(|s| matches!(s.target, Target::Class(1))).count();
        prop_assert_eq!(ones, half);
        prop_assert!(ds.samples.iter().all(|s| s.x.iter().all(|v| (0.0..=1.0).contains(v))));
        prop_assert_eq!(decode_dataset(&encode_dataset(&ds).unwrap()).unwrap(), ds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn clipping_is_idempotent(k in kind(), scale in 1e-3f64..1e3, max in 1e-2f64..10.0, seed in any::<u64>()) {
        let p = random_problem(&[k], 3, 2, true, 2, 4, 1.0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Gradients::zeros(&p.net);
        g.iter_mut().for_each(|v| *v = scale * rng.gen_range(-1.0..1.0));
        clip_gradient(&mut g, Some(max));
        prop_assert!(g.norm() <= max * (1.0 + 1e-12));
        let once = g.clone();
        clip_gradient(&mut g, Some(max));
        prop_assert!(rel_err(&g, &once) <= 1e-15);
    }

    #[test]
    fn adaptation_parameters_stay_in_unit_interval(lr in 1e-3f64..10.0, seed in any::<u64>()) {
        let mut p = random_problem(&[ModelKind::Seadlif], 4, 2, true, 2, 8, 1.0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam = Adam::new(&p.net, AdamConfig::default());
        for _ in 0..3 {
            let mut g = Gradients::zeros(&p.net);
            g.iter_mut().for_each(|v| *v = rng.gen_range(-100.0..100.0));
            adam.update(&mut p.net, &g, lr).unwrap();
            p.net.project();
            let l = &p.net.layers[0];
            for i in 0..l.m {
                let c = l.consts(i);
                prop_assert!((0.0..=1.0).contains(&c[0]) && (0.0..=1.0).contains(&c[1]));
            }
        }
    }

    #[test]
    fn checkpoints_round_trip(k in kind(), seed in any::<u64>()) {
        let p = random_problem(&[k], 5, 3, true, 3, 4, 1.0, seed).unwrap();
        let adam = Adam::new(&p.net, AdamConfig::default());
        let ck = decode_checkpoint::<f64>(&encode_checkpoint(&p.net, Some(&adam)).unwrap()).unwrap();
        prop_assert_eq!(&ck.net, &p.net);
        prop_assert!(ck.adam.is_some());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn window_length_does_not_change_gradients(
        k in kind(),
        m in 2usize..=16,
        d in 1usize..=8,
        t_len in prop::sample::select(vec![12usize, 24, 36, 60]),
        seed in any::<u64>(),
    ) {
        let p = random_problem(&[k], m, d, true, 2, t_len, gain_for(k), seed).unwrap();
        let full = engine_gradient(&p, t_len, EngineOptions::default()).unwrap();
        for lambda in (1..t_len).filter(|l| t_len % l == 0) {
            let g = engine_gradient(&p, lambda, EngineOptions::default()).unwrap();
            prop_assert!(rel_err(&g, &full) <= 1e-10, "lambda {} error {:e}", lambda, rel_err(&g, &full));
        }
    }
}
