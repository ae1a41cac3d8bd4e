use dsgate::gating::{
    concat_width, dsg_forward, group_assign, msg_forward, DsgParams, LogitOffset, Mode, MsgParams, NoiseSource,
};
use dsgate::layers::Conv;
use dsgate::ops::softmax_over_channels;
use dsgate::tensor::Dims;
use dsgate::Tensor64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Case {
    y: Tensor64,
    paths: Vec<Tensor64>,
    params: MsgParams<f64>,
    n: usize,
    groups: usize,
}

fn case(seed: u64, raw: bool) -> Case {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = rng.random_range(1..=3);
    let c = 2 * half;
    let n = rng.random_range(1..=4);
    let groups = rng.random_range(2..=n + 2);
    let b = rng.random_range(1..=3);
    let mut conv = || Conv::uniform_bound(c, groups, 1, 0.5, &mut rng);
    let params = MsgParams::new(conv(), conv(), conv(), 1.9, 0.1)
        .unwrap()
        .with_offset(if raw { LogitOffset::RawScale } else { LogitOffset::Noise });
    let y = Tensor64::from_fn(Dims::new(b, c, 1, 1), |_, _, _, _| rng.random_range(0.0..=3.0));
    let paths = (0..n + 2)
        .map(|_| Tensor64::from_fn(Dims::new(b, half, 2, 3), |_, _, _, _| rng.random_range(-1.0..=1.0)))
        .collect();
    Case { y, paths, params, n, groups }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn weights_on_simplex_and_temperature_bounded(seed in any::<u64>(), raw in any::<bool>(), train in any::<bool>()) {
        let k = case(seed, raw);
        let gmap = group_assign(k.n, k.groups).unwrap();
        let mode = if train { Mode::Train } else { Mode::Eval };
        let o = msg_forward(&k.y, &k.paths, &k.params, &gmap, &mut NoiseSource::new(seed, mode)).unwrap();
        let b = k.y.dims().b;
        for bi in 0..b {
            let row: Vec<f64> = (0..k.groups).map(|g| o.w_msg.get(bi, g, 0, 0)).collect();
            prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)), "{row:?}");
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            // past a gap of ln(2^53) the top weight rounds to exactly one
            let z: Vec<f64> = (0..k.groups).map(|g| o.combined.get(bi, g, 0, 0) / o.temp.get(bi, g, 0, 0)).collect();
            let gap = z.iter().copied().fold(f64::MIN, f64::max) - z.iter().copied().fold(f64::MAX, f64::min);
            if gap < 36.0 {
                prop_assert!(row.iter().all(|&w| w > 0.0 && w < 1.0), "{row:?}");
            }
        }
        prop_assert!(o.temp.data().iter().all(|&t| t > 0.1 && t < 2.0));
    }

    #[test]
    fn noise_is_reproducible_and_absent_in_eval(seed in any::<u64>(), other in any::<u64>()) {
        let k = case(seed, false);
        let gmap = group_assign(k.n, k.groups).unwrap();
        let run = |s, mode| msg_forward(&k.y, &k.paths, &k.params, &gmap, &mut NoiseSource::new(s, mode)).unwrap();
        prop_assert!(run(seed, Mode::Train).w_msg.bit_eq(&run(seed, Mode::Train).w_msg));
        prop_assert!(run(seed, Mode::Eval).w_msg.bit_eq(&run(other, Mode::Eval).w_msg));
        prop_assert!(run(other, Mode::Eval).eps.max_abs() == 0.0);
    }

    #[test]
    fn common_logit_shift_leaves_weights(seed in any::<u64>(), shift in -20.0f64..20.0, t_bias in -3.0f64..3.0) {
        let mut k = case(seed, false);
        // a shared temperature across groups; per-group temperatures would rescale the shift
        k.params.temp.weight.data_mut().fill(0.0);
        k.params.temp.bias.data_mut().fill(t_bias);
        let gmap = group_assign(k.n, k.groups).unwrap();
        let mut shifted = k.params.clone();
        for v in shifted.gate.bias.data_mut() {
            *v += shift;
        }
        let a = msg_forward(&k.y, &k.paths, &k.params, &gmap, &mut NoiseSource::eval()).unwrap();
        let b = msg_forward(&k.y, &k.paths, &shifted, &gmap, &mut NoiseSource::eval()).unwrap();
        prop_assert!(a.w_msg.sub(&b.w_msg).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn lower_temperature_sharpens(
        logits in prop::collection::vec(-3.0f64..3.0, 2..6),
        t in 0.2f64..2.0,
        factor in 0.1f64..0.95,
    ) {
        let k = logits.len();
        prop_assume!(logits.iter().any(|&v| (v - logits[0]).abs() > 1e-6));
        let z = Tensor64::new(Dims::new(1, k, 1, 1), logits).unwrap();
        let hot = softmax_over_channels(&z, &Tensor64::full(z.dims(), t)).unwrap();
        let cold = softmax_over_channels(&z, &Tensor64::full(z.dims(), t * factor)).unwrap();
        let max = |w: &Tensor64| w.data().iter().copied().fold(f64::MIN, f64::max);
        prop_assert!(max(&cold) > max(&hot));
    }

    #[test]
    fn dsg_gates_attenuate(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 2 * rng.random_range(1..=3);
        let n = rng.random_range(1..=4);
        let cp = concat_width(c, n);
        let p = DsgParams::new(c, n, Conv::uniform_bound(c, cp, 1, 2.0, &mut rng)).unwrap();
        let y = Tensor64::from_fn(Dims::new(2, c, 1, 1), |_, _, _, _| rng.random_range(-1.0..=4.0));
        let x = Tensor64::from_fn(Dims::new(2, cp, 3, 2), |_, _, _, _| rng.random_range(-5.0..=5.0));
        let o = dsg_forward(&y, &x, &p).unwrap();
        prop_assert!(o.w.data().iter().all(|&w| w > 0.0 && w < 1.0));
        prop_assert!(o.x_out.data().iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()));
    }

    #[test]
    fn partition_is_contiguous_and_shallow_heavy(n in 1usize..10, g in 2usize..12) {
        let paths = n + 2;
        prop_assume!(g <= paths);
        let map = group_assign(n, g).unwrap();
        let groups = map.groups();
        prop_assert_eq!(groups.len(), g);
        let flat: Vec<usize> = groups.iter().flatten().copied().collect();
        prop_assert_eq!(flat, (0..paths).collect::<Vec<_>>());
        let sizes: Vec<usize> = groups.iter().map(|v| v.len()).collect();
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]), "{sizes:?}");
        prop_assert!(sizes[0] - sizes[g - 1] <= 1);
    }
}

#[test]
fn too_many_groups_rejected() {
    assert!(group_assign(2, 5).is_err());
    assert!(group_assign(2, 1).is_err());
}
