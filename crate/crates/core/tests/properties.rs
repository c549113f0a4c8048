//! Property tests for the invariants of the bound propagation, region
//! selection, attack and serialization layers.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sabr::attack::{self, AttackConfig};
use sabr::bench::analysis::{relu_state_stats, StateMode};
use sabr::bench::{encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels};
use sabr::boxdom::{self, BoxTensor};
use sabr::deeppoly;
use sabr::fixtures::{self, NetShape};
use sabr::network::{checkpoint, Network};
use sabr::sabr as core;
use sabr::{Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn batch1(x: &Tensor<f64>) -> Tensor<f64> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(&shape).unwrap()
}

/// Activations after every layer for one sample.
fn layer_outputs(net: &Network<f64>, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let mut h = tape.constant(batch1(x));
    (0..net.layers.len())
        .map(|i| {
            h = net.apply_layer(&mut tape, &bound, i, h).unwrap();
            tape.value(h).data().to_vec()
        })
        .collect()
}

fn shape_with_bn(bn: bool) -> NetShape {
    NetShape { batch_norm: bn, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn box_contains_sampled_activations(seed in any::<u64>(), eps in 0.0..0.4f64, bn in any::<bool>()) {
        let mut r = rng(seed);
        let net: Network<f64> = fixtures::random_network(&mut r, &shape_with_bn(bn));
        let x = fixtures::random_input(&mut r, &net.input_shape);
        let region = BoxTensor::linf_ball(&x, eps).unwrap();
        let trace = boxdom::propagate_box(&net, &region, 1.0).unwrap();
        for _ in 0..50 {
            let p = fixtures::sample_in_box(&mut r, &region.centre, &region.radius);
            for (acts, b) in layer_outputs(&net, &p).iter().zip(&trace.boxes[1..]) {
                prop_assert!(b.contains(acts, 1e-6));
            }
        }
    }

    #[test]
    fn shrink_only_narrows_radii(seed in any::<u64>(), cs in 0.1..1.0f64) {
        let mut r = rng(seed);
        let net: Network<f64> = fixtures::random_network(&mut r, &NetShape { conv: false, ..Default::default() });
        let x = fixtures::random_input(&mut r, &net.input_shape);
        let region = BoxTensor::linf_ball(&x, 0.2).unwrap();
        // a single ReLU layer: compare both transformers on the same input box
        let pre = boxdom::propagate_box(&net, &region, 1.0).unwrap().boxes[1].clone();
        let full = boxdom::box_relu(&pre, 1.0).unwrap();
        let shrunk = boxdom::box_relu(&pre, cs).unwrap();
        for (a, b) in shrunk.radius.data().iter().zip(full.radius.data()) {
            prop_assert!(*a <= *b);
        }
    }

    #[test]
    fn larger_input_boxes_give_larger_outputs(seed in any::<u64>(), eps in 0.0..0.2f64, extra in 0.0..0.2f64) {
        let mut r = rng(seed);
        let net: Network<f64> = fixtures::random_network(&mut r, &NetShape::default());
        let x = fixtures::random_input(&mut r, &net.input_shape);
        let small = BoxTensor::new(x.clone(), Tensor::full(x.shape(), eps)).unwrap();
        let grow: Vec<f64> = (0..x.numel()).map(|_| eps + extra * r.random::<f64>()).collect();
        let large = BoxTensor::new(x.clone(), Tensor::new(x.shape(), grow).unwrap()).unwrap();
        let a = boxdom::propagate_box(&net, &small, 1.0).unwrap();
        let b = boxdom::propagate_box(&net, &large, 1.0).unwrap();
        for (sa, sb) in a.boxes.iter().zip(&b.boxes) {
            let (la, ua, lb, ub) = (sa.lower(), sa.upper(), sb.lower(), sb.upper());
            for i in 0..la.numel() {
                prop_assert!(lb.data()[i] <= la.data()[i] + 1e-12 && ub.data()[i] >= ua.data()[i] - 1e-12);
            }
        }
    }

    #[test]
    fn zero_radius_logit_diffs_are_exact(seed in any::<u64>()) {
        let mut r = rng(seed);
        let net: Network<f64> = fixtures::random_network(&mut r, &NetShape::default());
        let x = fixtures::random_input(&mut r, &net.input_shape);
        let y = net.forward(&x).unwrap();
        let t = r.random_range(0..net.num_classes);
        let out = boxdom::propagate_box(&net, &BoxTensor::point(&x), 1.0).unwrap();
        let d = boxdom::logit_diff_upper(out.output(), t).unwrap();
        prop_assert_eq!(d.upper.data()[t], 0.0);
        for i in 0..net.num_classes {
            prop_assert!((d.upper.data()[i] - (y.data()[i] - y.data()[t])).abs() <= 1e-12);
        }
    }

    #[test]
    fn deeppoly_intervals_lie_inside_box(seed in any::<u64>(), eps in 0.0..0.3f64) {
        let mut r = rng(seed);
        let net: Network<f64> = fixtures::random_network(&mut r, &NetShape::default());
        let x = fixtures::random_input(&mut r, &net.input_shape);
        let region = BoxTensor::linf_ball(&x, eps).unwrap();
        let trace = boxdom::propagate_box(&net, &region, 1.0).unwrap();
        for (e, b) in deeppoly::deeppoly_bounds(&net, &region).unwrap().iter().zip(&trace.boxes[1..]) {
            let (bl, bu) = (b.lower(), b.upper());
            for i in 0..e.lower.numel() {
                prop_assert!(e.lower.data()[i] >= bl.data()[i] && e.upper.data()[i] <= bu.data()[i]);
            }
        }
    }

    #[test]
    fn regions_stay_in_the_ball(
        xs in prop::collection::vec(0.0..=1.0f64, 1..40),
        shift in prop::collection::vec(-1.0..=1.0f64, 40),
        eps in 0.0..0.5f64,
        lambda in 0.001..=1.0f64,
    ) {
        let n = xs.len();
        let x = Tensor::new(&[1, n], xs.clone()).unwrap();
        let star: Vec<f64> = xs.iter().zip(&shift).map(|(&a, &s)| (a + s * eps).clamp(0.0, 1.0)).collect();
        let star = Tensor::new(&[1, n], star).unwrap();
        let region = core::regions_from_adversary(&x, &star, eps, lambda).unwrap();
        let ball = BoxTensor::linf_ball(&x, eps).unwrap();
        let (lo, hi, blo, bhi) = (region.lower(), region.upper(), ball.lower(), ball.upper());
        let tau = lambda * eps;
        for i in 0..n {
            // exact on the bounds, up to centre/radius rounding on the box
            let (l, u) = core::region_bounds(xs[i], star.data()[i], eps, tau);
            prop_assert!(l <= u && l >= (xs[i] - eps).max(0.0) && u <= (xs[i] + eps).min(1.0));
            prop_assert!(lo.data()[i] >= blo.data()[i] - 1e-12 && hi.data()[i] <= bhi.data()[i] + 1e-12);
            prop_assert!(lo.data()[i] >= -1e-12 && hi.data()[i] <= 1.0 + 1e-12);
            prop_assert!(region.radius.data()[i] <= tau + 1e-12);
        }
        if lambda == 1.0 {
            prop_assert_eq!(region, ball);
        }
    }

    #[test]
    fn robust_loss_sandwiches_the_margin(seed in any::<u64>(), eps in 0.01..0.3f64, lambda in 0.05..=1.0f64) {
        let mut r = rng(seed);
        let net: Network<f64> = fixtures::random_network(&mut r, &NetShape::default());
        let x = fixtures::random_input(&mut r, &net.input_shape);
        let t = r.random_range(0..net.num_classes);
        let cfg = AttackConfig { steps: 3, ..AttackConfig::training() };
        let region = core::select_region(&net, &x, t, eps, lambda, &cfg).unwrap();
        let loss = core::robust_loss(&net, &region, t, 1.0).unwrap();
        let (m, d) = core::loss_decomposition(&net, &region, t).unwrap();
        prop_assert!(d >= 0.0);
        let worst = m + d;
        if worst > 0.0 {
            prop_assert!(loss > worst && loss < worst + (net.num_classes as f64).ln());
        }
    }

    #[test]
    fn pgd_stays_in_ball_and_repeats(seed in any::<u64>(), radius in 0.0..0.3f64) {
        let mut r = rng(seed);
        let net: Network<f64> = fixtures::random_network(&mut r, &NetShape::default());
        let x = fixtures::random_input(&mut r, &net.input_shape);
        let t = r.random_range(0..net.num_classes);
        let cfg = AttackConfig { steps: 5, restarts: 2, seed, ..AttackConfig::training() };
        let a = attack::pgd(&net, &x, t, radius, &cfg).unwrap();
        let b = attack::pgd(&net, &x, t, radius, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        for (p, q) in a.data().iter().zip(x.data()) {
            prop_assert!((p - q).abs() <= radius + 1e-12 && (0.0..=1.0).contains(p));
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward(seed in any::<u64>(), bn in any::<bool>()) {
        let mut r = rng(seed);
        let net: Network<f32> = fixtures::random_network(&mut r, &shape_with_bn(bn));
        let (manifest, blob) = checkpoint::to_bytes(&net);
        let back = checkpoint::from_bytes(&manifest, &blob).unwrap();
        prop_assert_eq!(checkpoint::to_bytes(&back), (manifest, blob));
        let x = fixtures::random_input::<f32, _>(&mut r, &net.input_shape);
        let (ya, yb) = (net.forward(&x).unwrap(), back.forward(&x).unwrap());
        prop_assert!(ya.data().iter().zip(yb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn idx_round_trip(n in 1usize..6, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut file = vec![0, 0, 8, 3];
        for d in [n, rows, cols] {
            file.extend_from_slice(&(d as u32).to_be_bytes());
        }
        file.extend((0..n * rows * cols).map(|_| r.random::<u8>()));
        let images: Tensor<f32> = parse_idx_images(&file, "mem".as_ref()).unwrap();
        prop_assert_eq!(images.shape(), &[n, 1, rows, cols]);
        prop_assert_eq!(encode_idx_images(&images).unwrap(), file);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..10)).collect();
        prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&labels).unwrap(), "mem".as_ref()).unwrap(), labels);
    }

    #[test]
    fn relu_state_fractions_sum_to_one(seed in any::<u64>(), eps in 0.0..0.3f64) {
        let mut r = rng(seed);
        let net: Network<f64> = fixtures::random_network(&mut r, &NetShape::default());
        let xs: Vec<Tensor<f64>> = (0..3).map(|_| fixtures::random_input(&mut r, &net.input_shape)).collect();
        let mut shape = vec![3];
        shape.extend_from_slice(&net.input_shape);
        let inputs = Tensor::new(&shape, xs.iter().flat_map(|x| x.data().to_vec()).collect()).unwrap();
        let region = relu_state_stats(&net, &inputs, StateMode::Region, eps).unwrap();
        for f in &region.per_layer {
            prop_assert!((f.active + f.inactive + f.unstable - 1.0).abs() <= 1e-9);
        }
        let point = relu_state_stats(&net, &inputs, StateMode::Point, eps).unwrap();
        prop_assert!(point.per_layer.iter().all(|f| f.unstable == 0.0));
    }
}
