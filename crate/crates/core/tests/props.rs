use proptest::prelude::*;

use auxq::autodiff::Graph;
use auxq::quant::{self, eval, QuantScheme};
use auxq::Tensor;

fn vec_in(lo: f64, hi: f64, max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..=hi, 1..max_len)
}

proptest! {
    #[test]
    fn unit_output_is_a_grid_point(xs in vec_in(0.0, 1.0, 64), bits in 1u32..=8) {
        let n = ((1u64 << bits) - 1) as f64;
        let q = eval::quantize_unit(&Tensor::new(&[xs.len()], xs.clone()).unwrap(), bits).unwrap();
        for &v in q.data() {
            prop_assert_eq!(v.to_bits(), ((v * n).round() / n).to_bits());
        }
    }

    #[test]
    fn unit_is_idempotent_and_monotone(mut xs in vec_in(0.0, 1.0, 64), bits in 1u32..=8) {
        xs.sort_by(f64::total_cmp);
        let q = eval::quantize_unit(&Tensor::new(&[xs.len()], xs).unwrap(), bits).unwrap();
        prop_assert!(eval::quantize_unit(&q, bits).unwrap().bit_eq(&q));
        prop_assert!(q.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn weight_quantizer_stays_in_range_and_uses_few_levels(xs in vec_in(-5.0, 5.0, 64), bits in 1u32..=8) {
        let q = eval::quantize_weight(&Tensor::new(&[xs.len()], xs).unwrap(), bits).unwrap();
        prop_assert!(q.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let mut levels: Vec<u64> = q.data().iter().map(|v| v.to_bits()).collect();
        levels.sort_unstable();
        levels.dedup();
        prop_assert!(levels.len() as u64 <= 1u64 << bits);
    }

    #[test]
    fn weight_quantizer_preserves_sign(xs in vec_in(-3.0, 3.0, 64), bits in 2u32..=8) {
        let t = Tensor::new(&[xs.len()], xs.clone()).unwrap();
        let q = eval::quantize_weight(&t, bits).unwrap();
        for (&x, &v) in xs.iter().zip(q.data()) {
            prop_assert!(x * v >= 0.0, "{x} -> {v}");
        }
    }

    #[test]
    fn full_scheme_is_identity(xs in vec_in(-10.0, 10.0, 64)) {
        let t = Tensor::new(&[xs.len()], xs).unwrap();
        prop_assert!(eval::weight_scheme(&t, QuantScheme::Full).unwrap().bit_eq(&t));
    }

    #[test]
    fn activation_gradient_is_range_indicator(xs in vec_in(-2.0, 3.0, 64), bits in 1u32..=8) {
        let t = Tensor::new(&[xs.len()], xs.clone()).unwrap();
        let g = eval::unit_upstream_grad(&t, |g, v| quant::quantize_activation(g, v, bits)).unwrap();
        for (&x, &d) in xs.iter().zip(g.data()) {
            prop_assert_eq!(d, if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn backward_is_linear(
        w in vec_in(-2.0, 2.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let n = w.len();
        let grads = |ca: f64, cb: f64| {
            let mut g = quant::ste_graph();
            let p = g.param("w", Tensor::new(&[n], w.clone()).unwrap());
            let t = g.tanh(p).unwrap();
            let l1 = g.sum(t).unwrap();
            let sq = g.mul(p, p).unwrap();
            let l2 = g.sum(sq).unwrap();
            g.backward_seeded(&[(l1, ca), (l2, cb)]).unwrap().param("w").unwrap().clone()
        };
        let (g1, g2, gab) = (grads(1.0, 0.0), grads(0.0, 1.0), grads(a, b));
        for i in 0..n {
            prop_assert!((gab.data()[i] - (a * g1.data()[i] + b * g2.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn binarized_values_are_plus_minus_one(xs in vec_in(-2.0, 2.0, 64)) {
        let q = eval::binarize(&Tensor::new(&[xs.len()], xs).unwrap()).unwrap();
        prop_assert!(q.data().iter().all(|&v| v == 1.0 || v == -1.0));
    }
}

#[test]
fn graph_without_rules_blocks_round_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::from_f64(&[3], &[0.2, 0.5, 0.9]).unwrap());
    let r = g.round(x).unwrap();
    let l = g.sum(r).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(x).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}
