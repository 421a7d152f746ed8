use mttt_core::attention::{self, linear_attention_elu, linear_attention_identity, nadaraya_watson, softmax_attention};
use mttt_core::params::ParamSet;
use mttt_core::rng::Rng;
use mttt_core::ttt::{self, InnerContext, TttLayer, TttLayerSpec};
use mttt_core::{Graph, Tensor};
use proptest::prelude::*;

fn random_x(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    rng.normal_tensor(n, d, 1.0)
}

/// `(1/n) sum_j (q_i . k_j) v_j` per head, then the projection.
fn quadratic_linear_attention(x: &Tensor, p: &ParamSet, heads: usize) -> Tensor {
    let (n, d) = x.dims();
    let dh = d / heads;
    let mut cat = Tensor::zeros(n, d);
    for h in 0..heads {
        let k = x.matmul(&p.get("key").unwrap().slice_cols(h * dh, dh));
        let q = x.matmul(&p.get("query").unwrap().slice_cols(h * dh, dh));
        let v = x.matmul(&p.get("value").unwrap().slice_cols(h * dh, dh));
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..dh).map(|c| q.at(i, c) * k.at(j, c)).sum();
                for c in 0..dh {
                    let cur = cat.at(i, h * dh + c);
                    cat.set(i, h * dh + c, cur + s * v.at(j, c) / n as f64);
                }
            }
        }
    }
    cat.matmul(p.get("proj").unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ttt_linear_matches_linear_attention(
        seed in any::<u64>(),
        n in 1usize..=64,
        d_idx in 0usize..3,
        h_idx in 0usize..3,
    ) {
        let d = [4, 8, 16][d_idx];
        let heads = [1, 2, 4][h_idx];
        let mut rng = Rng::new(seed);
        let layer = TttLayer::<f64>::new(TttLayerSpec::linear_equivalence(heads), d, &mut rng).unwrap();
        let x = random_x(&mut rng, n, d);
        let (y, _) = layer.forward(&x, &InnerContext::default()).unwrap();
        let p = attention::from_ttt_params(&layer.params).unwrap();
        let reference = linear_attention_identity(&x, &p, heads).unwrap();
        prop_assert!(y.rel_err(&reference) <= 1e-10, "rel err {}", y.rel_err(&reference));
    }

    #[test]
    fn nadaraya_watson_is_softmax_attention(seed in any::<u64>(), n in 1usize..=12, h_idx in 0usize..2) {
        let heads = [1, 2][h_idx];
        let mut rng = Rng::new(seed);
        let p = attention::init_params::<f64>(4, &mut rng);
        let x = random_x(&mut rng, n, 4);
        let a = softmax_attention(&x, &p, heads).unwrap();
        let b = nadaraya_watson(&x, &p, heads).unwrap();
        prop_assert!(b.rel_err(&a) <= 1e-12);
    }

    #[test]
    fn linear_attention_is_linear_in_values(seed in any::<u64>(), c in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let mut p = attention::init_params::<f64>(8, &mut rng);
        let x = random_x(&mut rng, 10, 8);
        let base = linear_attention_identity(&x, &p, 2).unwrap();
        let v = p.get("value").unwrap().scale(c);
        *p.get_mut("value").unwrap() = v;
        let scaled = linear_attention_identity(&x, &p, 2).unwrap();
        prop_assert!(scaled.max_abs_diff(&base.scale(c)) <= 1e-12 * (1.0 + base.max_abs()));
    }
}

#[test]
fn linear_attention_matches_quadratic_form() {
    let mut rng = Rng::new(64);
    let p = attention::init_params::<f64>(16, &mut rng);
    let x = random_x(&mut rng, 64, 16);
    for heads in [1, 4] {
        let fast = linear_attention_identity(&x, &p, heads).unwrap();
        let slow = quadratic_linear_attention(&x, &p, heads);
        assert!(fast.rel_err(&slow) <= 1e-10);
    }
}

#[test]
fn identical_keys_average_values() {
    let mut p = ParamSet::<f64>::new();
    p.insert("key", Tensor::zeros(2, 2), true);
    p.insert("query", Tensor::ones(2, 2), true);
    p.insert("value", Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]), true);
    p.insert("proj", Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]), true);
    let x = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, -4.0]);
    let y = softmax_attention(&x, &p, 1).unwrap();
    for r in 0..2 {
        assert!((y.at(r, 0) - 2.0).abs() < 1e-15 && (y.at(r, 1) + 1.0).abs() < 1e-15);
    }
    let nw = nadaraya_watson(&x, &p, 1).unwrap();
    assert!(nw.max_abs_diff(&y) < 1e-15);
}

#[test]
fn elu_variant_with_zero_features_is_mean_of_values() {
    let mut rng = Rng::new(2);
    let mut p = attention::init_params::<f64>(4, &mut rng);
    *p.get_mut("key").unwrap() = Tensor::zeros(4, 4);
    *p.get_mut("query").unwrap() = Tensor::zeros(4, 4);
    let x = random_x(&mut rng, 6, 4);
    let y = linear_attention_elu(&x, &p, 2).unwrap();
    let v = x.matmul(p.get("value").unwrap());
    let mean = Tensor::from_fn(1, 4, |_, c| (0..6).map(|r| v.at(r, c)).sum::<f64>() / 6.0).matmul(p.get("proj").unwrap());
    for r in 0..6 {
        for c in 0..4 {
            assert!((y.at(r, c) - mean.at(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn elu_weights_are_a_distribution() {
    let mut rng = Rng::new(21);
    let mut p = attention::init_params::<f64>(6, &mut rng);
    let x = random_x(&mut rng, 9, 6);
    // Identity value and projection expose the weights: with v_j = e_j the
    // output row i is the weight vector of query i.
    let n = 9;
    let k = x.matmul(p.get("key").unwrap());
    let q = x.matmul(p.get("query").unwrap());
    let feat = |v: f64| if v > 0.0 { v + 1.0 } else { v.exp() };
    for i in 0..n {
        let raw: Vec<f64> = (0..n).map(|j| (0..6).map(|c| feat(q.at(i, c)) * feat(k.at(j, c))).sum()).collect();
        let z: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|r| r / z).collect();
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // The layer's output equals the weighted average under these weights.
        let v = x.matmul(p.get("value").unwrap());
        let expected: Vec<f64> = (0..6).map(|c| (0..n).map(|j| w[j] * v.at(j, c)).sum()).collect();
        *p.get_mut("proj").unwrap() = Tensor::from_fn(6, 6, |a, b| if a == b { 1.0 } else { 0.0 });
        let y = linear_attention_elu(&x, &p, 1).unwrap();
        for c in 0..6 {
            assert!((y.at(i, c) - expected[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn degenerate_normalizer_is_reported() {
    let mut rng = Rng::new(3);
    let mut p = attention::init_params::<f64>(2, &mut rng);
    *p.get_mut("key").unwrap() = Tensor::full(2, 2, -1e3);
    *p.get_mut("query").unwrap() = Tensor::full(2, 2, -1e3);
    let x = Tensor::ones(3, 2);
    assert!(matches!(
        linear_attention_elu(&x, &p, 1),
        Err(mttt_core::Error::DegenerateNormalizer { .. })
    ));
}

#[test]
fn equal_heads_reproduce_single_head_blocks() {
    let mut rng = Rng::new(17);
    let d = 4;
    let spec2 = TttLayerSpec::linear_equivalence(2);
    let mut layer = TttLayer::<f64>::new(spec2.clone(), d, &mut rng).unwrap();
    for name in ["phi", "psi", "g"] {
        let t = layer.params.get(name).unwrap().clone();
        let first = t.slice_cols(0, 2);
        *layer.params.get_mut(name).unwrap() = Tensor::concat_cols(&[first.clone(), first]);
    }
    *layer.params.get_mut("h").unwrap() = Tensor::from_fn(4, 4, |a, b| if a == b { 1.0 } else { 0.0 });
    let x = random_x(&mut rng, 7, d);
    let (y, _) = layer.forward(&x, &InnerContext::default()).unwrap();

    // One head built directly from the first head's parameters.
    let mut g = Graph::<f64>::new();
    let phi = g.leaf(layer.params.get("phi").unwrap().slice_cols(0, 2));
    let psi = g.leaf(layer.params.get("psi").unwrap().slice_cols(0, 2));
    let dec = g.leaf(layer.params.get("g").unwrap().slice_cols(0, 2));
    let w = g.leaf(Tensor::zeros(2, 2));
    let head = ttt::HeadVars { index: 0, phi, psi, g: dec, w0: ttt::LearnerVars::Linear { w }, ln: None };
    let xv = g.leaf(x.clone());
    let traj = ttt::run_inner_loop(&mut g, &TttLayerSpec::linear_equivalence(1), &head, xv, &InnerContext::default()).unwrap();
    let q = g.matmul(xv, psi);
    let out = traj.weights[1].apply(&mut g, q);
    let single = g.value(out).clone();
    for block in 0..2 {
        assert!(y.slice_cols(2 * block, 2).max_abs_diff(&single) <= 1e-14);
    }
}
