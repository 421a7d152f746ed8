use std::sync::Arc;

use mttt_core::gradcheck::grad_check;
use mttt_core::params::ParamSet;
use mttt_core::rng::Rng;
use mttt_core::ttt::{
    self, closed_form_w1, decoder_layernorm, inner_loss, inner_step, run_inner_loop, ttt_forward, HeadVars,
    InnerContext, InnerMode, Learner, LearnerVars, TttLayer, TttLayerSpec,
};
use mttt_core::{Graph, Tensor, Var};
use proptest::prelude::*;

fn bind_layer(g: &mut Graph<f64>, spec: &TttLayerSpec, d: usize, params: &ParamSet) -> ttt::TttVars {
    let b = params.bind(g);
    ttt::bind(g, spec, d, &b).unwrap()
}

#[test]
fn linear_loss_matches_scalar_loop() {
    let mut rng = Rng::new(8);
    let (n, d) = (2, 2);
    let x: Tensor = rng.normal_tensor(n, d, 1.0);
    let phi: Tensor = rng.normal_tensor(d, d, 1.0);
    let dec: Tensor = rng.normal_tensor(d, d, 1.0);
    let w: Tensor = rng.normal_tensor(d, d, 1.0);

    let mut expected = 0.0;
    for i in 0..n {
        let mut k = [0.0; 2];
        for a in 0..d {
            for c in 0..d {
                k[a] += x.at(i, c) * phi.at(c, a);
            }
        }
        let mut f = [0.0; 2];
        for a in 0..d {
            for b in 0..d {
                f[a] += w.at(a, b) * k[b];
            }
        }
        for c in 0..d {
            let mut rec = 0.0;
            for a in 0..d {
                rec += dec.at(c, a) * f[a];
            }
            expected += (rec - x.at(i, c)).powi(2);
        }
    }
    expected /= 2.0 * n as f64;

    let mut g = Graph::<f64>::new();
    let head = HeadVars {
        index: 0,
        phi: g.leaf(phi),
        psi: g.leaf(Tensor::zeros(d, d)),
        g: g.leaf(dec),
        w0: LearnerVars::Linear { w: g.leaf(w) },
        ln: None,
    };
    let xv = g.leaf(x);
    let l = inner_loss(&mut g, &TttLayerSpec::default(), &head, &head.w0, xv).unwrap();
    assert!((g.value(l).item() - expected).abs() <= 1e-12);
}

#[test]
fn exact_reconstruction_has_zero_loss() {
    let mut g = Graph::<f64>::new();
    let eye = Tensor::from_fn(3, 3, |a, b| if a == b { 1.0 } else { 0.0 });
    let head = HeadVars {
        index: 0,
        phi: g.leaf(eye.clone()),
        psi: g.leaf(eye.clone()),
        g: g.leaf(eye.clone()),
        w0: LearnerVars::Linear { w: g.leaf(eye) },
        ln: None,
    };
    let x = g.leaf(Rng::new(1).normal_tensor(5, 3, 1.0));
    let l = inner_loss(&mut g, &TttLayerSpec::default(), &head, &head.w0, x).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    // A zero gradient leaves W unchanged.
    let w1 = inner_step(&mut g, &TttLayerSpec::default(), &head, &head.w0, x, 1.0).unwrap();
    let before = g.value(head.w0.vars()[0]).clone();
    assert_eq!(g.value(w1.vars()[0]), &before);
}

#[test]
fn closed_form_matches_unrolled_step() {
    let mut rng = Rng::new(32);
    let (n, d) = (32, 8);
    let x: Tensor = rng.normal_tensor(n, d, 1.0);
    let phi: Tensor = rng.normal_tensor(d, d, 0.5);
    let dec: Tensor = rng.normal_tensor(d, d, 0.5);
    let expected = closed_form_w1(&x, &dec, &phi);

    let mut g = Graph::<f64>::new();
    let head = HeadVars {
        index: 0,
        phi: g.leaf(phi),
        psi: g.leaf(Tensor::zeros(d, d)),
        g: g.leaf(dec),
        w0: LearnerVars::Linear { w: g.leaf(Tensor::zeros(d, d)) },
        ln: None,
    };
    let xv = g.leaf(x);
    let w1 = inner_step(&mut g, &TttLayerSpec::default(), &head, &head.w0, xv, 1.0).unwrap();
    assert!(g.value(w1.vars()[0]).max_abs_diff(&expected) <= 1e-12 * expected.max_abs().max(1.0));

    let zero: Tensor = Tensor::zeros(4, 3);
    assert_eq!(closed_form_w1(&zero, &Tensor::ones(3, 3), &Tensor::ones(3, 3)), Tensor::zeros(3, 3));
}

fn mlp_head(g: &mut Graph<f64>, rng: &mut Rng, d: usize, ln: bool) -> HeadVars {
    let hid = 4 * d;
    HeadVars {
        index: 0,
        phi: g.leaf(rng.normal_tensor(d, d, 0.5)),
        psi: g.leaf(rng.normal_tensor(d, d, 0.5)),
        g: g.leaf(rng.normal_tensor(d, d, 0.5)),
        w0: LearnerVars::Mlp {
            w1: g.leaf(rng.normal_tensor(d, hid, 0.5)),
            b1: g.leaf(rng.normal_tensor(1, hid, 0.1)),
            w2: g.leaf(rng.normal_tensor(hid, d, 0.25)),
            b2: g.leaf(rng.normal_tensor(1, d, 0.1)),
        },
        ln: if ln { Some((g.leaf(rng.normal_tensor(1, d, 1.0)), g.leaf(rng.normal_tensor(1, d, 0.1)))) } else { None },
    }
}

#[test]
fn mlp_step_matches_finite_differences() {
    let mut rng = Rng::new(4);
    let (n, d, eta) = (8, 4, 0.7);
    let x: Tensor = rng.normal_tensor(n, d, 1.0);
    for ln in [false, true] {
        let mut g = Graph::<f64>::new();
        let head = mlp_head(&mut g, &mut rng, d, ln);
        let xv = g.leaf(x.clone());
        let spec = TttLayerSpec { learner: Learner::Mlp, decoder_ln: ln, ..TttLayerSpec::default() };
        let next = inner_step(&mut g, &spec, &head, &head.w0, xv, eta).unwrap();
        let old = head.w0.values(&g);
        let new = next.values(&g);

        let loss_at = |ws: &[Tensor]| -> f64 {
            let mut g2 = Graph::<f64>::new();
            let h2 = HeadVars {
                index: 0,
                phi: g2.leaf(g.value(head.phi).clone()),
                psi: g2.leaf(g.value(head.psi).clone()),
                g: g2.leaf(g.value(head.g).clone()),
                w0: LearnerVars::Mlp {
                    w1: g2.leaf(ws[0].clone()),
                    b1: g2.leaf(ws[1].clone()),
                    w2: g2.leaf(ws[2].clone()),
                    b2: g2.leaf(ws[3].clone()),
                },
                ln: head.ln.map(|(a, b)| (g2.leaf(g.value(a).clone()), g2.leaf(g.value(b).clone()))),
            };
            let xv = g2.leaf(x.clone());
            let l = inner_loss(&mut g2, &spec, &h2, &h2.w0, xv).unwrap();
            g2.value(l).item()
        };
        let h = 1e-5;
        for p in 0..4 {
            for i in 0..old[p].numel() {
                let mut plus = old.clone();
                plus[p].data_mut()[i] += h;
                let mut minus = old.clone();
                minus[p].data_mut()[i] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let expected = old[p].data()[i] - eta * fd;
                assert!((new[p].data()[i] - expected).abs() <= 1e-6, "ln={ln} param {p}[{i}]");
            }
        }
    }
}

#[test]
fn decoder_ln_properties() {
    let mut g = Graph::<f64>::new();
    let gamma = g.leaf(Tensor::ones(1, 4));
    let beta = g.leaf(Tensor::zeros(1, 4));
    let c = g.leaf(Tensor::full(1, 4, 3.5));
    let y = decoder_layernorm(&mut g, c, gamma, beta);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.leaf(Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
    let y = decoder_layernorm(&mut g, x, gamma, beta);
    let (mean, var) = (2.5, 1.25);
    for (i, &v) in g.value(y).data().iter().enumerate() {
        let expected = ((i + 1) as f64 - mean) / (var + 1e-6f64).sqrt();
        assert!((v - expected).abs() <= 1e-12);
    }

    let r = g.leaf(Rng::new(9).normal_tensor(6, 16, 3.0));
    let gamma = g.leaf(Tensor::ones(1, 16));
    let beta = g.leaf(Tensor::zeros(1, 16));
    let y = decoder_layernorm(&mut g, r, gamma, beta);
    for row in 0..6 {
        let v = g.value(y).row(row);
        let m: f64 = v.iter().sum::<f64>() / 16.0;
        let var: f64 = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0;
        assert!(m.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn zero_steps_keep_only_initial_weights() {
    let mut rng = Rng::new(5);
    let spec = TttLayerSpec { steps: 0, learner: Learner::Mlp, train_w0: true, ..TttLayerSpec::default() };
    let params = ttt::init_params::<f64>(&spec, 8, &mut rng);
    let mut g = Graph::<f64>::new();
    let vars = bind_layer(&mut g, &spec, 8, &params);
    let x = g.leaf(rng.normal_tensor(6, 8, 1.0));
    let t = run_inner_loop(&mut g, &spec, &vars.heads[0], x, &InnerContext { record_losses: true, ..Default::default() })
        .unwrap();
    assert_eq!(t.weights, vec![vars.heads[0].w0]);
    assert_eq!(t.losses.len(), 1);
}

#[test]
fn sgd_and_gd_agree_at_one_step() {
    let mut rng = Rng::new(6);
    let d = 8;
    let gd = TttLayerSpec { steps: 1, ..TttLayerSpec::mlp(2, 1, InnerMode::FullBatchGd) };
    let sgd = TttLayerSpec { mode: InnerMode::Sgd, ..gd.clone() };
    let params = ttt::init_params::<f64>(&gd, d, &mut rng);
    let x: Tensor = rng.normal_tensor(12, d, 1.0);
    let run = |spec: &TttLayerSpec, seed: u64| {
        let mut g = Graph::<f64>::new();
        let vars = bind_layer(&mut g, spec, d, &params);
        let xv = g.leaf(x.clone());
        let (y, traj) = ttt_forward(&mut g, spec, &vars, xv, &InnerContext { perm_seed: Some(seed), record_losses: false })
            .unwrap();
        (g.value(y).clone(), traj.heads.iter().map(|h| h.weights[1].values(&g)).collect::<Vec<_>>())
    };
    let (y_gd, w_gd) = run(&gd, 0);
    for seed in [1, 2, 99] {
        let (y, w) = run(&sgd, seed);
        assert_eq!(y, y_gd);
        assert_eq!(w, w_gd);
    }
}

#[test]
fn sgd_without_seed_is_a_config_error() {
    let mut rng = Rng::new(6);
    let spec = TttLayerSpec::mlp(1, 2, InnerMode::Sgd);
    let layer = TttLayer::<f64>::new(spec, 4, &mut rng).unwrap();
    let x = rng.normal_tensor(4, 4, 1.0);
    assert!(matches!(layer.forward(&x, &InnerContext::default()), Err(mttt_core::Error::Config(_))));
}

#[test]
fn non_finite_activation_names_token() {
    let mut g = Graph::<f64>::new();
    let head = HeadVars {
        index: 0,
        phi: g.leaf(Tensor::ones(2, 2)),
        psi: g.leaf(Tensor::ones(2, 2)),
        g: g.leaf(Tensor::ones(2, 2)),
        w0: LearnerVars::Linear { w: g.leaf(Tensor::ones(2, 2)) },
        ln: None,
    };
    let x = g.leaf(Tensor::from_vec(3, 2, vec![1.0, 1.0, 2.0, f64::INFINITY, 0.0, 0.0]));
    let err = inner_loss(&mut g, &TttLayerSpec::default(), &head, &head.w0, x).unwrap_err();
    assert!(matches!(err, mttt_core::Error::NonFiniteActivation { token: 1, .. }), "{err:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gd_layer_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..20, mlp in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let d = 8;
        let spec = if mlp { TttLayerSpec::mlp(2, 3, InnerMode::FullBatchGd) } else {
            TttLayerSpec { steps: 2, train_w0: true, decoder_ln: true, ..TttLayerSpec::linear_equivalence(2) }
        };
        let layer = TttLayer::<f64>::new(spec, d, &mut rng).unwrap();
        let x = rng.normal_tensor(n, d, 1.0);
        let perm = rng.permutation(n);
        let xp = x.select_rows(&perm);
        let (y, _) = layer.forward(&x, &InnerContext::default()).unwrap();
        let (yp, _) = layer.forward(&xp, &InnerContext::default()).unwrap();
        prop_assert!(yp.max_abs_diff(&y.select_rows(&perm)) <= 1e-12 * (1.0 + y.max_abs()));
    }
}

#[test]
fn sgd_steps_use_documented_batches() {
    let mut rng = Rng::new(10);
    let spec = TttLayerSpec::mlp(1, 2, InnerMode::Sgd);
    let params = ttt::init_params::<f64>(&spec, 4, &mut rng);
    let mut g = Graph::<f64>::new();
    let vars = bind_layer(&mut g, &spec, 4, &params);
    let x = g.leaf(rng.normal_tensor(4, 4, 1.0));
    let t = run_inner_loop(&mut g, &spec, &vars.heads[0], x, &InnerContext { perm_seed: Some(77), record_losses: false })
        .unwrap();
    let perm = Rng::new(77).permutation(4);
    let mut a = perm[..2].to_vec();
    a.sort();
    let mut b = perm[2..].to_vec();
    b.sort();
    assert_eq!(t.batches, vec![a.clone(), b]);

    // The first step equals a full-batch step on the first half alone.
    let sub = g.gather_rows(x, Arc::from(a.as_slice()));
    let direct = inner_step(&mut g, &spec, &vars.heads[0], &vars.heads[0].w0, sub, 1.0).unwrap();
    assert_eq!(t.weights[1].values(&g), direct.values(&g));
}

/// One token, width 1: outer gradient of the one-step loss against central
/// differences.
#[test]
fn one_token_outer_gradient() {
    let x = Tensor::scalar(0.8);
    let params: Vec<Tensor> = [1.3, -0.4, 0.9, 1.1, 0.0].iter().map(|&v| Tensor::scalar(v)).collect();
    let report = grad_check(
        |g, p| {
            let head = HeadVars { index: 0, phi: p[0], psi: p[1], g: p[2], w0: LearnerVars::Linear { w: p[4] }, ln: None };
            let vars = ttt::TttVars { heads: vec![head], h: p[3] };
            let xv = g.leaf(x.clone());
            let (y, _) = ttt_forward(g, &TttLayerSpec::default(), &vars, xv, &InnerContext::default())?;
            let target = g.scalar(0.25);
            let r = g.sub(y, target);
            Ok(g.half_sum_sq(r))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err <= 1e-6, "{report:?}");
}

fn layer_check(spec: TttLayerSpec, seed: u64) -> f64 {
    let (n, d) = (16, 8);
    let mut rng = Rng::new(seed);
    let params = ttt::init_params::<f64>(&spec, d, &mut rng);
    let x: Tensor = rng.normal_tensor(n, d, 1.0);
    let target: Tensor = rng.normal_tensor(n, d, 1.0);
    let report = grad_check(
        |g, p: &[Var]| {
            let bound = params.bound_to(p);
            let vars = ttt::bind(g, &spec, d, &bound)?;
            let xv = g.leaf(x.clone());
            let (y, _) = ttt_forward(g, &spec, &vars, xv, &InnerContext { perm_seed: Some(1234), record_losses: false })?;
            let tv = g.leaf(target.clone());
            let r = g.sub(y, tv);
            let l = g.half_sum_sq(r);
            Ok(g.scale(l, 1.0 / n as f64))
        },
        &params.tensors(),
        1e-4,
    )
    .unwrap();
    report.max_rel_err
}

#[test]
fn mlp_layer_gradcheck_gd_two_steps() {
    let err = layer_check(TttLayerSpec::mlp(2, 2, InnerMode::FullBatchGd), 21);
    assert!(err <= 1e-4, "max rel err {err}");
}

#[test]
fn mlp_layer_gradcheck_sgd_four_steps() {
    let err = layer_check(TttLayerSpec::mlp(2, 4, InnerMode::Sgd), 22);
    assert!(err <= 1e-4, "max rel err {err}");
}
