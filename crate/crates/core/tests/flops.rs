use mttt_core::attention::AttentionKind;
use mttt_core::flops::{compare, count, count_model, fit_degree, LayerSpec};
use mttt_core::model::{LayerKind, ModelConfig, TokenScheme};
use mttt_core::ttt::{HeadWiring, InnerMode, Learner, TttLayerSpec};
use proptest::prelude::*;

fn linear_attn(heads: usize) -> LayerSpec {
    LayerSpec::Attention { kind: AttentionKind::LinearIdentity, heads }
}

fn softmax(heads: usize) -> LayerSpec {
    LayerSpec::Attention { kind: AttentionKind::Softmax, heads }
}

#[test]
fn linear_attention_two_by_two_hand_count() {
    // n = 2 tokens of width d = 2, one head.
    //   K = X thK, Q = X thQ, V = X thV   3 x (2 x 2 x 2 MACs) = 48
    //   S = Kᵀ V                          2 x 2 x 2 MACs       = 16
    //   V'_i = S Q_i / n (1/n in alpha)    2 x 2 x 2 MACs       = 16
    //   out = V' th_h                     2 x 2 x 2 MACs       = 16
    let r = count(&linear_attn(1), 2, 2).unwrap();
    assert_eq!(r.total, 96);
    let by_name = |n: &str| r.terms.iter().find(|t| t.name == n).unwrap().flops;
    assert_eq!(by_name("proj_k") + by_name("proj_q") + by_name("proj_v"), 48);
    assert_eq!(by_name("kv_state"), 16);
    assert_eq!(by_name("query_readout"), 16);
    assert_eq!(by_name("out_proj"), 16);
    assert_eq!(r.terms.iter().map(|t| t.flops).sum::<u64>(), r.total);
}

proptest! {
    #[test]
    fn ttt_linear_minus_w0_terms_is_linear_attention(n in 1usize..300, d_idx in 0usize..4, h_idx in 0usize..3) {
        let d = [4, 8, 16, 64][d_idx];
        let heads = [1, 2, 4][h_idx];
        let ttt = count(&LayerSpec::Ttt(TttLayerSpec::linear_equivalence(heads)), n, d).unwrap();
        let la = count(&linear_attn(heads), n, d).unwrap();
        prop_assert_eq!(ttt.total - ttt.w0_flops(), la.total);
        let c = compare(&ttt, &la);
        prop_assert!(c.diff.iter().all(|(_, w0, _, _)| *w0));
        prop_assert_eq!(c.diff.iter().map(|(_, _, a, b)| a - b).sum::<u64>(), ttt.w0_flops());
    }

    #[test]
    fn totals_are_sums_of_terms(n in 1usize..200, steps in 0usize..5, mlp in any::<bool>(), ln in any::<bool>()) {
        let spec = TttLayerSpec {
            learner: if mlp { Learner::Mlp } else { Learner::Linear },
            heads: 2,
            steps,
            decoder_ln: ln,
            ..TttLayerSpec::default()
        };
        let r = count(&LayerSpec::Ttt(spec), n, 8).unwrap();
        prop_assert_eq!(r.terms.iter().map(|t| t.flops).sum::<u64>(), r.total);
    }
}

#[test]
fn sgd_costs_exactly_one_full_batch_step() {
    let n = 196;
    for learner in [Learner::Linear, Learner::Mlp] {
        for wiring in [HeadWiring::FullToken, HeadWiring::SliceConcat] {
            for decoder_ln in [false, true] {
                let base = TttLayerSpec { learner, heads: 2, wiring, decoder_ln, ..TttLayerSpec::default() };
                let gd = count(&LayerSpec::Ttt(base.clone()), n, 16).unwrap();
                for t in [2, 4, 7] {
                    assert_eq!(n % t, 0);
                    let sgd = TttLayerSpec { steps: t, mode: InnerMode::Sgd, ..base.clone() };
                    assert_eq!(count(&LayerSpec::Ttt(sgd), n, 16).unwrap().total, gd.total, "{learner:?} T={t}");
                }
            }
        }
    }
}

#[test]
fn ragged_sgd_is_rejected() {
    let spec = TttLayerSpec { steps: 3, mode: InnerMode::Sgd, ..TttLayerSpec::default() };
    assert!(count(&LayerSpec::Ttt(spec), 16, 8).is_err());
}

#[test]
fn polynomial_degree_in_sequence_length() {
    let ns = [8u64, 16, 32, 64];
    let degree = |spec: &LayerSpec| {
        let counts: Vec<u64> = ns.iter().map(|&n| count(spec, n as usize, 16).unwrap().total).collect();
        fit_degree(&ns, &counts)
    };
    assert_eq!(degree(&linear_attn(2)), 1);
    assert_eq!(degree(&LayerSpec::Attention { kind: AttentionKind::LinearElu, heads: 2 }), 1);
    assert_eq!(degree(&LayerSpec::Ttt(TttLayerSpec::linear_equivalence(2))), 1);
    assert_eq!(degree(&LayerSpec::Ttt(TttLayerSpec::mlp(2, 1, InnerMode::FullBatchGd))), 1);
    assert_eq!(degree(&LayerSpec::Ttt(TttLayerSpec::mlp(2, 4, InnerMode::Sgd))), 1);
    assert_eq!(degree(&LayerSpec::Ttt(TttLayerSpec::mlp(2, 4, InnerMode::FullBatchGd))), 1);
    assert_eq!(degree(&softmax(2)), 2);
}

#[test]
fn softmax_is_two_orders_costlier_on_pixels() {
    // Tiny ViT width at 224 x 224 pixel tokens.
    let n = 224 * 224;
    let s = count(&softmax(3), n, 192).unwrap();
    let la = count(&linear_attn(3), n, 192).unwrap();
    let c = compare(&s, &la);
    assert!(c.ratio >= 100.0, "ratio {}", c.ratio);
    let small = compare(&count(&softmax(3), 196, 192).unwrap(), &count(&linear_attn(3), 196, 192).unwrap());
    assert!(c.ratio > small.ratio);
}

#[test]
fn mlp_learner_costs_more_than_linear() {
    let lin = count(&LayerSpec::Ttt(TttLayerSpec::linear_equivalence(6)), 196, 384).unwrap();
    let mlp = count(&LayerSpec::Ttt(TttLayerSpec::mlp(6, 1, InnerMode::FullBatchGd)), 196, 384).unwrap();
    assert!(compare(&mlp, &lin).ratio > 1.0);
}

#[test]
fn zero_steps_leaves_only_readout_from_w0() {
    let spec = TttLayerSpec { steps: 0, ..TttLayerSpec::default() };
    let r = count(&LayerSpec::Ttt(spec), 10, 4).unwrap();
    let names: Vec<&str> = r.terms.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["proj_q", "query_readout", "out_proj"]);
    assert_eq!(r.w0_flops(), 2 * 10 * 4 * 4);
}

#[test]
fn model_rows_add_up_and_scale_with_tokens() {
    let cfg = |layer, p| ModelConfig { layer, tokens: TokenScheme::Patch(p), ..ModelConfig::default() };
    for layer in [LayerKind::TttLinear, LayerKind::TttMlp, LayerKind::SoftmaxAttn, LayerKind::LinearAttnIdentity] {
        let r = count_model(&cfg(layer, 2)).unwrap();
        assert_eq!(r.layers.len(), 4 + 2);
        assert_eq!(r.layers.iter().map(|l| l.flops).sum::<u64>(), r.total);
    }
    let soft = |p| count_model(&cfg(LayerKind::SoftmaxAttn, p)).unwrap().total as f64;
    let lin = |p| count_model(&cfg(LayerKind::LinearAttnIdentity, p)).unwrap().total as f64;
    assert!(soft(1) / lin(1) > soft(2) / lin(2));
}

#[test]
fn baseline_ratio_is_attached() {
    let a = count(&LayerSpec::Ttt(TttLayerSpec::linear_equivalence(1)), 4, 4).unwrap();
    let b = count(&linear_attn(1), 4, 4).unwrap();
    let r = a.clone().with_baseline(&b);
    assert_eq!(r.baseline.as_deref(), Some(b.label.as_str()));
    assert_eq!(r.ratio, Some(a.total as f64 / b.total as f64));
}
