//! Randomised verification suites behind `verify-equiv` and `gradcheck`.

use mttt_core::attention::{self, linear_attention_identity, nadaraya_watson, softmax_attention};
use mttt_core::gradcheck::{grad_check_with, Stencil};
use mttt_core::model::{self, ForwardContext, LayerKind, Model, ModelConfig, TokenScheme};
use mttt_core::rng::{self, Rng};
use mttt_core::ttt::{InnerContext, InnerMode, TttLayer, TttLayerSpec};
use serde_json::json;

use crate::error::Result;

pub const LINEAR_TOL: f64 = 1e-10;
pub const KERNEL_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub tol: f64,
    pub trials: Vec<Trial>,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.trials.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    /// NaN errors fail.
    pub fn passed(&self) -> bool {
        self.trials.iter().all(|t| t.rel_err <= self.tol)
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "suite": self.name,
            "tol": self.tol,
            "max_rel_err": self.max_rel_err(),
            "passed": self.passed(),
            "trials": self.trials.iter().map(|t| json!({"n": t.n, "d": t.d, "heads": t.heads, "rel_err": t.rel_err})).collect::<Vec<_>>(),
        })
    }
}

/// TTT-Linear (`W0 = 0`, `eta = 1`, one step, no decoder LN) against linear
/// attention with the same maps, over `n` in `1..=128`, `d` in
/// `{4, 8, 16, 64}` and `H` in `{1, 2, 4}`.
pub fn linear_equivalence(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::derived(seed, &[rng::stream::EQUIVALENCE_TRIALS, 0]);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let n = 1 + rng.below(128) as usize;
        let d = [4, 8, 16, 64][rng.below(4) as usize];
        let heads = [1, 2, 4][rng.below(3) as usize];
        let layer = TttLayer::<f64>::new(TttLayerSpec::linear_equivalence(heads), d, &mut rng)?;
        let x = rng.normal_tensor(n, d, 1.0);
        let (y, _) = layer.forward(&x, &InnerContext::default())?;
        let reference = linear_attention_identity(&x, &attention::from_ttt_params(&layer.params)?, heads)?;
        out.push(Trial { n, d, heads, rel_err: y.rel_err(&reference) });
    }
    Ok(SuiteReport { name: "linear-equivalence", tol: LINEAR_TOL, trials: out })
}

/// Nadaraya–Watson kernel regression against softmax attention over `n` in
/// `1..=64`, `d` in `{4, 8, 16}` and `H` in `{1, 2, 4}`.
pub fn kernel_equivalence(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::derived(seed, &[rng::stream::EQUIVALENCE_TRIALS, 1]);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let n = 1 + rng.below(64) as usize;
        let d = [4, 8, 16][rng.below(3) as usize];
        let heads = [1, 2, 4][rng.below(3) as usize];
        let p = attention::init_params::<f64>(d, &mut rng);
        let x = rng.normal_tensor(n, d, 1.0);
        let y = nadaraya_watson(&x, &p, heads)?;
        let reference = softmax_attention(&x, &p, heads)?;
        out.push(Trial { n, d, heads, rel_err: y.rel_err(&reference) });
    }
    Ok(SuiteReport { name: "kernel-equivalence", tol: KERNEL_TOL, trials: out })
}

/// Named outer-parameter groups reported by the gradient check.
pub const GROUPS: [&str; 9] =
    ["phi", "psi", "g", "h", "w0", "decoder_ln", "embeddings", "classifier", "other"];

pub fn group_of(name: &str) -> &'static str {
    let seq = name.split_once(".seq.").map(|(_, s)| s);
    match seq {
        Some("phi") => "phi",
        Some("psi") => "psi",
        Some("g") => "g",
        Some("h") => "h",
        Some(s) if s.starts_with("w0") => "w0",
        Some(s) if s.starts_with("dln.") => "decoder_ln",
        _ if name.starts_with("embed.") || name == "pos" => "embeddings",
        _ if name.starts_with("head.") => "classifier",
        _ => "other",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub steps: usize,
    pub mode: InnerMode,
    /// `(group, max rel err with the 4th-order stencil, with the 2-point stencil)`.
    pub groups: Vec<(&'static str, f64, f64)>,
}

impl GradCase {
    pub fn max_err(&self) -> f64 {
        self.groups.iter().map(|g| g.1).fold(0.0, f64::max)
    }

    pub fn max_err_two_point(&self) -> f64 {
        self.groups.iter().map(|g| g.2).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.1 <= GRAD_TOL)
    }
}

pub fn gradcheck_config(steps: usize, mode: InnerMode) -> ModelConfig {
    ModelConfig {
        depth: 2,
        width: 8,
        heads: 2,
        layer: LayerKind::TttMlp,
        tokens: TokenScheme::Raw { n: 16, dim: 4 },
        classes: 4,
        ttt: TttLayerSpec { steps, mode, decoder_ln: true, train_w0: true, ..TttLayerSpec::default() },
        ..ModelConfig::default()
    }
}

/// Outer-loss gradient of one depth-2, d=8, n=16 TTT-MLP model against
/// central differences with step [`GRAD_STEP`].
pub fn gradcheck_case(steps: usize, mode: InnerMode, seed: u64) -> Result<GradCase> {
    let cfg = gradcheck_config(steps, mode);
    let m = Model::<f64>::new(cfg.clone(), seed)?;
    let mut rng = Rng::derived(seed, &[rng::stream::SYNTHETIC, steps as u64]);
    let raw = rng.normal_tensor(16, 4, 1.0);
    let label = rng.below(4) as usize;
    let ctx = ForwardContext { seed, instance: 0, epoch: 0, record_losses: false };
    let p = &m.params;
    let f = |g: &mut mttt_core::Graph<f64>, vars: &[mttt_core::Var]| {
        let b = p.bound_to(vars);
        let x = g.leaf(raw.clone());
        Ok(model::outer_loss(g, &cfg, &b, x, label, &ctx)?.0)
    };
    let four = grad_check_with(f, &p.tensors(), GRAD_STEP, Stencil::Central4)?;
    let two = grad_check_with(f, &p.tensors(), GRAD_STEP, Stencil::Central2)?;
    let mut groups: Vec<(&'static str, f64, f64)> = GROUPS.iter().map(|&g| (g, 0.0, 0.0)).collect();
    let mut seen = [false; GROUPS.len()];
    for (i, name) in p.names().enumerate() {
        let k = GROUPS.iter().position(|&g| g == group_of(name)).unwrap();
        seen[k] = true;
        groups[k].1 = groups[k].1.max(four.per_param[i]);
        groups[k].2 = groups[k].2.max(two.per_param[i]);
    }
    let groups = groups.into_iter().zip(seen).filter(|(_, s)| *s).map(|(g, _)| g).collect();
    Ok(GradCase { steps, mode, groups })
}

/// Every `T` in `{1, 2, 4}` under full-batch GD and seeded SGD.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for mode in [InnerMode::FullBatchGd, InnerMode::Sgd] {
        for steps in [1, 2, 4] {
            out.push(gradcheck_case(steps, mode, seed)?);
        }
    }
    Ok(out)
}

pub fn grad_cases_json(cases: &[GradCase]) -> serde_json::Value {
    json!({
        "step": GRAD_STEP,
        "tol": GRAD_TOL,
        "stencil": "central-4th-order",
        "passed": cases.iter().all(GradCase::passed),
        "cases": cases.iter().map(|c| json!({
            "steps": c.steps,
            "mode": if c.mode == InnerMode::Sgd { "sgd" } else { "gd" },
            "max_rel_err": c.max_err(),
            "max_rel_err_two_point": c.max_err_two_point(),
            "groups": c.groups.iter().map(|(g, a, b)| json!({"group": g, "max_rel_err": a, "max_rel_err_two_point": b})).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    })
}
