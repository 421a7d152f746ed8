//! Exact symbolic FLOP counts.
//!
//! Counting convention:
//!
//! * a multiply-add is 2 FLOPs, so an `[m, k] x [k, n]` product is `2mkn`;
//! * scalar factors (`eta / m`, `1 / n`) ride in the product's `alpha` and
//!   parameter updates `W - ...` in its `beta = 1` accumulate, both free;
//! * elementwise add, subtract, multiply, divide, exp and activation
//!   evaluation are 1 FLOP per element; softmax is 5 per element (max,
//!   subtract, exp, sum, divide);
//! * layer norm over width `w` is `7w + 4` per row forward (mean, centre,
//!   square, sum, scale, affine mul and add; mean and variance divisions, eps,
//!   rsqrt) and `8w + 2` per row for the input gradient;
//! * gathers, slices and concatenations are free.
//!
//! Counts are pure functions of the layer spec and `(n, d)`; nothing is run.
//! Terms tagged `w0_dependent` are those that disappear when the inner
//! learner starts from `W0 = 0` (its predictions on the first step).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelConfig};
use crate::ttt::{InnerMode, Learner, TttLayerSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub name: String,
    pub flops: u64,
    pub w0_dependent: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub name: String,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub label: String,
    pub total: u64,
    pub terms: Vec<Term>,
    pub layers: Vec<LayerRow>,
    pub baseline: Option<String>,
    pub ratio: Option<f64>,
}

impl FlopReport {
    fn new(label: impl Into<String>) -> Self {
        FlopReport { label: label.into(), total: 0, terms: Vec::new(), layers: Vec::new(), baseline: None, ratio: None }
    }

    fn add(&mut self, name: &str, flops: u64, w0_dependent: bool) {
        if flops == 0 {
            return;
        }
        self.total += flops;
        match self.terms.iter_mut().find(|t| t.name == name && t.w0_dependent == w0_dependent) {
            Some(t) => t.flops += flops,
            None => self.terms.push(Term { name: String::from(name), flops, w0_dependent }),
        }
    }

    /// Sum of the terms tagged `w0_dependent`.
    pub fn w0_flops(&self) -> u64 {
        self.terms.iter().filter(|t| t.w0_dependent).map(|t| t.flops).sum()
    }

    /// Attaches `ratio = self.total / baseline.total`.
    pub fn with_baseline(mut self, baseline: &FlopReport) -> Self {
        self.ratio = Some(self.total as f64 / baseline.total as f64);
        self.baseline = Some(baseline.label.clone());
        self
    }
}

/// A sequence layer to count.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Ttt(TttLayerSpec),
    Attention { kind: AttentionKind, heads: usize },
}

impl LayerSpec {
    /// `ttt-linear`, `ttt-mlp`, `linear-attn`, `linear-attn-elu`, `softmax-attn`.
    pub fn parse(name: &str, heads: usize, ttt: &TttLayerSpec) -> Result<Self> {
        Ok(match LayerKind::parse(name)? {
            LayerKind::TttLinear => LayerSpec::Ttt(TttLayerSpec { learner: Learner::Linear, heads, ..ttt.clone() }),
            LayerKind::TttMlp => LayerSpec::Ttt(TttLayerSpec { learner: Learner::Mlp, heads, ..ttt.clone() }),
            LayerKind::SoftmaxAttn => LayerSpec::Attention { kind: AttentionKind::Softmax, heads },
            LayerKind::LinearAttnIdentity => LayerSpec::Attention { kind: AttentionKind::LinearIdentity, heads },
            LayerKind::LinearAttnElu => LayerSpec::Attention { kind: AttentionKind::LinearElu, heads },
        })
    }

    pub fn label(&self) -> String {
        match self {
            LayerSpec::Ttt(s) => {
                let kind = if s.learner == Learner::Linear { "ttt-linear" } else { "ttt-mlp" };
                let mode = if s.mode == InnerMode::Sgd { "sgd" } else { "gd" };
                format!("{kind}(H={}, T={}, {mode})", s.heads, s.steps)
            }
            LayerSpec::Attention { kind, heads } => {
                let k = match kind {
                    AttentionKind::Softmax => "softmax-attn",
                    AttentionKind::LinearIdentity => "linear-attn",
                    AttentionKind::LinearElu => "linear-attn-elu",
                };
                format!("{k}(H={heads})")
            }
        }
    }
}

fn ln_fwd(rows: u64, w: u64) -> u64 {
    rows * (7 * w + 4)
}

fn ln_bwd(rows: u64, w: u64) -> u64 {
    rows * (8 * w + 2)
}

/// FLOPs of one forward pass of a sequence layer on `n` tokens of width `d`.
pub fn count(spec: &LayerSpec, n: usize, d: usize) -> Result<FlopReport> {
    let mut r = FlopReport::new(spec.label());
    let (nn, dd) = (n as u64, d as u64);
    match spec {
        LayerSpec::Attention { kind, heads } => {
            if *heads == 0 || d % heads != 0 {
                return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
            }
            let dh = dd / *heads as u64;
            for _ in 0..*heads {
                r.add("proj_k", 2 * nn * dd * dh, false);
                r.add("proj_q", 2 * nn * dd * dh, false);
                r.add("proj_v", 2 * nn * dd * dh, false);
                match kind {
                    AttentionKind::Softmax => {
                        r.add("scores", 2 * nn * nn * dh, false);
                        r.add("softmax", 5 * nn * nn, false);
                        r.add("weighted_values", 2 * nn * nn * dh, false);
                    }
                    AttentionKind::LinearIdentity => {
                        r.add("kv_state", 2 * nn * dh * dh, false);
                        r.add("query_readout", 2 * nn * dh * dh, false);
                    }
                    AttentionKind::LinearElu => {
                        r.add("feature_map", 2 * 2 * nn * dh, false);
                        r.add("kv_state", 2 * nn * dh * dh, false);
                        r.add("query_readout", 2 * nn * dh * dh, false);
                        r.add("key_sum", nn * dh, false);
                        r.add("normalizer", 2 * nn * dh, false);
                        r.add("normalize", nn * dh, false);
                    }
                }
            }
            r.add("out_proj", 2 * nn * dd * dd, false);
        }
        LayerSpec::Ttt(s) => {
            s.validate(n, d)?;
            let dh = dd / s.heads as u64;
            let t = s.target_dim(d) as u64;
            let hid = s.hidden_dim(d) as u64;
            let batches: Vec<u64> = match s.mode {
                InnerMode::FullBatchGd => (0..s.steps).map(|_| nn).collect(),
                InnerMode::Sgd => (0..s.steps).map(|_| nn / s.steps as u64).collect(),
            };
            for _ in 0..s.heads {
                if !batches.is_empty() {
                    r.add("proj_k", 2 * nn * dd * dh, false);
                }
                r.add("proj_q", 2 * nn * dd * dh, false);
                for (step, &m) in batches.iter().enumerate() {
                    let first = step == 0;
                    match s.learner {
                        Learner::Linear => {
                            r.add("recon_f", 2 * m * dh * dh, first);
                        }
                        Learner::Mlp => {
                            r.add("recon_f", 2 * m * dh * hid + m * hid + m * hid + 2 * m * hid * dh + m * dh, first);
                        }
                    }
                    r.add("recon_decode", 2 * m * dh * t, first);
                    if s.decoder_ln {
                        r.add("decoder_ln", ln_fwd(m, t), first);
                    }
                    r.add("recon_residual", m * t, first);
                    if s.decoder_ln {
                        r.add("decoder_ln_grad", ln_bwd(m, t), first);
                    }
                    match s.learner {
                        // From W0 = 0 the decoder gradient is the value
                        // projection and the weight gradient the key-value state.
                        Learner::Linear => {
                            r.add("proj_v", 2 * m * t * dh, false);
                            r.add("kv_state", 2 * m * dh * dh, false);
                        }
                        Learner::Mlp => {
                            r.add("inner_grad_decode", 2 * m * t * dh, false);
                            r.add("inner_grad_w", m * dh + 2 * m * hid * dh + m * hid + 2 * m * dh * hid, false);
                            r.add("inner_grad_hidden", 2 * m * dh * hid + 2 * m * hid, false);
                        }
                    }
                }
                let from_w0 = batches.is_empty();
                match s.learner {
                    Learner::Linear => r.add("query_readout", 2 * nn * dh * dh, from_w0),
                    Learner::Mlp => r.add(
                        "query_readout",
                        2 * nn * dh * hid + nn * hid + nn * hid + 2 * nn * hid * dh + nn * dh,
                        from_w0,
                    ),
                }
            }
            r.add("out_proj", 2 * nn * dd * dd, false);
        }
    }
    Ok(r)
}

/// Ratio of totals and the terms whose counts differ.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub ratio: f64,
    /// `(name, w0_dependent, flops in a, flops in b)` for every differing term.
    pub diff: Vec<(String, bool, u64, u64)>,
}

pub fn compare(a: &FlopReport, b: &FlopReport) -> Comparison {
    let mut diff = Vec::new();
    let find = |r: &FlopReport, t: &Term| {
        r.terms.iter().find(|u| u.name == t.name && u.w0_dependent == t.w0_dependent).map(|u| u.flops).unwrap_or(0)
    };
    for t in &a.terms {
        let other = find(b, t);
        if other != t.flops {
            diff.push((t.name.clone(), t.w0_dependent, t.flops, other));
        }
    }
    for t in &b.terms {
        if find(a, t) == 0 {
            diff.push((t.name.clone(), t.w0_dependent, 0, t.flops));
        }
    }
    Comparison { ratio: a.total as f64 / b.total as f64, diff }
}

/// Forward FLOPs of a whole classifier on one instance, one row per block.
pub fn count_model(cfg: &ModelConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let n = cfg.n_tokens();
    let (nn, dd, din, c) = (n as u64, cfg.width as u64, cfg.token_dim() as u64, cfg.classes as u64);
    let layer = match cfg.layer {
        LayerKind::TttLinear | LayerKind::TttMlp => LayerSpec::Ttt(cfg.ttt_spec()),
        LayerKind::SoftmaxAttn => LayerSpec::Attention { kind: AttentionKind::Softmax, heads: cfg.heads },
        LayerKind::LinearAttnIdentity => LayerSpec::Attention { kind: AttentionKind::LinearIdentity, heads: cfg.heads },
        LayerKind::LinearAttnElu => LayerSpec::Attention { kind: AttentionKind::LinearElu, heads: cfg.heads },
    };
    let mut r = FlopReport::new(format!("model[{} x {}]", cfg.depth, layer.label()));
    let embed = 2 * nn * din * dd + 2 * nn * dd;
    r.add("embed", embed, false);
    r.layers.push(LayerRow { name: String::from("embed"), flops: embed });
    let seq = count(&layer, n, cfg.width)?;
    for l in 0..cfg.depth {
        let before = r.total;
        r.add("block_ln", 2 * ln_fwd(nn, dd), false);
        for t in &seq.terms {
            r.add(&t.name, t.flops, t.w0_dependent);
        }
        r.add("residual", 2 * nn * dd, false);
        r.add("mlp", 2 * nn * dd * 4 * dd + 2 * nn * 4 * dd + 2 * nn * 4 * dd * dd + nn * dd, false);
        r.layers.push(LayerRow { name: format!("block{l}"), flops: r.total - before });
    }
    let before = r.total;
    r.add("aggregate", nn * dd + dd + ln_fwd(1, dd) + 2 * dd * c + c, false);
    r.layers.push(LayerRow { name: String::from("aggregate"), flops: r.total - before });
    Ok(r)
}

/// Exact rational number, kept in lowest terms with a positive denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: i128,
    pub den: i128,
}

impl Ratio {
    fn new(num: i128, den: i128) -> Self {
        let g = gcd(num.unsigned_abs(), den.unsigned_abs()) as i128;
        let s = if den < 0 { -1 } else { 1 };
        Ratio { num: s * num / g.max(1), den: s * den / g.max(1) }
    }

    fn sub(self, o: Ratio) -> Ratio {
        Ratio::new(self.num * o.den - o.num * self.den, self.den * o.den)
    }

    fn div_int(self, k: i128) -> Ratio {
        Ratio::new(self.num, self.den * k)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Degree of the lowest-degree polynomial through `(ns[i], counts[i])`,
/// from exact divided differences. With `k` points the answer is at most
/// `k - 1`; a result below that means the fit has zero residual.
pub fn fit_degree(ns: &[u64], counts: &[u64]) -> usize {
    assert_eq!(ns.len(), counts.len());
    assert!(!ns.is_empty());
    let mut table: Vec<Ratio> = counts.iter().map(|&c| Ratio::new(c as i128, 1)).collect();
    let mut degree = 0;
    for order in 1..ns.len() {
        let next: Vec<Ratio> = (0..table.len() - 1)
            .map(|i| table[i + 1].sub(table[i]).div_int(ns[i + order] as i128 - ns[i] as i128))
            .collect();
        if next.iter().any(|r| r.num != 0) {
            degree = order;
        }
        table = next;
    }
    degree
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degree_of_exact_polynomials() {
        let ns = [8u64, 16, 32, 64];
        assert_eq!(fit_degree(&ns, &ns.map(|n| 3 * n + 7)), 1);
        assert_eq!(fit_degree(&ns, &ns.map(|n| n * n + 1)), 2);
        assert_eq!(fit_degree(&ns, &ns.map(|_| 5)), 0);
        assert_eq!(fit_degree(&ns, &ns.map(|n| n * n * n)), 3);
    }

    #[test]
    fn identical_reports_compare_equal() {
        let s = LayerSpec::Ttt(TttLayerSpec::default());
        let a = count(&s, 16, 8).unwrap();
        let c = compare(&a, &a);
        assert_eq!(c.ratio, 1.0);
        assert!(c.diff.is_empty());
    }

    #[test]
    fn unknown_layer_is_rejected() {
        assert!(matches!(
            LayerSpec::parse("hyena", 1, &TttLayerSpec::default()),
            Err(Error::UnsupportedLayer(_))
        ));
    }
}
