//! Reference attention layers and the Nadaraya–Watson estimator.
//!
//! Projections use row tokens: `K = X key_i`, `Q = X query_i`,
//! `V = X value_i`, with head `i` taking columns `i*dh..(i+1)*dh` of the
//! `[d, d]` matrices. Head outputs are concatenated and multiplied by `proj`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Smallest admissible normalizer of the elu+1 variant.
pub const MIN_NORMALIZER: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Softmax,
    LinearIdentity,
    LinearElu,
}

/// `key`, `query`, `value`, `proj`, each `[d, d]`, uniform in `±1/sqrt(d)`.
pub fn init_params<S: Real>(d: usize, rng: &mut Rng) -> ParamSet<S> {
    let b = 1.0 / libm::sqrt(d as f64);
    let mut p = ParamSet::new();
    for name in ["key", "query", "value", "proj"] {
        p.insert(name, rng.uniform_tensor(d, d, b), true);
    }
    p
}

/// Attention parameters with the same numbers as a layer's `phi`, `psi`,
/// `g`, `h` (key, query, value, projection).
pub fn from_ttt_params<S: Real>(ttt: &ParamSet<S>) -> Result<ParamSet<S>> {
    let mut p = ParamSet::new();
    for (from, to) in [("phi", "key"), ("psi", "query"), ("g", "value"), ("h", "proj")] {
        p.insert(to, ttt.get(from)?.clone(), true);
    }
    Ok(p)
}

/// Attention of `kind` with `heads` heads on tokens `x` (`[n, d]`).
pub fn attention<S: Real>(
    g: &mut Graph<S>,
    kind: AttentionKind,
    heads: usize,
    p: &Bound,
    x: Var,
) -> Result<Var> {
    let (n, d) = g.dims(x);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(alloc::format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let (wk, wq, wv, wo) = (p.get("key")?, p.get("query")?, p.get("value")?, p.get("proj")?);
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let ki = g.slice_cols(wk, i * dh, dh);
        let qi = g.slice_cols(wq, i * dh, dh);
        let vi = g.slice_cols(wv, i * dh, dh);
        let k = g.matmul(x, ki);
        let q = g.matmul(x, qi);
        let v = g.matmul(x, vi);
        let o = match kind {
            AttentionKind::Softmax => {
                let s = g.matmul_t(q, k, false, true);
                let a = g.softmax(s);
                g.matmul(a, v)
            }
            AttentionKind::LinearIdentity => {
                let kv = g.matmul_t(k, v, true, false);
                let o = g.matmul(q, kv);
                g.scale(o, 1.0 / n as f64)
            }
            AttentionKind::LinearElu => {
                let one = g.scalar(S::ONE);
                let ke = g.elu(k);
                let kf = g.add(ke, one);
                let qe = g.elu(q);
                let qf = g.add(qe, one);
                let kv = g.matmul_t(kf, v, true, false);
                let num = g.matmul(qf, kv);
                let ksum = g.sum_rows(kf);
                let den = g.matmul_t(qf, ksum, false, true);
                let dv = g.value(den);
                if let Some(q) = (0..n).find(|&r| !(dv.at(r, 0).to_f64() >= MIN_NORMALIZER)) {
                    return Err(Error::DegenerateNormalizer { query: q, value: dv.at(q, 0).to_f64() });
                }
                g.div(num, den)
            }
        };
        outs.push(o);
    }
    let cat = g.concat_cols(&outs);
    Ok(g.matmul(cat, wo))
}

fn run<S: Real>(kind: AttentionKind, heads: usize, x: &Tensor<S>, p: &ParamSet<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let b = p.bind(&mut g);
    let xv = g.leaf(x.clone());
    let y = attention(&mut g, kind, heads, &b, xv)?;
    Ok(g.value(y).clone())
}

/// `softmax(Q Kᵀ) V` per head (no temperature), then the projection.
pub fn softmax_attention<S: Real>(x: &Tensor<S>, p: &ParamSet<S>, heads: usize) -> Result<Tensor<S>> {
    run(AttentionKind::Softmax, heads, x, p)
}

/// `(1/n) Q (Kᵀ V)` per head, then the projection.
pub fn linear_attention_identity<S: Real>(x: &Tensor<S>, p: &ParamSet<S>, heads: usize) -> Result<Tensor<S>> {
    run(AttentionKind::LinearIdentity, heads, x, p)
}

/// Linear attention with `elu(.) + 1` features on keys and queries and the
/// normalizer `q~ᵀ sum_j k~_j`.
pub fn linear_attention_elu<S: Real>(x: &Tensor<S>, p: &ParamSet<S>, heads: usize) -> Result<Tensor<S>> {
    run(AttentionKind::LinearElu, heads, x, p)
}

/// Kernel regression `sum_i k(x, x_i) z_i / sum_i k(x, x_i)` with labels
/// `z_i = x_i value`, kernel `exp((x_i key) . (x query))` and the largest
/// exponent subtracted per query before exponentiation.
pub fn nadaraya_watson<S: Real>(x: &Tensor<S>, p: &ParamSet<S>, heads: usize) -> Result<Tensor<S>> {
    let (n, d) = x.dims();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(alloc::format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let mut cat = Tensor::zeros(n, d);
    for h in 0..heads {
        let k = x.matmul(&p.get("key")?.slice_cols(h * dh, dh));
        let q = x.matmul(&p.get("query")?.slice_cols(h * dh, dh));
        let z = x.matmul(&p.get("value")?.slice_cols(h * dh, dh));
        let mut scores = Tensor::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                let mut s = S::ZERO;
                for c in 0..dh {
                    s += q.at(a, c) * k.at(b, c);
                }
                scores.set(a, b, s);
            }
        }
        let w = softmax_rows(&scores);
        for a in 0..n {
            for c in 0..dh {
                let mut acc = S::ZERO;
                for b in 0..n {
                    acc += w.at(a, b) * z.at(b, c);
                }
                cat.set(a, h * dh + c, acc);
            }
        }
    }
    Ok(cat.matmul(p.get("proj")?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_linear_attention() {
        let mut p = ParamSet::<f64>::new();
        for (name, v) in [("key", 3.0), ("query", 1.0), ("value", 2.0), ("proj", 1.0)] {
            p.insert(name, Tensor::scalar(v), true);
        }
        let y = linear_attention_identity(&Tensor::scalar(1.0), &p, 1).unwrap();
        assert_eq!(y.item(), 6.0);
    }

    #[test]
    fn single_token_returns_value() {
        let mut rng = Rng::new(5);
        let p = init_params::<f64>(4, &mut rng);
        let x = rng.normal_tensor(1, 4, 1.0);
        let v = x.matmul(p.get("value").unwrap()).matmul(p.get("proj").unwrap());
        for y in [
            softmax_attention(&x, &p, 2).unwrap(),
            nadaraya_watson(&x, &p, 2).unwrap(),
            linear_attention_elu(&x, &p, 2).unwrap(),
        ] {
            assert!(y.max_abs_diff(&v) < 1e-14);
        }
    }
}
