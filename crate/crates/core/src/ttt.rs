//! Test-time-training layers.
//!
//! For each head the layer fits a learner `f(.; W)` to the instance's own
//! tokens by minimising the reconstruction loss
//!
//! ```text
//! l(W; X) = 1/(2m) * sum_i || dec(f(phi(x_i); W)) - target(x_i) ||^2
//! ```
//!
//! with `T` gradient steps `W <- W - eta * grad l`, then outputs
//! `h(concat_heads f(psi(x_j); W_T))`. All steps are graph nodes, so an outer
//! loss can be differentiated through them.
//!
//! Conventions (row-vector tokens, `X` is `[n, d]`, `dh = d / H`):
//!
//! * `phi`, `psi` are `[d, d]`; head `i` uses columns `i*dh..(i+1)*dh`, so
//!   `K = X phi_i`, `Q = X psi_i`.
//! * `g` is stored in value orientation, `[t, d]` with head `i` in columns
//!   `i*dh..`; the decoder is `dec(u) = u g_iᵀ`. With [`HeadWiring::FullToken`]
//!   `t = d` and every head reconstructs the whole token; with
//!   [`HeadWiring::SliceConcat`] `t = dh` and head `i` reconstructs its own
//!   column slice of the token.
//! * The linear learner's `W` is `[dh, dh]` acting on column vectors, so on
//!   rows `f(Z) = Z Wᵀ`. Stacked over heads the stored `w0` is `[dh, d]`.
//! * The MLP learner is `gelu(Z w1 + b1) w2 + b2` with hidden width `4 dh`.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DECODER_LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Learner {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerMode {
    /// Every step uses the mean loss over all `n` tokens.
    FullBatchGd,
    /// Tokens are permuted and split into `T` mini-batches of `n / T`; one
    /// step per mini-batch.
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadWiring {
    FullToken,
    SliceConcat,
}

/// How per-head reconstruction losses combine into the layer's inner loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadReduction {
    /// Heads are independent inner loops, each stepping with `eta`.
    Sum,
    /// Each head steps with `eta / H`.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TttLayerSpec {
    pub learner: Learner,
    pub heads: usize,
    pub steps: usize,
    pub eta: f64,
    pub mode: InnerMode,
    pub decoder_ln: bool,
    pub train_w0: bool,
    pub wiring: HeadWiring,
    pub reduction: HeadReduction,
}

impl Default for TttLayerSpec {
    fn default() -> Self {
        TttLayerSpec {
            learner: Learner::Linear,
            heads: 1,
            steps: 1,
            eta: 1.0,
            mode: InnerMode::FullBatchGd,
            decoder_ln: false,
            train_w0: false,
            wiring: HeadWiring::FullToken,
            reduction: HeadReduction::Sum,
        }
    }
}

impl TttLayerSpec {
    /// Linear learner, `W0 = 0`, `eta = 1`, one full-batch step, no decoder LN.
    pub fn linear_equivalence(heads: usize) -> Self {
        TttLayerSpec { heads, ..Self::default() }
    }

    pub fn mlp(heads: usize, steps: usize, mode: InnerMode) -> Self {
        TttLayerSpec { learner: Learner::Mlp, heads, steps, mode, decoder_ln: true, train_w0: true, ..Self::default() }
    }

    pub fn head_dim(&self, d: usize) -> usize {
        d / self.heads
    }

    pub fn hidden_dim(&self, d: usize) -> usize {
        4 * self.head_dim(d)
    }

    /// Width of each head's reconstruction target.
    pub fn target_dim(&self, d: usize) -> usize {
        match self.wiring {
            HeadWiring::FullToken => d,
            HeadWiring::SliceConcat => self.head_dim(d),
        }
    }

    fn step_size(&self) -> f64 {
        match self.reduction {
            HeadReduction::Sum => self.eta,
            HeadReduction::Mean => self.eta / self.heads as f64,
        }
    }

    /// Checks the spec against a sequence of `n` tokens of width `d`.
    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        if n == 0 || d == 0 {
            return Err(Error::Config(format!("empty token sequence ({n} x {d})")));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {} heads", self.heads)));
        }
        if !self.eta.is_finite() {
            return Err(Error::Config(format!("inner learning rate {} is not finite", self.eta)));
        }
        if self.mode == InnerMode::Sgd && self.steps > 0 && n % self.steps != 0 {
            return Err(Error::Config(format!(
                "inner SGD needs T to divide n, got T = {} and n = {n}",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Fresh parameters for one layer of width `d`.
///
/// `phi`, `psi`, `g`, `h` and the MLP weights are uniform in
/// `±1/sqrt(fan_in)`; biases are zero; a linear `W0` is zero. `W0` entries
/// are trainable iff `spec.train_w0`. Decoder-LN affine parameters exist only
/// when `spec.decoder_ln` is set.
pub fn init_params<S: Real>(spec: &TttLayerSpec, d: usize, rng: &mut Rng) -> ParamSet<S> {
    let dh = spec.head_dim(d);
    let t = spec.target_dim(d);
    let hid = spec.hidden_dim(d);
    let heads = spec.heads;
    let mut p = ParamSet::new();
    // Keys of unit-variance tokens get E|k|^2 = 1, which keeps eta = 1 stable.
    p.insert("phi", rng.uniform_tensor(d, d, libm::sqrt(3.0 / (d * dh) as f64)), true);
    p.insert("psi", rng.uniform_tensor(d, d, 1.0 / libm::sqrt(d as f64)), true);
    // Largest eigenvalue of each head's g_iᵀ g_i starts near 1.
    let g_bound = libm::sqrt(3.0) / (libm::sqrt(t as f64) + libm::sqrt(dh as f64));
    p.insert("g", rng.uniform_tensor(t, d, g_bound), true);
    p.insert("h", rng.uniform_tensor(d, d, 1.0 / libm::sqrt(d as f64)), true);
    match spec.learner {
        Learner::Linear => p.insert("w0", Tensor::zeros(dh, d), spec.train_w0),
        Learner::Mlp => {
            p.insert("w0.w1", rng.uniform_tensor(dh, heads * hid, 1.0 / libm::sqrt(dh as f64)), spec.train_w0);
            p.insert("w0.b1", Tensor::zeros(1, heads * hid), spec.train_w0);
            p.insert("w0.w2", rng.uniform_tensor(hid, d, 1.0 / libm::sqrt(hid as f64)), spec.train_w0);
            p.insert("w0.b2", Tensor::zeros(1, d), spec.train_w0);
        }
    }
    if spec.decoder_ln {
        p.insert("dln.gamma", Tensor::ones(1, heads * t), true);
        p.insert("dln.beta", Tensor::zeros(1, heads * t), true);
    }
    p
}

/// Weights of one head's inner learner, as graph handles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LearnerVars {
    Linear { w: Var },
    Mlp { w1: Var, b1: Var, w2: Var, b2: Var },
}

impl LearnerVars {
    /// `f(z; W)` for row tokens `z`.
    pub fn apply<S: Real>(&self, g: &mut Graph<S>, z: Var) -> Var {
        match *self {
            LearnerVars::Linear { w } => g.matmul_t(z, w, false, true),
            LearnerVars::Mlp { w1, b1, w2, b2 } => {
                let pre = g.matmul(z, w1);
                let pre = g.add(pre, b1);
                let act = g.gelu(pre);
                let out = g.matmul(act, w2);
                g.add(out, b2)
            }
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        match *self {
            LearnerVars::Linear { w } => alloc::vec![w],
            LearnerVars::Mlp { w1, b1, w2, b2 } => alloc::vec![w1, b1, w2, b2],
        }
    }

    fn with_vars(&self, v: &[Var]) -> Self {
        match self {
            LearnerVars::Linear { .. } => LearnerVars::Linear { w: v[0] },
            LearnerVars::Mlp { .. } => LearnerVars::Mlp { w1: v[0], b1: v[1], w2: v[2], b2: v[3] },
        }
    }

    /// Current weight values.
    pub fn values<S: Real>(&self, g: &Graph<S>) -> Vec<Tensor<S>> {
        self.vars().into_iter().map(|v| g.value(v).clone()).collect()
    }
}

/// One head's view of the layer parameters.
#[derive(Clone, Debug)]
pub struct HeadVars {
    pub index: usize,
    pub phi: Var,
    pub psi: Var,
    /// Decoder in value orientation, `[t, dh]`.
    pub g: Var,
    pub w0: LearnerVars,
    pub ln: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct TttVars {
    pub heads: Vec<HeadVars>,
    pub h: Var,
}

/// Splits the stacked layer parameters into per-head handles.
pub fn bind<S: Real>(g: &mut Graph<S>, spec: &TttLayerSpec, d: usize, p: &Bound) -> Result<TttVars> {
    let dh = spec.head_dim(d);
    let t = spec.target_dim(d);
    let hid = spec.hidden_dim(d);
    let (phi, psi, dec, h) = (p.get("phi")?, p.get("psi")?, p.get("g")?, p.get("h")?);
    let ln = if spec.decoder_ln { Some((p.get("dln.gamma")?, p.get("dln.beta")?)) } else { None };
    let mlp = match spec.learner {
        Learner::Linear => None,
        Learner::Mlp => Some((p.get("w0.w1")?, p.get("w0.b1")?, p.get("w0.w2")?, p.get("w0.b2")?)),
    };
    let lin = match spec.learner {
        Learner::Linear => Some(p.get("w0")?),
        Learner::Mlp => None,
    };
    let mut heads = Vec::with_capacity(spec.heads);
    for i in 0..spec.heads {
        let w0 = match (lin, mlp) {
            (Some(w), _) => LearnerVars::Linear { w: g.slice_cols(w, i * dh, dh) },
            (_, Some((w1, b1, w2, b2))) => LearnerVars::Mlp {
                w1: g.slice_cols(w1, i * hid, hid),
                b1: g.slice_cols(b1, i * hid, hid),
                w2: g.slice_cols(w2, i * dh, dh),
                b2: g.slice_cols(b2, i * dh, dh),
            },
            _ => unreachable!(),
        };
        heads.push(HeadVars {
            index: i,
            phi: g.slice_cols(phi, i * dh, dh),
            psi: g.slice_cols(psi, i * dh, dh),
            g: g.slice_cols(dec, i * dh, dh),
            w0,
            ln: ln.map(|(gamma, beta)| (g.slice_cols(gamma, i * t, t), g.slice_cols(beta, i * t, t))),
        });
    }
    Ok(TttVars { heads, h })
}

/// Layer norm over the feature axis with `eps = 1e-6` and affine `gamma`, `beta`.
pub fn decoder_layernorm<S: Real>(g: &mut Graph<S>, v: Var, gamma: Var, beta: Var) -> Var {
    g.layer_norm(v, gamma, beta, DECODER_LN_EPS)
}

/// Reconstruction target of `head` for tokens `x`.
fn target_of<S: Real>(g: &mut Graph<S>, spec: &TttLayerSpec, head: &HeadVars, x: Var) -> Var {
    match spec.wiring {
        HeadWiring::FullToken => x,
        HeadWiring::SliceConcat => {
            let dh = spec.head_dim(g.dims(x).1);
            g.slice_cols(x, head.index * dh, dh)
        }
    }
}

/// Reconstruction loss of `head` with weights `w` on tokens `x` (`[m, d]`).
pub fn inner_loss<S: Real>(
    g: &mut Graph<S>,
    spec: &TttLayerSpec,
    head: &HeadVars,
    w: &LearnerVars,
    x: Var,
) -> Result<Var> {
    let k = g.matmul(x, head.phi);
    let target = target_of(g, spec, head, x);
    loss_on(g, head, w, k, target, "inner loss")
}

/// Loss on precomputed features `k = phi(x)` and targets.
fn loss_on<S: Real>(
    g: &mut Graph<S>,
    head: &HeadVars,
    w: &LearnerVars,
    k: Var,
    target: Var,
    context: &str,
) -> Result<Var> {
    let m = g.dims(k).0;
    let f = w.apply(g, k);
    let mut dec = g.matmul_t(f, head.g, false, true);
    if let Some((gamma, beta)) = head.ln {
        dec = decoder_layernorm(g, dec, gamma, beta);
    }
    let r = g.sub(dec, target);
    let half = g.half_sum_sq(r);
    let loss = g.scale(half, 1.0 / m as f64);
    if !g.value(loss).item().is_finite() {
        let rv = g.value(r);
        let token = (0..rv.rows()).find(|&i| rv.row(i).iter().any(|v| !v.is_finite())).unwrap_or(0);
        return Err(Error::NonFiniteActivation { token, context: format!("head {}, {context}", head.index) });
    }
    Ok(loss)
}

/// One gradient step `W - lr * grad l(W)` on features `k` and targets.
fn step_on<S: Real>(
    g: &mut Graph<S>,
    head: &HeadVars,
    w: &LearnerVars,
    k: Var,
    target: Var,
    lr: f64,
    context: &str,
) -> Result<(LearnerVars, f64)> {
    let loss = loss_on(g, head, w, k, target, context)?;
    let value = g.value(loss).item().to_f64();
    let wv = w.vars();
    let grads = g.backward(loss, &wv)?;
    let next: Vec<Var> = wv
        .iter()
        .zip(&grads)
        .map(|(&wi, &gi)| {
            let s = g.scale(gi, lr);
            g.sub(wi, s)
        })
        .collect();
    Ok((w.with_vars(&next), value))
}

/// `W_{t+1} = W_t - eta * grad l(W_t; x)` on the token subset `x`.
pub fn inner_step<S: Real>(
    g: &mut Graph<S>,
    spec: &TttLayerSpec,
    head: &HeadVars,
    w: &LearnerVars,
    x: Var,
    eta: f64,
) -> Result<LearnerVars> {
    let k = g.matmul(x, head.phi);
    let target = target_of(g, spec, head, x);
    Ok(step_on(g, head, w, k, target, eta, "inner step")?.0)
}

/// Mini-batches for inner SGD: the seeded permutation of `0..n` cut into `t`
/// consecutive chunks of `n / t`, each sorted ascending.
pub fn sgd_batches(seed: u64, n: usize, t: usize) -> Vec<Vec<usize>> {
    let perm = Rng::new(seed).permutation(n);
    perm.chunks(n / t)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

/// Options for one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct InnerContext {
    /// Seed of the mini-batch permutation; required for inner SGD.
    pub perm_seed: Option<u64>,
    /// Also evaluate the full-batch loss at every `W_t`.
    pub record_losses: bool,
}

#[derive(Clone, Debug)]
pub struct HeadTrajectory {
    /// `W_0 .. W_T`.
    pub weights: Vec<LearnerVars>,
    /// Full-batch `l(W_t; X)` for `t = 0..=T` when recorded, else empty.
    pub losses: Vec<f64>,
    /// Loss of the batch used by each step (full batch under GD).
    pub step_losses: Vec<f64>,
    /// Mini-batch indices used by each step (empty under GD).
    pub batches: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct InnerTrajectory {
    pub heads: Vec<HeadTrajectory>,
    pub reduction: HeadReduction,
}

impl InnerTrajectory {
    /// Layer-level full-batch inner loss per step, combining heads by the
    /// configured reduction. Empty when losses were not recorded.
    pub fn losses(&self) -> Vec<f64> {
        let len = self.heads[0].losses.len();
        let scale = match self.reduction {
            HeadReduction::Sum => 1.0,
            HeadReduction::Mean => 1.0 / self.heads.len() as f64,
        };
        (0..len).map(|t| scale * self.heads.iter().map(|h| h.losses[t]).sum::<f64>()).collect()
    }

    pub fn step_losses(&self) -> Vec<f64> {
        let len = self.heads[0].step_losses.len();
        let scale = match self.reduction {
            HeadReduction::Sum => 1.0,
            HeadReduction::Mean => 1.0 / self.heads.len() as f64,
        };
        (0..len).map(|t| scale * self.heads.iter().map(|h| h.step_losses[t]).sum::<f64>()).collect()
    }
}

/// Runs the inner loop of one head on tokens `x` (`[n, d]`).
pub fn run_inner_loop<S: Real>(
    g: &mut Graph<S>,
    spec: &TttLayerSpec,
    head: &HeadVars,
    x: Var,
    ctx: &InnerContext,
) -> Result<HeadTrajectory> {
    let (n, d) = g.dims(x);
    spec.validate(n, d)?;
    let mut traj =
        HeadTrajectory { weights: alloc::vec![head.w0], losses: Vec::new(), step_losses: Vec::new(), batches: Vec::new() };
    if spec.steps == 0 && !ctx.record_losses {
        return Ok(traj);
    }
    let k = g.matmul(x, head.phi);
    let target = target_of(g, spec, head, x);
    let lr = spec.step_size();
    match spec.mode {
        InnerMode::FullBatchGd => {
            for t in 0..spec.steps {
                let w = traj.weights[t];
                let (next, loss) = step_on(g, head, &w, k, target, lr, &step_context(t))?;
                traj.step_losses.push(loss);
                if ctx.record_losses {
                    traj.losses.push(loss);
                }
                traj.weights.push(next);
            }
        }
        InnerMode::Sgd => {
            if spec.steps > 0 {
                let seed = ctx
                    .perm_seed
                    .ok_or_else(|| Error::Config(String::from("inner SGD needs a permutation seed")))?;
                traj.batches = sgd_batches(seed, n, spec.steps);
            }
            for t in 0..spec.steps {
                let w = traj.weights[t];
                if ctx.record_losses {
                    let l = loss_on(g, head, &w, k, target, &step_context(t))?;
                    traj.losses.push(g.value(l).item().to_f64());
                }
                let idx: Arc<[usize]> = Arc::from(traj.batches[t].as_slice());
                let (kb, tb) = if idx.len() == n {
                    (k, target)
                } else {
                    (g.gather_rows(k, idx.clone()), g.gather_rows(target, idx))
                };
                let (next, loss) = step_on(g, head, &w, kb, tb, lr, &step_context(t))?;
                traj.step_losses.push(loss);
                traj.weights.push(next);
            }
        }
    }
    if ctx.record_losses {
        let w = *traj.weights.last().unwrap();
        let l = loss_on(g, head, &w, k, target, &step_context(spec.steps))?;
        traj.losses.push(g.value(l).item().to_f64());
    }
    Ok(traj)
}

fn step_context(t: usize) -> String {
    format!("step {t}")
}

/// Full layer: inner loops for every head, then `h(concat f(psi(x); W_T))`.
pub fn ttt_forward<S: Real>(
    g: &mut Graph<S>,
    spec: &TttLayerSpec,
    vars: &TttVars,
    x: Var,
    ctx: &InnerContext,
) -> Result<(Var, InnerTrajectory)> {
    let mut outs = Vec::with_capacity(vars.heads.len());
    let mut trajs = Vec::with_capacity(vars.heads.len());
    for head in &vars.heads {
        let traj = run_inner_loop(g, spec, head, x, ctx)?;
        let q = g.matmul(x, head.psi);
        let w = *traj.weights.last().unwrap();
        outs.push(w.apply(g, q));
        trajs.push(traj);
    }
    let cat = g.concat_cols(&outs);
    let y = g.matmul(cat, vars.h);
    Ok((y, InnerTrajectory { heads: trajs, reduction: spec.reduction }))
}

/// `W_1 = (1/n) sum_i (x_i g)ᵀ (x_i phi)` for a linear learner started at
/// zero with `eta = 1`; `g` and `phi` are `[d, dh]`.
pub fn closed_form_w1<S: Real>(x: &Tensor<S>, g: &Tensor<S>, phi: &Tensor<S>) -> Tensor<S> {
    let v = x.matmul(g);
    let k = x.matmul(phi);
    let n = S::from_f64(x.rows() as f64);
    v.transpose().matmul(&k).map(|e| e / n)
}

/// A layer with its own parameters, for use outside a larger model.
#[derive(Clone, Debug)]
pub struct TttLayer<S: Real = f64> {
    pub spec: TttLayerSpec,
    pub d: usize,
    pub params: ParamSet<S>,
}

impl<S: Real> TttLayer<S> {
    pub fn new(spec: TttLayerSpec, d: usize, rng: &mut Rng) -> Result<Self> {
        spec.validate(spec.steps.max(1), d)?;
        let params = init_params(&spec, d, rng);
        Ok(TttLayer { spec, d, params })
    }

    /// Forward pass on plain tensors.
    pub fn forward(&self, x: &Tensor<S>, ctx: &InnerContext) -> Result<(Tensor<S>, Vec<f64>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let vars = bind(&mut g, &self.spec, self.d, &bound)?;
        let xv = g.leaf(x.clone());
        let (y, traj) = ttt_forward(&mut g, &self.spec, &vars, xv, ctx)?;
        Ok((g.value(y).clone(), traj.losses()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_head(g: &mut Graph<f64>, gval: f64, phi: f64, w: f64) -> HeadVars {
        let phi = g.scalar(phi);
        let psi = g.scalar(1.0);
        let dec = g.scalar(gval);
        let w = g.scalar(w);
        HeadVars { index: 0, phi, psi, g: dec, w0: LearnerVars::Linear { w }, ln: None }
    }

    #[test]
    fn zero_predictor_loss() {
        let mut g = Graph::<f64>::new();
        let head = scalar_head(&mut g, 1.0, 1.0, 0.0);
        let x = g.scalar(2.0);
        let spec = TttLayerSpec::default();
        let l = inner_loss(&mut g, &spec, &head, &head.w0, x).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
    }

    #[test]
    fn scalar_closed_form() {
        let w1 = closed_form_w1(&Tensor::scalar(1.0), &Tensor::scalar(2.0), &Tensor::scalar(3.0));
        assert_eq!(w1.item(), 6.0);
        let step = {
            let mut g = Graph::<f64>::new();
            let head = scalar_head(&mut g, 2.0, 3.0, 0.0);
            let x = g.scalar(1.0);
            let w = inner_step(&mut g, &TttLayerSpec::default(), &head, &head.w0, x, 1.0).unwrap();
            g.value(w.vars()[0]).item()
        };
        assert_eq!(step, 6.0);
    }

    #[test]
    fn sgd_needs_divisible_steps() {
        let spec = TttLayerSpec { mode: InnerMode::Sgd, steps: 3, ..TttLayerSpec::default() };
        assert!(matches!(spec.validate(8, 4), Err(Error::Config(_))));
        assert!(spec.validate(9, 4).is_ok());
    }

    #[test]
    fn sgd_batches_are_halves_of_permutation() {
        let perm = Rng::new(11).permutation(4);
        let b = sgd_batches(11, 4, 2);
        let mut first = perm[..2].to_vec();
        first.sort_unstable();
        let mut second = perm[2..].to_vec();
        second.sort_unstable();
        assert_eq!(b, alloc::vec![first, second]);
    }

    #[test]
    fn zero_steps_make_no_inner_nodes() {
        let mut rng = Rng::new(1);
        let spec = TttLayerSpec { steps: 0, ..TttLayerSpec::default() };
        let layer = TttLayer::<f64>::new(spec, 4, &mut rng).unwrap();
        let x = rng.normal_tensor(5, 4, 1.0);
        let (y, _) = layer.forward(&x, &InnerContext::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
