//! A small ViT-style classifier whose sequence layers are TTT layers or
//! reference attention.
//!
//! ```text
//! tokens = raw · embed.w + embed.b + pos
//! block:   z += seq(LN(z));  z += MLP(LN(z))
//! logits = LN(mean_tokens(z)) · head.w + head.b
//! ```
//!
//! Inside a TTT block the inner loop reconstructs the post-LN tokens
//! `LN(z)`. Positional embeddings are added once, before the first block.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{self, AttentionKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::ttt::{self, InnerContext, InnerTrajectory, Learner, TttLayerSpec};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    TttLinear,
    TttMlp,
    SoftmaxAttn,
    LinearAttnIdentity,
    LinearAttnElu,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::TttLinear => "ttt-linear",
            LayerKind::TttMlp => "ttt-mlp",
            LayerKind::SoftmaxAttn => "softmax-attn",
            LayerKind::LinearAttnIdentity => "linear-attn",
            LayerKind::LinearAttnElu => "linear-attn-elu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ttt-linear" => LayerKind::TttLinear,
            "ttt-mlp" => LayerKind::TttMlp,
            "softmax-attn" => LayerKind::SoftmaxAttn,
            "linear-attn" => LayerKind::LinearAttnIdentity,
            "linear-attn-elu" => LayerKind::LinearAttnElu,
            other => return Err(Error::UnsupportedLayer(String::from(other))),
        })
    }

    pub fn is_ttt(self) -> bool {
        matches!(self, LayerKind::TttLinear | LayerKind::TttMlp)
    }

    fn attention(self) -> Option<AttentionKind> {
        match self {
            LayerKind::SoftmaxAttn => Some(AttentionKind::Softmax),
            LayerKind::LinearAttnIdentity => Some(AttentionKind::LinearIdentity),
            LayerKind::LinearAttnElu => Some(AttentionKind::LinearElu),
            _ => None,
        }
    }
}

/// How raw inputs become tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenScheme {
    /// Non-overlapping `p x p` patches of a square image, flattened (row-major,
    /// channels last).
    Patch(usize),
    /// One token per pixel holding its channel vector.
    Pixel,
    /// Inputs are already `[n, dim]` token matrices.
    Raw { n: usize, dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub layer: LayerKind,
    pub tokens: TokenScheme,
    pub image_side: usize,
    pub channels: usize,
    pub classes: usize,
    /// Inner-loop settings; `learner` and `heads` are taken from `layer` and
    /// `heads` above.
    pub ttt: TttLayerSpec,
    /// Standard deviation of the positional-embedding initialisation.
    pub pos_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            width: 64,
            heads: 2,
            layer: LayerKind::TttLinear,
            tokens: TokenScheme::Pixel,
            image_side: 28,
            channels: 1,
            classes: 10,
            ttt: TttLayerSpec::default(),
            pos_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn n_tokens(&self) -> usize {
        match self.tokens {
            TokenScheme::Patch(p) => (self.image_side / p) * (self.image_side / p),
            TokenScheme::Pixel => self.image_side * self.image_side,
            TokenScheme::Raw { n, .. } => n,
        }
    }

    pub fn token_dim(&self) -> usize {
        match self.tokens {
            TokenScheme::Patch(p) => p * p * self.channels,
            TokenScheme::Pixel => self.channels,
            TokenScheme::Raw { dim, .. } => dim,
        }
    }

    /// The layer spec actually used by TTT blocks.
    pub fn ttt_spec(&self) -> TttLayerSpec {
        let learner = if self.layer == LayerKind::TttMlp { Learner::Mlp } else { Learner::Linear };
        TttLayerSpec { learner, heads: self.heads, ..self.ttt.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.classes == 0 || self.channels == 0 {
            return Err(Error::Config(String::from("depth, width, classes and channels must be positive")));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        if let TokenScheme::Patch(p) = self.tokens {
            if p == 0 || self.image_side % p != 0 {
                return Err(Error::Config(format!(
                    "patch size {p} does not divide image side {}",
                    self.image_side
                )));
            }
        }
        if let TokenScheme::Raw { n, dim } = self.tokens {
            if n == 0 || dim == 0 {
                return Err(Error::Config(String::from("raw tokens need n, dim > 0")));
            }
        }
        if self.layer.is_ttt() {
            self.ttt_spec().validate(self.n_tokens(), self.width)?;
        }
        Ok(())
    }
}

/// Cuts a square image (row-major, channels last, `side*side*channels`
/// values) into raw tokens according to `scheme`.
pub fn patchify<S: Real>(image: &[S], side: usize, channels: usize, scheme: TokenScheme) -> Result<Tensor<S>> {
    if image.len() != side * side * channels {
        return Err(Error::Shape(format!(
            "image has {} values, expected {side}x{side}x{channels}",
            image.len()
        )));
    }
    let p = match scheme {
        TokenScheme::Patch(p) => p,
        TokenScheme::Pixel => 1,
        TokenScheme::Raw { n, dim } => return Tensor::new(alloc::vec![n, dim], image.to_vec()),
    };
    if p == 0 || side % p != 0 {
        return Err(Error::Config(format!("patch size {p} does not divide image side {side}")));
    }
    let per = side / p;
    let dim = p * p * channels;
    let mut out = Vec::with_capacity(per * per * dim);
    for pr in 0..per {
        for pc in 0..per {
            for r in 0..p {
                let row = pr * p + r;
                let start = (row * side + pc * p) * channels;
                out.extend_from_slice(&image[start..start + p * channels]);
            }
        }
    }
    Ok(Tensor::from_vec(per * per, dim, out))
}

/// Fresh parameters with canonical names.
pub fn init_params<S: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<S>> {
    cfg.validate()?;
    let mut rng = Rng::derived(seed, &[rng::stream::PARAM_INIT]);
    let d = cfg.width;
    let din = cfg.token_dim();
    let mut p = ParamSet::new();
    p.insert("embed.w", rng.uniform_tensor(din, d, 1.0 / libm::sqrt(din as f64)), true);
    p.insert("embed.b", Tensor::zeros(1, d), true);
    p.insert("pos", rng.normal_tensor(cfg.n_tokens(), d, cfg.pos_init_std), true);
    for l in 0..cfg.depth {
        let mut b = ParamSet::new();
        b.insert("ln1.gamma", Tensor::ones(1, d), true);
        b.insert("ln1.beta", Tensor::zeros(1, d), true);
        let seq = if cfg.layer.is_ttt() { ttt::init_params(&cfg.ttt_spec(), d, &mut rng) } else { attention::init_params(d, &mut rng) };
        b.extend_prefixed("seq", seq);
        b.insert("ln2.gamma", Tensor::ones(1, d), true);
        b.insert("ln2.beta", Tensor::zeros(1, d), true);
        b.insert("mlp.w1", rng.uniform_tensor(d, 4 * d, 1.0 / libm::sqrt(d as f64)), true);
        b.insert("mlp.b1", Tensor::zeros(1, 4 * d), true);
        b.insert("mlp.w2", rng.uniform_tensor(4 * d, d, 1.0 / libm::sqrt(4.0 * d as f64)), true);
        b.insert("mlp.b2", Tensor::zeros(1, d), true);
        p.extend_prefixed(&format!("blocks.{l}"), b);
    }
    p.insert("head.ln.gamma", Tensor::ones(1, d), true);
    p.insert("head.ln.beta", Tensor::zeros(1, d), true);
    p.insert("head.w", rng.uniform_tensor(d, cfg.classes, 1.0 / libm::sqrt(d as f64)), true);
    p.insert("head.b", Tensor::zeros(1, cfg.classes), true);
    Ok(p)
}

/// Per-instance randomness and diagnostics switches.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardContext {
    pub seed: u64,
    pub instance: u64,
    pub epoch: u64,
    pub record_losses: bool,
}

impl ForwardContext {
    /// Mini-batch permutation seed of TTT layer `layer`.
    pub fn perm_seed(&self, layer: usize) -> u64 {
        rng::derive_seed(self.seed, &[rng::stream::INNER_PERMUTATION, self.instance, self.epoch, layer as u64])
    }
}

/// Embedded tokens `raw · embed.w + embed.b + pos`.
pub fn embed<S: Real>(g: &mut Graph<S>, p: &Bound, raw: Var) -> Result<Var> {
    let e = g.matmul(raw, p.get("embed.w")?);
    let e = g.add(e, p.get("embed.b")?);
    Ok(g.add(e, p.get("pos")?))
}

/// One pre-LN residual block. Returns the output and, for TTT layers, the
/// inner trajectory.
pub fn block_forward<S: Real>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    p: &Bound,
    z: Var,
    ctx: &InnerContext,
) -> Result<(Var, Option<InnerTrajectory>)> {
    let x = g.layer_norm(z, p.get("ln1.gamma")?, p.get("ln1.beta")?, LN_EPS);
    let seq = p.scoped("seq");
    let (y, traj) = match cfg.layer.attention() {
        Some(kind) => (attention::attention(g, kind, cfg.heads, &seq, x)?, None),
        None => {
            let spec = cfg.ttt_spec();
            let vars = ttt::bind(g, &spec, cfg.width, &seq)?;
            let (y, traj) = ttt::ttt_forward(g, &spec, &vars, x, ctx)?;
            (y, Some(traj))
        }
    };
    let z = g.add(z, y);
    let x2 = g.layer_norm(z, p.get("ln2.gamma")?, p.get("ln2.beta")?, LN_EPS);
    let h = g.matmul(x2, p.get("mlp.w1")?);
    let h = g.add(h, p.get("mlp.b1")?);
    let h = g.gelu(h);
    let m = g.matmul(h, p.get("mlp.w2")?);
    let m = g.add(m, p.get("mlp.b2")?);
    Ok((g.add(z, m), traj))
}

/// Mean over tokens, layer norm, linear map to `[1, classes]` logits.
pub fn aggregate_predict<S: Real>(g: &mut Graph<S>, p: &Bound, z: Var) -> Result<Var> {
    let m = g.mean_rows(z);
    let m = g.layer_norm(m, p.get("head.ln.gamma")?, p.get("head.ln.beta")?, LN_EPS);
    let l = g.matmul(m, p.get("head.w")?);
    Ok(g.add(l, p.get("head.b")?))
}

/// Output of a full forward pass.
pub struct Forward {
    pub logits: Var,
    /// One entry per block; `None` for attention blocks.
    pub trajectories: Vec<Option<InnerTrajectory>>,
}

/// Forward pass on raw tokens `raw` (`[n, token_dim]`).
pub fn forward<S: Real>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    p: &Bound,
    raw: Var,
    ctx: &ForwardContext,
) -> Result<Forward> {
    let mut z = embed(g, p, raw)?;
    let mut trajectories = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let inner = InnerContext { perm_seed: Some(ctx.perm_seed(l)), record_losses: ctx.record_losses };
        let (next, traj) = block_forward(g, cfg, &p.scoped(&format!("blocks.{l}")), z, &inner).map_err(|e| match e {
            Error::NonFiniteActivation { token, context } => {
                Error::NonFiniteActivation { token, context: format!("layer {l}, {context}") }
            }
            other => other,
        })?;
        z = next;
        trajectories.push(traj);
    }
    Ok(Forward { logits: aggregate_predict(g, p, z)?, trajectories })
}

/// Cross-entropy of the prediction for `raw` against `label`.
pub fn outer_loss<S: Real>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    p: &Bound,
    raw: Var,
    label: usize,
    ctx: &ForwardContext,
) -> Result<(Var, Forward)> {
    if label >= cfg.classes {
        return Err(Error::Config(format!("label {label} out of range for {} classes", cfg.classes)));
    }
    let f = forward(g, cfg, p, raw, ctx)?;
    Ok((g.cross_entropy(f.logits, label), f))
}

/// Result of one training instance.
#[derive(Clone, Debug)]
pub struct InstanceOutcome<S: Real = f64> {
    pub loss: f64,
    pub logits: Tensor<S>,
    /// Gradients in parameter order; empty for inference.
    pub grads: Vec<Tensor<S>>,
    /// Per block, the layer's full-batch inner loss at each step (empty when
    /// not recorded or for attention blocks).
    pub inner_losses: Vec<Vec<f64>>,
}

impl<S: Real> InstanceOutcome<S> {
    pub fn predicted(&self) -> usize {
        let row = self.logits.row(0);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

/// Parameters plus configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Real = f64> {
    pub config: ModelConfig,
    pub params: ParamSet<S>,
}

impl<S: Real> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Loss, logits and (if `with_grads`) outer gradients for one instance.
    pub fn run(
        &self,
        raw: &Tensor<S>,
        label: usize,
        ctx: &ForwardContext,
        with_grads: bool,
    ) -> Result<InstanceOutcome<S>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.leaf(raw.clone());
        let (loss, f) = outer_loss(&mut g, &self.config, &bound, x, label, ctx)?;
        let lv = g.value(loss).item().to_f64();
        let grads = if with_grads {
            if !lv.is_finite() {
                return Err(Error::NonFiniteActivation {
                    token: 0,
                    context: format!("outer loss is {lv} for instance {}", ctx.instance),
                });
            }
            let gv = g.backward(loss, bound.vars())?;
            gv.into_iter().map(|v| g.value(v).clone()).collect()
        } else {
            Vec::new()
        };
        Ok(InstanceOutcome {
            loss: lv,
            logits: g.value(f.logits).clone(),
            grads,
            inner_losses: f.trajectories.iter().map(|t| t.as_ref().map(|t| t.losses()).unwrap_or_default()).collect(),
        })
    }
}
