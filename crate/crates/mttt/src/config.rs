//! Flat `key = value` run configuration.
//!
//! Keys are namespaced `model.`, `ttt.` and `train.`; `#` starts a comment.
//! Unknown keys and malformed values are errors. Later assignments win, so
//! defaults < file < command-line overrides is just the order of application.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mttt_core::data::SyntheticSpec;
use mttt_core::model::{LayerKind, Model, ModelConfig, TokenScheme};
use mttt_core::optim::OptimizerKind;
use mttt_core::ttt::{HeadReduction, HeadWiring, InnerMode, TttLayerSpec};
use mttt_core::{DType, Real};

use crate::error::{Error, Result};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("model.depth", "number of blocks"),
    ("model.width", "token width d"),
    ("model.heads", "heads H (d must be divisible by H)"),
    ("model.layer", "ttt-linear | ttt-mlp | softmax-attn | linear-attn | linear-attn-elu"),
    ("model.tokens", "pixel | patch:P | raw (raw uses the synthetic token shape)"),
    ("model.image_side", "side of the square input images"),
    ("model.channels", "image channels"),
    ("model.classes", "number of classes"),
    ("model.pos_init_std", "std of the positional-embedding initialisation"),
    ("ttt.steps", "inner steps T"),
    ("ttt.eta", "inner learning rate"),
    ("ttt.mode", "gd | sgd"),
    ("ttt.decoder_ln", "layer norm on the decoder output (true | false)"),
    ("ttt.train_w0", "learn the inner learner's initial weights (true | false)"),
    ("ttt.wiring", "full-token | slice-concat"),
    ("ttt.reduction", "sum | mean (how head losses combine)"),
    ("train.epochs", "outer epochs"),
    ("train.batch_size", "instances per outer update"),
    ("train.optimizer", "adamw | sgd"),
    ("train.lr", "peak outer learning rate"),
    ("train.warmup_steps", "linear warmup length in updates"),
    ("train.weight_decay", "decoupled weight decay on matrices"),
    ("train.momentum", "SGD momentum"),
    ("train.beta1", "AdamW first-moment decay"),
    ("train.beta2", "AdamW second-moment decay"),
    ("train.eps", "AdamW epsilon"),
    ("train.seed", "global seed"),
    ("train.eval_every", "evaluate every k epochs (the last epoch is always evaluated)"),
    ("train.dtype", "f32 | f64"),
    ("train.dataset", "mnist | synthetic"),
    ("train.data_dir", "directory holding the IDX files"),
    ("train.train_limit", "use at most this many training instances (0 = all)"),
    ("train.test_limit", "use at most this many test instances (0 = all)"),
    ("train.record_inner", "record inner-loss profiles during evaluation (true | false)"),
    ("train.synthetic_n", "synthetic tokens per instance"),
    ("train.synthetic_dim", "synthetic token width"),
    ("train.synthetic_train", "synthetic training instances"),
    ("train.synthetic_test", "synthetic test instances"),
    ("train.synthetic_noise", "synthetic per-token noise std"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tokens {
    Pixel,
    Patch(usize),
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Mnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub dtype: DType,
    pub dataset: DataSource,
    pub data_dir: PathBuf,
    pub train_limit: usize,
    pub test_limit: usize,
    pub record_inner: bool,
    pub synthetic_n: usize,
    pub synthetic_dim: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerKind::adamw(),
            lr: 1e-3,
            warmup_steps: 50,
            weight_decay: 0.05,
            seed: 0,
            eval_every: 1,
            dtype: DType::F32,
            dataset: DataSource::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            train_limit: 0,
            test_limit: 0,
            record_inner: true,
            synthetic_n: 16,
            synthetic_dim: 8,
            synthetic_train: 256,
            synthetic_test: 128,
            synthetic_noise: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub layer: LayerKind,
    pub tokens: Tokens,
    pub image_side: usize,
    pub channels: usize,
    pub classes: usize,
    pub pos_init_std: f64,
    pub ttt: TttLayerSpec,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        let m = ModelConfig::default();
        Config {
            depth: m.depth,
            width: m.width,
            heads: m.heads,
            layer: m.layer,
            tokens: Tokens::Pixel,
            image_side: m.image_side,
            channels: m.channels,
            classes: m.classes,
            pos_init_std: m.pos_init_std,
            ttt: m.ttt,
            train: TrainConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        Error::Config(format!("`{key}`: expected one of {}, got `{v}`", names.join(" | ")))
    })
}

impl Config {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "model.depth" => self.depth = num(key, v)?,
            "model.width" => self.width = num(key, v)?,
            "model.heads" => self.heads = num(key, v)?,
            "model.layer" => self.layer = LayerKind::parse(v).map_err(|e| Error::Config(format!("`{key}`: {e}")))?,
            "model.tokens" => {
                self.tokens = match v {
                    "pixel" => Tokens::Pixel,
                    "raw" => Tokens::Raw,
                    _ => match v.strip_prefix("patch:") {
                        Some(p) => Tokens::Patch(num(key, p)?),
                        None => return Err(Error::Config(format!("`{key}`: expected pixel, patch:P or raw, got `{v}`"))),
                    },
                }
            }
            "model.image_side" => self.image_side = num(key, v)?,
            "model.channels" => self.channels = num(key, v)?,
            "model.classes" => self.classes = num(key, v)?,
            "model.pos_init_std" => self.pos_init_std = num(key, v)?,
            "ttt.steps" => self.ttt.steps = num(key, v)?,
            "ttt.eta" => self.ttt.eta = num(key, v)?,
            "ttt.mode" => self.ttt.mode = choice(key, v, &[("gd", InnerMode::FullBatchGd), ("sgd", InnerMode::Sgd)])?,
            "ttt.decoder_ln" => self.ttt.decoder_ln = flag(key, v)?,
            "ttt.train_w0" => self.ttt.train_w0 = flag(key, v)?,
            "ttt.wiring" => {
                self.ttt.wiring =
                    choice(key, v, &[("full-token", HeadWiring::FullToken), ("slice-concat", HeadWiring::SliceConcat)])?
            }
            "ttt.reduction" => {
                self.ttt.reduction = choice(key, v, &[("sum", HeadReduction::Sum), ("mean", HeadReduction::Mean)])?
            }
            "train.epochs" => t.epochs = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.optimizer" => {
                t.optimizer = match v {
                    "adamw" => OptimizerKind::adamw(),
                    "sgd" => OptimizerKind::SgdMomentum { momentum: 0.9 },
                    _ => return Err(Error::Config(format!("`{key}`: expected adamw or sgd, got `{v}`"))),
                }
            }
            "train.lr" => t.lr = num(key, v)?,
            "train.warmup_steps" => t.warmup_steps = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.momentum" => match &mut t.optimizer {
                OptimizerKind::SgdMomentum { momentum } => *momentum = num(key, v)?,
                _ => return Err(Error::Config(format!("`{key}` needs train.optimizer = sgd"))),
            },
            "train.beta1" | "train.beta2" | "train.eps" => match &mut t.optimizer {
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let slot = match key {
                        "train.beta1" => beta1,
                        "train.beta2" => beta2,
                        _ => eps,
                    };
                    *slot = num(key, v)?;
                }
                _ => return Err(Error::Config(format!("`{key}` needs train.optimizer = adamw"))),
            },
            "train.seed" => t.seed = num(key, v)?,
            "train.eval_every" => t.eval_every = num(key, v)?,
            "train.dtype" => t.dtype = choice(key, v, &[("f32", DType::F32), ("f64", DType::F64)])?,
            "train.dataset" => {
                t.dataset = choice(key, v, &[("mnist", DataSource::Mnist), ("synthetic", DataSource::Synthetic)])?
            }
            "train.data_dir" => t.data_dir = PathBuf::from(v),
            "train.train_limit" => t.train_limit = num(key, v)?,
            "train.test_limit" => t.test_limit = num(key, v)?,
            "train.record_inner" => t.record_inner = flag(key, v)?,
            "train.synthetic_n" => t.synthetic_n = num(key, v)?,
            "train.synthetic_dim" => t.synthetic_dim = num(key, v)?,
            "train.synthetic_train" => t.synthetic_train = num(key, v)?,
            "train.synthetic_test" => t.synthetic_test = num(key, v)?,
            "train.synthetic_noise" => t.synthetic_noise = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let tokens = match self.tokens {
            Tokens::Pixel => TokenScheme::Pixel,
            Tokens::Patch(p) => TokenScheme::Patch(p),
            Tokens::Raw => TokenScheme::Raw { n: self.train.synthetic_n, dim: self.train.synthetic_dim },
        };
        ModelConfig {
            depth: self.depth,
            width: self.width,
            heads: self.heads,
            layer: self.layer,
            tokens,
            image_side: self.image_side,
            channels: self.channels,
            classes: self.classes,
            ttt: self.ttt.clone(),
            pos_init_std: self.pos_init_std,
        }
    }

    pub fn synthetic_spec(&self, test: bool) -> SyntheticSpec {
        let t = &self.train;
        SyntheticSpec {
            // The test split is the tail of one train+test draw.
            seed: t.seed,
            classes: self.classes,
            n: t.synthetic_n,
            d: t.synthetic_dim,
            count: if test { t.synthetic_train + t.synthetic_test } else { t.synthetic_train },
            noise: t.synthetic_noise,
        }
    }

    /// Freshly initialised model for this configuration.
    pub fn build_model<S: Real>(&self) -> Result<Model<S>> {
        Ok(Model::new(self.model_config(), self.train.seed)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if t.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be positive".into()));
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return Err(Error::Config(format!("train.lr must be finite and non-negative, got {}", t.lr)));
        }
        match (t.dataset, self.tokens) {
            (DataSource::Synthetic, Tokens::Raw) | (DataSource::Mnist, Tokens::Pixel | Tokens::Patch(_)) => {}
            (DataSource::Synthetic, _) => return Err(Error::Config("synthetic data needs model.tokens = raw".into())),
            (DataSource::Mnist, _) => return Err(Error::Config("MNIST needs model.tokens = pixel or patch:P".into())),
        }
        if t.dataset == DataSource::Mnist && (self.image_side != 28 || self.channels != 1 || self.classes != 10) {
            return Err(Error::Config("MNIST needs model.image_side = 28, model.channels = 1, model.classes = 10".into()));
        }
        Ok(())
    }

    /// Resolved configuration, one `key = value` per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("model.depth", self.depth.to_string());
        put("model.width", self.width.to_string());
        put("model.heads", self.heads.to_string());
        put("model.layer", self.layer.name().into());
        put(
            "model.tokens",
            match self.tokens {
                Tokens::Pixel => "pixel".into(),
                Tokens::Patch(p) => format!("patch:{p}"),
                Tokens::Raw => "raw".into(),
            },
        );
        put("model.image_side", self.image_side.to_string());
        put("model.channels", self.channels.to_string());
        put("model.classes", self.classes.to_string());
        put("model.pos_init_std", format!("{:?}", self.pos_init_std));
        put("ttt.steps", self.ttt.steps.to_string());
        put("ttt.eta", format!("{:?}", self.ttt.eta));
        put("ttt.mode", if self.ttt.mode == InnerMode::Sgd { "sgd" } else { "gd" }.into());
        put("ttt.decoder_ln", self.ttt.decoder_ln.to_string());
        put("ttt.train_w0", self.ttt.train_w0.to_string());
        put("ttt.wiring", if self.ttt.wiring == HeadWiring::FullToken { "full-token" } else { "slice-concat" }.into());
        put("ttt.reduction", if self.ttt.reduction == HeadReduction::Sum { "sum" } else { "mean" }.into());
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        match t.optimizer {
            OptimizerKind::AdamW { beta1, beta2, eps } => {
                put("train.optimizer", "adamw".into());
                put("train.beta1", format!("{beta1:?}"));
                put("train.beta2", format!("{beta2:?}"));
                put("train.eps", format!("{eps:?}"));
            }
            OptimizerKind::SgdMomentum { momentum } => {
                put("train.optimizer", "sgd".into());
                put("train.momentum", format!("{momentum:?}"));
            }
        }
        put("train.lr", format!("{:?}", t.lr));
        put("train.warmup_steps", t.warmup_steps.to_string());
        put("train.weight_decay", format!("{:?}", t.weight_decay));
        put("train.seed", t.seed.to_string());
        put("train.eval_every", t.eval_every.to_string());
        put("train.dtype", if t.dtype == DType::F32 { "f32" } else { "f64" }.into());
        put("train.dataset", if t.dataset == DataSource::Mnist { "mnist" } else { "synthetic" }.into());
        put("train.data_dir", t.data_dir.display().to_string());
        put("train.train_limit", t.train_limit.to_string());
        put("train.test_limit", t.test_limit.to_string());
        put("train.record_inner", t.record_inner.to_string());
        put("train.synthetic_n", t.synthetic_n.to_string());
        put("train.synthetic_dim", t.synthetic_dim.to_string());
        put("train.synthetic_train", t.synthetic_train.to_string());
        put("train.synthetic_test", t.synthetic_test.to_string());
        put("train.synthetic_noise", format!("{:?}", t.synthetic_noise));
        s
    }
}
