//! Outer training loop, evaluation and the decoder-LN x trained-W0 ablation.
//!
//! Instances of a batch run on worker threads; their gradients are summed in
//! instance order and divided by the batch size, so results do not depend on
//! the number of threads.

use std::path::Path;
use std::time::Instant;

use mttt_core::data::{synthetic, Dataset};
use mttt_core::model::{ForwardContext, InstanceOutcome, Model};
use mttt_core::optim::{CosineSchedule, Optimizer};
use mttt_core::rng::{self, Rng};
use mttt_core::{Real, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, DataSource};
use crate::error::{Error, Result};
use crate::idx::{load_mnist, Split};
use crate::metrics::MetricsRow;

/// Instance ids used by evaluation start here, so evaluation never shares
/// inner-loop permutations with training.
pub const EVAL_INSTANCE_OFFSET: u64 = 1 << 32;

/// Training and test splits for `config`.
pub fn load_data<S: Real>(config: &Config) -> Result<(Dataset<S>, Dataset<S>)> {
    let t = &config.train;
    let limit = |l: usize| if l == 0 { None } else { Some(l) };
    match t.dataset {
        DataSource::Mnist => {
            let scheme = config.model_config().tokens;
            let train = load_mnist(&t.data_dir, Split::Train, scheme, limit(t.train_limit))?;
            let test = load_mnist(&t.data_dir, Split::Test, scheme, limit(t.test_limit))?;
            Ok((train.cast(), test.cast()))
        }
        DataSource::Synthetic => {
            let all: Dataset<S> = synthetic(&config.synthetic_spec(true))?;
            let n = t.synthetic_train;
            let train = Dataset { inputs: all.inputs[..n].to_vec(), labels: all.labels[..n].to_vec(), classes: all.classes };
            let test = Dataset { inputs: all.inputs[n..].to_vec(), labels: all.labels[n..].to_vec(), classes: all.classes };
            let cap = |d: Dataset<S>, l: usize| if l == 0 { d } else { d.take(l) };
            Ok((cap(train, t.train_limit), cap(test, t.test_limit)))
        }
    }
}

fn workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Runs `f` on every index, in parallel, returning results in index order.
fn parallel_map<T: Send, F: Fn(usize) -> T + Sync>(count: usize, f: F) -> Vec<T> {
    let w = workers().min(count).max(1);
    if w == 1 {
        return (0..count).map(f).collect();
    }
    let chunk = count.div_ceil(w);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..w)
            .map(|k| {
                let f = &f;
                s.spawn(move || (k * chunk..((k + 1) * chunk).min(count)).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Reruns a failed instance with inner losses recorded to locate the first
/// non-finite value.
fn diagnose<S: Real>(model: &Model<S>, raw: &Tensor<S>, label: usize, ctx: &ForwardContext, cause: String) -> Error {
    let ctx = ForwardContext { record_losses: true, ..*ctx };
    let mut location = String::new();
    match model.run(raw, label, &ctx, false) {
        Ok(out) => {
            'find: for (l, losses) in out.inner_losses.iter().enumerate() {
                for (t, v) in losses.iter().enumerate() {
                    if !v.is_finite() {
                        location = format!(", layer {l}, inner step {t}");
                        break 'find;
                    }
                }
            }
        }
        Err(mttt_core::Error::NonFiniteActivation { token, context }) => location = format!(" ({context}, token {token})"),
        Err(_) => {}
    }
    Error::NonFinite { instance: ctx.instance as usize, epoch: ctx.epoch, location, cause }
}

fn run_checked<S: Real>(
    model: &Model<S>,
    raw: &Tensor<S>,
    label: usize,
    ctx: &ForwardContext,
    with_grads: bool,
) -> Result<InstanceOutcome<S>> {
    match model.run(raw, label, ctx, with_grads) {
        Ok(out) if !out.loss.is_finite() => Err(diagnose(model, raw, label, ctx, format!("loss is {}", out.loss))),
        Ok(out) => match out.grads.iter().position(|g| !g.all_finite()) {
            Some(i) => {
                let name = model.params.names().nth(i).unwrap_or("?").to_string();
                Err(diagnose(model, raw, label, ctx, format!("gradient of `{name}` is not finite")))
            }
            None => Ok(out),
        },
        Err(mttt_core::Error::NonFiniteActivation { context, .. }) => {
            Err(diagnose(model, raw, label, ctx, format!("non-finite activation ({context})")))
        }
        Err(e) => Err(e.into()),
    }
}

/// Loss, accuracy and mean inner-loss profiles of `model` on `data`.
/// Evaluation instance `i` uses id `EVAL_INSTANCE_OFFSET + i`.
pub fn evaluate<S: Real>(
    model: &Model<S>,
    data: &Dataset<S>,
    seed: u64,
    epoch: u64,
    split: &str,
    record_inner: bool,
) -> Result<MetricsRow> {
    let start = Instant::now();
    let outcomes = parallel_map(data.len(), |i| {
        let ctx = ForwardContext { seed, instance: EVAL_INSTANCE_OFFSET + i as u64, epoch, record_losses: record_inner };
        run_checked(model, &data.inputs[i], data.labels[i], &ctx, false)
    });
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut decreasing: Vec<usize> = Vec::new();
    for (i, out) in outcomes.into_iter().enumerate() {
        let out = out?;
        loss += out.loss;
        correct += (out.predicted() == data.labels[i]) as usize;
        if sums.is_empty() {
            sums = out.inner_losses.iter().map(|p| vec![0.0; p.len()]).collect();
            decreasing = vec![0; sums.len()];
        }
        for (l, p) in out.inner_losses.iter().enumerate() {
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
            if !p.is_empty() && p.windows(2).all(|w| w[1] < w[0]) {
                decreasing[l] += 1;
            }
        }
    }
    let n = data.len().max(1) as f64;
    let layers: Vec<usize> = (0..sums.len()).filter(|&l| !sums[l].is_empty()).collect();
    Ok(MetricsRow {
        epoch,
        split: split.to_string(),
        loss: loss / n,
        acc: correct as f64 / n,
        inner: layers.iter().map(|&l| (l, sums[l].iter().map(|s| s / n).collect())).collect(),
        decreasing: layers.iter().map(|&l| (l, decreasing[l] as f64 / n)).collect(),
        instances: data.len(),
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

pub struct Trainer<S: Real = f64> {
    pub config: Config,
    pub model: Model<S>,
    pub optimizer: Optimizer<S>,
    /// Completed epochs.
    pub epoch: u64,
    /// Data-order generator state for the next epoch.
    pub rng_state: u64,
    pub train: Dataset<S>,
    pub test: Dataset<S>,
}

impl<S: Real> Trainer<S> {
    pub fn new(config: Config, train: Dataset<S>, test: Dataset<S>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let model = config.build_model::<S>()?;
        let optimizer = Optimizer::new(config.train.optimizer, config.train.weight_decay, &model.params);
        let rng_state = rng::derive_seed(config.train.seed, &[rng::stream::DATA_SHUFFLE]);
        Ok(Trainer { config, model, optimizer, epoch: 0, rng_state, train, test })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<S>, train: Dataset<S>, test: Dataset<S>) -> Result<Self> {
        let model = Model { config: ckpt.config.model_config(), params: ckpt.params };
        Ok(Trainer {
            config: ckpt.config,
            model,
            optimizer: ckpt.optimizer,
            epoch: ckpt.epoch,
            rng_state: ckpt.rng_state,
            train,
            test,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            rng_state: self.rng_state,
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.config.train.batch_size) as u64
    }

    pub fn schedule(&self) -> CosineSchedule {
        let t = &self.config.train;
        CosineSchedule { base: t.lr, warmup: t.warmup_steps, total: t.epochs as u64 * self.batches_per_epoch() }
    }

    /// One pass over the shuffled training set; returns the mean training
    /// loss and accuracy.
    pub fn train_epoch(&mut self) -> Result<MetricsRow> {
        let start = Instant::now();
        let epoch = self.epoch;
        let seed = self.config.train.seed;
        let mut order_rng = Rng::new(self.rng_state);
        let order = order_rng.permutation(self.train.len());
        let schedule = self.schedule();
        let (mut loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(self.config.train.batch_size) {
            let model = &self.model;
            let train = &self.train;
            let outcomes = parallel_map(batch.len(), |k| {
                let i = batch[k];
                let ctx = ForwardContext { seed, instance: i as u64, epoch, record_losses: false };
                run_checked(model, &train.inputs[i], train.labels[i], &ctx, true)
            });
            let mut sum: Vec<Tensor<S>> = Vec::new();
            for (k, out) in outcomes.into_iter().enumerate() {
                let out = out?;
                loss += out.loss;
                correct += (out.predicted() == self.train.labels[batch[k]]) as usize;
                if sum.is_empty() {
                    sum = out.grads;
                } else {
                    for (s, g) in sum.iter_mut().zip(&out.grads) {
                        *s = s.add(g);
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor<S>> = sum.iter().map(|g| g.scale(S::from_f64(inv))).collect();
            let lr = schedule.lr(self.optimizer.step);
            self.optimizer.update(&mut self.model.params, &grads, lr)?;
        }
        self.rng_state = order_rng.state();
        self.epoch += 1;
        let n = self.train.len() as f64;
        Ok(MetricsRow {
            epoch: self.epoch,
            split: "train".into(),
            loss: loss / n,
            acc: correct as f64 / n,
            inner: Vec::new(),
            decreasing: Vec::new(),
            instances: self.train.len(),
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }

    /// Evaluates the current model on the test split.
    pub fn evaluate(&self) -> Result<MetricsRow> {
        evaluate(&self.model, &self.test, self.config.train.seed, self.epoch, "test", self.config.train.record_inner)
    }

    /// Trains until `train.epochs` epochs are complete, evaluating every
    /// `train.eval_every` epochs and after the last. `sink` sees every row
    /// as it is produced; `on_epoch` runs after each epoch.
    pub fn run(
        &mut self,
        sink: &mut dyn FnMut(&MetricsRow) -> Result<()>,
        on_epoch: &mut dyn FnMut(&Self) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        let total = self.config.train.epochs as u64;
        while self.epoch < total {
            let row = self.train_epoch()?;
            sink(&row)?;
            rows.push(row);
            if self.epoch % self.config.train.eval_every as u64 == 0 || self.epoch == total {
                let row = self.evaluate()?;
                sink(&row)?;
                rows.push(row);
            }
            on_epoch(self)?;
        }
        Ok(rows)
    }
}

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub decoder_ln: bool,
    pub train_w0: bool,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub wall_ms: u64,
    /// Set when training hit a non-finite value; the accuracies are then NaN.
    pub diverged: Option<String>,
}

/// Trains every `(decoder_ln, train_w0)` cell from `base` with identical
/// seeds, data and budget. A cell that diverges is recorded, not fatal.
pub fn ablate<S: Real>(
    base: &Config,
    cells: &[(bool, bool)],
    train: &Dataset<S>,
    test: &Dataset<S>,
    sink: &mut dyn FnMut(&AblationRow, &[MetricsRow]) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut out = Vec::with_capacity(cells.len());
    for &(decoder_ln, train_w0) in cells {
        let start = Instant::now();
        let mut cfg = base.clone();
        cfg.ttt.decoder_ln = decoder_ln;
        cfg.ttt.train_w0 = train_w0;
        let mut trainer = Trainer::new(cfg, train.clone(), test.clone())?;
        let (rows, diverged) = match trainer.run(&mut |_| Ok(()), &mut |_| Ok(())) {
            Ok(rows) => (rows, None),
            Err(e @ Error::NonFinite { .. }) => (Vec::new(), Some(e.to_string())),
            Err(e) => return Err(e),
        };
        let last_train = rows.iter().rev().find(|r| r.split == "train");
        let last_test = rows.iter().rev().find(|r| r.split == "test");
        let row = AblationRow {
            decoder_ln,
            train_w0,
            train_acc: last_train.map_or(f64::NAN, |r| r.acc),
            test_loss: last_test.map_or(f64::NAN, |r| r.loss),
            test_acc: last_test.map_or(f64::NAN, |r| r.acc),
            wall_ms: start.elapsed().as_millis() as u64,
            diverged,
        };
        sink(&row, &rows)?;
        out.push(row);
    }
    Ok(out)
}

/// The full 2 x 2 grid in display order.
pub const FULL_GRID: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

/// Writes an ablation table as CSV.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["decoder_ln", "train_w0", "train_acc", "test_loss", "test_acc", "wall_ms", "diverged"])?;
    for r in rows {
        w.write_record([
            r.decoder_ln.to_string(),
            r.train_w0.to_string(),
            r.train_acc.to_string(),
            r.test_loss.to_string(),
            r.test_acc.to_string(),
            r.wall_ms.to_string(),
            r.diverged.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
