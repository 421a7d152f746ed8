//! `mttt` command line.
//!
//! Exit codes: 0 success, 1 configuration or IO error (one line on stderr,
//! `error[kind]: message`), 2 failed verification.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mttt_core::flops::{count, LayerSpec};
use mttt_core::ttt::{InnerMode, TttLayerSpec};
use mttt_core::{DType, Real};
use serde_json::json;

use crate::checkpoint::{peek_dtype, Checkpoint};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::MetricsWriter;
use crate::train::{ablate, evaluate, load_data, write_ablation_csv, Trainer, FULL_GRID};
use crate::verify;

#[derive(Parser, Debug)]
#[command(name = "mttt", version, about = "Test-time-training layers: training, verification and FLOP audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (`key=value`); repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes metrics.csv, checkpoint.bin and summary.json.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Continue from a checkpoint (its config, then `--set` overrides).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Linear-attention and kernel-regression equivalence suites.
    VerifyEquiv {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Finite-difference check of outer gradients per parameter group.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Exact FLOP count of one sequence layer.
    Flops {
        #[arg(long)]
        layer: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// gd | sgd
        #[arg(long, default_value = "gd")]
        mode: String,
        #[arg(long)]
        decoder_ln: bool,
        /// Layer name to report the ratio against.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Decoder LN x trained W0 grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Cells as `LN:W0` pairs of on/off, e.g. `on:on,off:off`; default all four.
        #[arg(long, value_delimiter = ',')]
        cells: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            let kind = match &e {
                Error::Io { .. } => "io",
                Error::BadMagic { .. } | Error::Truncated { .. } | Error::CountMismatch { .. } | Error::Format { .. } => {
                    "format"
                }
                Error::Config(_) => "config",
                Error::NonFinite { .. } => "non-finite",
                Error::Core(_) => "core",
                Error::Csv(_) => "csv",
            };
            eprintln!("error[{kind}]: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn resolve(args: &ConfigArgs) -> Result<Config> {
    let mut c = Config::default();
    if let Some(path) = &args.config {
        c.apply_file(path)?;
    }
    c.apply_overrides(&args.overrides)?;
    c.validate()?;
    Ok(c)
}

fn out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    write(path, serde_json::to_string_pretty(v).expect("json") + "\n")
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Train { cfg, out, resume } => {
            match resume {
                Some(ckpt) => match peek_dtype(&ckpt)? {
                    DType::F32 => train_resume::<f32>(&ckpt, &cfg.overrides, &out),
                    DType::F64 => train_resume::<f64>(&ckpt, &cfg.overrides, &out),
                },
                None => {
                    let config = resolve(&cfg)?;
                    match config.train.dtype {
                        DType::F32 => train_fresh::<f32>(config, &out),
                        DType::F64 => train_fresh::<f64>(config, &out),
                    }
                }
            }?;
            Ok(true)
        }
        Command::Eval { checkpoint, overrides, out } => {
            match peek_dtype(&checkpoint)? {
                DType::F32 => eval_checkpoint::<f32>(&checkpoint, &overrides, &out),
                DType::F64 => eval_checkpoint::<f64>(&checkpoint, &overrides, &out),
            }?;
            Ok(true)
        }
        Command::VerifyEquiv { trials, seed, out } => {
            out_dir(&out)?;
            write_json(&out.join("resolved.json"), &json!({"command": "verify-equiv", "trials": trials, "seed": seed}))?;
            let lin = verify::linear_equivalence(trials, seed)?;
            let ker = verify::kernel_equivalence(trials, seed)?;
            for s in [&lin, &ker] {
                println!(
                    "{}: trials={} max_rel_err={:e} tol={:e} {}",
                    s.name,
                    s.trials.len(),
                    s.max_rel_err(),
                    s.tol,
                    if s.passed() { "PASS" } else { "FAIL" }
                );
            }
            write_json(&out.join("verify_equiv.json"), &json!({"seed": seed, "suites": [lin.to_json(), ker.to_json()]}))?;
            Ok(lin.passed() && ker.passed())
        }
        Command::Gradcheck { seed, out } => {
            out_dir(&out)?;
            write_json(&out.join("resolved.json"), &json!({"command": "gradcheck", "seed": seed}))?;
            let cases = verify::gradcheck_suite(seed)?;
            for c in &cases {
                let mode = if c.mode == InnerMode::Sgd { "sgd" } else { "gd" };
                for (g, four, two) in &c.groups {
                    println!("T={} {mode} {g}: max_rel_err={four:e} (two-point {two:e})", c.steps);
                }
                println!(
                    "T={} {mode}: max_rel_err={:e} tol={:e} {}",
                    c.steps,
                    c.max_err(),
                    verify::GRAD_TOL,
                    if c.passed() { "PASS" } else { "FAIL" }
                );
            }
            write_json(&out.join("gradcheck.json"), &verify::grad_cases_json(&cases))?;
            Ok(cases.iter().all(verify::GradCase::passed))
        }
        Command::Flops { layer, n, d, heads, steps, mode, decoder_ln, baseline, out } => {
            out_dir(&out)?;
            let mode = match mode.as_str() {
                "gd" => InnerMode::FullBatchGd,
                "sgd" => InnerMode::Sgd,
                other => return Err(Error::Config(format!("--mode: expected gd or sgd, got `{other}`"))),
            };
            let ttt = TttLayerSpec { steps, mode, decoder_ln, ..TttLayerSpec::default() };
            write_json(
                &out.join("resolved.json"),
                &json!({"command": "flops", "layer": layer, "n": n, "d": d, "heads": heads, "steps": steps,
                        "mode": if mode == InnerMode::Sgd { "sgd" } else { "gd" }, "decoder_ln": decoder_ln, "baseline": baseline}),
            )?;
            let mut report = count(&LayerSpec::parse(&layer, heads, &ttt)?, n, d)?;
            let mut base_total = None;
            if let Some(b) = &baseline {
                let base = count(&LayerSpec::parse(b, heads, &ttt)?, n, d)?;
                base_total = Some(base.total);
                report = report.with_baseline(&base);
            }
            let w0 = report.w0_flops();
            let v = json!({
                "label": report.label,
                "total": report.total,
                "terms": report.terms.iter().map(|t| json!({"name": t.name, "flops": t.flops, "w0_dependent": t.w0_dependent})).collect::<Vec<_>>(),
                "baseline": report.baseline,
                "baseline_total": base_total,
                "ratio": report.ratio,
                "w0_flops": w0,
                "total_minus_w0": report.total - w0,
                "w0_identity": base_total.map(|b| report.total - w0 == b),
            });
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            write_json(&out.join("flops.json"), &v)?;
            Ok(true)
        }
        Command::Ablate { cfg, cells, out } => {
            let config = resolve(&cfg)?;
            let cells = parse_cells(&cells)?;
            match config.train.dtype {
                DType::F32 => run_ablation::<f32>(config, &cells, &out),
                DType::F64 => run_ablation::<f64>(config, &cells, &out),
            }?;
            Ok(true)
        }
    }
}

fn parse_cells(cells: &[String]) -> Result<Vec<(bool, bool)>> {
    if cells.is_empty() {
        return Ok(FULL_GRID.to_vec());
    }
    let flag = |s: &str| match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(Error::Config(format!("--cells: expected on or off, got `{s}`"))),
    };
    cells
        .iter()
        .map(|c| {
            let (ln, w0) = c.split_once(':').ok_or_else(|| Error::Config(format!("--cells: `{c}` is not LN:W0")))?;
            Ok((flag(ln)?, flag(w0)?))
        })
        .collect()
}

fn train_loop<S: Real>(mut trainer: Trainer<S>, out: &Path) -> Result<()> {
    out_dir(out)?;
    write(&out.join("config.resolved"), trainer.config.to_text())?;
    let mut metrics = MetricsWriter::create(&out.join("metrics.csv"))?;
    let ckpt_path = out.join("checkpoint.bin");
    let rows = trainer.run(
        &mut |row| {
            println!("epoch {} {}: loss={:.6} acc={:.4} ({} ms)", row.epoch, row.split, row.loss, row.acc, row.wall_ms);
            metrics.write(row)
        },
        &mut |t| t.checkpoint().save(&ckpt_path),
    )?;
    trainer.checkpoint().save(&ckpt_path)?;
    write_json(&out.join("summary.json"), &json!({"rows": rows.iter().map(|r| r.to_json()).collect::<Vec<_>>()}))
}

fn train_fresh<S: Real>(config: Config, out: &Path) -> Result<()> {
    let (train, test) = load_data::<S>(&config)?;
    train_loop(Trainer::new(config, train, test)?, out)
}

fn train_resume<S: Real>(ckpt: &Path, overrides: &[String], out: &Path) -> Result<()> {
    let c = Checkpoint::<S>::load(ckpt)?;
    let mut config = c.config.clone();
    config.apply_overrides(overrides)?;
    config.validate()?;
    if config.model_config() != c.config.model_config() {
        return Err(Error::Config("overrides may not change the model when resuming".into()));
    }
    let (train, test) = load_data::<S>(&config)?;
    let mut trainer = Trainer::from_checkpoint(c, train, test)?;
    trainer.config = config;
    train_loop(trainer, out)
}

fn eval_checkpoint<S: Real>(path: &Path, overrides: &[String], out: &Path) -> Result<()> {
    let c = Checkpoint::<S>::load(path)?;
    let mut config = c.config.clone();
    config.apply_overrides(overrides)?;
    config.validate()?;
    out_dir(out)?;
    write(&out.join("config.resolved"), config.to_text())?;
    let (_, test) = load_data::<S>(&config)?;
    let model = mttt_core::model::Model { config: c.config.model_config(), params: c.params };
    let row = evaluate(&model, &test, config.train.seed, c.epoch, "test", config.train.record_inner)?;
    println!("test: loss={:.6} acc={:.4} instances={}", row.loss, row.acc, row.instances);
    for (l, p) in &row.inner {
        println!("layer {l} inner loss: {p:?}");
    }
    let mut w = MetricsWriter::create(&out.join("metrics.csv"))?;
    w.write(&row)?;
    write_json(&out.join("eval.json"), &row.to_json())
}

fn run_ablation<S: Real>(config: Config, cells: &[(bool, bool)], out: &Path) -> Result<()> {
    out_dir(out)?;
    write(&out.join("config.resolved"), config.to_text())?;
    let (train, test) = load_data::<S>(&config)?;
    let rows = ablate(&config, cells, &train, &test, &mut |r, _| {
        if let Some(msg) = &r.diverged {
            println!("decoder_ln={} train_w0={}: diverged ({msg})", r.decoder_ln, r.train_w0);
            return Ok(());
        }
        println!(
            "decoder_ln={} train_w0={}: test_acc={:.4} test_loss={:.6} train_acc={:.4} ({} ms)",
            r.decoder_ln, r.train_w0, r.test_acc, r.test_loss, r.train_acc, r.wall_ms
        );
        Ok(())
    })?;
    write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    write_json(
        &out.join("ablation.json"),
        &json!(rows
            .iter()
            .map(|r| json!({"decoder_ln": r.decoder_ln, "train_w0": r.train_w0, "train_acc": r.train_acc,
                            "test_loss": r.test_loss, "test_acc": r.test_acc, "wall_ms": r.wall_ms, "diverged": r.diverged}))
            .collect::<Vec<_>>()),
    )
}
