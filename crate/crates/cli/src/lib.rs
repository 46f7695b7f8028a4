//! Subcommands behind the `sptseg` binary.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | a verification property failed, or an internal tensor contract was violated |
//! | 2 | invalid config or command line |
//! | 3 | missing or unreadable data, unwritable output |
//! | 4 | non-finite loss during training |
//! | 5 | corrupt or incompatible checkpoint |
//!
//! Machine-readable results go to stdout, diagnostics to stderr.

use clap::{Args, Parser, Subcommand};
use sptseg::checkpoint::{read_checkpoint, write_checkpoint};
use sptseg::config::Config;
use sptseg::data::{encode_pgm, generate_dataset, load_dataset, save_dataset, Dataset};
use sptseg::metrics::{hiou, SegMetrics};
use sptseg::model::{init_model, split_from_store, Ablation};
use sptseg::train::{evaluate, loss_csv, train, LossRecord};
use sptseg::verify::{self, Suite};
use sptseg::Error;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, Parser)]
#[command(name = "sptseg", version, about = "Spectral-prompt zero-shot segmentation on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and test splits.
    GenData(GenDataArgs),
    /// Train prompts and decoder; writes a checkpoint and a loss CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test split and write a metrics report.
    Eval(EvalArgs),
    /// Run built-in oracle suites.
    Verify(VerifyArgs),
    /// Render a loss CSV and a metrics report as markdown.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// TOML config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; receives `train/` and `test/`.
    #[arg(long)]
    pub out: PathBuf,
    /// Root seed, overriding `[train] seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root from `gen-data`, or a split directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `checkpoint.bin` and `loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Component switch, `spt=off` or `sgd=off` (`=on` also accepted). Repeatable.
    #[arg(long, value_parser = parse_ablate)]
    pub ablate: Vec<(String, bool)>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root from `gen-data`, or a split directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Report file to write.
    #[arg(long)]
    pub report: PathBuf,
    /// Optional directory for per-image predicted label maps (PGM).
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// One of fft, grad, hilo, metrics, all.
    #[arg(long, default_value = "all")]
    pub suite: Suite,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Loss CSV written by `train`.
    #[arg(long)]
    pub loss: PathBuf,
    /// Metrics report written by `eval`.
    #[arg(long)]
    pub metrics: PathBuf,
}

fn parse_ablate(s: &str) -> Result<(String, bool), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=off, got `{s}`"))?;
    if k != "spt" && k != "sgd" {
        return Err(format!("unknown component `{k}` (expected spt or sgd)"));
    }
    match v {
        "off" => Ok((k.to_string(), false)),
        "on" => Ok((k.to_string(), true)),
        _ => Err(format!("expected `off` or `on`, got `{v}`")),
    }
}

/// Maps a library error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Dataset(_) => EXIT_IO,
        Error::NonFiniteLoss { .. } => EXIT_NON_FINITE,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::Tensor(_) => EXIT_VERIFY,
    }
}

fn load_config(path: Option<&Path>) -> sptseg::Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// A split directory holds a manifest; a dataset root holds `train/` and `test/`.
fn split_dir(data: &Path, split: &str) -> PathBuf {
    if data.join("manifest.txt").is_file() {
        data.to_path_buf()
    } else {
        data.join(split)
    }
}

fn check_split(ds: &Dataset, seen: &[usize], unseen: &[usize], dir: &Path) -> sptseg::Result<()> {
    if ds.seen != seen || ds.unseen != unseen {
        return Err(Error::Dataset(format!(
            "{}: class split {:?}/{:?} does not match config {:?}/{:?}",
            dir.display(),
            ds.seen,
            ds.unseen,
            seen,
            unseen
        )));
    }
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> sptseg::Result<String> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let (tr, te) = generate_dataset(&cfg.data, cfg.encoder.image_side, cfg.train.seed)?;
    save_dataset(&args.out.join("train"), &tr)?;
    save_dataset(&args.out.join("test"), &te)?;
    Ok(format!(
        "train={} test={} seen={} unseen={}\n",
        tr.len(),
        te.len(),
        tr.seen.len(),
        tr.unseen.len()
    ))
}

pub fn train_cmd(args: &TrainArgs, mut progress: impl FnMut(&LossRecord)) -> sptseg::Result<String> {
    let mut cfg = load_config(args.config.as_deref())?;
    let mut ab = Ablation::default();
    for (k, on) in &args.ablate {
        match k.as_str() {
            "spt" => ab.spt = *on,
            _ => ab.sgd = *on,
        }
    }
    ab.apply(&mut cfg);
    cfg.validate()?;
    let dir = split_dir(&args.data, "train");
    let data = load_dataset(&dir)?;
    let (split, mut store) = init_model(&cfg);
    check_split(&data, split.seen(), split.unseen(), &dir)?;
    let log = train(&mut store, &cfg, &split, &data, &mut progress)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_checkpoint(&args.out.join(CHECKPOINT_FILE), &store, &cfg, cfg.train.checkpoint_dtype)?;
    let csv_path = args.out.join(LOSS_FILE);
    std::fs::write(&csv_path, loss_csv(&log)).map_err(|e| Error::io(&csv_path, e))?;
    Ok(match log.last() {
        Some(r) => format!("step={} focal={} ssim={} total={}\n", r.step, r.focal, r.ssim, r.total),
        None => "step=none\n".to_string(),
    })
}

pub fn eval_cmd(args: &EvalArgs) -> sptseg::Result<String> {
    let (store, cfg) = read_checkpoint(&args.checkpoint)?;
    cfg.validate().map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
    let split = split_from_store(&cfg, &store)?;
    let dir = split_dir(&args.data, "test");
    let data = load_dataset(&dir)?;
    check_split(&data, split.seen(), split.unseen(), &dir)?;
    let (metrics, preds) = evaluate(&store, &cfg, &split, &data, &split.all())?;
    let report = metrics.to_report();
    std::fs::write(&args.report, &report).map_err(|e| Error::io(&args.report, e))?;
    if let Some(d) = &args.dump {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        for (s, p) in data.samples.iter().zip(&preds) {
            let path = d.join(format!("{}.pred.pgm", s.name));
            std::fs::write(&path, encode_pgm(p)).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(report)
}

/// Verification table and the ids of failed properties.
pub fn verify_cmd(suite: Suite) -> (String, Vec<String>) {
    let checks = verify::run(suite);
    let mut out = String::new();
    let mut failed = Vec::new();
    for c in &checks {
        writeln!(out, "{c}").unwrap();
        if !c.passed {
            failed.push(c.id.clone());
        }
    }
    (out, failed)
}

fn parse_loss_csv(text: &str) -> Option<Vec<LossRecord>> {
    let mut lines = text.lines();
    if lines.next()? != sptseg::train::LOSS_CSV_HEADER {
        return None;
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let [step, focal, ssim, total] = f[..] else { return None };
            Some(LossRecord {
                step: step.parse().ok()?,
                focal: focal.parse().ok()?,
                ssim: ssim.parse().ok()?,
                total: total.parse().ok()?,
            })
        })
        .collect()
}

/// Markdown summary of a training run and its evaluation.
pub fn render_report(loss_text: &str, metrics_text: &str) -> sptseg::Result<String> {
    let log = parse_loss_csv(loss_text).ok_or_else(|| Error::Dataset("malformed loss CSV".into()))?;
    let m = SegMetrics::parse_report(metrics_text).ok_or_else(|| Error::Dataset("malformed metrics report".into()))?;
    let mut out = String::from("# Training summary\n\n## Metrics\n\n| pAcc | mIoU(S) | mIoU(U) | hIoU |\n|---:|---:|---:|---:|\n");
    writeln!(out, "| {:.2} | {:.2} | {:.2} | {:.2} |", m.pacc, m.miou_seen, m.miou_unseen, m.hiou).unwrap();
    if (hiou(m.miou_seen, m.miou_unseen) - m.hiou).abs() > 0.01 {
        out.push_str("\nhIoU is inconsistent with the two mIoU values.\n");
    }
    out.push_str("\n## Loss\n\n");
    if log.is_empty() {
        out.push_str("No steps recorded.\n");
        return Ok(out);
    }
    let (first, last) = (log[0], log[log.len() - 1]);
    let min = log.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
    writeln!(out, "{} steps; total loss {:.4} → {:.4} (min {:.4}).\n", log.len(), first.total, last.total, min).unwrap();
    out.push_str("| steps | focal | ssim | total |\n|---|---:|---:|---:|\n");
    let window = log.len().div_ceil(10).max(1);
    for chunk in log.chunks(window) {
        let n = chunk.len() as f64;
        let mean = |f: fn(&LossRecord) -> f64| chunk.iter().map(f).sum::<f64>() / n;
        writeln!(
            out,
            "| {}–{} | {:.4} | {:.4} | {:.4} |",
            chunk[0].step,
            chunk[chunk.len() - 1].step,
            mean(|r| r.focal),
            mean(|r| r.ssim),
            mean(|r| r.total)
        )
        .unwrap();
    }
    Ok(out)
}

pub fn report_cmd(args: &ReportArgs) -> sptseg::Result<String> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    render_report(&read(&args.loss)?, &read(&args.metrics)?)
}

/// Runs one parsed command line, printing results and diagnostics, and
/// returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a, |r| {
            if r.step % 100 == 0 {
                eprintln!("step {} focal {:.5} ssim {:.5} total {:.5}", r.step, r.focal, r.ssim, r.total);
            }
        }),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Verify(a) => {
            let (table, failed) = verify_cmd(a.suite);
            print!("{table}");
            if failed.is_empty() {
                return EXIT_OK;
            }
            eprintln!("failed properties: {}", failed.join(", "));
            return EXIT_VERIFY;
        }
    };
    match result {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablate_values() {
        assert_eq!(parse_ablate("spt=off").unwrap(), ("spt".into(), false));
        assert_eq!(parse_ablate("sgd=on").unwrap(), ("sgd".into(), true));
        assert!(parse_ablate("foo=off").is_err());
        assert!(parse_ablate("spt").is_err());
    }

    #[test]
    fn report_renders_metrics_and_loss_windows() {
        let csv = "step,focal,ssim,total\n0,1,1,2\n1,0.5,0.5,1\n";
        let md = render_report(csv, "pAcc=90.00\nmIoU_seen=80.00\nmIoU_unseen=40.00\nhIoU=53.33\n").unwrap();
        assert!(md.contains("| 90.00 | 80.00 | 40.00 | 53.33 |"));
        assert!(md.contains("2 steps; total loss 2.0000 → 1.0000"));
        assert!(!md.contains("inconsistent"));
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(render_report("a,b\n", "pAcc=1\nmIoU_seen=1\nmIoU_unseen=1\nhIoU=1\n").is_err());
    }
}
