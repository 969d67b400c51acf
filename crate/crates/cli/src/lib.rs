//! Subcommands of the `crossfuse` binary.
//!
//! Exit codes: 0 success, 1 invalid arguments or config, 2 runtime failure,
//! 3 a correctness gate (gradient audit or benchmark equivalence) failed.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crossfuse::checkpoint::load_checkpoint;
use crossfuse::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckReport, Scope};
use crossfuse::kernel_bench::{bench_kernel, BenchOptions, BenchReport, Kernel};
use crossfuse::scene::{gen_dataset, load_dataset, save_dataset, SceneSpec};
use crossfuse::train::{evaluate, training_scenes, EpochStats, Trainer};
use crossfuse::{Error, Metrics, Model, RunConfig};

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
    Gate(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Gate(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => f.write_str(m),
            Failure::Gate(m) => write!(f, "gate failed: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Validation(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "crossfuse", version, about = "Cross-modal state-space fusion for paired-image pixel classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired-modality dataset.
    GenData(GenDataArgs),
    /// Train from a JSON run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Compare tape gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Time a scan kernel over a sweep of sequence lengths.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub h: usize,
    #[arg(long, default_value_t = 8)]
    pub w: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub c1: usize,
    #[arg(long, default_value_t = 2)]
    pub c2: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Receives `checkpoint/` and `metrics.json`.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also emit confidence maps at this threshold.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Keep only this modality; the other one is zeroed.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub unimodal: Option<u8>,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, hide = true)]
    pub inject_faulty_vjp: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "scan-seq")]
    pub kernel: String,
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096,8192")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 9)]
    pub repeats: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub state: usize,
    /// Chunk length of scan-par (0 picks one from the length).
    #[arg(long, default_value_t = 0)]
    pub chunk: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs `cli`, writing results to `out` and the bench summary to `err`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    match cli.command {
        Command::GenData(a) => gen_data(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Gradcheck(a) => gradcheck(&a, out),
        Command::Bench(a) => bench(&a, out, err),
    }
}

pub fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> CmdResult {
    let spec = SceneSpec { h: a.h, w: a.w, classes: a.classes, c1: a.c1, c2: a.c2, noise: a.noise };
    spec.validate()?;
    if a.count == 0 {
        return Err(Failure::Validation("--count must be >= 1".into()));
    }
    let ds = gen_dataset(a.seed, &spec, a.count)?;
    save_dataset(&a.out, &ds)?;
    writeln!(out, "wrote {} scenes to {}", a.count, a.out.display())?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    epochs_done: usize,
    history: &'a [EpochStats],
    train: &'a Metrics,
}

fn write_json(path: &Path, v: &impl Serialize) -> CmdResult {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = RunConfig::load(&a.config)?;
    let mut trainer = match &a.resume {
        Some(dir) => Trainer::resume(cfg.clone(), dir)?,
        None => Trainer::new(cfg.clone())?,
    };
    let scenes = training_scenes(&cfg)?;
    let mut history = Vec::new();
    while trainer.epochs_done < cfg.optim.epochs {
        let s = trainer.run_epoch(&scenes)?;
        writeln!(
            out,
            "epoch={} sup={:.6} unsup={:.6} total={:.6} train_oa={:.4}",
            s.epoch, s.sup, s.unsup, s.total, s.train_oa
        )?;
        out.flush()?;
        history.push(s);
    }
    let ev = evaluate(&trainer.model, &trainer.params, &scenes, None, None)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("{}: {e}", a.out.display())))?;
    trainer.save(a.out.join("checkpoint"))?;
    let summary = TrainSummary { epochs_done: trainer.epochs_done, history: &history, train: &ev.metrics };
    write_json(&a.out.join("metrics.json"), &summary)?;
    writeln!(out, "oa={:.4} aa={:.4} kappa={:.4}", ev.metrics.oa, ev.metrics.aa, ev.metrics.kappa)?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ConfidenceMaps {
    pub tau: f64,
    /// One string per grid row and scene, `1` where the top class reaches `tau`.
    pub scenes: Vec<Vec<String>>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub unimodal: Option<u8>,
    pub scenes: usize,
    pub pixels: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub maps: Option<ConfidenceMaps>,
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    if let Some(t) = a.tau {
        if !(t > 0.0 && t < 1.0) {
            return Err(Failure::Validation(format!("--tau must lie in (0, 1), got {t}")));
        }
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = Model::new(ck.config)?;
    let ds = load_dataset(&a.data)?;
    let ev = evaluate(&model, &ck.params, &ds.scenes, a.unimodal, a.tau)?;
    let w = model.config.w;
    let maps = a.tau.zip(ev.maps).map(|(tau, maps)| ConfidenceMaps {
        tau,
        scenes: maps
            .iter()
            .map(|m| m.chunks(w).map(|row| row.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()).collect())
            .collect(),
    });
    let report = EvalReport {
        oa: ev.metrics.oa,
        aa: ev.metrics.aa,
        kappa: ev.metrics.kappa,
        per_class_recall: ev.metrics.per_class_recall,
        unimodal: a.unimodal,
        scenes: ds.scenes.len(),
        pixels: ev.confusion.total(),
        maps,
    };
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

pub fn print_gradcheck(r: &GradcheckReport, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "{:<8} {:<44} {:>12} {:>6} {:>12} {:>7}  status", "scope", "group", "max_rel_err", "seed", "max_|grad|", "coords")?;
    for g in &r.groups {
        let status = if g.max_rel_err <= r.tolerance { "ok" } else { "FAIL" };
        writeln!(
            out,
            "{:<8} {:<44} {:>12.3e} {:>6} {:>12.3e} {:>7}  {status}",
            g.scope, g.group, g.max_rel_err, g.worst_seed, g.max_abs_grad, g.coords
        )?;
    }
    let worst = r.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    writeln!(out, "{} groups, worst relative error {worst:.3e}, tolerance {:.0e}", r.groups.len(), r.tolerance)
}

pub fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CmdResult {
    let scope: Scope = a.scope.parse()?;
    if a.seeds == 0 {
        return Err(Failure::Validation("--seeds must be >= 1".into()));
    }
    let opts = GradcheckOptions { seeds: a.seeds, inject_faulty_vjp: a.inject_faulty_vjp, ..Default::default() };
    let report = run_gradcheck(scope, &opts)?;
    print_gradcheck(&report, out)?;
    let failures = report.failures();
    if failures.is_empty() {
        return Ok(());
    }
    let names: Vec<String> = failures
        .iter()
        .map(|g| format!("{}/{} (seed {}, rel err {:.3e})", g.scope, g.group, g.worst_seed, g.max_rel_err))
        .collect();
    Err(Failure::Gate(format!("gradient mismatch in {}", names.join(", "))))
}

pub fn print_bench(r: &BenchReport, out: &mut dyn Write, err: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "kernel,L,median_ns,ns_per_element")?;
    for row in &r.rows {
        writeln!(out, "{},{},{:.0},{:.3}", row.kernel, row.len, row.median_ns, row.ns_per_element)?;
    }
    writeln!(err, "log-log slope: {:.4}", r.slope)?;
    for (len, s) in &r.speedup {
        writeln!(err, "scan-par speedup over scan-seq at L={len}: {s:.3}")?;
    }
    if let Some(d) = r.max_par_seq_diff {
        writeln!(err, "max |scan-par - scan-seq|: {d:.3e}")?;
    }
    Ok(())
}

pub fn bench(a: &BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let kernel: Kernel = a.kernel.parse()?;
    if a.repeats == 0 || a.channels == 0 || a.state == 0 {
        return Err(Failure::Validation("--repeats, --channels and --state must be >= 1".into()));
    }
    let opts = BenchOptions { repeats: a.repeats, channels: a.channels, state: a.state, chunk: a.chunk, seed: a.seed };
    let report = bench_kernel(kernel, &a.lengths, &opts)?;
    print_bench(&report, out, err)?;
    if report.gate_passed() {
        Ok(())
    } else {
        Err(Failure::Gate(format!(
            "scan-par differs from scan-seq by {:.3e}",
            report.max_par_seq_diff.unwrap_or(f64::NAN)
        )))
    }
}
