//! `seer` command line. Argument errors exit with 2 (clap), runtime errors with 1.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use seer_core::{train_gate, GateConfig, TrainConfig};

use crate::bench::{run_bench, write_bench_csv, BenchConfig};
use crate::eval::{eval_gate_inspect, MaskMode};
use crate::heatmap::emit_heatmap;
use crate::synth::{
    gen_synthetic, Dataset, Pattern, SynthConfig, DEFAULT_BLOCK_SIZE, DEFAULT_ROPE_THETA,
    RECENCY_NORM,
};
use crate::{checkpoint, tensorfile};

#[derive(Debug, Parser)]
#[command(
    name = "seer",
    version,
    about = "Learned block-sparse attention at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic attention heads.
    Gen(GenArgs),
    /// Distill a gate against a dataset's ground truth.
    Train(TrainArgs),
    /// Score a gate's masks and sparse outputs.
    Eval(EvalArgs),
    /// Time dense vs block-sparse attention.
    Bench(BenchArgs),
    /// Render a 2-D tensor as a PGM heatmap.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub seq: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, value_enum)]
    pub pattern: Pattern,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Block size of the planted pattern.
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE, value_parser = parse_positive)]
    pub block_size: usize,
    /// Rotary base of the simulated model.
    #[arg(long, default_value_t = DEFAULT_ROPE_THETA)]
    pub theta: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE, value_parser = parse_positive)]
    pub block_size: usize,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    #[arg(long, default_value_t = 4, value_parser = parse_positive)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train without the block-level rotary embedding.
    #[arg(long)]
    pub no_block_rope: bool,
    /// Checkpoint path (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV (`step,lr,loss`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gate: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `topk:K` (K >= 1) or `threshold:T` (T >= 0).
    #[arg(long)]
    pub mode: MaskMode,
    /// Report path (JSON); stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub heatmap_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub seq: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,0.9")]
    pub sparsity: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE, value_parser = parse_positive)]
    pub block_size: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub tensor: PathBuf,
    /// Tensor name; the first 2-D tensor when omitted.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn output(path: Option<&PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn gen(a: GenArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        seq: a.seq,
        dim: a.dim,
        heads: a.heads,
        pattern: a.pattern,
        block_size: a.block_size,
        rope_theta: a.theta,
        recency_norm: RECENCY_NORM,
        seed: a.seed,
    };
    gen_synthetic(&cfg)?
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let ds = Dataset::load(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let mut cfg = GateConfig::new(ds.heads[0].head_dim(), a.block_size, ds.rope_theta);
    cfg.block_rope = !a.no_block_rope;
    let tcfg = TrainConfig {
        lr0: a.lr,
        steps: a.steps,
        warmup: a.warmup,
        batch: a.batch,
    };
    let (params, trace) = train_gate(&ds.heads, &cfg, &tcfg, a.seed)?;
    checkpoint::save(&a.out, &params, &cfg)
        .with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.trace {
        let mut w = csv::Writer::from_writer(output(Some(path))?);
        for r in &trace {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let (params, cfg) =
        checkpoint::load(&a.gate).with_context(|| format!("reading {}", a.gate.display()))?;
    let ds = Dataset::load(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    if let Some(dir) = &a.heatmap_dir {
        fs::create_dir_all(dir)?;
    }
    let report = eval_gate_inspect(&params, &cfg, &ds.heads, a.mode, |i, art| {
        if let Some(dir) = &a.heatmap_dir {
            emit_heatmap(art.score.matrix(), &dir.join(format!("seq{i}_score.pgm")))?;
            emit_heatmap(&art.target, &dir.join(format!("seq{i}_target.pgm")))?;
            emit_heatmap(
                &art.predicted.bits().to_matrix::<f32>(),
                &dir.join(format!("seq{i}_mask.pgm")),
            )?;
            emit_heatmap(
                &art.reference.bits().to_matrix::<f32>(),
                &dir.join(format!("seq{i}_reference.pgm")),
            )?;
        }
        Ok(())
    })?;
    let mut w = output(a.report.as_ref())?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    if a.dim == 0 || a.dim % 2 != 0 {
        bail!("--dim must be even and positive");
    }
    let cfg = BenchConfig {
        seqs: a.seq,
        sparsities: a.sparsity,
        block_size: a.block_size,
        dim: a.dim,
        repeats: a.repeats,
        seed: a.seed,
    };
    let rows = run_bench(&cfg)?;
    write_bench_csv(output(a.out.as_ref())?, &rows)?;
    Ok(())
}

fn viz(a: VizArgs) -> anyhow::Result<()> {
    let tensors =
        tensorfile::load(&a.tensor).with_context(|| format!("reading {}", a.tensor.display()))?;
    let t = match &a.name {
        Some(n) => tensorfile::find(&tensors, n)?,
        None => tensors
            .iter()
            .find(|t| t.dims.len() == 2)
            .context("no 2-D tensor in file")?,
    };
    emit_heatmap(&t.to_matrix::<f64>()?, &a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Viz(a) => viz(a),
    }
}

fn parse_positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}
