//! Experiment surface for `seer-core`: synthetic heads, the `SQT1` tensor
//! format, gate checkpoints, evaluation reports, benchmarks, PGM heatmaps
//! and the `seer` CLI.

pub mod bench;
pub mod checkpoint;
pub mod cli;
mod error;
pub mod eval;
pub mod heatmap;
pub mod synth;
pub mod tensorfile;

pub use bench::{random_mask, run_bench, write_bench_csv, BenchConfig, BenchRow};
pub use error::{HarnessError, Result};
pub use eval::{eval_gate, eval_gate_inspect, EvalReport, MaskMode, SeqArtifacts, SeqReport};
pub use heatmap::emit_heatmap;
pub use synth::{gen_synthetic, Dataset, Pattern, SynthConfig};
