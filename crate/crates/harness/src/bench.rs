//! Dense vs block-sparse timing at controlled sparsity.

use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seer_core::{
    block_sparse_attention, num_blocks, streaming_attention, BinaryMatrix, BlockMask, Matrix,
};
use serde::Serialize;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub seqs: Vec<usize>,
    pub sparsities: Vec<f64>,
    pub block_size: usize,
    pub dim: usize,
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub seq: usize,
    pub sparsity: f64,
    pub dense_ms: f64,
    pub sparse_ms: f64,
    pub speedup: f64,
}

/// Diagonal plus a uniformly random subset of the earlier blocks, sized so
/// the sparsity is as close to `sparsity` as the diagonal allows.
pub fn random_mask(nb: usize, sparsity: f64, rng: &mut impl Rng) -> BlockMask {
    let causal = nb * (nb + 1) / 2;
    let off = causal - nb;
    let active = ((1.0 - sparsity.clamp(0.0, 1.0)) * causal as f64).round() as usize;
    let extra = active.saturating_sub(nb).min(off);
    let mut bits = BinaryMatrix::from_fn(nb, nb, |i, j| i == j);
    // Off-diagonal causal slots in row-major order.
    let slot = |mut s: usize| {
        let mut i = 1;
        while s >= i {
            s -= i;
            i += 1;
        }
        (i, s)
    };
    for s in sample(rng, off, extra) {
        let (i, j) = slot(s);
        bits.set(i, j, true);
    }
    BlockMask::new(bits).expect("diagonal is set and nothing lies above it")
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_ms(mut f: impl FnMut()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64() * 1e3
}

/// The dense baseline is the same tiled kernel with every causal tile active,
/// timed once per sequence length and shared by all sparsity rows.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let repeats = cfg.repeats.max(1);
    let mut rows = Vec::new();
    for &seq in &cfg.seqs {
        let std = 1.0 / (cfg.dim as f64).sqrt();
        let mut draw = || {
            Matrix::from_fn(seq, cfg.dim, |_, _| {
                (std * rng.random_range(-1.7..1.7)) as f32
            })
        };
        let (q, k, v) = (draw(), draw(), draw());
        let mut dense = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let mut res = Ok(());
            dense.push(time_ms(|| {
                res = streaming_attention(&q, &k, &v, cfg.block_size, true).map(drop)
            }));
            res?;
        }
        let dense_ms = median(dense);
        let nb = num_blocks(seq, cfg.block_size);
        for &sparsity in &cfg.sparsities {
            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let mask = random_mask(nb, sparsity, &mut rng);
                let mut res = Ok(());
                times.push(time_ms(|| {
                    res = block_sparse_attention(&q, &k, &v, &mask, cfg.block_size).map(drop)
                }));
                res?;
            }
            let sparse_ms = median(times);
            rows.push(BenchRow {
                seq,
                sparsity,
                dense_ms,
                sparse_ms,
                speedup: dense_ms / sparse_ms,
            });
        }
    }
    Ok(rows)
}

/// CSV with header `seq,sparsity,dense_ms,sparse_ms,speedup`.
pub fn write_bench_csv(w: impl Write, rows: &[BenchRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
