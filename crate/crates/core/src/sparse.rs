//! Binary block masks and the block-sparse attention kernel.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::attention::{check_qkv, tiled_attention};
use crate::error::{invalid, Result};
use crate::gate::BlockScore;
use crate::numerics::{BinaryMatrix, Matrix, Real};

/// Block-causal activation pattern with every diagonal block active.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    bits: BinaryMatrix,
}

impl BlockMask {
    pub fn new(bits: BinaryMatrix) -> Result<Self> {
        let n = bits.rows();
        if bits.cols() != n {
            return Err(invalid!(
                "block mask must be square, got {}x{}",
                n,
                bits.cols()
            ));
        }
        for i in 0..n {
            if !bits.get(i, i) {
                return Err(invalid!("block mask row {i} is missing its diagonal block"));
            }
            if bits.row(i)[i + 1..].iter().any(|&b| b) {
                return Err(invalid!("block mask row {i} activates a future block"));
            }
        }
        Ok(Self { bits })
    }

    /// All causal blocks.
    pub fn full(nb: usize) -> Self {
        Self {
            bits: BinaryMatrix::causal(nb),
        }
    }

    pub fn diagonal(nb: usize) -> Self {
        Self {
            bits: BinaryMatrix::from_fn(nb, nb, |i, j| i == j),
        }
    }

    pub fn bits(&self) -> &BinaryMatrix {
        &self.bits
    }

    pub fn num_blocks(&self) -> usize {
        self.bits.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits.get(i, j)
    }

    pub fn active(&self) -> usize {
        self.bits.count_ones()
    }
}

/// Per row: the diagonal plus the `k − 1` highest-scoring earlier blocks.
/// Equal scores go to the smaller column.
pub fn topk_mask<T: Real>(score: &BlockScore<T>, k: usize) -> Result<BlockMask> {
    if k == 0 {
        return Err(invalid!("top-k needs k >= 1"));
    }
    let nb = score.num_blocks();
    let mut bits = BinaryMatrix::filled(nb, nb, false);
    let mut cols: Vec<usize> = Vec::with_capacity(nb);
    for i in 0..nb {
        bits.set(i, i, true);
        let row = score.matrix().row(i);
        cols.clear();
        cols.extend(0..i);
        // Stable sort keeps ascending column order among ties.
        cols.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal));
        for &j in cols.iter().take(k - 1) {
            bits.set(i, j, true);
        }
    }
    Ok(BlockMask { bits })
}

/// Blocks whose score exceeds `t`, plus the diagonal.
pub fn threshold_mask<T: Real>(score: &BlockScore<T>, t: T) -> Result<BlockMask> {
    if !(t >= T::zero()) {
        return Err(invalid!("threshold must be non-negative, got {t}"));
    }
    let nb = score.num_blocks();
    let bits = BinaryMatrix::from_fn(nb, nb, |i, j| j == i || (j < i && score.get(i, j) > t));
    Ok(BlockMask { bits })
}

/// `1 − active / (nb(nb+1)/2)`.
pub fn sparsity_ratio(mask: &BlockMask) -> f64 {
    let nb = mask.num_blocks();
    let causal = nb * (nb + 1) / 2;
    if causal == 0 {
        return 0.0;
    }
    1.0 - mask.active() as f64 / causal as f64
}

/// Kernel instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KernelStats {
    /// (query block, key block) tiles that were loaded and computed.
    pub blocks_visited: usize,
}

/// Causal attention restricted to the key blocks active in `mask`; inactive
/// tiles are never touched. `q` and `k` are post-RoPE.
pub fn block_sparse_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &BlockMask,
    block_size: usize,
) -> Result<Matrix<T>> {
    block_sparse_attention_with_stats(q, k, v, mask, block_size).map(|(out, _)| out)
}

pub fn block_sparse_attention_with_stats<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &BlockMask,
    block_size: usize,
) -> Result<(Matrix<T>, KernelStats)> {
    check_qkv(q, k, v)?;
    if block_size == 0 {
        return Err(invalid!("block size must be at least 1"));
    }
    let nb = crate::num_blocks(q.rows(), block_size);
    if mask.num_blocks() != nb {
        return Err(invalid!(
            "mask covers {} blocks, sequence of {} with block {} has {nb}",
            mask.num_blocks(),
            q.rows(),
            block_size
        ));
    }
    let tiled = tiled_attention(q, k, v, block_size, true, |i, j| mask.get(i, j), None);
    Ok((
        tiled.out,
        KernelStats {
            blocks_visited: tiled.blocks_visited,
        },
    ))
}
