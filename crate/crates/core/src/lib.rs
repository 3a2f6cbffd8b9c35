//! Learned block-sparse attention for long-context prefill.
//!
//! A small attention gate pools pre-RoPE queries and keys into one vector per
//! block, projects them through two learnable linear maps, applies a
//! block-level rotary embedding and produces a block-causal, row-stochastic
//! score matrix. The gate is distilled against the 2D max-pooled attention map
//! of the frozen model, which is extracted by a fused streaming kernel without
//! materializing the full `seq × seq` probability map. At inference time the
//! scores become a binary block mask (top-k or threshold) and a tiled kernel
//! skips the inactive key blocks.
//!
//! The crate is `no_std` (it needs `alloc`). Everything is generic over
//! [`Real`], so the same kernels run in `f32` for execution and `f64` for
//! verification.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod attention;
pub mod distill;
mod error;
pub mod gate;
pub mod numerics;
pub mod sparse;

pub use attention::{
    attention_with_block_gt, dense_attention, oracle_block_gt, streaming_attention, GroundTruth,
    HeadTensors, ORACLE_MAX_SEQ,
};
pub use distill::{
    gate_backward, kl_loss, normalize_target, train_gate, GateGradients, TrainConfig, TrainRecord,
    TrainState, KL_EPS,
};
pub use error::{Error, Result};
pub use gate::{gate_forward, init_gate_params, BlockScore, GateConfig, GateParams};
pub use numerics::{
    matmul, matmul_transb, rope_rotate, row_softmax_masked, seq_pool, BinaryMatrix, Matrix,
    PoolMethod, Real,
};
pub use sparse::{
    block_sparse_attention, block_sparse_attention_with_stats, sparsity_ratio, threshold_mask,
    topk_mask, BlockMask, KernelStats,
};

/// Number of blocks covering `seq` positions with blocks of `block_size`.
#[inline]
pub fn num_blocks(seq: usize, block_size: usize) -> usize {
    seq.div_ceil(block_size)
}
