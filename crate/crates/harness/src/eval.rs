//! Mask recall/precision against the ground-truth-induced mask, plus the
//! output error of the block-sparse kernel.

use std::fmt;
use std::str::FromStr;

use seer_core::{
    attention_with_block_gt, block_sparse_attention, gate_forward, normalize_target,
    sparsity_ratio, threshold_mask, topk_mask, BlockMask, BlockScore, GateConfig, GateParams,
    HeadTensors, Matrix,
};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Mask selection rule shared by prediction and reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    TopK(usize),
    Threshold(f64),
}

impl MaskMode {
    pub fn apply(&self, score: &BlockScore<f32>) -> seer_core::Result<BlockMask> {
        match *self {
            MaskMode::TopK(k) => topk_mask(score, k),
            MaskMode::Threshold(t) => threshold_mask(score, t as f32),
        }
    }
}

impl FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| format!("expected topk:K or threshold:T, got {s:?}"))?;
        match kind {
            "topk" => {
                let k: usize = value.parse().map_err(|_| format!("bad k {value:?}"))?;
                if k == 0 {
                    return Err("k must be at least 1".into());
                }
                Ok(MaskMode::TopK(k))
            }
            "threshold" => {
                let t: f64 = value
                    .parse()
                    .map_err(|_| format!("bad threshold {value:?}"))?;
                if !(t >= 0.0 && t.is_finite()) {
                    return Err("threshold must be a finite value >= 0".into());
                }
                Ok(MaskMode::Threshold(t))
            }
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskMode::TopK(k) => write!(f, "topk:{k}"),
            MaskMode::Threshold(t) => write!(f, "threshold:{t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeqReport {
    pub index: usize,
    pub seq_len: usize,
    pub num_blocks: usize,
    pub sparsity: f64,
    pub mask_recall: f64,
    pub mask_precision: f64,
    pub output_max_abs_err: f64,
    pub output_rel_err: f64,
}

/// Aggregates: mean sparsity, recall and precision pooled over all
/// off-diagonal bits of all sequences, worst-case output errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub mode: String,
    pub sparsity: f64,
    pub mask_recall: f64,
    pub mask_precision: f64,
    pub output_max_abs_err: f64,
    pub output_rel_err: f64,
    pub per_seq: Vec<SeqReport>,
}

/// Everything computed for one sequence, for inspection and heatmaps.
pub struct SeqArtifacts {
    pub score: BlockScore<f32>,
    pub target: Matrix<f32>,
    pub predicted: BlockMask,
    pub reference: BlockMask,
}

/// Off-diagonal hits, predicted count, reference count.
fn overlap(pred: &BlockMask, reference: &BlockMask) -> (usize, usize, usize) {
    let nb = pred.num_blocks();
    let (mut hit, mut p, mut r) = (0, 0, 0);
    for i in 0..nb {
        for j in 0..i {
            let (a, b) = (pred.get(i, j), reference.get(i, j));
            hit += (a && b) as usize;
            p += a as usize;
            r += b as usize;
        }
    }
    (hit, p, r)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn eval_gate(
    params: &GateParams<f32>,
    cfg: &GateConfig,
    heads: &[HeadTensors<f32>],
    mode: MaskMode,
) -> Result<EvalReport> {
    eval_gate_inspect(params, cfg, heads, mode, |_, _| Ok(()))
}

/// [`eval_gate`] that also hands each sequence's artifacts to `inspect`.
pub fn eval_gate_inspect(
    params: &GateParams<f32>,
    cfg: &GateConfig,
    heads: &[HeadTensors<f32>],
    mode: MaskMode,
    mut inspect: impl FnMut(usize, &SeqArtifacts) -> Result<()>,
) -> Result<EvalReport> {
    params.check(cfg)?;
    let mut per_seq = Vec::with_capacity(heads.len());
    let (mut hits, mut npred, mut nref) = (0, 0, 0);
    for (index, h) in heads.iter().enumerate() {
        if h.head_dim() != cfg.head_dim {
            return Err(seer_core::Error::InvalidArgument(format!(
                "sequence {index} has head dim {}, gate expects {}",
                h.head_dim(),
                cfg.head_dim
            ))
            .into());
        }
        let (q, k) = h.rotated(cfg.rope_theta as f32)?;
        let (dense, gt) = attention_with_block_gt(&q, &k, &h.v, cfg.block_size)?;
        let target = normalize_target(&gt)?;
        let reference = mode.apply(&BlockScore::new(target.clone())?)?;
        let score = gate_forward(&h.q, &h.k, params, cfg)?;
        let predicted = mode.apply(&score)?;
        let sparse = block_sparse_attention(&q, &k, &h.v, &predicted, cfg.block_size)?;

        let diff = sparse.sub(&dense)?;
        let (hit, p, r) = overlap(&predicted, &reference);
        hits += hit;
        npred += p;
        nref += r;
        per_seq.push(SeqReport {
            index,
            seq_len: h.seq_len(),
            num_blocks: predicted.num_blocks(),
            sparsity: sparsity_ratio(&predicted),
            mask_recall: ratio(hit, r),
            mask_precision: ratio(hit, p),
            output_max_abs_err: diff.max_abs() as f64,
            output_rel_err: (diff.frobenius_norm() / dense.frobenius_norm()) as f64,
        });
        inspect(
            index,
            &SeqArtifacts {
                score,
                target,
                predicted,
                reference,
            },
        )?;
    }
    let n = per_seq.len().max(1) as f64;
    Ok(EvalReport {
        mode: mode.to_string(),
        sparsity: per_seq.iter().map(|s| s.sparsity).sum::<f64>() / n,
        mask_recall: ratio(hits, nref),
        mask_precision: ratio(hits, npred),
        output_max_abs_err: per_seq
            .iter()
            .map(|s| s.output_max_abs_err)
            .fold(0.0, f64::max),
        output_rel_err: per_seq.iter().map(|s| s.output_rel_err).fold(0.0, f64::max),
        per_seq,
    })
}
