//! Causal attention: a dense reference, a streaming (online-softmax) tiled
//! kernel, and the fused kernel that also emits the block max-pooled
//! attention map used as the gate's distillation target.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::numerics::{
    axpy, dot, matmul, matmul_transb, positions, rope_rotate, row_softmax_masked, BinaryMatrix,
    Matrix, Real,
};

/// Largest sequence for which [`oracle_block_gt`] materializes the full map.
pub const ORACLE_MAX_SEQ: usize = 8192;

/// One attention head of the frozen model. `q` and `k` are stored before the
/// model's rotary embedding; the gate consumes them as-is and the attention
/// path rotates them with [`HeadTensors::rotated`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTensors<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub positions: Vec<T>,
}

impl<T: Real> HeadTensors<T> {
    /// Token positions default to `0..seq`.
    pub fn new(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        check_qkv(&q, &k, &v)?;
        let positions = positions(q.rows());
        Ok(Self { q, k, v, positions })
    }

    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    /// Queries and keys after the model's rotary embedding.
    pub fn rotated(&self, theta: T) -> Result<(Matrix<T>, Matrix<T>)> {
        Ok((
            rope_rotate(&self.q, &self.positions, theta)?,
            rope_rotate(&self.k, &self.positions, theta)?,
        ))
    }
}

/// Block max-pooled causal attention probabilities, `[nb × nb]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth<T> {
    gt: Matrix<T>,
}

impl<T: Real> GroundTruth<T> {
    /// Validates the invariants: square, entries in `[0, 1]`, zero above the
    /// block diagonal and positive on it.
    pub fn new(gt: Matrix<T>) -> Result<Self> {
        let n = gt.rows();
        if gt.cols() != n {
            return Err(invalid!(
                "ground truth must be square, got {:?}",
                gt.shape()
            ));
        }
        for i in 0..n {
            for j in 0..n {
                let x = gt.get(i, j);
                if x < T::zero() || x > T::one() {
                    return Err(invalid!(
                        "ground truth entry ({i}, {j}) = {x} outside [0, 1]"
                    ));
                }
                if j > i && x != T::zero() {
                    return Err(invalid!("ground truth entry ({i}, {j}) above the diagonal"));
                }
            }
            if !(gt.get(i, i) > T::zero()) {
                return Err(invalid!("ground truth diagonal entry {i} is not positive"));
            }
        }
        Ok(Self { gt })
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.gt
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.gt
    }

    pub fn num_blocks(&self) -> usize {
        self.gt.rows()
    }
}

pub(crate) fn check_qkv<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
    if q.rows() == 0 {
        return Err(invalid!("empty sequence"));
    }
    if q.rows() != k.rows() || q.rows() != v.rows() {
        return Err(invalid!(
            "q/k/v row counts differ: {}, {}, {}",
            q.rows(),
            k.rows(),
            v.rows()
        ));
    }
    if q.cols() != k.cols() || q.cols() == 0 {
        return Err(invalid!(
            "q and k widths differ: {} vs {}",
            q.cols(),
            k.cols()
        ));
    }
    Ok(())
}

fn check_block(block_size: usize) -> Result<()> {
    if block_size == 0 {
        return Err(invalid!("block size must be at least 1"));
    }
    Ok(())
}

#[inline]
fn softmax_scale<T: Real>(head_dim: usize) -> T {
    T::one() / T::lit(head_dim as f64).sqrt()
}

/// `softmax(q kᵀ / √d) v`, materializing the full score matrix.
pub fn dense_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    causal: bool,
) -> Result<Matrix<T>> {
    check_qkv(q, k, v)?;
    let n = q.rows();
    let scores = matmul_transb(q, k)?.scale(softmax_scale(q.cols()));
    let allowed = if causal {
        BinaryMatrix::causal(n)
    } else {
        BinaryMatrix::filled(n, n, true)
    };
    let probs = row_softmax_masked(&scores, &allowed)?;
    matmul(&probs, v)
}

/// Result of one pass of the tiled kernel.
pub(crate) struct TiledOutput<T> {
    pub out: Matrix<T>,
    /// Final running max per query row.
    pub row_max: Vec<T>,
    /// Final exp-sum per query row (relative to `row_max`).
    pub row_sum: Vec<T>,
    /// Number of (query tile, key block) pairs that were computed.
    pub blocks_visited: usize,
}

/// Online-softmax attention over `block × block` tiles. Key block `kb` is
/// processed for query tile `qb` only when `active(qb, kb)` holds (and
/// `kb <= qb` under causality). When `local_max` is given it receives, for
/// each query row `i` and visited key block `kb`, the raw row max of the
/// scaled scores at `local_max[i * nb + kb]`.
pub(crate) fn tiled_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    block: usize,
    causal: bool,
    active: impl Fn(usize, usize) -> bool,
    mut local_max: Option<&mut [T]>,
) -> TiledOutput<T> {
    let (n, dv) = (q.rows(), v.cols());
    let nb = crate::num_blocks(n, block);
    let scale = softmax_scale::<T>(q.cols());
    let mut out = Matrix::zeros(n, dv);
    let mut row_max = vec![T::neg_infinity(); n];
    let mut row_sum = vec![T::zero(); n];
    let mut scores = vec![T::zero(); block];
    let mut blocks_visited = 0;

    for qb in 0..nb {
        let (qs, qe) = (qb * block, ((qb + 1) * block).min(n));
        let last_kb = if causal { qb } else { nb - 1 };
        for kb in 0..=last_kb {
            if !active(qb, kb) {
                continue;
            }
            blocks_visited += 1;
            let (ks, ke) = (kb * block, ((kb + 1) * block).min(n));
            for i in qs..qe {
                let end = if causal { ke.min(i + 1) } else { ke };
                if end <= ks {
                    continue;
                }
                let qi = q.row(i);
                let s = &mut scores[..end - ks];
                let mut local = T::neg_infinity();
                for (j, sj) in (ks..end).zip(s.iter_mut()) {
                    *sj = dot(qi, k.row(j)) * scale;
                    local = local.max(*sj);
                }
                if let Some(buf) = local_max.as_deref_mut() {
                    buf[i * nb + kb] = local;
                }
                let m_old = row_max[i];
                let m_new = m_old.max(local);
                let acc = out.row_mut(i);
                if m_new > m_old {
                    let corr = (m_old - m_new).exp();
                    row_sum[i] *= corr;
                    acc.iter_mut().for_each(|a| *a *= corr);
                    row_max[i] = m_new;
                }
                let mut l = T::zero();
                for (j, &sj) in (ks..end).zip(s.iter()) {
                    let p = (sj - m_new).exp();
                    l += p;
                    axpy(p, v.row(j), acc);
                }
                row_sum[i] += l;
            }
        }
    }
    for i in 0..n {
        if row_sum[i] > T::zero() {
            let inv = T::one() / row_sum[i];
            out.row_mut(i).iter_mut().for_each(|a| *a *= inv);
        }
    }
    TiledOutput {
        out,
        row_max,
        row_sum,
        blocks_visited,
    }
}

/// Attention computed tile by tile with a running max and exp-sum per query
/// row. Never holds more than one `block`-wide strip of scores.
pub fn streaming_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    block_size: usize,
    causal: bool,
) -> Result<Matrix<T>> {
    check_qkv(q, k, v)?;
    check_block(block_size)?;
    Ok(tiled_attention(q, k, v, block_size, causal, |_, _| true, None).out)
}

/// Causal attention plus the 2D max-pooled probability map.
///
/// The kernel keeps the local row max `r` of every (row, key block) strip.
/// After the sweep, `exp(r - m) / l` with the row's final max `m` and sum `l`
/// is the largest probability of that strip, and a column max over the rows
/// of a query block gives the pooled entry. Memory is `O(seq · nb)`.
pub fn attention_with_block_gt<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    block_size: usize,
) -> Result<(Matrix<T>, GroundTruth<T>)> {
    check_qkv(q, k, v)?;
    check_block(block_size)?;
    let n = q.rows();
    let nb = crate::num_blocks(n, block_size);
    let mut local = vec![T::neg_infinity(); n * nb];
    let tiled = tiled_attention(q, k, v, block_size, true, |_, _| true, Some(&mut local));

    let mut gt = Matrix::zeros(nb, nb);
    for i in 0..n {
        let qb = i / block_size;
        let (m, inv_l) = (tiled.row_max[i], T::one() / tiled.row_sum[i]);
        for kb in 0..=qb {
            let r = local[i * nb + kb];
            if r == T::neg_infinity() {
                continue;
            }
            let a = (r - m).exp() * inv_l;
            if a > gt.get(qb, kb) {
                gt.set(qb, kb, a.min(T::one()));
            }
        }
    }
    Ok((tiled.out, GroundTruth::new(gt)?))
}

/// Reference for [`attention_with_block_gt`]: materializes the causal
/// probability map with a plain two-pass softmax and max-pools it.
pub fn oracle_block_gt<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    block_size: usize,
) -> Result<GroundTruth<T>> {
    let n = q.rows();
    if n > ORACLE_MAX_SEQ {
        return Err(Error::ResourceLimit(format!(
            "oracle materializes {n}x{n} probabilities; limit is {ORACLE_MAX_SEQ}"
        )));
    }
    if n == 0 || k.rows() != n || k.cols() != q.cols() {
        return Err(invalid!(
            "q {:?} and k {:?} are incompatible",
            q.shape(),
            k.shape()
        ));
    }
    check_block(block_size)?;
    let scale = softmax_scale::<T>(q.cols());
    let nb = crate::num_blocks(n, block_size);
    let mut probs = vec![T::zero(); n * n];
    for i in 0..n {
        let row = &mut probs[i * n..(i + 1) * n];
        let mut max = T::neg_infinity();
        for j in 0..=i {
            let mut s = T::zero();
            for c in 0..q.cols() {
                s += q.get(i, c) * k.get(j, c);
            }
            row[j] = s * scale;
            max = max.max(row[j]);
        }
        let mut sum = T::zero();
        for x in row[..=i].iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row[..=i].iter_mut() {
            *x /= sum;
        }
    }
    let mut gt = Matrix::zeros(nb, nb);
    for i in 0..n {
        for j in 0..=i {
            let (bi, bj) = (i / block_size, j / block_size);
            let p = probs[i * n + j];
            if p > gt.get(bi, bj) {
                gt.set(bi, bj, p);
            }
        }
    }
    GroundTruth::new(gt)
}
