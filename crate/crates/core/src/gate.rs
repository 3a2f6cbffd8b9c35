//! The attention gate: pooled pre-RoPE queries and keys, two learnable
//! projections, a block-level rotary embedding and a block-causal softmax.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::numerics::{
    matmul, matmul_transb, rope_rotate_in_place, row_softmax_masked, seq_pool, BinaryMatrix,
    Matrix, PoolMethod, Real,
};

/// Shape and hyper-parameters of a gate.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GateConfig {
    pub block_size: usize,
    pub head_dim: usize,
    /// Rotary base of the model. The gate rotates block indices with
    /// `rope_theta / block_size`.
    pub rope_theta: f64,
    pub q_pooling: Vec<PoolMethod>,
    pub k_pooling: Vec<PoolMethod>,
    /// When false every block gets position 0, i.e. the gate carries no
    /// positional signal at all. Used for ablations.
    #[cfg_attr(feature = "serde", serde(default = "default_true"))]
    pub block_rope: bool,
}

#[cfg(feature = "serde")]
fn default_true() -> bool {
    true
}

impl GateConfig {
    /// Average pooling on Q, `[Max, Min, Average]` on K.
    pub fn new(head_dim: usize, block_size: usize, rope_theta: f64) -> Self {
        Self {
            block_size,
            head_dim,
            rope_theta,
            q_pooling: alloc::vec![PoolMethod::Average],
            k_pooling: alloc::vec![PoolMethod::Max, PoolMethod::Min, PoolMethod::Average],
            block_rope: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(invalid!("gate block size must be at least 1"));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(invalid!(
                "gate head dim must be even and positive, got {}",
                self.head_dim
            ));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(invalid!("rope theta must be positive"));
        }
        if self.q_pooling.is_empty() || self.k_pooling.is_empty() {
            return Err(invalid!("pooling compositions must be non-empty"));
        }
        Ok(())
    }

    /// Rotary base used at block granularity.
    pub fn block_theta(&self) -> f64 {
        self.rope_theta / self.block_size as f64
    }

    pub fn q_in_dim(&self) -> usize {
        self.q_pooling.len() * self.head_dim
    }

    pub fn k_in_dim(&self) -> usize {
        self.k_pooling.len() * self.head_dim
    }

    pub(crate) fn block_positions<T: Real>(&self, nb: usize) -> Vec<T> {
        (0..nb)
            .map(|i| {
                if self.block_rope {
                    T::lit(i as f64)
                } else {
                    T::zero()
                }
            })
            .collect()
    }
}

/// Learnable projections. Pooled features are multiplied on the right:
/// `[nb × in] · w → [nb × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
}

impl<T: Real> GateParams<T> {
    pub fn zeros(cfg: &GateConfig) -> Self {
        Self {
            w_q: Matrix::zeros(cfg.q_in_dim(), cfg.head_dim),
            w_k: Matrix::zeros(cfg.k_in_dim(), cfg.head_dim),
        }
    }

    pub fn check(&self, cfg: &GateConfig) -> Result<()> {
        cfg.validate()?;
        if self.w_q.shape() != (cfg.q_in_dim(), cfg.head_dim) {
            return Err(invalid!(
                "W_q is {:?}, config expects {:?}",
                self.w_q.shape(),
                (cfg.q_in_dim(), cfg.head_dim)
            ));
        }
        if self.w_k.shape() != (cfg.k_in_dim(), cfg.head_dim) {
            return Err(invalid!(
                "W_k is {:?}, config expects {:?}",
                self.w_k.shape(),
                (cfg.k_in_dim(), cfg.head_dim)
            ));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> GateParams<U> {
        GateParams {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
        }
    }
}

/// Block-causal, row-stochastic gate scores `[nb × nb]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockScore<T> {
    score: Matrix<T>,
}

impl<T: Real> BlockScore<T> {
    /// Checks causality (exact zeros above the diagonal) and row sums
    /// (within `1e-5`).
    pub fn new(score: Matrix<T>) -> Result<Self> {
        let n = score.rows();
        if score.cols() != n {
            return Err(invalid!(
                "block score must be square, got {:?}",
                score.shape()
            ));
        }
        for i in 0..n {
            let row = score.row(i);
            if row[i + 1..].iter().any(|&x| x != T::zero()) {
                return Err(invalid!("block score row {i} has mass above the diagonal"));
            }
            if row.iter().any(|&x| x < T::zero()) {
                return Err(invalid!("block score row {i} has a negative entry"));
            }
            let total: f64 = row.iter().map(|x| x.as_f64()).sum();
            if (total - 1.0).abs() > 1e-5 {
                return Err(invalid!("block score row {i} sums to {total}"));
            }
        }
        Ok(Self { score })
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.score
    }

    pub fn num_blocks(&self) -> usize {
        self.score.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.score.get(i, j)
    }
}

/// Entries i.i.d. `N(0, 1/d)`, reproducible from `seed`.
pub fn init_gate_params<T: Real>(cfg: &GateConfig, seed: u64) -> GateParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / num_traits::Float::sqrt(cfg.head_dim as f64);
    let mut draw = |rows: usize, cols: usize| {
        Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z * std)
        })
    };
    let w_q = draw(cfg.q_in_dim(), cfg.head_dim);
    let w_k = draw(cfg.k_in_dim(), cfg.head_dim);
    GateParams { w_q, w_k }
}

/// Pools `x` with every method in `methods` and concatenates along features.
pub(crate) fn pool_features<T: Real>(
    x: &Matrix<T>,
    block_size: usize,
    methods: &[PoolMethod],
) -> Result<Matrix<T>> {
    let parts = methods
        .iter()
        .map(|&m| seq_pool(x, block_size, m))
        .collect::<Result<Vec<_>>>()?;
    Matrix::hcat(&parts)
}

/// Pooled gate inputs for one head. They depend only on the frozen model's
/// queries and keys, so training computes them once.
#[derive(Clone, Debug)]
pub(crate) struct PooledInputs<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
}

impl<T: Real> PooledInputs<T> {
    pub fn new(q_pre: &Matrix<T>, k_pre: &Matrix<T>, cfg: &GateConfig) -> Result<Self> {
        cfg.validate()?;
        if q_pre.shape() != k_pre.shape() {
            return Err(invalid!(
                "q {:?} and k {:?} differ in shape",
                q_pre.shape(),
                k_pre.shape()
            ));
        }
        if q_pre.cols() != cfg.head_dim {
            return Err(invalid!(
                "inputs have width {}, gate expects head dim {}",
                q_pre.cols(),
                cfg.head_dim
            ));
        }
        Ok(Self {
            q: pool_features(q_pre, cfg.block_size, &cfg.q_pooling)?,
            k: pool_features(k_pre, cfg.block_size, &cfg.k_pooling)?,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.q.rows()
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub(crate) struct GateActivations<T> {
    pub q_rot: Matrix<T>,
    pub k_rot: Matrix<T>,
    pub score: Matrix<T>,
}

pub(crate) fn forward_pooled<T: Real>(
    pooled: &PooledInputs<T>,
    params: &GateParams<T>,
    cfg: &GateConfig,
) -> Result<GateActivations<T>> {
    params.check(cfg)?;
    let nb = pooled.num_blocks();
    let pos = cfg.block_positions::<T>(nb);
    let theta = T::lit(cfg.block_theta());
    let mut q_rot = matmul(&pooled.q, &params.w_q)?;
    let mut k_rot = matmul(&pooled.k, &params.w_k)?;
    rope_rotate_in_place(&mut q_rot, &pos, theta)?;
    rope_rotate_in_place(&mut k_rot, &pos, theta)?;
    let logits =
        matmul_transb(&q_rot, &k_rot)?.scale(T::one() / T::lit(cfg.head_dim as f64).sqrt());
    let score = row_softmax_masked(&logits, &BinaryMatrix::causal(nb))?;
    Ok(GateActivations {
        q_rot,
        k_rot,
        score,
    })
}

/// Block scores for one head from its pre-RoPE queries and keys.
pub fn gate_forward<T: Real>(
    q_pre: &Matrix<T>,
    k_pre: &Matrix<T>,
    params: &GateParams<T>,
    cfg: &GateConfig,
) -> Result<BlockScore<T>> {
    params.check(cfg)?;
    let pooled = PooledInputs::new(q_pre, k_pre, cfg)?;
    let act = forward_pooled(&pooled, params, cfg)?;
    Ok(BlockScore { score: act.score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rope_rotate;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = GateConfig::new(8, 4, 10000.0);
        let a = init_gate_params::<f64>(&cfg, 7);
        assert_eq!(a, init_gate_params::<f64>(&cfg, 7));
        assert_eq!(a.w_q.shape(), (8, 8));
        assert_eq!(a.w_k.shape(), (24, 8));

        let b = init_gate_params::<f64>(&cfg, 8);
        let all: Vec<(f64, f64)> = a
            .w_q
            .as_slice()
            .iter()
            .chain(a.w_k.as_slice())
            .zip(b.w_q.as_slice().iter().chain(b.w_k.as_slice()))
            .map(|(&x, &y)| (x, y))
            .collect();
        let differ = all.iter().filter(|(x, y)| x != y).count();
        assert!(differ as f64 >= 0.99 * all.len() as f64);
    }

    #[test]
    fn init_variance_is_one_over_d() {
        let mut cfg = GateConfig::new(64, 64, 10000.0);
        // 64 pooling slots on K give 64·64·64 + 64·64 ≈ 2.7e5 entries per seed;
        // four seeds give over 10^6 samples.
        cfg.k_pooling = alloc::vec![PoolMethod::Average; 64];
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        for seed in 0..4 {
            let p = init_gate_params::<f64>(&cfg, seed);
            for &x in p.w_q.as_slice().iter().chain(p.w_k.as_slice()) {
                n += 1;
                sum += x;
                sq += x * x;
            }
        }
        assert!(n >= 1_000_000);
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let d = 64.0;
        assert!(var > 0.8 / d && var < 1.2 / d, "variance {var}");
    }

    #[test]
    fn single_block_scores_one() {
        let cfg = GateConfig::new(4, 8, 10000.0);
        let p = init_gate_params::<f64>(&cfg, 1);
        let s = gate_forward(&random(5, 4, 1), &random(5, 4, 2), &p, &cfg).unwrap();
        assert_eq!(s.matrix().as_slice(), &[1.0]);
    }

    #[test]
    fn zero_query_projection_is_uniform() {
        let cfg = GateConfig::new(4, 2, 10000.0);
        let mut p = init_gate_params::<f64>(&cfg, 1);
        p.w_q = Matrix::zeros(4, 4);
        let s = gate_forward(&random(9, 4, 3), &random(9, 4, 4), &p, &cfg).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((s.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_matches_step_by_step_composition() {
        let cfg = GateConfig::new(8, 4, 10000.0);
        let p = init_gate_params::<f64>(&cfg, 5);
        let (q, k) = (random(30, 8, 5), random(30, 8, 6));
        let got = gate_forward(&q, &k, &p, &cfg).unwrap();

        let pq = seq_pool(&q, 4, PoolMethod::Average).unwrap();
        let pk = Matrix::hcat(&[
            seq_pool(&k, 4, PoolMethod::Max).unwrap(),
            seq_pool(&k, 4, PoolMethod::Min).unwrap(),
            seq_pool(&k, 4, PoolMethod::Average).unwrap(),
        ])
        .unwrap();
        let nb = 8;
        let pos: Vec<f64> = (0..nb).map(|i| i as f64).collect();
        let qr = rope_rotate(&matmul(&pq, &p.w_q).unwrap(), &pos, 2500.0).unwrap();
        let kr = rope_rotate(&matmul(&pk, &p.w_k).unwrap(), &pos, 2500.0).unwrap();
        let logits = matmul(&qr, &kr.transpose())
            .unwrap()
            .scale(1.0 / 8f64.sqrt());
        let expect = row_softmax_masked(&logits, &BinaryMatrix::causal(nb)).unwrap();
        assert!(got.matrix().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn scores_are_block_causal_distributions() {
        let cfg = GateConfig::new(8, 3, 500000.0);
        let p = init_gate_params::<f32>(&cfg, 9);
        let s = gate_forward(&random(40, 8, 7).cast(), &random(40, 8, 8).cast(), &p, &cfg).unwrap();
        for i in 0..s.num_blocks() {
            let total: f32 = s.matrix().row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(s.matrix().row(i)[i + 1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn logits_depend_only_on_block_offset() {
        // All pooled rows identical: the pre-softmax scores form a Toeplitz matrix.
        let cfg = GateConfig::new(8, 4, 10000.0);
        let p = init_gate_params::<f64>(&cfg, 3);
        let row = random(1, 8, 10);
        let x = Matrix::from_fn(48, 8, |_, c| row.get(0, c));
        let pooled = PooledInputs::new(&x, &x, &cfg).unwrap();
        let act = forward_pooled(&pooled, &p, &cfg).unwrap();
        let logits = matmul_transb(&act.q_rot, &act.k_rot).unwrap();
        let nb = 12;
        for i in 0..nb {
            for j in 0..nb {
                if i >= 1 && j >= 1 {
                    assert!((logits.get(i, j) - logits.get(i - 1, j - 1)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn parameter_shape_mismatch() {
        let cfg = GateConfig::new(4, 2, 10000.0);
        let mut p = init_gate_params::<f64>(&cfg, 0);
        p.w_k = Matrix::zeros(4, 4);
        assert!(gate_forward(&random(8, 4, 0), &random(8, 4, 1), &p, &cfg).is_err());
        let p = init_gate_params::<f64>(&cfg, 0);
        assert!(gate_forward(&random(8, 6, 0), &random(8, 6, 1), &p, &cfg).is_err());
        let mut bad = cfg.clone();
        bad.k_pooling.clear();
        assert!(bad.validate().is_err());
    }
}
