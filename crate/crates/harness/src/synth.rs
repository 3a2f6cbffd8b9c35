//! Synthetic attention heads.
//!
//! `Random` heads are i.i.d. Gaussian. `Planted` heads hide a known block
//! pattern: every query block `I` attends to itself, to `I − 1` and to one
//! earlier content block `c_I`.
//!
//! The recency part is a shared unit direction of norm [`RECENCY_NORM`] added
//! to every query and key on the mid-frequency rotary pairs. After the
//! model's rotary embedding its self-similarity decays with distance, which
//! favors nearby blocks. The content part lives on the slowest rotary pairs,
//! where rotation is negligible across the sequence. Block `J` gets a unit
//! code `u_J` (orthonormal when there are few enough blocks). Queries of
//! block `I` add `g·u_{c_I}` and keys of every chosen target block `J` add
//! `g·u_J`. The gain is `g = √(a·d)` with `a = 3/√d`, so a matching pair
//! gains `a·√d = 3` in scaled logit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use seer_core::{BinaryMatrix, HeadTensors, Matrix};

use crate::error::{HarnessError, Result};
use crate::tensorfile::{find, Tensor};

pub const DEFAULT_ROPE_THETA: f64 = 500_000.0;
pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const RECENCY_NORM: f64 = 6.0;
/// Size of every planted set once `I ≥ 2`.
pub const PLANTED_SET_SIZE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Pattern {
    Random,
    Planted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seq: usize,
    pub dim: usize,
    pub heads: usize,
    pub pattern: Pattern,
    /// Granularity of the planted pattern.
    pub block_size: usize,
    /// Rotary base of the simulated model.
    pub rope_theta: f64,
    /// Norm of the shared recency direction in planted heads.
    pub recency_norm: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(seq: usize, dim: usize, heads: usize, pattern: Pattern, seed: u64) -> Self {
        Self {
            seq,
            dim,
            heads,
            pattern,
            block_size: DEFAULT_BLOCK_SIZE,
            rope_theta: DEFAULT_ROPE_THETA,
            recency_norm: RECENCY_NORM,
            seed,
        }
    }
}

/// Heads plus the metadata needed to rebuild ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rope_theta: f64,
    pub block_size: usize,
    pub heads: Vec<HeadTensors<f32>>,
    /// Planted block sets as `[nb × nb]` indicator matrices.
    pub planted: Vec<Option<BinaryMatrix>>,
}

impl Dataset {
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = vec![
            Tensor::scalar("meta.rope_theta", self.rope_theta),
            Tensor::scalar("meta.block_size", self.block_size as f64),
        ];
        for (i, (h, p)) in self.heads.iter().zip(&self.planted).enumerate() {
            out.push(Tensor::from_matrix(format!("head{i}.q"), &h.q));
            out.push(Tensor::from_matrix(format!("head{i}.k"), &h.k));
            out.push(Tensor::from_matrix(format!("head{i}.v"), &h.v));
            if let Some(p) = p {
                out.push(Tensor::from_matrix(
                    format!("head{i}.planted"),
                    &p.to_matrix::<f32>(),
                ));
            }
        }
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let rope_theta = find(tensors, "meta.rope_theta")
            .and_then(|t| t.as_scalar())
            .unwrap_or(DEFAULT_ROPE_THETA);
        let block_size = find(tensors, "meta.block_size")
            .and_then(|t| t.as_scalar())
            .map(|b| b as usize)
            .unwrap_or(DEFAULT_BLOCK_SIZE);
        let mut heads = Vec::new();
        let mut planted = Vec::new();
        for i in 0.. {
            let Ok(q) = find(tensors, &format!("head{i}.q")) else {
                break;
            };
            let k = find(tensors, &format!("head{i}.k"))?;
            let v = find(tensors, &format!("head{i}.v"))?;
            heads.push(HeadTensors::new(
                q.to_matrix()?,
                k.to_matrix()?,
                v.to_matrix()?,
            )?);
            planted.push(match find(tensors, &format!("head{i}.planted")) {
                Ok(t) => {
                    let m = t.to_matrix::<f32>()?;
                    Some(BinaryMatrix::from_fn(m.rows(), m.cols(), |r, c| {
                        m.get(r, c) != 0.0
                    }))
                }
                Err(_) => None,
            });
        }
        if heads.is_empty() {
            return Err(HarnessError::Format("no heads in dataset".into()));
        }
        Ok(Self {
            rope_theta,
            block_size,
            heads,
            planted,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::tensorfile::save(path, &self.to_tensors())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_tensors(&crate::tensorfile::load(path)?)
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// `count` unit vectors in `m` dims; orthonormal (Gram–Schmidt) when `count <= m`.
fn content_codes(count: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut codes: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = gaussian(1, m, 1.0, rng);
        if count <= m {
            for u in &codes {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        unit(&mut v);
        codes.push(v);
    }
    codes
}

/// Rotary dim ranges `(recency, content)` for head dim `d`.
fn bands(d: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let h = d / 2;
    let content_pairs = (h * 10 / 32).max(1);
    (
        2 * (h * 5 / 32)..2 * (h * 17 / 32),
        d - 2 * content_pairs..d,
    )
}

fn planted_head(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (HeadTensors<f32>, BinaryMatrix) {
    let (n, d, b) = (cfg.seq, cfg.dim, cfg.block_size);
    let nb = n.div_ceil(b);
    let std = 1.0 / (d as f64).sqrt();
    let mut q = gaussian(n, d, std, rng);
    let mut k = gaussian(n, d, std, rng);
    let v = gaussian(n, d, std, rng);

    let (rec, content) = bands(d);
    let codes = content_codes(nb, content.len(), rng);
    let mut planted = BinaryMatrix::filled(nb, nb, false);
    let mut target = vec![None; nb];
    for i in 0..nb {
        planted.set(i, i, true);
        if i >= 1 {
            planted.set(i, i - 1, true);
        }
        if i >= 2 {
            let c = rng.random_range(0..i - 1);
            planted.set(i, c, true);
            target[i] = Some(c);
        }
    }
    let mut recency = gaussian(1, rec.len(), 1.0, rng);
    if !recency.is_empty() {
        unit(&mut recency);
    }

    let gain = (3.0 * (d as f64).sqrt()).sqrt();
    let mut is_target = vec![false; nb];
    target.iter().flatten().for_each(|&c| is_target[c] = true);
    for t in 0..n {
        let blk = t / b;
        let (qr, kr) = (&mut q[t * d..(t + 1) * d], &mut k[t * d..(t + 1) * d]);
        for (x, r) in rec.clone().zip(&recency) {
            qr[x] += cfg.recency_norm * r;
            kr[x] += cfg.recency_norm * r;
        }
        if let Some(c) = target[blk] {
            content
                .clone()
                .zip(&codes[c])
                .for_each(|(x, u)| qr[x] += gain * u);
        }
        if is_target[blk] {
            content
                .clone()
                .zip(&codes[blk])
                .for_each(|(x, u)| kr[x] += gain * u);
        }
    }
    (head(n, d, q, k, v), planted)
}

fn head(n: usize, d: usize, q: Vec<f64>, k: Vec<f64>, v: Vec<f64>) -> HeadTensors<f32> {
    let m = |x: Vec<f64>| {
        Matrix::new(n, d, x.into_iter().map(|v| v as f32).collect()).expect("finite draws")
    };
    HeadTensors::new(m(q), m(k), m(v)).expect("consistent shapes")
}

/// Generates `cfg.heads` heads from one seeded stream.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.seq == 0 || cfg.dim == 0 || cfg.dim % 2 != 0 || cfg.heads == 0 || cfg.block_size == 0 {
        return Err(seer_core::Error::InvalidArgument(format!(
            "need seq >= 1, even dim >= 2, heads >= 1, block >= 1; got seq {} dim {} heads {} block {}",
            cfg.seq, cfg.dim, cfg.heads, cfg.block_size
        ))
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut planted = Vec::with_capacity(cfg.heads);
    for _ in 0..cfg.heads {
        match cfg.pattern {
            Pattern::Random => {
                let std = 1.0 / (cfg.dim as f64).sqrt();
                let q = gaussian(cfg.seq, cfg.dim, std, &mut rng);
                let k = gaussian(cfg.seq, cfg.dim, std, &mut rng);
                let v = gaussian(cfg.seq, cfg.dim, std, &mut rng);
                heads.push(head(cfg.seq, cfg.dim, q, k, v));
                planted.push(None);
            }
            Pattern::Planted => {
                let (h, p) = planted_head(cfg, &mut rng);
                heads.push(h);
                planted.push(Some(p));
            }
        }
    }
    Ok(Dataset {
        rope_theta: cfg.rope_theta,
        block_size: cfg.block_size,
        heads,
        planted,
    })
}
