//! Self-distillation of the gate against the frozen model's block ground truth.
//!
//! Only `W_q` and `W_k` are trained. Gradients are derived by hand: the
//! softmax/KL pair gives `(s·Σt − t)/nb` on the logits, the logits are a
//! scaled product of rotated projections, and the rotation is undone by
//! rotating with negated positions.

use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_with_block_gt, GroundTruth, HeadTensors};
use crate::error::{invalid, Error, Result};
use crate::gate::{
    forward_pooled, init_gate_params, BlockScore, GateConfig, GateParams, PooledInputs,
};
use crate::numerics::{matmul, rope_rotate_in_place, Matrix, Real};

/// Floor applied to scores inside the logarithm.
pub const KL_EPS: f64 = 1e-12;

/// Divides every row of `gt` by its sum.
pub fn normalize_target<T: Real>(gt: &GroundTruth<T>) -> Result<Matrix<T>> {
    let m = gt.matrix();
    let n = m.rows();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        let row = m.row(i);
        let total: T = row.iter().copied().sum();
        if !(total > T::zero()) {
            return Err(Error::DegenerateTarget { row: i });
        }
        data.extend(row.iter().map(|&x| x / total));
    }
    Ok(Matrix::from_raw(n, n, data))
}

fn check_target<T: Real>(target: &Matrix<T>, nb: usize) -> Result<()> {
    if target.shape() != (nb, nb) {
        return Err(invalid!(
            "target is {:?}, scores are {nb}x{nb}",
            target.shape()
        ));
    }
    for i in 0..nb {
        if target.row(i)[i + 1..].iter().any(|&x| x != T::zero()) {
            return Err(invalid!(
                "target row {i} has mass outside the causal support"
            ));
        }
    }
    Ok(())
}

fn kl_rows<T: Real>(target: &Matrix<T>, score: &Matrix<T>) -> T {
    let n = target.rows();
    let eps = T::lit(KL_EPS);
    let mut total = T::zero();
    for i in 0..n {
        for (&t, &s) in target.row(i).iter().zip(score.row(i)) {
            if t > T::zero() {
                total += t * (t / s.max(eps)).ln();
            }
        }
    }
    total / T::lit(n as f64)
}

/// Mean over rows of `KL(target_i ‖ score_i)`.
pub fn kl_loss<T: Real>(target: &Matrix<T>, score: &BlockScore<T>) -> Result<T> {
    check_target(target, score.num_blocks())?;
    Ok(kl_rows(target, score.matrix()))
}

/// Gradients with respect to the gate projections.
#[derive(Clone, Debug, PartialEq)]
pub struct GateGradients<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
}

impl<T: Real> GateGradients<T> {
    pub fn norm(&self) -> T {
        let a = self.w_q.frobenius_norm();
        let b = self.w_k.frobenius_norm();
        (a * a + b * b).sqrt()
    }
}

pub(crate) fn backward_pooled<T: Real>(
    pooled: &PooledInputs<T>,
    params: &GateParams<T>,
    cfg: &GateConfig,
    target: &Matrix<T>,
) -> Result<(GateGradients<T>, T)> {
    let act = forward_pooled(pooled, params, cfg)?;
    let nb = pooled.num_blocks();
    check_target(target, nb)?;
    let loss = kl_rows(target, &act.score);

    // Gradient on the scaled logits.
    let inv_nb = T::one() / T::lit(nb as f64);
    let mut g = Matrix::zeros(nb, nb);
    for i in 0..nb {
        let t = target.row(i);
        let s = act.score.row(i);
        let mass: T = t.iter().copied().sum();
        for j in 0..=i {
            g.set(i, j, (s[j] * mass - t[j]) * inv_nb);
        }
    }
    let c = T::one() / T::lit(cfg.head_dim as f64).sqrt();
    let mut dq = matmul(&g, &act.k_rot)?.scale(c);
    let mut dk = matmul(&g.transpose(), &act.q_rot)?.scale(c);

    let back: Vec<T> = cfg
        .block_positions::<T>(nb)
        .into_iter()
        .map(|p| -p)
        .collect();
    let theta = T::lit(cfg.block_theta());
    rope_rotate_in_place(&mut dq, &back, theta)?;
    rope_rotate_in_place(&mut dk, &back, theta)?;

    let grads = GateGradients {
        w_q: matmul(&pooled.q.transpose(), &dq)?,
        w_k: matmul(&pooled.k.transpose(), &dk)?,
    };
    Ok((grads, loss))
}

/// Loss and its gradient with respect to `W_q` and `W_k` for one head.
/// `target` is a row-normalized ground truth (see [`normalize_target`]).
/// Gradients stop at the pooled features.
pub fn gate_backward<T: Real>(
    q_pre: &Matrix<T>,
    k_pre: &Matrix<T>,
    params: &GateParams<T>,
    cfg: &GateConfig,
    target: &Matrix<T>,
) -> Result<(GateGradients<T>, T)> {
    params.check(cfg)?;
    let pooled = PooledInputs::new(q_pre, k_pre, cfg)?;
    backward_pooled(&pooled, params, cfg, target)
}

/// Optimizer schedule.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub lr0: f64,
    pub steps: usize,
    pub warmup: usize,
    /// Sequences per step.
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            steps: 300,
            warmup: 0,
            batch: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(invalid!("lr0 must be positive, got {}", self.lr0));
        }
        if self.batch == 0 {
            return Err(invalid!("batch must be at least 1"));
        }
        Ok(())
    }

    /// Linear warmup to `lr0`, then `lr0·½(1 + cos(π·step/steps))`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr0 * (step + 1) as f64 / self.warmup as f64;
        }
        let frac = step as f64 / self.steps.max(1) as f64;
        self.lr0 * 0.5 * (1.0 + Float::cos(core::f64::consts::PI * frac))
    }
}

/// One line of the loss trace. `loss` is the batch loss before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Parameters plus Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub step: usize,
    pub params: GateParams<T>,
    m: GateGradients<T>,
    v: GateGradients<T>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Real> TrainState<T> {
    pub fn new(params: GateParams<T>) -> Self {
        let zeros = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        let m = GateGradients {
            w_q: zeros(&params.w_q),
            w_k: zeros(&params.w_k),
        };
        Self {
            step: 0,
            v: m.clone(),
            m,
            params,
        }
    }

    /// One Adam update with bias correction.
    pub fn apply(&mut self, grads: &GateGradients<T>, lr: f64) -> Result<()> {
        if grads.w_q.shape() != self.params.w_q.shape()
            || grads.w_k.shape() != self.params.w_k.shape()
        {
            return Err(invalid!("gradient shapes do not match parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::lit(1.0 - Float::powi(BETA1, t));
        let c2 = T::lit(1.0 - Float::powi(BETA2, t));
        let (b1, b2, eps, lr) = (T::lit(BETA1), T::lit(BETA2), T::lit(ADAM_EPS), T::lit(lr));
        let update = |p: &mut Matrix<T>, m: &mut Matrix<T>, v: &mut Matrix<T>, g: &Matrix<T>| {
            let (p, m, v) = (p.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice());
            for (((p, m), v), &g) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.as_slice())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        };
        update(
            &mut self.params.w_q,
            &mut self.m.w_q,
            &mut self.v.w_q,
            &grads.w_q,
        );
        update(
            &mut self.params.w_k,
            &mut self.m.w_k,
            &mut self.v.w_k,
            &grads.w_k,
        );
        Ok(())
    }
}

/// Pooled inputs and normalized target of one training sequence.
pub(crate) struct Example<T> {
    pooled: PooledInputs<T>,
    target: Matrix<T>,
}

fn prepare<T: Real>(head: &HeadTensors<T>, cfg: &GateConfig) -> Result<Example<T>> {
    let (q, k) = head.rotated(T::lit(cfg.rope_theta))?;
    let (_, gt) = attention_with_block_gt(&q, &k, &head.v, cfg.block_size)?;
    Ok(Example {
        pooled: PooledInputs::new(&head.q, &head.k, cfg)?,
        target: normalize_target(&gt)?,
    })
}

/// Trains a freshly initialized gate (seeded by `seed`) on `dataset`.
pub fn train_gate<T: Real>(
    dataset: &[HeadTensors<T>],
    cfg: &GateConfig,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(GateParams<T>, Vec<TrainRecord>)> {
    cfg.validate()?;
    train_gate_from(init_gate_params(cfg, seed), dataset, cfg, tcfg, seed)
}

/// Continues training from `params`.
///
/// The model is frozen, so every sequence's ground truth and pooled features
/// are computed once up front. Batches walk a seeded shuffle of the dataset,
/// reshuffled each epoch. Gradients and losses are averaged over the batch in
/// batch order.
pub fn train_gate_from<T: Real>(
    params: GateParams<T>,
    dataset: &[HeadTensors<T>],
    cfg: &GateConfig,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(GateParams<T>, Vec<TrainRecord>)> {
    tcfg.validate()?;
    params.check(cfg)?;
    if tcfg.steps == 0 {
        return Ok((params, Vec::new()));
    }
    if dataset.is_empty() {
        return Err(invalid!("training dataset is empty"));
    }
    let examples = dataset
        .iter()
        .map(|h| prepare(h, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut state = TrainState::new(params);
    let mut trace = Vec::with_capacity(tcfg.steps);
    let inv_batch = T::one() / T::lit(tcfg.batch as f64);

    for step in 0..tcfg.steps {
        let lr = tcfg.lr_at(step);
        let mut acc: Option<GateGradients<T>> = None;
        let mut loss = T::zero();
        for _ in 0..tcfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            let (g, l) = backward_pooled(&ex.pooled, &state.params, cfg, &ex.target)?;
            loss += l;
            acc = Some(match acc {
                None => g,
                Some(mut a) => {
                    add_assign(&mut a.w_q, &g.w_q);
                    add_assign(&mut a.w_k, &g.w_k);
                    a
                }
            });
        }
        let mut grads = acc.expect("batch is non-empty");
        grads.w_q = grads.w_q.scale(inv_batch);
        grads.w_k = grads.w_k.scale(inv_batch);
        let loss = loss * inv_batch;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                lr,
                grad_norm: grads.norm().as_f64(),
            });
        }
        trace.push(TrainRecord {
            step,
            lr,
            loss: loss.as_f64(),
        });
        state.apply(&grads, lr)?;
    }
    Ok((state.params, trace))
}

fn add_assign<T: Real>(a: &mut Matrix<T>, b: &Matrix<T>) {
    for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::gate_forward;
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_target(nb: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        let mut t = Matrix::from_fn(nb, nb, |i, j| {
            if j <= i {
                rng.random_range(0.01..1.0)
            } else {
                0.0
            }
        });
        for i in 0..nb {
            let s: f64 = t.row(i).iter().sum();
            t.row_mut(i).iter_mut().for_each(|x| *x /= s);
        }
        t
    }

    fn gt(rows: &[&[f64]]) -> GroundTruth<f64> {
        GroundTruth::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_target(&gt(&[&[1.0]])).unwrap().as_slice(), &[1.0]);
        let t = normalize_target(&gt(&[&[1.0, 0.0], &[0.5, 0.5]])).unwrap();
        assert_eq!(t.row(1), &[0.5, 0.5]);
        let t = normalize_target(&gt(&[&[1.0, 0.0], &[1.0 / 3.0, 1.0 / 3.0]])).unwrap();
        assert!((t.get(1, 0) - 0.5).abs() < 1e-15);
        let t = normalize_target(&gt(&[&[1.0, 0.0], &[1.0, 1.0 / 3.0]])).unwrap();
        assert!((t.get(1, 0) - 0.75).abs() < 1e-15 && (t.get(1, 1) - 0.25).abs() < 1e-15);
    }

    fn score(rows: &[&[f64]]) -> BlockScore<f64> {
        BlockScore::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn kl_examples() {
        let s = score(&[&[1.0, 0.0], &[0.5, 0.5]]);
        let same = Matrix::from_rows(&[&[1.0, 0.0], &[0.5, 0.5]]).unwrap();
        assert_eq!(kl_loss(&same, &s).unwrap(), 0.0);

        // Row 0 contributes 0; the mean halves the row-1 value.
        let t = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        assert!((kl_loss(&t, &s).unwrap() * 2.0 - core::f64::consts::LN_2).abs() < 1e-6);
        let t = Matrix::from_rows(&[&[1.0, 0.0], &[0.75, 0.25]]).unwrap();
        assert!((kl_loss(&t, &s).unwrap() * 2.0 - 0.130812).abs() < 1e-6);

        let bad = Matrix::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]).unwrap();
        assert!(kl_loss(&bad, &s).is_err());
    }

    #[test]
    fn kl_floors_vanishing_scores() {
        let s = score(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let t = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let l = kl_loss(&t, &s).unwrap();
        assert!(l.is_finite() && (l * 2.0 - (1e12f64).ln()).abs() < 1e-9);
    }

    /// Central differences of the loss with respect to every parameter entry.
    fn numeric_grads(
        q: &Matrix<f64>,
        k: &Matrix<f64>,
        p: &GateParams<f64>,
        cfg: &GateConfig,
        t: &Matrix<f64>,
    ) -> GateGradients<f64> {
        let h = 1e-5;
        let loss = |p: &GateParams<f64>| {
            let s = gate_forward(q, k, p, cfg).unwrap();
            kl_loss(t, &s).unwrap()
        };
        let mut g = GateGradients {
            w_q: Matrix::zeros(p.w_q.rows(), p.w_q.cols()),
            w_k: Matrix::zeros(p.w_k.rows(), p.w_k.cols()),
        };
        for which in 0..2 {
            let len = if which == 0 {
                p.w_q.as_slice().len()
            } else {
                p.w_k.as_slice().len()
            };
            for idx in 0..len {
                let mut plus = p.clone();
                let mut minus = p.clone();
                let (a, b) = if which == 0 {
                    (&mut plus.w_q, &mut minus.w_q)
                } else {
                    (&mut plus.w_k, &mut minus.w_k)
                };
                a.as_mut_slice()[idx] += h;
                b.as_mut_slice()[idx] -= h;
                let d = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let out = if which == 0 { &mut g.w_q } else { &mut g.w_k };
                out.as_mut_slice()[idx] = d;
            }
        }
        g
    }

    fn max_rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = GateConfig::new(8, 8, 10000.0);
        let p = init_gate_params::<f64>(&cfg, 3);
        let (q, k) = (random(64, 8, &mut rng), random(64, 8, &mut rng));
        let t = random_target(8, &mut rng);
        let (g, loss) = gate_backward(&q, &k, &p, &cfg, &t).unwrap();
        let s = gate_forward(&q, &k, &p, &cfg).unwrap();
        assert!((loss - kl_loss(&t, &s).unwrap()).abs() < 1e-15);
        let num = numeric_grads(&q, &k, &p, &cfg, &t);
        assert!(max_rel_err(&g.w_q, &num.w_q) < 1e-4);
        assert!(max_rel_err(&g.w_k, &num.w_k) < 1e-4);
    }

    #[test]
    fn gradient_check_without_block_rope() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut cfg = GateConfig::new(4, 5, 10000.0);
        cfg.block_rope = false;
        cfg.q_pooling = alloc::vec![crate::PoolMethod::Max, crate::PoolMethod::Average];
        let p = init_gate_params::<f64>(&cfg, 4);
        let (q, k) = (random(23, 4, &mut rng), random(23, 4, &mut rng));
        let t = random_target(5, &mut rng);
        let (g, _) = gate_backward(&q, &k, &p, &cfg, &t).unwrap();
        let num = numeric_grads(&q, &k, &p, &cfg, &t);
        assert!(max_rel_err(&g.w_q, &num.w_q) < 1e-4);
        assert!(max_rel_err(&g.w_k, &num.w_k) < 1e-4);
    }

    #[test]
    fn gradient_vanishes_at_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = GateConfig::new(8, 8, 10000.0);
        let p = init_gate_params::<f64>(&cfg, 5);
        let (q, k) = (random(40, 8, &mut rng), random(40, 8, &mut rng));
        let t = gate_forward(&q, &k, &p, &cfg).unwrap().matrix().clone();
        let (g, loss) = gate_backward(&q, &k, &p, &cfg, &t).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(g.w_q.max_abs() < 1e-8 && g.w_k.max_abs() < 1e-8);
    }

    #[test]
    fn zero_query_projection_gives_reproducible_key_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = GateConfig::new(4, 4, 10000.0);
        let mut p = init_gate_params::<f64>(&cfg, 6);
        p.w_q = Matrix::zeros(4, 4);
        let (q, k) = (random(16, 4, &mut rng), random(16, 4, &mut rng));
        let t = Matrix::from_fn(4, 4, |i, j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 });
        let (a, _) = gate_backward(&q, &k, &p, &cfg, &t).unwrap();
        let (b, _) = gate_backward(&q, &k, &p, &cfg, &t).unwrap();
        assert_eq!(a, b);
        assert!(a.w_k.as_slice().iter().all(|x| x.is_finite()));
    }

    fn toy_dataset(n: usize, seq: usize, d: usize, seed: u64) -> Vec<HeadTensors<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let scale = 2.0;
                let q = random(seq, d, &mut rng).scale(scale);
                let k = random(seq, d, &mut rng).scale(scale);
                let v = random(seq, d, &mut rng);
                HeadTensors::new(q, k, v).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_steps_leaves_params_unchanged() {
        let cfg = GateConfig::new(8, 8, 10000.0);
        let tcfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let (p, trace) = train_gate(&toy_dataset(2, 32, 8, 0), &cfg, &tcfg, 11).unwrap();
        assert_eq!(p, init_gate_params(&cfg, 11));
        assert!(trace.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_leaves_model_alone() {
        let data = toy_dataset(3, 48, 8, 1);
        let before = data.clone();
        let cfg = GateConfig::new(8, 8, 10000.0);
        let tcfg = TrainConfig {
            lr0: 1e-2,
            steps: 20,
            warmup: 2,
            batch: 2,
        };
        let a = train_gate(&data, &cfg, &tcfg, 3).unwrap();
        let b = train_gate(&data, &cfg, &tcfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(data, before);
    }

    #[test]
    fn learning_rate_schedule() {
        let t = TrainConfig {
            lr0: 1.0,
            steps: 10,
            warmup: 4,
            batch: 1,
        };
        assert_eq!(t.lr_at(0), 0.25);
        assert_eq!(t.lr_at(3), 1.0);
        assert!((t.lr_at(5) - 0.5).abs() < 1e-15);
        let t = TrainConfig { warmup: 0, ..t };
        assert_eq!(t.lr_at(0), 1.0);
    }

    #[test]
    fn rejects_empty_dataset_and_bad_config() {
        let cfg = GateConfig::new(4, 4, 10000.0);
        assert!(train_gate::<f64>(&[], &cfg, &TrainConfig::default(), 0).is_err());
        let bad = TrainConfig {
            lr0: 0.0,
            ..TrainConfig::default()
        };
        assert!(train_gate(&toy_dataset(1, 8, 4, 0), &cfg, &bad, 0).is_err());
    }

    #[test]
    fn single_batch_loss_descends() {
        let data = toy_dataset(1, 64, 8, 9);
        let cfg = GateConfig::new(8, 8, 10000.0);
        let tcfg = TrainConfig {
            lr0: 1e-2,
            steps: 51,
            warmup: 0,
            batch: 1,
        };
        let (_, trace) = train_gate(&data, &cfg, &tcfg, 2).unwrap();
        let drops = trace.windows(2).filter(|w| w[1].loss < w[0].loss).count();
        assert!(drops >= 45, "{drops} of 50 steps decreased the loss");
    }
}
