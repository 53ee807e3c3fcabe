//! Random attention: a Bernoulli-masked all-ones patch interaction at
//! training time and its closed-form expectation at inference, plus the
//! scaled-dot-product block used by the attention ablation.
//!
//! Training applies (M ⊙ Â)·x where Â is all ones and M has i.i.d. entries
//! with P(0) = p, redrawn on every call. Inference replaces the mask by its
//! mean: every output row becomes (1 − p) times the column sums of x. The
//! mask never carries gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::mixing::SamIds;
use crate::numerics::{Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Disconnect probability for the interaction mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RamConfig {
    pub p: f64,
}

impl RamConfig {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "disconnect probability {p} outside [0, 1)"
            )));
        }
        Ok(Self { p })
    }
}

/// Whether a forward pass draws fresh masks or uses the expectation.
pub enum RamMode<'r> {
    /// Masked interactions; masks drawn from this stream in block order.
    Train(&'r mut ChaCha8Rng),
    /// Masked interactions with masks drawn up front, consumed in block
    /// order. Lets one sample share its masks across channels.
    Masked {
        masks: &'r [InteractionMask],
        next: usize,
    },
    /// Closed-form (1 − p)-scaled full interaction, no randomness.
    Infer,
}

/// One drawn N×N binary mask.
#[derive(Debug, Clone)]
pub struct InteractionMask {
    n: usize,
    entries: Vec<f64>,
    /// RNG word position at the moment of the draw, for reproducing it.
    pub seed_record: u128,
}

impl InteractionMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn ones(&self) -> usize {
        self.entries.iter().filter(|&&v| v == 1.0).count()
    }

    fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.entries.clone()).unwrap()
    }
}

/// Draws an N×N mask with i.i.d. entries, P(0) = p. The diagonal is treated
/// like any other entry.
pub fn sample_mask(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<InteractionMask> {
    RamConfig::new(p)?;
    if n == 0 {
        return Err(Error::Config("mask size must be positive".into()));
    }
    let seed_record = rng.get_word_pos();
    let entries = (0..n * n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 })
        .collect();
    Ok(InteractionMask { n, entries, seed_record })
}

/// Masked interaction (M ⊙ Â)·x at training, (1 − p)·Â·x at inference.
pub fn ram_forward(tape: &mut Tape, x: TensorId, p: f64, mode: &mut RamMode) -> Result<TensorId> {
    let n = tape.value(x).rows();
    match mode {
        RamMode::Train(rng) => {
            let mask = sample_mask(n, p, rng)?;
            let m = tape.constant(mask.to_tensor());
            tape.matmul(m, x)
        }
        RamMode::Masked { masks, next } => {
            let mask = masks.get(*next).ok_or_else(|| {
                Error::Config(format!("forward needs more than {} pre-drawn masks", masks.len()))
            })?;
            if mask.n() != n {
                return Err(Error::Shape {
                    op: "ram mask",
                    lhs: vec![mask.n(), mask.n()],
                    rhs: vec![n, tape.value(x).cols()],
                });
            }
            *next += 1;
            let m = tape.constant(mask.to_tensor());
            tape.matmul(m, x)
        }
        RamMode::Infer => tape.ram_ensemble(x, 1.0 - p),
    }
}

/// x + ram_forward(x); the residual is a plain sum.
pub fn ram_block(tape: &mut Tape, x: TensorId, p: f64, mode: &mut RamMode) -> Result<TensorId> {
    let y = ram_forward(tape, x, p, mode)?;
    tape.add(x, y)
}

/// Single-head scaled-dot-product self-attention with residual, the drop-in
/// replacement for `ram_block` in the attention ablation.
pub fn sam_block(tape: &mut Tape, x: TensorId, w: &SamIds) -> Result<TensorId> {
    let d = tape.value(x).cols();
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax_rows(scaled)?;
    let out = tape.matmul(attn, v)?;
    tape.add(x, out)
}

/// Tape nodes appended by one inference-mode RAM application vs one
/// attention application on the same input; the cost comparison the
/// complexity argument rests on.
pub fn primitive_counts(n: usize, d: usize) -> (usize, usize) {
    let probe = Tensor::zeros(&[n, d]);
    let mut tape = Tape::new();
    let x = tape.constant(probe.clone());
    let before = tape.len();
    ram_forward(&mut tape, x, 0.85, &mut RamMode::Infer).unwrap();
    let ram_ops = tape.len() - before;

    let mut tape = Tape::new();
    let x = tape.constant(probe);
    let eye = {
        let mut e = vec![0.0; d * d];
        for i in 0..d {
            e[i * d + i] = 1.0;
        }
        Tensor::new(vec![d, d], e).unwrap()
    };
    let wq = tape.constant(eye.clone());
    let wk = tape.constant(eye.clone());
    let wv = tape.constant(eye);
    let w = SamIds { wq, wk, wv };
    let before = tape.len();
    let q = tape.matmul(x, w.wq).unwrap();
    let k = tape.matmul(x, w.wk).unwrap();
    let v = tape.matmul(x, w.wv).unwrap();
    let scores = tape.matmul_nt(q, k).unwrap();
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt()).unwrap();
    let attn = tape.softmax_rows(scaled).unwrap();
    tape.matmul(attn, v).unwrap();
    let sam_ops = tape.len() - before;
    (ram_ops, sam_ops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, rng};
    use crate::Result;

    fn infer_rows(x: &Tensor, p: f64) -> Vec<f64> {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let y = ram_forward(&mut tape, xi, p, &mut RamMode::Infer).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn config_rejects_bad_probability() {
        assert!(RamConfig::new(1.0).is_err());
        assert!(RamConfig::new(-0.1).is_err());
        assert!(RamConfig::new(0.0).is_ok());
        assert!(RamConfig::new(0.999999).is_ok());
    }

    #[test]
    fn zero_probability_gives_all_ones_mask() {
        let mut r = rng::stream(1, &[rng::TAG_MASK]);
        let m = sample_mask(5, 0.0, &mut r).unwrap();
        assert!(m.entries().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_is_deterministic_given_stream() {
        let draw = || {
            let mut r = rng::stream(7, &[rng::TAG_MASK, 3]);
            sample_mask(4, 0.85, &mut r).unwrap().entries().to_vec()
        };
        assert_eq!(draw(), draw());
        // and entries are binary
        assert!(draw().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn near_one_probability_density_within_binomial_bound() {
        let (n, p) = (1000, 0.999999);
        let mut r = rng::stream(2, &[rng::TAG_MASK]);
        let m = sample_mask(n, p, &mut r).unwrap();
        let trials = (n * n) as f64;
        let expect_ones = trials * (1.0 - p);
        let sigma = (trials * p * (1.0 - p)).sqrt();
        let got = m.ones() as f64;
        assert!(
            (got - expect_ones).abs() <= 3.0 * sigma,
            "ones {got}, expected {expect_ones} ± {}",
            3.0 * sigma
        );
    }

    #[test]
    fn inference_example_rows() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let y = infer_rows(&x, 0.85);
        for row in y.chunks(2) {
            assert!((row[0] - 0.3).abs() < 1e-12, "row {row:?}");
            assert!((row[1] - 0.3).abs() < 1e-12, "row {row:?}");
        }
    }

    #[test]
    fn inference_output_is_rank_one() {
        let mut r = rng::stream(3, &[rng::TAG_VERIFY]);
        let x = Tensor::uniform(&[9, 5], -2.0, 2.0, &mut r);
        let y = infer_rows(&x, 0.85);
        let first = &y[..5];
        for row in y.chunks(5) {
            assert_eq!(row, first);
        }
    }

    #[test]
    fn training_with_all_ones_mask_sums_columns() {
        // p = 0 forces the all-ones mask
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mut r = rng::stream(4, &[rng::TAG_MASK]);
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let y = ram_forward(&mut tape, xi, 0.0, &mut RamMode::Train(&mut r)).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0, 4.0, 6.0]);
    }

    #[test]
    fn training_mean_converges_to_inference() {
        let (n, d, p, m) = (16, 8, 0.85, 10_000);
        let mut r = rng::stream(5, &[rng::TAG_VERIFY]);
        // positive inputs keep the relative-error denominator well away from 0
        let x = Tensor::uniform(&[n, d], 0.0, 1.0, &mut r);
        let want = infer_rows(&x, p);
        let mut acc = vec![0.0; n * d];
        let mut mask_rng = rng::stream(5, &[rng::TAG_MASK]);
        for _ in 0..m {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let y = ram_forward(&mut tape, xi, p, &mut RamMode::Train(&mut mask_rng)).unwrap();
            for (a, &v) in acc.iter_mut().zip(tape.value(y).data()) {
                *a += v;
            }
        }
        let mut worst = 0.0f64;
        for (a, &w) in acc.iter().zip(&want) {
            let mean = *a / m as f64;
            worst = worst.max((mean - w).abs() / w.abs().max(1e-12));
        }
        assert!(worst < 0.02, "relative error {worst}");
    }

    #[test]
    fn residual_block_examples() {
        // zero input stays zero
        let zero = Tensor::zeros(&[3, 2]);
        let mut tape = Tape::new();
        let xi = tape.constant(zero);
        let y = ram_block(&mut tape, xi, 0.85, &mut RamMode::Infer).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        // p near 1: the residual dominates
        let mut r = rng::stream(6, &[rng::TAG_VERIFY]);
        let x = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let y = ram_block(&mut tape, xi, 0.999999, &mut RamMode::Infer).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }

        // single patch: 2 + 0.15 * 2 = 2.3
        let x1 = Tensor::from_rows(&[vec![2.0, 2.0]]);
        let mut tape = Tape::new();
        let xi = tape.constant(x1);
        let y = ram_block(&mut tape, xi, 0.85, &mut RamMode::Infer).unwrap();
        assert_eq!(tape.value(y).data(), &[2.3, 2.3]);
    }

    #[test]
    fn inference_block_is_linear() {
        let mut r = rng::stream(7, &[rng::TAG_VERIFY]);
        let x = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut r);
        let a = 2.75;
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let y = ram_block(&mut tape, xi, 0.85, &mut RamMode::Infer).unwrap();
            tape.value(y).data().to_vec()
        };
        let scaled = Tensor::new(
            vec![6, 4],
            x.data().iter().map(|&v| a * v).collect(),
        )
        .unwrap();
        for (lhs, rhs) in run(&scaled).iter().zip(run(&x)) {
            assert!((lhs - a * rhs).abs() < 1e-10);
        }
    }

    fn sam_oracle(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Vec<f64> {
        let (n, d) = (x.rows(), x.cols());
        let proj = |w: &Tensor| {
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    let mut s = 0.0;
                    for q in 0..d {
                        s += x.at(i, q) * w.at(q, j);
                    }
                    out[i * d + j] = s;
                }
            }
            out
        };
        let (q, k, v) = (proj(wq), proj(wk), proj(wv));
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..d {
                    s += q[i * d + l] * k[j * d + l];
                }
                scores[j] = s / (d as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for sc in scores.iter_mut() {
                *sc = (*sc - mx).exp();
                z += *sc;
            }
            for j in 0..n {
                let a = scores[j] / z;
                for l in 0..d {
                    out[i * d + l] += a * v[j * d + l];
                }
            }
            for l in 0..d {
                out[i * d + l] += x.at(i, l);
            }
        }
        out
    }

    #[test]
    fn sam_uniform_attention_when_queries_vanish() {
        let mut r = rng::stream(8, &[rng::TAG_VERIFY]);
        let x = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut r);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let zero = tape.constant(Tensor::zeros(&[3, 3]));
        let wv = tape.constant(Tensor::new(vec![3, 3], eye).unwrap());
        let w = SamIds { wq: zero, wk: zero, wv };
        let y = sam_block(&mut tape, xi, &w).unwrap();
        // column means of x
        let mut mean = [0.0; 3];
        for row in x.data().chunks(3) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v / 5.0;
            }
        }
        for (i, row) in tape.value(y).data().chunks(3).enumerate() {
            for j in 0..3 {
                assert!((row[j] - (x.at(i, j) + mean[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sam_single_row_is_residual_projection() {
        let mut r = rng::stream(9, &[rng::TAG_VERIFY]);
        let x = Tensor::uniform(&[1, 4], -1.0, 1.0, &mut r);
        let wv = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut r);
        let wq = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let q = tape.constant(wq.clone());
        let k = tape.constant(wq);
        let v = tape.constant(wv.clone());
        let w = SamIds { wq: q, wk: k, wv: v };
        let y = sam_block(&mut tape, xi, &w).unwrap();
        for j in 0..4 {
            let mut proj = 0.0;
            for l in 0..4 {
                proj += x.at(0, l) * wv.at(l, j);
            }
            assert!((tape.value(y).at(0, j) - (x.at(0, j) + proj)).abs() < 1e-12);
        }
    }

    #[test]
    fn sam_matches_loop_oracle() {
        let mut r = rng::stream(10, &[rng::TAG_VERIFY]);
        let x = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut r);
        let wq = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut r);
        let wk = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut r);
        let wv = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut r);
        let want = sam_oracle(&x, &wq, &wk, &wv);
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let q = tape.constant(wq);
        let k = tape.constant(wk);
        let v = tape.constant(wv);
        let w = SamIds { wq: q, wk: k, wv: v };
        let y = sam_block(&mut tape, xi, &w).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn ram_uses_fewer_primitives_than_attention() {
        let (ram_ops, sam_ops) = primitive_counts(64, 128);
        assert!(
            ram_ops < sam_ops,
            "ram {ram_ops} ops vs attention {sam_ops} ops"
        );
    }

    #[test]
    fn gradients_flow_through_both_paths() {
        let mut r = rng::stream(12, &[rng::TAG_VERIFY]);
        let x0 = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r);

        // inference RAM path
        let f = |x: &Tensor| -> Result<f64> {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let y = ram_block(&mut tape, xi, 0.85, &mut RamMode::Infer)?;
            let sq = tape.mul(y, y)?;
            let l = tape.mean_all(sq)?;
            Ok(tape.value(l).data()[0])
        };
        let mut tape = Tape::new();
        let xi = tape.leaf(x0.clone());
        let y = ram_block(&mut tape, xi, 0.85, &mut RamMode::Infer).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let l = tape.mean_all(sq).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(xi).unwrap().to_vec();
        assert!(grad_check(f, &g, &x0, 1e-5).unwrap() < 1e-4);

        // training path with a frozen mask: rebuild the same mask per probe
        let f_train = |x: &Tensor| -> Result<f64> {
            let mut mask_rng = rng::stream(99, &[rng::TAG_MASK]);
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let y = ram_block(&mut tape, xi, 0.85, &mut RamMode::Train(&mut mask_rng))?;
            let sq = tape.mul(y, y)?;
            let l = tape.mean_all(sq)?;
            Ok(tape.value(l).data()[0])
        };
        let mut mask_rng = rng::stream(99, &[rng::TAG_MASK]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x0.clone());
        let y = ram_block(&mut tape, xi, 0.85, &mut RamMode::Train(&mut mask_rng)).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let l = tape.mean_all(sq).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(xi).unwrap().to_vec();
        assert!(grad_check(f_train, &g, &x0, 1e-5).unwrap() < 1e-4);

        // attention path, all three projections
        let wq0 = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut r);
        let wk0 = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut r);
        let wv0 = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut r);
        let f_sam = |wq: &Tensor| -> Result<f64> {
            let mut tape = Tape::new();
            let xi = tape.constant(x0.clone());
            let q = tape.leaf(wq.clone());
            let k = tape.constant(wk0.clone());
            let v = tape.constant(wv0.clone());
            let w = SamIds { wq: q, wk: k, wv: v };
            let y = sam_block(&mut tape, xi, &w)?;
            let sq = tape.mul(y, y)?;
            let l = tape.mean_all(sq)?;
            Ok(tape.value(l).data()[0])
        };
        let mut tape = Tape::new();
        let xi = tape.constant(x0.clone());
        let q = tape.leaf(wq0.clone());
        let k = tape.constant(wk0.clone());
        let v = tape.constant(wv0.clone());
        let w = SamIds { wq: q, wk: k, wv: v };
        let y = sam_block(&mut tape, xi, &w).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let l = tape.mean_all(sq).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(q).unwrap().to_vec();
        assert!(grad_check(f_sam, &g, &wq0, 1e-5).unwrap() < 1e-4);
    }
}
