//! Soft-Dice + cross-entropy, `½(L_Dice + L_CE)`, over channels-first logits.

use std::sync::Arc;

use cfr_nn::{softmax_in_place, Graph, Tensor, Var};

use crate::error::{invalid, shape, Result};

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    /// `1 − mean_c soft-Dice_c`, in `[0, 1]`.
    pub dice: f64,
    pub ce: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        0.5 * (self.dice + self.ce)
    }
}

fn check(logits: &Tensor, target: &[u8]) -> Result<(usize, usize)> {
    let k = *logits.shape().first().ok_or_else(|| shape("logits must have a class axis"))?;
    if k < 2 {
        return Err(shape(format!("need at least 2 classes, got {k}")));
    }
    let n = logits.numel() / k;
    if target.len() != n {
        return Err(shape(format!("{n} logit columns vs {} targets", target.len())));
    }
    if let Some(&bad) = target.iter().find(|&&t| usize::from(t) >= k) {
        return Err(invalid(format!("target class {bad} outside 0..{k}")));
    }
    Ok((k, n))
}

/// Per-position class probabilities, same `[K, N]` layout as the logits.
fn probabilities(z: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut p = vec![0.0; k * n];
    let mut col = vec![0.0; k];
    for j in 0..n {
        for c in 0..k {
            col[c] = z[c * n + j];
        }
        softmax_in_place(&mut col);
        for c in 0..k {
            p[c * n + j] = col[c];
        }
    }
    p
}

fn log_prob(z: &[f64], k: usize, n: usize, j: usize, t: usize) -> f64 {
    let m = (0..k).map(|c| z[c * n + j]).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + (0..k).map(|c| (z[c * n + j] - m).exp()).sum::<f64>().ln();
    z[t * n + j] - lse
}

struct Stats {
    p: Vec<f64>,
    inter: Vec<f64>,
    union: Vec<f64>,
    parts: LossParts,
}

fn stats(z: &[f64], target: &[u8], k: usize, n: usize) -> Stats {
    let p = probabilities(z, k, n);
    let mut inter = vec![0.0; k];
    let mut union = vec![DICE_EPS; k];
    for c in 0..k {
        for j in 0..n {
            let pc = p[c * n + j];
            union[c] += pc;
            if usize::from(target[j]) == c {
                inter[c] += pc;
                union[c] += 1.0;
            }
        }
    }
    let mean_dice = (0..k).map(|c| (2.0 * inter[c] + DICE_EPS) / union[c]).sum::<f64>() / k as f64;
    let ce = -(0..n).map(|j| log_prob(z, k, n, j, usize::from(target[j]))).sum::<f64>() / n as f64;
    Stats { p, inter, union, parts: LossParts { dice: 1.0 - mean_dice, ce } }
}

/// Loss value for `[K, ...]` logits against hard targets (one per spatial position).
pub fn dice_ce_loss(logits: &Tensor, target: &[u8]) -> Result<LossParts> {
    let (k, n) = check(logits, target)?;
    Ok(stats(logits.data(), target, k, n).parts)
}

/// Differentiable version of [`dice_ce_loss`]; returns a scalar node.
pub fn dice_ce_loss_var(g: &mut Graph, logits: Var, target: Arc<Vec<u8>>) -> Result<Var> {
    let (k, n) = check(g.value(logits), &target)?;
    let s = stats(g.value(logits).data(), &target, k, n);
    let value = Tensor::scalar(s.parts.total());
    Ok(g.custom(
        &[logits],
        value,
        Box::new(move |c| {
            let up = c.grad.item();
            let Stats { p, inter, union, .. } = &s;
            let mut dz = vec![0.0; k * n];
            let mut dp = vec![0.0; k];
            for j in 0..n {
                let t = usize::from(target[j]);
                // Dice term: d/dp of −½·(1/K)·Σ_c (2I_c + ε)/U_c.
                for c in 0..k {
                    let g_cj = if c == t { 1.0 } else { 0.0 };
                    let num = 2.0 * g_cj * union[c] - (2.0 * inter[c] + DICE_EPS);
                    dp[c] = -0.5 / k as f64 * num / (union[c] * union[c]);
                }
                let dot: f64 = (0..k).map(|c| dp[c] * p[c * n + j]).sum();
                for c in 0..k {
                    let pc = p[c * n + j];
                    let ce = 0.5 * (pc - if c == t { 1.0 } else { 0.0 }) / n as f64;
                    dz[c * n + j] = up * (pc * (dp[c] - dot) + ce);
                }
            }
            Ok(vec![Some(Tensor::new(c.inputs[0].shape(), dz)?)])
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight transcription of the formula with nested scalar loops.
    fn scalar_oracle(z: &[f64], t: &[u8], k: usize) -> f64 {
        let n = t.len();
        let mut probs = vec![vec![0.0; n]; k];
        for j in 0..n {
            let denom: f64 = (0..k).map(|c| z[c * n + j].exp()).sum();
            for c in 0..k {
                probs[c][j] = z[c * n + j].exp() / denom;
            }
        }
        let mut dice_sum = 0.0;
        for c in 0..k {
            let (mut i, mut ps, mut gs) = (0.0, 0.0, 0.0);
            for j in 0..n {
                let g = if t[j] as usize == c { 1.0 } else { 0.0 };
                i += probs[c][j] * g;
                ps += probs[c][j];
                gs += g;
            }
            dice_sum += (2.0 * i + 1e-5) / (ps + gs + 1e-5);
        }
        let ce: f64 = (0..n).map(|j| -probs[t[j] as usize][j].ln()).sum::<f64>() / n as f64;
        0.5 * ((1.0 - dice_sum / k as f64) + ce)
    }

    #[test]
    fn confident_correct_logits_give_near_zero_loss() {
        let target: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let mut z = vec![-40.0; 3 * 16];
        for (j, &t) in target.iter().enumerate() {
            z[usize::from(t) * 16 + j] = 40.0;
        }
        let parts = dice_ce_loss(&Tensor::new(&[3, 16], z).unwrap(), &target).unwrap();
        assert!(parts.total() < 1e-6, "{parts:?}");
    }

    #[test]
    fn uniform_logits_give_ln2_cross_entropy() {
        let target = [0u8, 1, 0, 1, 1, 0, 1, 0];
        let parts = dice_ce_loss(&Tensor::zeros(&[2, 8]), &target).unwrap();
        assert!((parts.ce - std::f64::consts::LN_2).abs() < 1e-12);
        // p = ½ everywhere, 4 of 8 per class: Dice_c = (4 + ε)/(8 + ε).
        let want = 1.0 - (4.0 + DICE_EPS) / (8.0 + DICE_EPS);
        assert!((parts.dice - want).abs() < 1e-12);
    }

    #[test]
    fn fixed_instance_matches_frozen_oracle_value() {
        // 1×4×4 grid, K = 2; value computed with `scalar_oracle` and frozen.
        let z: Vec<f64> = (0..32).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let t: Vec<u8> = (0..16).map(|i| u8::from(i % 5 < 2)).collect();
        let parts = dice_ce_loss(&Tensor::new(&[2, 1, 4, 4], z.clone()).unwrap(), &t).unwrap();
        assert!((parts.total() - scalar_oracle(&z, &t, 2)).abs() < 1e-12);
        assert!((parts.total() - 0.640_511_010_646_692_7).abs() < 1e-12, "{}", parts.total());
    }

    #[test]
    fn random_instances_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 2..5 {
            for _ in 0..10 {
                let n = 64;
                let z: Vec<f64> = (0..k * n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let t: Vec<u8> = (0..n).map(|_| rng.random_range(0..k) as u8).collect();
                let got = dice_ce_loss(&Tensor::new(&[k, 4, 4, 4], z.clone()).unwrap(), &t).unwrap();
                assert!((got.total() - scalar_oracle(&z, &t, k)).abs() < 1e-12);
                assert!((0.0..=1.0).contains(&got.dice) && got.ce >= 0.0);
            }
        }
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        assert!(dice_ce_loss(&Tensor::zeros(&[2, 3]), &[0, 2, 1]).is_err());
        assert!(dice_ce_loss(&Tensor::zeros(&[2, 3]), &[0, 1]).is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (k, n) = (3, 20);
        let z: Vec<f64> = (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t: Arc<Vec<u8>> = Arc::new((0..n).map(|_| rng.random_range(0..k) as u8).collect());
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[k, n], z.clone()).unwrap(), true);
        let l = dice_ce_loss_var(&mut g, x, t.clone()).unwrap();
        let scaled = g.scale(l, 3.0);
        let grads = g.backward(scaled).unwrap();
        let analytic = grads.get(x).unwrap().data().to_vec();
        let h = 1e-6;
        for i in 0..k * n {
            let eval = |delta: f64| {
                let mut zz = z.clone();
                zz[i] += delta;
                3.0 * scalar_oracle(&zz, &t, k)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(rel < 1e-5, "i={i} fd={fd} analytic={}", analytic[i]);
        }
    }
}
