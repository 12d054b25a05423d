//! Unsupervised terms, the consistency ramp and the teacher EMA.

use std::sync::Arc;

use cfr_nn::{softmax_in_place, Graph, Tensor, Var};

use super::model::{hard_target, Seg3D};
use crate::error::{invalid, shape, Result};
use crate::seg2d::dice_ce_loss_var;
use crate::volume_io::LabelVolume;

/// `λ(t) = λ_max·exp(−5(1 − t/ramp)²)` while `t < ramp`, then `λ_max`. `t` in epochs.
pub fn lambda_at(t: f64, lambda_max: f64, ramp: f64) -> f64 {
    if ramp <= 0.0 || t >= ramp {
        return lambda_max;
    }
    let r = 1.0 - t.max(0.0) / ramp;
    lambda_max * (-5.0 * r * r).exp()
}

/// `teacher ← α·teacher + (1 − α)·student`, elementwise over every parameter.
pub fn ema_update(teacher: &mut Seg3D, student: &Seg3D, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("EMA decay {alpha} outside [0, 1]")));
    }
    if !teacher.params.same_layout(&student.params) {
        return Err(shape("teacher and student parameter layouts differ"));
    }
    for (name, p) in teacher.params.iter_mut() {
        let s = student.params.value(name)?;
        for (t, &v) in p.value.data_mut().iter_mut().zip(s.data()) {
            *t = alpha * *t + (1.0 - alpha) * v;
        }
    }
    Ok(())
}

/// Softmax over the leading class axis of `[K, ...]` logits.
pub fn class_softmax(logits: &Tensor) -> Tensor {
    let k = logits.shape()[0];
    let n = logits.numel() / k;
    let z = logits.data();
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
    Tensor::new(logits.shape(), p).expect("same shape")
}

/// Mean squared difference between `softmax(logits)` and fixed probabilities `q`,
/// averaged over all `K·N` entries.
pub fn softmax_mse_var(g: &mut Graph, logits: Var, q: Tensor) -> Result<Var> {
    let z = g.value(logits);
    if z.shape() != q.shape() {
        return Err(shape(format!("logits {:?} vs target probabilities {:?}", z.shape(), q.shape())));
    }
    let p = class_softmax(z);
    let total = p.numel() as f64;
    let value = p.data().iter().zip(q.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / total;
    let k = p.shape()[0];
    let n = p.numel() / k;
    Ok(g.custom(
        &[logits],
        Tensor::scalar(value),
        Box::new(move |c| {
            let up = c.grad.item();
            let (pd, qd) = (p.data(), q.data());
            let mut dz = vec![0.0; k * n];
            for j in 0..n {
                let dot: f64 = (0..k).map(|c| 2.0 * (pd[c * n + j] - qd[c * n + j]) / total * pd[c * n + j]).sum();
                for c in 0..k {
                    let i = c * n + j;
                    let dp = 2.0 * (pd[i] - qd[i]) / total;
                    dz[i] = up * pd[i] * (dp - dot);
                }
            }
            Ok(vec![Some(Tensor::new(c.inputs[0].shape(), dz)?)])
        }),
    ))
}

/// Pseudo-label guidance: Dice + CE of student logits against `Ŷ`.
pub fn loss_pl(g: &mut Graph, student_logits: Var, pseudo: &LabelVolume) -> Result<Var> {
    dice_ce_loss_var(g, student_logits, Arc::new(pseudo.data().to_vec()))
}

/// Self-training term: student logits against the frozen teacher's hard
/// prediction on the same (clean) input.
pub fn uns_selftrain(g: &mut Graph, teacher: &Seg3D, input: &Tensor, student_logits: Var) -> Result<Var> {
    let teacher_logits = {
        let mut tg = Graph::no_grad();
        let x = tg.constant(input.clone());
        let out = teacher.forward_graph(&mut tg, x)?;
        tg.value(out).clone()
    };
    dice_ce_loss_var(g, student_logits, hard_target(&teacher_logits))
}

/// Mean Teacher consistency: MSE between the student softmax (on its own
/// perturbed input, already recorded as `student_logits`) and the teacher
/// softmax on `input + teacher_noise`. The teacher runs outside `g`.
pub fn uns_meanteacher(
    g: &mut Graph,
    teacher: &Seg3D,
    input: &Tensor,
    teacher_noise: Option<&Tensor>,
    student_logits: Var,
) -> Result<Var> {
    let q = {
        let mut tg = Graph::no_grad();
        let x = super::model::input_node(&mut tg, input, teacher_noise);
        let out = teacher.forward_graph(&mut tg, x)?;
        class_softmax(tg.value(out))
    };
    softmax_mse_var(g, student_logits, q)
}

#[cfg(test)]
mod tests {
    use super::super::model::{build_seg3d, Seg3DConfig};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> Seg3D {
        build_seg3d(&Seg3DConfig { base_channels: 2, levels: 2, convs_per_level: 1, seed, ..Default::default() }).unwrap()
    }

    fn input(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[1, 4, 4, 4], (0..64).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn lambda_ramp_shape() {
        assert!((lambda_at(0.0, 0.1, 40.0) - 0.1 * (-5.0f64).exp()).abs() < 1e-15);
        assert_eq!(lambda_at(40.0, 0.1, 40.0), 0.1);
        assert_eq!(lambda_at(100.0, 0.1, 40.0), 0.1);
        assert_eq!(lambda_at(3.0, 0.1, 0.0), 0.1);
        let mut prev = 0.0;
        for i in 0..500 {
            let l = lambda_at(i as f64 * 0.1, 0.1, 40.0);
            assert!(l >= prev && l <= 0.1);
            prev = l;
        }
    }

    #[test]
    fn ema_edge_cases() {
        let s = tiny(1);
        let t0 = tiny(2);
        let mut t = t0.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, t0);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.params, s.params);
        assert!(ema_update(&mut t, &s, 1.5).is_err());
        let other = build_seg3d(&Seg3DConfig { base_channels: 3, levels: 2, ..Default::default() }).unwrap();
        assert!(ema_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn ema_scalar_probe() {
        let mut t = tiny(0);
        let mut s = tiny(0);
        for p in t.params.iter_mut() {
            p.1.value.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        for p in s.params.iter_mut() {
            p.1.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        ema_update(&mut t, &s, 0.99).unwrap();
        assert!(t.params.iter().all(|(_, p)| p.value.data().iter().all(|&v| v == 0.99)));
    }

    #[test]
    fn softmax_mse_matches_scalar_loop_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (k, n) = (3, 10);
        let z: Vec<f64> = (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let q = class_softmax(&Tensor::new(&[k, n], (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap());
        let scalar = |z: &[f64]| {
            let mut s = 0.0;
            for j in 0..n {
                let e: Vec<f64> = (0..k).map(|c| z[c * n + j].exp()).collect();
                let tot: f64 = e.iter().sum();
                for c in 0..k {
                    s += (e[c] / tot - q.data()[c * n + j]).powi(2);
                }
            }
            s / (k * n) as f64
        };
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[k, n], z.clone()).unwrap(), true);
        let l = softmax_mse_var(&mut g, x, q.clone()).unwrap();
        assert!((g.value(l).item() - scalar(&z)).abs() < 1e-14);
        let grad = g.backward(l).unwrap().get(x).unwrap().clone();
        for i in 0..k * n {
            let mut a = z.clone();
            a[i] += 1e-6;
            let mut b = z.clone();
            b[i] -= 1e-6;
            let fd = (scalar(&a) - scalar(&b)) / 2e-6;
            assert!((fd - grad.data()[i]).abs() / fd.abs().max(1e-9) < 1e-5);
        }
    }

    #[test]
    fn meanteacher_zero_without_noise_and_identical_weights() {
        let m = tiny(3);
        let x = input(1);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let s = m.forward_graph(&mut g, xi).unwrap();
        let l = uns_meanteacher(&mut g, &m, &x, None, s).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn selftrain_equals_manual_composition_and_spares_teacher() {
        let (student, teacher) = (tiny(3), tiny(9));
        let x = input(2);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let s = student.forward_graph(&mut g, xi).unwrap();
        let l = uns_selftrain(&mut g, &teacher, &x, s).unwrap();
        let target = teacher.predict(&crate::volume_io::Volume3D::new(
            [4, 4, 4],
            x.data().iter().map(|&v| v as f32).collect(),
        ).unwrap()).unwrap();
        let manual = crate::seg2d::dice_ce_loss(&student.logits(&crate::volume_io::Volume3D::new(
            [4, 4, 4],
            x.data().iter().map(|&v| v as f32).collect(),
        ).unwrap()).unwrap(), target.data()).unwrap();
        assert!((g.value(l).item() - manual.total()).abs() < 1e-6);
        let grads = g.param_grads(&g.backward(l).unwrap());
        assert!(!grads.is_empty());
        // Only the student's graph is recorded; the teacher is never bound.
        assert_eq!(grads.len(), student.params.len());
    }

    #[test]
    fn self_consistent_confident_model_has_small_selftrain_loss() {
        let mut m = tiny(3);
        // A head that is very sure of class 1 everywhere.
        m.params.value_mut("head.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        m.params.value_mut("head.b").unwrap().data_mut().copy_from_slice(&[-30.0, 30.0]);
        let x = input(4);
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let s = m.forward_graph(&mut g, xi).unwrap();
        let l = uns_selftrain(&mut g, &m, &x, s).unwrap();
        // CE → 0; class-0 Dice is (0 + ε)/(0 + ε) = 1 when absent from both.
        assert!(g.value(l).item() < 1e-6, "{}", g.value(l).item());
    }

    #[test]
    fn ema_constant_student_closed_form() {
        let s = tiny(1);
        let t0 = tiny(2);
        for alpha in [0.0, 0.5, 0.99, 1.0] {
            let mut t = t0.clone();
            for k in 1..=100 {
                ema_update(&mut t, &s, alpha).unwrap();
                let a = f64::powi(alpha, k);
                for (name, p) in t.params.iter() {
                    let (w0, ws) = (t0.params.value(name).unwrap(), s.params.value(name).unwrap());
                    for ((&got, &x0), &xs) in p.value.data().iter().zip(w0.data()).zip(ws.data()) {
                        assert!((got - (a * x0 + (1.0 - a) * xs)).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
