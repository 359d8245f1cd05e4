mod common;

use common::{rand_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use rcil_core::cl_losses::{
    absorbed_probabilities, adaptive_factor, cross_entropy, logit_kd_loss, total_loss, unce_loss,
    unkd_loss, ClassPartition, LossTerms, LossWeights,
};
use rcil_core::labels::{LabelMap, IGNORE_LABEL};
use rcil_core::numerics::gradcheck::check_gradients;
use rcil_core::numerics::{Graph, Shape4, Tensor4};
use rcil_core::Error;

fn unce_value(x: &Tensor4, l: &LabelMap, p: &ClassPartition) -> rcil_core::Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let o = unce_loss(&mut g, v, l, p)?;
    Ok(g.value(o).item())
}

fn unkd_value(x: &Tensor4, t: &Tensor4, p: &ClassPartition, l: Option<&LabelMap>) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let o = unkd_loss(&mut g, v, t, p, l).unwrap();
    g.value(o).item()
}

fn pixel_softmax(x: &Tensor4, n: usize, y: usize, xx: usize) -> Vec<f64> {
    let c = x.shape().c;
    let m = (0..c).map(|k| x.at(n, k, y, xx)).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..c).map(|k| (x.at(n, k, y, xx) - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Per-pixel reference with explicit probability sums.
fn oracle_unce(x: &Tensor4, l: &LabelMap, p: &ClassPartition) -> f64 {
    let s = x.shape();
    let (mut acc, mut count) = (0.0, 0);
    for n in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                let lab = l.at(n, y, xx);
                if lab == IGNORE_LABEL {
                    continue;
                }
                let sm = pixel_softmax(x, n, y, xx);
                let prob = if lab == 0 {
                    sm[0] + p.old().iter().map(|&k| sm[k]).sum::<f64>()
                } else {
                    sm[lab as usize]
                };
                acc -= prob.ln();
                count += 1;
            }
        }
    }
    acc / count as f64
}

fn oracle_unkd(x: &Tensor4, t: &Tensor4, p: &ClassPartition) -> f64 {
    let s = x.shape();
    let mut acc = 0.0;
    for n in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                let sm = pixel_softmax(x, n, y, xx);
                let tm = pixel_softmax(t, n, y, xx);
                let q0 = sm[0] + p.new_classes().iter().map(|&k| sm[k]).sum::<f64>();
                acc -= tm[0] * q0.ln();
                for (i, &c) in p.old().iter().enumerate() {
                    acc -= tm[i + 1] * sm[c].ln();
                }
            }
        }
    }
    acc / (s.n * s.h * s.w) as f64
}

fn rand_labels(r: &mut impl Rng, n: usize, h: usize, w: usize, allowed: &[u8]) -> LabelMap {
    let data = (0..n * h * w).map(|_| allowed[r.gen_range(0..allowed.len())]).collect();
    LabelMap::from_vec(n, h, w, data).unwrap()
}

#[test]
fn partition_validation() {
    assert!(ClassPartition::new([1, 2], [3]).is_ok());
    assert!(ClassPartition::new([0, 1], [2]).is_err());
    assert!(ClassPartition::new([1, 2], [2]).is_err());
    assert!(ClassPartition::new([1], [5]).is_err());
    let p = ClassPartition::contiguous(15, 1);
    assert_eq!(p.n_channels(), 17);
    assert_eq!(p.teacher_channels().len(), 16);
}

#[test]
fn background_absorbs_old_class() {
    let p = ClassPartition::new([1], [2, 3]).unwrap();
    let x = Tensor4::zeros(Shape4::new(1, 4, 1, 1));
    let l = LabelMap::filled(1, 1, 1, 0);
    let v = unce_value(&x, &l, &p).unwrap();
    assert!((v - (-(0.5f64).ln())).abs() < 1e-12);
}

#[test]
fn unkd_hand_value() {
    let p = ClassPartition::new([1], [2]).unwrap();
    let t = Tensor4::from_vec(Shape4::new(1, 2, 1, 1), vec![1.0, 1.0]).unwrap();
    let x = Tensor4::zeros(Shape4::new(1, 3, 1, 1));
    let want = -(0.5 * (2.0f64 / 3.0).ln() + 0.5 * (1.0f64 / 3.0).ln());
    assert!((unkd_value(&x, &t, &p, None) - want).abs() < 1e-12);
}

#[test]
fn step_zero_unce_is_plain_cross_entropy() {
    let mut r = rng(60);
    let p = ClassPartition::contiguous(0, 5);
    let x = rand_tensor(&mut r, Shape4::new(2, 6, 4, 4));
    let l = rand_labels(&mut r, 2, 4, 4, &[0, 1, 2, 3, 4, 5, IGNORE_LABEL]);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let ce = cross_entropy(&mut g, v, &l).unwrap();
    assert!((g.value(ce).item() - unce_value(&x, &l, &p).unwrap()).abs() < 1e-12);
}

#[test]
fn unce_on_new_class_pixels_is_plain_cross_entropy() {
    let mut r = rng(61);
    let p = ClassPartition::contiguous(3, 2);
    let x = rand_tensor(&mut r, Shape4::new(2, 6, 3, 3));
    let l = rand_labels(&mut r, 2, 3, 3, &[4, 5]);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let ce = cross_entropy(&mut g, v, &l).unwrap();
    assert!((g.value(ce).item() - unce_value(&x, &l, &p).unwrap()).abs() < 1e-12);
}

#[test]
fn unce_and_unkd_match_pixel_oracles() {
    for seed in 0..10 {
        let mut r = rng(70 + seed);
        let p = ClassPartition::contiguous(3, 2);
        let x = rand_tensor(&mut r, Shape4::new(2, 6, 3, 4)).map(|v| 3.0 * v);
        let t = rand_tensor(&mut r, Shape4::new(2, 4, 3, 4)).map(|v| 3.0 * v);
        let l = rand_labels(&mut r, 2, 3, 4, &[0, 4, 5, IGNORE_LABEL]);
        if l.valid_count() == 0 {
            continue;
        }
        assert!((unce_value(&x, &l, &p).unwrap() - oracle_unce(&x, &l, &p)).abs() < 1e-12);
        assert!((unkd_value(&x, &t, &p, None) - oracle_unkd(&x, &t, &p)).abs() < 1e-12);
    }
}

#[test]
fn unce_decreases_as_target_logit_grows() {
    let p = ClassPartition::contiguous(1, 2);
    let l = LabelMap::filled(1, 1, 1, 3);
    let mut prev = f64::INFINITY;
    for z in [-2.0, 0.0, 1.0, 4.0, 10.0] {
        let x = Tensor4::from_vec(Shape4::new(1, 4, 1, 1), vec![0.3, -0.2, 0.1, z]).unwrap();
        let v = unce_value(&x, &l, &p).unwrap();
        assert!(v < prev);
        prev = v;
    }
}

#[test]
fn old_labels_rejected() {
    let p = ClassPartition::contiguous(2, 1);
    let x = Tensor4::zeros(Shape4::new(1, 4, 1, 1));
    let e = unce_value(&x, &LabelMap::filled(1, 1, 1, 1), &p);
    assert!(matches!(e, Err(Error::Label(_))));
    let e = unce_value(&x, &LabelMap::filled(1, 1, 1, 7), &p);
    assert!(matches!(e, Err(Error::Label(_))));
}

#[test]
fn channel_mismatch_rejected() {
    let p = ClassPartition::contiguous(2, 1);
    let mut g = Graph::new();
    let x = g.constant(Tensor4::zeros(Shape4::new(1, 4, 2, 2)));
    let t = Tensor4::zeros(Shape4::new(1, 4, 2, 2));
    assert!(matches!(unkd_loss(&mut g, x, &t, &p, None), Err(Error::ShapeMismatch { .. })));
    let y = g.constant(Tensor4::zeros(Shape4::new(1, 5, 2, 2)));
    let t = Tensor4::zeros(Shape4::new(1, 3, 2, 2));
    assert!(matches!(unkd_loss(&mut g, y, &t, &p, None), Err(Error::ShapeMismatch { .. })));
    let l = LabelMap::filled(1, 3, 2, 0);
    assert!(matches!(unce_loss(&mut g, x, &l, &p), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn self_distillation_gives_teacher_entropy() {
    let mut r = rng(62);
    let p = ClassPartition::new(1..=4, []).unwrap();
    let t = rand_tensor(&mut r, Shape4::new(2, 5, 3, 3));
    let s = t.shape();
    let mut ent = 0.0;
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                ent -= pixel_softmax(&t, n, y, x).iter().map(|q| q * q.ln()).sum::<f64>();
            }
        }
    }
    ent /= (s.n * s.h * s.w) as f64;
    assert!((unkd_value(&t, &t, &p, None) - ent).abs() < 1e-12);
}

#[test]
fn perfect_match_drives_unkd_to_zero() {
    let p = ClassPartition::contiguous(2, 1);
    let t = Tensor4::from_vec(Shape4::new(1, 3, 1, 1), vec![-1e3, 1e3, -1e3]).unwrap();
    let x = Tensor4::from_vec(Shape4::new(1, 4, 1, 1), vec![-1e3, 1e3, -1e3, -1e3]).unwrap();
    assert!(unkd_value(&x, &t, &p, None).abs() < 1e-12);
}

#[test]
fn ignored_pixels_are_excluded() {
    let mut r = rng(63);
    let p = ClassPartition::contiguous(2, 2);
    let x = rand_tensor(&mut r, Shape4::new(1, 5, 1, 4));
    let t = rand_tensor(&mut r, Shape4::new(1, 3, 1, 4));
    let l = LabelMap::from_vec(1, 1, 4, vec![0, 3, IGNORE_LABEL, IGNORE_LABEL]).unwrap();
    let crop = |a: &Tensor4| {
        let c = a.shape().c;
        let mut v = Vec::new();
        for k in 0..c {
            v.extend_from_slice(&[a.at(0, k, 0, 0), a.at(0, k, 0, 1)]);
        }
        Tensor4::from_vec(Shape4::new(1, c, 1, 2), v).unwrap()
    };
    let l2 = LabelMap::from_vec(1, 1, 2, vec![0, 3]).unwrap();
    let a = unce_value(&x, &l, &p).unwrap();
    let b = unce_value(&crop(&x), &l2, &p).unwrap();
    assert!((a - b).abs() < 1e-12);
    let a = unkd_value(&x, &t, &p, Some(&l));
    let b = unkd_value(&crop(&x), &crop(&t), &p, None);
    assert!((a - b).abs() < 1e-12);
    let all_ignored = LabelMap::filled(1, 1, 4, IGNORE_LABEL);
    assert_eq!(unce_value(&x, &all_ignored, &p).unwrap(), 0.0);
}

#[test]
fn adaptive_factor_counting() {
    let p = ClassPartition::contiguous(15, 1);
    assert_eq!(adaptive_factor(&p, false).unwrap(), 4.0);
    assert!((adaptive_factor(&p, true).unwrap() - (17.0f64 / 2.0).sqrt()).abs() < 1e-15);
    assert_eq!(adaptive_factor(&ClassPartition::contiguous(0, 20), false).unwrap(), 1.0);
    assert!(adaptive_factor(&ClassPartition::contiguous(3, 0), false).is_err());
    let w = LossWeights::default();
    assert_eq!((w.lambda, w.gamma, w.count_background), (100.0, 0.01, false));
}

#[test]
fn total_loss_assembly() {
    let w = LossWeights::default();
    let mut g = Graph::new();
    let ce = g.param(Tensor4::scalar(0.7));
    let kd = g.param(Tensor4::scalar(0.2));
    let fk = g.param(Tensor4::scalar(3.0));
    let p0 = ClassPartition::contiguous(0, 15);
    let t0 = total_loss(&mut g, LossTerms { ce, logit_kd: None, feature_kd: None }, &p0, &w).unwrap();
    assert_eq!(g.value(t0).item(), 0.7);
    let p1 = ClassPartition::contiguous(15, 1);
    let t1 = total_loss(&mut g, LossTerms { ce, logit_kd: Some(kd), feature_kd: Some(fk) }, &p1, &w).unwrap();
    assert!((g.value(t1).item() - (0.7 + 100.0 * 4.0 * 0.2 + 0.01 * 3.0)).abs() < 1e-12);
    let bad = LossWeights { lambda: -1.0, ..w };
    assert!(total_loss(&mut g, LossTerms { ce, logit_kd: None, feature_kd: None }, &p0, &bad).is_err());
}

#[test]
fn logit_kd_matches_renormalised_old_head() {
    let mut r = rng(65);
    let p = ClassPartition::contiguous(2, 2);
    let x = rand_tensor(&mut r, Shape4::new(1, 5, 2, 2));
    let t = rand_tensor(&mut r, Shape4::new(1, 3, 2, 2));
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let o = logit_kd_loss(&mut g, v, &t, &p, None).unwrap();
    let mut want = 0.0;
    for y in 0..2 {
        for xx in 0..2 {
            let tm = pixel_softmax(&t, 0, y, xx);
            let z: f64 = (0..3).map(|k| x.at(0, k, y, xx).exp()).sum();
            for k in 0..3 {
                want -= tm[k] * (x.at(0, k, y, xx).exp() / z).ln();
            }
        }
    }
    assert!((g.value(o).item() - want / 4.0).abs() < 1e-12);
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut r = rng(800 + seed);
        let p = ClassPartition::contiguous(2, 2);
        let x = rand_tensor(&mut r, Shape4::new(2, 5, 3, 3));
        let t = rand_tensor(&mut r, Shape4::new(2, 3, 3, 3));
        let l = rand_labels(&mut r, 2, 3, 3, &[0, 3, 4, IGNORE_LABEL]);
        let e = check_gradients(std::slice::from_ref(&x), 1e-4, |g, v| unce_loss(g, v[0], &l, &p)).unwrap();
        assert!(e < 1e-3, "unce seed {seed}: {e}");
        let e = check_gradients(std::slice::from_ref(&x), 1e-4, |g, v| unkd_loss(g, v[0], &t, &p, Some(&l))).unwrap();
        assert!(e < 1e-3, "unkd seed {seed}: {e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn probabilities_sum_to_one_and_bounds_hold(seed in 0u64..100_000, n_old in 0usize..4, n_new in 1usize..4) {
        let mut r = rng(seed);
        let p = ClassPartition::contiguous(n_old, n_new);
        let x = rand_tensor(&mut r, Shape4::new(2, p.n_channels(), 3, 3)).map(|v| 5.0 * v);
        let (ph, qh) = absorbed_probabilities(&x, &p).unwrap();
        for (a, c) in [(&ph, 1 + n_new), (&qh, 1 + n_old)] {
            prop_assert_eq!(a.shape().c, c);
            for n in 0..2 {
                for i in 0..9 {
                    let s: f64 = (0..c).map(|k| a.data()[(n * c + k) * 9 + i]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
        let allowed: Vec<u8> = std::iter::once(0).chain(p.new_classes().iter().map(|&c| c as u8)).collect();
        let l = rand_labels(&mut r, 2, 3, 3, &allowed);
        let u = unce_value(&x, &l, &p).unwrap();
        prop_assert!(u >= 0.0 && u.is_finite());
        let t = rand_tensor(&mut r, Shape4::new(2, 1 + n_old, 3, 3));
        let k = unkd_value(&x, &t, &p, None);
        let self_ent = unkd_value(&t, &t, &ClassPartition::contiguous(n_old, 0), None);
        prop_assert!(k.is_finite() && k >= self_ent - 1e-12);
    }
}
