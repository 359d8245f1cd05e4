mod common;

use common::{rand_tensor, rng};
use rcil_core::numerics::{softmax_over_channels, Graph, Shape4};
use rcil_core::rc_block::{ParamKind, TransitionOps};
use rcil_core::seg_model::{make_step_model, ArchSpec, SegNetwork, TrainCtx};
use rcil_core::Error;

fn small_arch() -> ArchSpec {
    let mut a = ArchSpec::default();
    for (s, c) in a.stages.iter_mut().zip([4, 6, 8]) {
        s.channels = c;
    }
    a.decoder_channels = 6;
    a
}

#[test]
fn default_network_shapes() {
    let mut r = rng(30);
    let net = SegNetwork::new(&ArchSpec::default(), 16, true, &mut r).unwrap();
    let x = rand_tensor(&mut r, Shape4::new(1, 3, 32, 32));
    let (logits, taps) = net.forward(&x).unwrap();
    assert_eq!(taps.len(), 4);
    assert_eq!(logits.shape(), Shape4::new(1, 16, 32, 32));
    assert_eq!(taps[0].shape(), Shape4::new(1, 16, 16, 16));
    assert_eq!(taps[2].shape(), Shape4::new(1, 64, 4, 4));
    assert_eq!(taps[3].shape(), Shape4::new(1, 32, 4, 4));
    let p = softmax_over_channels(&logits);
    for i in 0..32 * 32 {
        let s: f64 = (0..16).map(|c| p.at(0, c, i / 32, i % 32)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn wrong_input_channels_rejected() {
    let mut r = rng(31);
    let net = SegNetwork::new(&small_arch(), 3, false, &mut r).unwrap();
    let x = rand_tensor(&mut r, Shape4::new(1, 4, 8, 8));
    assert!(matches!(net.forward(&x), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn head_growth_preserves_old_logits() {
    let mut r = rng(32);
    let mut net = SegNetwork::new(&small_arch(), 16, true, &mut r).unwrap();
    let x = rand_tensor(&mut r, Shape4::new(2, 3, 16, 16));
    let (before, _) = net.forward(&x).unwrap();
    let mut sizes = vec![net.n_outputs()];
    for _ in 0..5 {
        net.extend_head(1).unwrap();
        sizes.push(net.n_outputs());
    }
    assert_eq!(sizes, vec![16, 17, 18, 19, 20, 21]);
    let (after, _) = net.forward(&x).unwrap();
    for n in 0..2 {
        for c in 0..16 {
            for i in 0..256 {
                assert_eq!(before.at(n, c, i / 16, i % 16), after.at(n, c, i / 16, i % 16));
            }
        }
    }
    assert!(matches!(net.extend_head(0), Err(Error::InvalidArgument(_))));

    let mut net = SegNetwork::new(&small_arch(), 16, false, &mut r).unwrap();
    net.extend_head(5).unwrap();
    assert_eq!(net.n_outputs(), 21);
}

#[test]
fn new_head_rows_start_below_background() {
    let mut r = rng(33);
    let mut net = SegNetwork::new(&small_arch(), 4, false, &mut r).unwrap();
    net.extend_head(2).unwrap();
    let x = rand_tensor(&mut r, Shape4::new(1, 3, 8, 8));
    let (l, _) = net.forward(&x).unwrap();
    for i in 0..64 {
        let bg = l.at(0, 0, i / 8, i % 8);
        assert!((l.at(0, 4, i / 8, i % 8) - (bg - 3f64.ln())).abs() < 1e-9);
    }
}

#[test]
fn step_model_teacher_is_exact_copy() {
    let mut r = rng(34);
    let prev = SegNetwork::new(&small_arch(), 5, true, &mut r).unwrap();
    let sm = make_step_model(&prev, 1, TransitionOps::default()).unwrap();
    assert_eq!(sm.teacher, prev);
    let x = rand_tensor(&mut r, Shape4::new(1, 3, 16, 16));
    assert_eq!(sm.teacher.forward(&x).unwrap().0, prev.forward(&x).unwrap().0);
    assert_eq!(sm.student.n_outputs(), 6);
    let names = sm.student.trainable_names();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| !n.contains("branch_a")));
}

#[test]
fn student_matches_teacher_when_branches_agree() {
    let mut r = rng(35);
    let mut prev = SegNetwork::new(&small_arch(), 5, true, &mut r).unwrap();
    for block in prev.blocks_mut() {
        let b = block.as_rc_mut().unwrap();
        b.branch_b = b.branch_a.clone();
    }
    let sm = make_step_model(&prev, 2, TransitionOps::default()).unwrap();
    let x = rand_tensor(&mut r, Shape4::new(1, 3, 16, 16));
    let (t, _) = sm.teacher.forward(&x).unwrap();
    let (s, _) = sm.student.forward(&x).unwrap();
    for c in 0..5 {
        for i in 0..256 {
            assert!((t.at(0, c, i / 16, i % 16) - s.at(0, c, i / 16, i % 16)).abs() < 1e-9);
        }
    }
}

#[test]
fn plain_student_old_logits_identical() {
    let mut r = rng(36);
    let prev = SegNetwork::new(&small_arch(), 5, false, &mut r).unwrap();
    let sm = make_step_model(&prev, 1, TransitionOps::default()).unwrap();
    let x = rand_tensor(&mut r, Shape4::new(1, 3, 16, 16));
    let (t, _) = sm.teacher.forward(&x).unwrap();
    let (s, _) = sm.student.forward(&x).unwrap();
    for c in 0..5 {
        for i in 0..256 {
            assert_eq!(t.at(0, c, i / 16, i % 16), s.at(0, c, i / 16, i % 16));
        }
    }
}

#[test]
fn merged_network_matches_eval_forward() {
    let mut r = rng(37);
    let net = SegNetwork::new(&small_arch(), 5, true, &mut r).unwrap();
    let x = rand_tensor(&mut r, Shape4::new(2, 3, 16, 16));
    let (want, _) = net.forward(&x).unwrap();
    let (got, _, _) = net.merged().forward_counted(&x).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-6);
}

#[test]
fn merged_cost_is_step_independent() {
    let mut r = rng(38);
    let mut net = SegNetwork::new(&small_arch(), 7, true, &mut r).unwrap();
    let x = rand_tensor(&mut r, Shape4::new(1, 3, 16, 16));
    let (_, backbone0, _) = net.merged().forward_counted(&x).unwrap();
    let params0 = net.merged().backbone_param_count();
    for _ in 0..4 {
        net = make_step_model(&net, 1, TransitionOps::default()).unwrap().student;
    }
    let (_, backbone4, head4) = net.merged().forward_counted(&x).unwrap();
    assert_eq!(backbone0, backbone4);
    assert_eq!(params0, net.merged().backbone_param_count());
    assert_eq!(head4.convolutions, 1);
    assert_eq!(backbone4.convolutions, 7);
}

#[test]
fn training_forward_binds_only_trainable_leaves() {
    let mut r = rng(39);
    let prev = SegNetwork::new(&small_arch(), 3, true, &mut r).unwrap();
    let mut student = make_step_model(&prev, 1, TransitionOps::default()).unwrap().student;
    let x = rand_tensor(&mut r, Shape4::new(2, 3, 16, 16));
    let frozen = student.digest(&[ParamKind::Frozen]);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut ctx = TrainCtx::new(&mut r, true);
    let out = student.forward_train(&mut g, xv, &mut ctx).unwrap();
    assert_eq!(out.taps.len(), 4);
    let bound: Vec<&str> = ctx.binds.iter().map(|(n, _)| n).collect();
    let mut expected = student.trainable_names();
    expected.sort();
    let mut got: Vec<String> = bound.iter().map(|s| s.to_string()).collect();
    got.sort();
    assert_eq!(got, expected);
    assert_eq!(student.digest(&[ParamKind::Frozen]), frozen);
}
