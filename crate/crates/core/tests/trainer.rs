mod common;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcil_core::config::ExperimentConfig;
use rcil_core::labels::LabelMap;
use rcil_core::numerics::Shape4;
use rcil_core::protocol_data::StepDataset;
use rcil_core::rc_block::{ParamKind, TransitionOps};
use rcil_core::seg_model::{make_step_model, SegNetwork};
use rcil_core::trainer::{
    run_experiment, step_settings, train_step, Checkpoint, Control, MethodName, MethodSpec,
    RunOptions, StepContext, TrainState, RESULTS_CSV,
};
use rcil_core::cl_losses::ClassPartition;
use rcil_core::Error;

const TINY: &str = r#"
seed = 3
[protocol]
schedule = "2-1"
[data]
n_classes = 4
image_size = [16, 16]
train_scenes = 40
val_scenes = 8
[model]
stages = [{ n_blocks = 1, channels = 4, downsample = true }, { n_blocks = 1, channels = 8, downsample = true }]
decoder_channels = 8
[distill]
spatial_kernels = [2, 4]
[optim]
epochs = 2
lr_next = 0.01
[output]
holdout_eval = false
"#;

fn tiny(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml_str(TINY, &o).unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn registry_flags() {
    let rc_pcd = MethodSpec::get(MethodName::RcPcd);
    assert!(rc_pcd.rc && rc_pcd.feature_kd);
    assert!(!MethodSpec::get(MethodName::Finetune).rc);
    assert!(!MethodSpec::get(MethodName::Mib).feature_kd);
    for m in MethodName::ALL {
        assert_eq!(MethodName::parse(m.as_str()).unwrap(), m);
    }
    assert!(MethodName::parse("ours").is_err());
}

#[test]
fn method_terms_compose() {
    let dir = tempfile::tempdir().unwrap();
    let mut terms = std::collections::BTreeMap::new();
    for m in ["finetune", "lwf_logit_kd", "mib", "rc_only", "pcd_only", "rc_pcd"] {
        let cfg = tiny(&[&format!("method.name=\"{m}\""), "optim.epochs=1", "protocol.schedule=\"3-1\"", "output.checkpoints=false"]);
        let s = run_experiment(&cfg, dir.path(), &RunOptions::default()).unwrap();
        assert_eq!(s.steps[0].history.term_names(), vec![if m == "finetune" || m == "lwf_logit_kd" { "ce" } else { "unce" }]);
        let t: Vec<String> = s.steps[1].history.term_names();
        terms.insert(m, (t, s.network.uses_rc()));
    }
    let (a, rc_a) = &terms["rc_only"];
    let (b, rc_b) = &terms["pcd_only"];
    let (c, rc_c) = &terms["rc_pcd"];
    let mut union: Vec<String> = a.iter().chain(b).cloned().collect();
    union.sort();
    union.dedup();
    assert_eq!(&union, c);
    assert_eq!(*rc_c, rc_a | rc_b);
    assert_eq!(c, &vec!["feature_avg_cube".to_string(), "unce".into(), "unkd".into()]);
    assert_eq!(terms["finetune"].0, vec!["ce".to_string()]);
    assert_eq!(terms["lwf_logit_kd"].0, vec!["ce".to_string(), "logit_kd".into()]);
    assert_eq!(terms["mib"].0, vec!["unce".to_string(), "unkd".into()]);
}

#[test]
fn teacher_and_frozen_branches_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["output.checkpoints=false"]);
    let s = run_experiment(&cfg, dir.path(), &RunOptions::default()).unwrap();
    for st in &s.steps[1..] {
        let (a, b) = st.teacher_digest.as_ref().unwrap();
        assert_eq!(a, b);
        assert_eq!(st.frozen_digest.0, st.frozen_digest.1);
    }
    assert!(s.steps[0].teacher_digest.is_none());
    // every iteration recorded with finite values
    for st in &s.steps {
        assert!(!st.history.iterations.is_empty());
        assert!(st.history.iterations.iter().all(|r| r.total.is_finite()));
        assert_eq!(st.history.epochs.len(), 2);
    }
}

#[test]
fn deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&tiny(&[]), &dir.path().join("a"), &RunOptions::default()).unwrap();
    let b = run_experiment(&tiny(&[]), &dir.path().join("b"), &RunOptions::default()).unwrap();
    assert_eq!(read(&a.run_dir, RESULTS_CSV), read(&b.run_dir, RESULTS_CSV));
    assert_eq!(read(&a.run_dir, "history.csv"), read(&b.run_dir, "history.csv"));
    let c = run_experiment(&tiny(&["seed=4"]), &dir.path().join("a"), &RunOptions::default()).unwrap();
    assert_ne!(a.run_dir, c.run_dir);
    assert_ne!(read(&a.run_dir, RESULTS_CSV), read(&c.run_dir, RESULTS_CSV));
    let text = String::from_utf8(read(&a.run_dir, RESULTS_CSV)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "format_version,run_id,method,seed,step,group,miou,n_classes");
    assert_eq!(lines.count(), 3 * 3);
    for f in ["config.resolved", "curves.csv", "epochs.csv", "iou_step0.csv", "checkpoints/step2.ckpt"] {
        assert!(a.run_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn resume_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let full = run_experiment(&tiny(&[]), &dir.path().join("full"), &RunOptions::default()).unwrap();
    for stop in [(1, 1), (0, 2), (2, 1)] {
        let part_dir = dir.path().join(format!("part{}{}", stop.0, stop.1));
        let part = run_experiment(&tiny(&[]), &part_dir, &RunOptions { stop_after: Some(stop), ..Default::default() }).unwrap();
        assert!(!part.completed);
        let ck = part.run_dir.join("checkpoints/latest.ckpt");
        let rest = run_experiment(&tiny(&[]), &part_dir, &RunOptions { resume: Some(ck), ..Default::default() }).unwrap();
        assert!(rest.completed);
        for f in [RESULTS_CSV, "curves.csv", "history.csv", "epochs.csv"] {
            assert_eq!(read(&full.run_dir, f), read(&rest.run_dir, f), "{f} after stop at {stop:?}");
        }
        assert_eq!(full.network, rest.network);
    }
}

#[test]
fn checkpoint_round_trip_and_hash_guard() {
    let cfg = tiny(&[]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = SegNetwork::new(&cfg.model, 3, true, &mut rng).unwrap();
    let sm = make_step_model(&net, 2, TransitionOps::default()).unwrap();
    let ck = Checkpoint {
        config_hash: cfg.hash(),
        step: 1,
        epoch: 1,
        step_complete: false,
        rng: rng.clone(),
        optimizer: None,
        student: sm.student.clone(),
        teacher: Some(sm.teacher.clone()),
        logs: vec![("results.csv".into(), "a,b\n".into())],
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back.student, sm.student);
    assert_eq!(back.teacher.as_ref(), Some(&sm.teacher));
    assert_eq!(back.rng, rng);
    assert_eq!(back.logs, ck.logs);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    ck.save(&p).unwrap();
    assert!(matches!(Checkpoint::load(&p, "different", false), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::load(&p, "different", true).is_ok());
    let mut bytes = ck.to_bytes();
    bytes.truncate(bytes.len() - 3);
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

fn tiny_step_data(n: usize, classes: u8, nan: bool) -> StepDataset {
    let mut r = common::rng(9);
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for i in 0..n {
        let mut img = common::rand_tensor(&mut r, Shape4::new(1, 3, 16, 16));
        if nan && i == 0 {
            img.set(0, 0, 0, 0, f64::NAN);
        }
        images.push(img);
        let data = (0..256).map(|p| ((p / 64) as u8) % classes).collect();
        masks.push(LabelMap::from_vec(1, 16, 16, data).unwrap());
    }
    StepDataset { images, masks, provenance: (0..n).collect() }
}

#[test]
fn zero_learning_rate_keeps_network() {
    // With batch statistics the running estimates still move at lr 0.
    for (freeze, unchanged) in [(true, true), (false, false)] {
        let flag = format!("optim.freeze_norm_stats={freeze}");
        let cfg = tiny(&["method.name=\"finetune\"", "optim.lr_next=0.0", &flag]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = SegNetwork::new(&cfg.model, 3, false, &mut rng).unwrap();
        let sm = make_step_model(&net, 1, TransitionOps::default()).unwrap();
        let mut student = sm.student.clone();
        let data = tiny_step_data(8, 4, false);
        let part = ClassPartition::contiguous(2, 1);
        let ctx = StepContext { teacher: Some(&sm.teacher), data: &data, holdout: None, ce_part: &part, kd_part: &part };
        let s = step_settings(&cfg, 1);
        let mut st = TrainState::new(1, 0, ChaCha8Rng::seed_from_u64(0), &s, data.len()).unwrap();
        let kinds = [ParamKind::Trainable, ParamKind::Frozen, ParamKind::Statistic];
        let before = student.digest(&kinds);
        train_step(&mut student, &ctx, &s, &mut st, false, &mut |_, _, _| Ok(Control::Continue)).unwrap();
        assert_eq!(before == student.digest(&kinds), unchanged, "freeze_norm_stats={freeze}");
        if unchanged {
            assert_eq!(student.forward(&data.images[0]).unwrap(), sm.student.forward(&data.images[0]).unwrap());
        }
    }
}

#[test]
fn non_finite_loss_aborts() {
    let cfg = tiny(&["method.name=\"finetune\""]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = SegNetwork::new(&cfg.model, 3, false, &mut rng).unwrap();
    let data = tiny_step_data(8, 3, true);
    let part = ClassPartition::contiguous(0, 2);
    let ctx = StepContext { teacher: None, data: &data, holdout: None, ce_part: &part, kd_part: &part };
    let s = step_settings(&cfg, 0);
    let mut st = TrainState::new(0, 0, ChaCha8Rng::seed_from_u64(0), &s, data.len()).unwrap();
    let e = train_step(&mut net, &ctx, &s, &mut st, false, &mut |_, _, _| Ok(Control::Continue));
    match e {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("step 0") && msg.contains("scenes")),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn joint_and_domain_runs() {
    let dir = tempfile::tempdir().unwrap();
    let j = run_experiment(&tiny(&["protocol.joint=true", "output.checkpoints=false"]), dir.path(), &RunOptions::default()).unwrap();
    assert_eq!(j.steps.len(), 1);
    assert_eq!(j.network.n_outputs(), 5);
    let d = run_experiment(
        &tiny(&["protocol.mode=\"domain_incremental\"", "protocol.n_domains=3", "protocol.schedule=\"1-1\"", "output.checkpoints=false"]),
        dir.path(),
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(d.steps.len(), 3);
    assert_eq!(d.network.n_outputs(), 5);
    assert!(d.steps[1].history.term_names().contains(&"unkd".to_string()));
}

#[test]
fn diverging_run_leaves_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&["method.name=\"finetune\"", "optim.lr_first=1e300", "optim.momentum=0.0"]);
    let e = run_experiment(&cfg, dir.path(), &RunOptions::default());
    assert!(matches!(e, Err(Error::NonFinite(_))), "{e:?}");
    let run_dir = dir.path().join(cfg.run_id());
    let dump = std::fs::read_to_string(run_dir.join("nan_dump.txt")).unwrap();
    assert!(dump.contains("iteration"));
    assert!(run_dir.join("history.csv").exists());
}
