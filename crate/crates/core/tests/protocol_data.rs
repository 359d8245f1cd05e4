mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcil_core::labels::{LabelMap, IGNORE_LABEL};
use rcil_core::numerics::{Shape4, Tensor4};
use rcil_core::protocol_data::{
    build_domain_schedule, build_schedule, cache, class_orders, evaluate, filter_and_relabel,
    generate_pool, generate_scene, split_holdout, to_channels, Confusion, Labeling, Scene,
    SynthSceneSpec, TaskSchedule,
};
use rcil_core::seg_model::{ArchSpec, StageSpec, SegNetwork};
use rcil_core::Error;

#[test]
fn notation_step_counts() {
    let s = |n: &str, c| build_schedule(n, c, Labeling::Overlapped, None).unwrap().n_steps();
    assert_eq!(s("15-1", 20), 6);
    assert_eq!(s("100-5", 150), 11);
    assert_eq!(s("10-1", 20), 11);
    assert_eq!(s("15-5", 20), 2);
    assert_eq!(s("6-1", 10), 5);
    assert_eq!(s("4-2", 10), 4);
    for bad in ["15-2", "20-1", "0-1", "15", "a-1", "15-0"] {
        assert!(matches!(build_schedule(bad, 20, Labeling::Overlapped, None), Err(Error::Schedule(_))), "{bad}");
    }
    let sch = build_schedule("15-1", 20, Labeling::Disjoint, None).unwrap();
    assert_eq!(sch.steps[0], (1..=15).collect::<Vec<_>>());
    assert_eq!(sch.steps[5], vec![20]);
}

#[test]
fn standard_class_orders() {
    let orders = class_orders();
    assert_eq!(orders.len(), 5);
    let a = build_schedule("15-1", 20, Labeling::Overlapped, Some(&orders[0].1)).unwrap();
    assert_eq!(a.steps[1], vec![16]);
    assert_eq!(&orders[3].1[..4], &[0, 15, 3, 2]);
    for (_, o) in &orders {
        let set: BTreeSet<usize> = o.iter().copied().collect();
        assert_eq!(set, (0..=20).collect());
        assert_eq!(o.len(), 21);
    }
    let b = build_schedule("15-1", 20, Labeling::Overlapped, Some(&orders[1].1)).unwrap();
    assert_eq!(b.steps[1..].concat(), vec![17, 3, 6, 18, 10]);
    assert_eq!(b.channel_of(12), Some(1));
    assert_eq!(b.class_of_channel(16), Some(17));
    assert!(build_schedule("15-1", 20, Labeling::Overlapped, Some(&[1, 2, 3])).is_err());
}

#[test]
fn domain_schedules() {
    assert_eq!(build_domain_schedule("11-5", 21, 10).unwrap().n_steps(), 3);
    let d = build_domain_schedule("1-1", 21, 10).unwrap();
    assert_eq!(d.n_steps(), 21);
    assert_eq!(d.current_classes(3).unwrap(), (1..=10).collect::<Vec<_>>());
    assert!(d.old_classes(3).unwrap().is_empty());
    assert_eq!(d.kd_partition(3).unwrap().n_channels(), 11);
    assert!(build_domain_schedule("11-4", 21, 10).is_err());
}

#[test]
fn partitions_follow_learning_order() {
    let s = build_schedule("6-1", 10, Labeling::Overlapped, None).unwrap();
    let p = s.ce_partition(2).unwrap();
    assert_eq!(p.old(), &[1, 2, 3, 4, 5, 6, 7]);
    assert_eq!(p.new_classes(), &[8]);
    assert_eq!(s.n_outputs(4).unwrap(), 11);
    let (old, new) = s.eval_groups(4).unwrap();
    assert_eq!(old, vec![0, 1, 2, 3, 4, 5, 6]);
    assert_eq!(new, vec![7, 8, 9, 10]);
}

fn scene_with(classes: &[u8]) -> Scene {
    // one column per class, then a background column and an ignore pixel
    let w = classes.len() + 1;
    let mut data = Vec::new();
    for _ in 0..2 {
        data.extend_from_slice(classes);
        data.push(0);
    }
    data[w - 1] = IGNORE_LABEL;
    Scene {
        image: Tensor4::zeros(Shape4::new(1, 3, 2, w)),
        mask: LabelMap::from_vec(1, 2, w, data).unwrap(),
        domain_id: 0,
    }
}

/// Exhaustive reference written directly from the set definitions.
fn oracle(raw: &[Scene], sched: &TaskSchedule, t: usize) -> (Vec<usize>, Vec<Vec<u8>>) {
    let cur: BTreeSet<u8> = sched.steps[t].iter().map(|&c| c as u8).collect();
    let fut: BTreeSet<u8> = sched.steps[t + 1..].iter().flatten().map(|&c| c as u8).collect();
    let mut kept = Vec::new();
    let mut masks = Vec::new();
    for (i, s) in raw.iter().enumerate() {
        let present: BTreeSet<u8> = s.mask.data().iter().copied().filter(|&l| l != 0 && l != 255).collect();
        let inter_cur = present.intersection(&cur).count();
        let inter_fut = present.intersection(&fut).count();
        let ok = match sched.labeling {
            Labeling::Disjoint => inter_cur > 0 && inter_fut == 0,
            Labeling::Overlapped => inter_cur > 0,
        };
        if ok {
            kept.push(i);
            masks.push(
                s.mask
                    .data()
                    .iter()
                    .map(|&l| if l == 255 || cur.contains(&l) { l } else { 0 })
                    .collect(),
            );
        }
    }
    (kept, masks)
}

fn twelve_scenes() -> Vec<Scene> {
    [
        &[3, 17][..],
        &[3],
        &[16],
        &[1, 16],
        &[16, 20],
        &[17, 18],
        &[5, 19, 20],
        &[20],
        &[],
        &[2, 4, 15],
        &[15, 16, 17, 18, 19, 20],
        &[19],
    ]
    .iter()
    .map(|c| scene_with(c))
    .collect()
}

#[test]
fn set_logic_matches_oracle_on_hand_built_corpus() {
    let raw = twelve_scenes();
    let order_a = &class_orders()[0].1;
    for labeling in [Labeling::Disjoint, Labeling::Overlapped] {
        let sched = build_schedule("15-1", 20, labeling, Some(order_a)).unwrap();
        for t in 0..sched.n_steps() {
            let (kept, masks) = oracle(&raw, &sched, t);
            match filter_and_relabel(&raw, &sched, t) {
                Ok(ds) => {
                    assert_eq!(ds.provenance, kept, "{labeling:?} step {t}");
                    let got: Vec<Vec<u8>> = ds.masks.iter().map(|m| m.data().to_vec()).collect();
                    assert_eq!(got, masks);
                }
                Err(Error::EmptyDataset(_)) => assert!(kept.is_empty()),
                Err(e) => panic!("{e}"),
            }
        }
    }
    // the {3, 17} scene at step 0
    let dis = build_schedule("15-1", 20, Labeling::Disjoint, Some(order_a)).unwrap();
    let ovl = build_schedule("15-1", 20, Labeling::Overlapped, Some(order_a)).unwrap();
    assert!(!filter_and_relabel(&raw, &dis, 0).unwrap().provenance.contains(&0));
    let o = filter_and_relabel(&raw, &ovl, 0).unwrap();
    assert_eq!(o.provenance[0], 0);
    assert_eq!(o.masks[0].data(), &[3, 0, 255, 3, 0, 0]);
    // only-current scene is identical under both labelings
    let d = filter_and_relabel(&raw, &dis, 0).unwrap();
    let pos = |ds: &rcil_core::protocol_data::StepDataset| ds.provenance.iter().position(|&p| p == 1).unwrap();
    assert_eq!(d.masks[pos(&d)], o.masks[pos(&o)]);
    assert_eq!(d.masks[pos(&d)], raw[1].mask);
}

#[test]
fn empty_step_is_an_error() {
    let raw = vec![scene_with(&[1])];
    let s = build_schedule("1-1", 2, Labeling::Overlapped, None).unwrap();
    assert!(matches!(filter_and_relabel(&raw, &s, 1), Err(Error::EmptyDataset(_))));
    assert!(filter_and_relabel(&raw, &s, 2).is_err());
}

#[test]
fn domain_filtering_keeps_masks() {
    let spec = SynthSceneSpec { image_size: (16, 16), ..SynthSceneSpec::default() };
    let raw = generate_pool(&spec, 0, 12, 3).unwrap();
    let s = build_domain_schedule("1-1", 3, 10).unwrap();
    for t in 0..3 {
        let ds = filter_and_relabel(&raw, &s, t).unwrap();
        assert_eq!(ds.provenance, (0..12).filter(|i| i % 3 == t).collect::<Vec<_>>());
        for (m, &p) in ds.masks.iter().zip(&ds.provenance) {
            assert_eq!(m, &raw[p].mask);
        }
    }
}

#[test]
fn generator_is_deterministic_and_in_range() {
    let spec = SynthSceneSpec { n_classes: 4, shapes_per_image: (1, 3), image_size: (24, 24), ..SynthSceneSpec::default() };
    for i in 0..20 {
        let a = generate_scene(&spec, i).unwrap();
        let b = generate_scene(&spec, i).unwrap();
        assert_eq!(a.image.to_le_bytes(), b.image.to_le_bytes());
        assert_eq!(a.mask, b.mask);
        assert!(a.mask.classes().iter().all(|&l| l <= 4));
        assert!(a.mask.classes().len() >= 2 || a.mask.classes().iter().any(|&l| l > 0));
    }
    assert_ne!(generate_scene(&spec, 0).unwrap().mask, generate_scene(&spec, 1).unwrap().mask);
}

#[test]
fn domains_change_background_only() {
    let base = SynthSceneSpec { image_size: (32, 32), ..SynthSceneSpec::default() };
    let other = SynthSceneSpec { domain_id: 3, ..base.clone() };
    let mut mean_diff = 0.0;
    for i in 0..10 {
        let a = generate_scene(&base, i).unwrap();
        let b = generate_scene(&other, i).unwrap();
        assert_eq!(a.mask, b.mask);
        let (mut fg_same, mut bg) = (true, Vec::new());
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    let (u, v) = (a.image.at(0, c, y, x), b.image.at(0, c, y, x));
                    if a.mask.at(0, y, x) == 0 {
                        bg.push(v - u);
                    } else {
                        fg_same &= u == v;
                    }
                }
            }
        }
        assert!(fg_same);
        mean_diff += bg.iter().sum::<f64>() / bg.len() as f64;
    }
    assert!((mean_diff / 10.0).abs() > 0.1);
}

#[test]
fn relabelled_masks_stay_in_label_space() {
    let spec = SynthSceneSpec { image_size: (16, 16), ..SynthSceneSpec::default() };
    let raw = generate_pool(&spec, 0, 150, 1).unwrap();
    for labeling in [Labeling::Disjoint, Labeling::Overlapped] {
        let s = build_schedule("4-2", 10, labeling, None).unwrap();
        for t in 0..s.n_steps() {
            let ds = filter_and_relabel(&raw, &s, t).unwrap();
            let cur: BTreeSet<u8> = s.steps[t].iter().map(|&c| c as u8).collect();
            for (m, &p) in ds.masks.iter().zip(&ds.provenance) {
                assert!(m.data().iter().all(|l| *l == 0 || *l == 255 || cur.contains(l)));
                if labeling == Labeling::Disjoint {
                    let fut: BTreeSet<u8> = s.steps[t + 1..].iter().flatten().map(|&c| c as u8).collect();
                    assert!(raw[p].mask.data().iter().all(|l| !fut.contains(l)));
                }
            }
            let ch = to_channels(&ds.masks[0], &s);
            assert!(ch.data().iter().all(|&l| l == 0 || l == 255 || (l as usize) < s.n_outputs(t).unwrap()));
        }
    }
}

#[test]
fn iou_counting_oracles() {
    let mut seen = [false; 256];
    seen[..3].iter_mut().for_each(|s| *s = true);
    let gt = LabelMap::from_vec(1, 2, 2, vec![0, 0, 1, 2]).unwrap();
    let mut c = Confusion::default();
    c.add(&gt, &gt, &seen);
    let r = c.report(&[0, 1], &[2]);
    assert!(r.per_class_iou.values().all(|&v| v == 1.0));
    assert_eq!(r.miou_all, Some(1.0));

    let bg = LabelMap::filled(1, 2, 2, 0);
    let mut c = Confusion::default();
    c.add(&bg, &gt, &seen);
    let r = c.report(&[0, 1], &[2]);
    assert_eq!(r.per_class_iou[&0], 0.5);
    assert_eq!(r.per_class_iou[&1], 0.0);
    assert_eq!(r.per_class_iou[&2], 0.0);
    assert_eq!(r.miou_old, Some(0.25));
    assert_eq!(r.miou_new, Some(0.0));
    assert!((r.miou_all.unwrap() - 0.5 / 3.0).abs() < 1e-15);

    // absent classes are excluded; unseen ground truth is skipped
    let gt = LabelMap::from_vec(1, 1, 3, vec![0, 0, 7]).unwrap();
    let mut c = Confusion::default();
    c.add(&LabelMap::filled(1, 1, 3, 0), &gt, &seen);
    let r = c.report(&[0, 1], &[2]);
    assert_eq!(r.per_class_iou.len(), 1);
    assert_eq!(r.miou_old, Some(1.0));
    assert_eq!(r.miou_new, None);

    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "class_id,iou,group\n0,1.0,old\n");
}

#[test]
fn evaluate_network_smoke() {
    let arch = ArchSpec {
        stages: vec![StageSpec { n_blocks: 1, channels: 4, downsample: true }],
        decoder_channels: 4,
    };
    let spec = SynthSceneSpec { image_size: (16, 16), ..SynthSceneSpec::default() };
    let val = generate_pool(&spec, 1000, 10, 1).unwrap();
    let s = build_schedule("6-1", 10, Labeling::Overlapped, None).unwrap();
    let net = SegNetwork::new(&arch, 8, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let r = evaluate(&net, &val, &s, 1).unwrap();
    assert!(r.per_class_iou.keys().all(|&k| k <= 7));
    assert!(r.per_class_iou.values().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(r, evaluate(&net, &val, &s, 1).unwrap());
}

#[test]
fn cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSceneSpec { image_size: (12, 12), ..SynthSceneSpec::default() };
    let a = cache::cached_pool(Some(dir.path()), &spec, 0, 7, 2).unwrap();
    let b = cache::cached_pool(Some(dir.path()), &spec, 0, 7, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, generate_pool(&spec, 0, 7, 2).unwrap());
    let h = cache::pool_hash(&spec, 0, 7, 2);
    assert!(cache::load(&dir.path().join(&h[..16]), "other").is_none());
}

#[test]
fn holdout_split() {
    let (train, hold) = split_holdout(200, 0.2, 5);
    assert_eq!(hold.len(), 40);
    assert_eq!(train.len(), 160);
    let all: BTreeSet<usize> = train.iter().chain(&hold).copied().collect();
    assert_eq!(all.len(), 200);
    assert_eq!(split_holdout(200, 0.2, 5), (train, hold));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn generator_is_pure(seed in 0u64..1000, index in 0usize..1000) {
        let spec = SynthSceneSpec { seed, image_size: (12, 16), ..SynthSceneSpec::default() };
        prop_assert_eq!(generate_scene(&spec, index).unwrap(), generate_scene(&spec, index).unwrap());
    }
}
