//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary so every criterion is reported even when an
//! earlier one fails. Exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rcil_core::config::ExperimentConfig;
use rcil_core::trainer::{run_experiment, RunOptions, RunSummary, RESULTS_CSV};
use rcil_core::verify::{self, CheckResult, Faults};

const MERGE_TOL: f64 = 1e-6;
const MERGE_CASES: usize = 100;
const FUSION_TOL: f64 = 1e-8;
const FUSION_CASES: usize = 50;
const GRAD_TOL: f64 = 1e-3;
const GRAD_INSTANCES: u64 = 20;
const DISTILL_TOL: f64 = 1e-8;
const DROP_PATH_TOL: f64 = 1e-9;
const DROP_PATH_CASES: usize = 100;
const FORGETTING_GAP: f64 = 0.10;
const FORGETTING_SEEDS: [u64; 3] = [0, 1, 2];
const FORGETTING_BUDGET_SECS: f64 = 20.0 * 60.0;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: usize, passed: bool, text: String) {
        if !passed {
            self.failed += 1;
        }
        println!("{} criterion {id:>2}: {text}", if passed { "PASS" } else { "FAIL" });
    }

    fn check(&mut self, id: usize, r: rcil_core::Result<CheckResult>) {
        match r {
            Ok(c) => self.line(
                id,
                c.passed,
                format!("{} over {} cases, worst {:.3e} (tolerance {:.0e}); {}", c.name, c.cases, c.worst, c.tolerance, c.detail),
            ),
            Err(e) => self.line(id, false, format!("error: {e}")),
        }
    }
}

fn config(seed: u64, overrides: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    o.push(format!("seed={seed}"));
    o.push("output.checkpoints=false".into());
    ExperimentConfig::from_toml_str("", &o).expect("acceptance config is valid")
}

fn run(cfg: &ExperimentConfig, dir: &Path) -> RunSummary {
    run_experiment(cfg, dir, &RunOptions::default()).expect("acceptance run completes")
}

fn old(s: &RunSummary) -> f64 {
    s.final_report().and_then(|r| r.miou_old).unwrap_or(0.0)
}

fn all(s: &RunSummary) -> f64 {
    s.final_report().and_then(|r| r.miou_all).unwrap_or(0.0)
}

fn main() {
    let mut rep = Report { failed: 0 };
    let dir = tempfile::tempdir().expect("temp dir");

    rep.check(1, verify::merge_equivalence(MERGE_CASES, MERGE_TOL, Faults::default()));
    rep.check(2, verify::fusion_oracle(FUSION_CASES, FUSION_TOL));
    rep.check(3, verify::gradient_suite(GRAD_INSTANCES, GRAD_TOL));
    rep.check(4, verify::distill_oracles(5, DISTILL_TOL));
    rep.check(5, verify::drop_path_expectation(DROP_PATH_CASES, DROP_PATH_TOL));
    rep.check(6, verify::protocol_set_logic());

    // Forgetting-direction runs, reused by the immutability, ablation and cost criteria.
    let start = Instant::now();
    let methods = ["rc_pcd", "mib", "finetune"];
    let mut runs: BTreeMap<(u64, &str), RunSummary> = BTreeMap::new();
    for seed in FORGETTING_SEEDS {
        for m in methods {
            let name = format!("method.name=\"{m}\"");
            runs.insert((seed, m), run(&config(seed, &[&name]), dir.path()));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();

    let mut immutable = true;
    let mut checked = 0;
    for s in runs.values() {
        for st in &s.steps {
            if let Some((a, b)) = &st.teacher_digest {
                immutable &= a == b;
                checked += 1;
            }
            immutable &= st.frozen_digest.0 == st.frozen_digest.1;
        }
    }
    rep.line(7, immutable && checked > 0, format!("teacher and frozen-branch hashes unchanged across {checked} training steps"));

    let mut ordered = 0;
    let mut detail = Vec::new();
    for seed in FORGETTING_SEEDS {
        let (r, m, f) = (old(&runs[&(seed, "rc_pcd")]), old(&runs[&(seed, "mib")]), old(&runs[&(seed, "finetune")]));
        if r > m && m > f && r - f >= FORGETTING_GAP {
            ordered += 1;
        }
        detail.push(format!("seed {seed}: rc_pcd {r:.3} mib {m:.3} finetune {f:.3}"));
    }
    rep.line(
        8,
        ordered == FORGETTING_SEEDS.len() && elapsed < FORGETTING_BUDGET_SECS,
        format!(
            "final old-class mIoU ordering holds for {ordered}/{} seeds (gap >= {FORGETTING_GAP}), {:.0}s of {:.0}s budget; {}",
            FORGETTING_SEEDS.len(),
            elapsed,
            FORGETTING_BUDGET_SECS,
            detail.join("; ")
        ),
    );

    let avg = old(&runs[&(0, "rc_pcd")]);
    let strip = old(&run(&config(0, &["method.name=\"rc_pcd\"", "distill.variant=\"strip\""]), dir.path()));
    let parallel = all(&run(
        &config(0, &["method.name=\"rc_only\"", "method.merge=false", "method.freeze=false", "method.drop_path=false"]),
        dir.path(),
    ));
    let merged = all(&run(&config(0, &["method.name=\"rc_only\"", "method.drop_path=false"]), dir.path()));
    rep.line(
        9,
        avg >= strip && merged >= parallel,
        format!(
            "old mIoU avg-cube {avg:.3} vs strip {strip:.3}; all mIoU merge+frozen {merged:.3} vs parallel {parallel:.3}"
        ),
    );

    let det = config(0, &["method.name=\"rc_pcd\"", "optim.epochs=2"]);
    let a = run(&det, &dir.path().join("det_a"));
    let b = run(&det, &dir.path().join("det_b"));
    let read = |s: &RunSummary| std::fs::read(s.run_dir.join(RESULTS_CSV)).expect("results written");
    let same = read(&a) == read(&b);
    rep.line(10, same, format!("two runs of one config and seed give {} results.csv", if same { "byte-identical" } else { "different" }));

    let s = &runs[&(0, "rc_pcd")];
    let first = &s.steps[0];
    let last = s.steps.last().expect("steps ran");
    let equal = s.steps.iter().all(|st| st.backbone_ops == first.backbone_ops);
    rep.line(
        11,
        equal,
        format!(
            "merged backbone MACs step 1 {} vs step {} {} ({} convolutions each); head MACs {} -> {}",
            first.backbone_ops.multiply_accumulates,
            s.steps.len(),
            last.backbone_ops.multiply_accumulates,
            last.backbone_ops.convolutions,
            first.head_ops.multiply_accumulates,
            last.head_ops.multiply_accumulates
        ),
    );

    println!("{}/11 criteria passed", 11 - rep.failed);
    if rep.failed > 0 {
        std::process::exit(1);
    }
}
