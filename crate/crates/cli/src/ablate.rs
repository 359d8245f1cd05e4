//! Sweeps over one ablation axis against a base configuration.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use rcil_core::config::ExperimentConfig;
use rcil_core::distill::PoolVariant;
use rcil_core::trainer::{run_experiment, MethodSpec, RunOptions, RESULTS_FORMAT_VERSION};

use crate::report::{ablation_outputs, AblationRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    PoolingVariant,
    RcOps,
    ClassOrder,
    KdLayers,
    Kernels,
    Hparams,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::PoolingVariant => "pooling_variant",
            Axis::RcOps => "rc_ops",
            Axis::ClassOrder => "class_order",
            Axis::KdLayers => "kd_layers",
            Axis::Kernels => "kernels",
            Axis::Hparams => "hparams",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub label: String,
    pub overrides: Vec<String>,
}

fn row(label: impl Into<String>, overrides: &[String]) -> Row {
    Row { label: label.into(), overrides: overrides.to_vec() }
}

/// Feature-distillation sweeps keep the base method when it distills features.
fn feature_kd_method(base: &ExperimentConfig) -> String {
    let m = if MethodSpec::get(base.method.name).feature_kd { base.method.name.as_str() } else { "pcd_only" };
    format!("method.name=\"{m}\"")
}

fn list<T: std::fmt::Display>(v: &[T]) -> String {
    format!("[{}]", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "))
}

fn tap_names(n_stages: usize) -> Vec<String> {
    (1..=n_stages).map(|i| format!("layer {i}")).chain(["decoder".to_string()]).collect()
}

fn mask_row(names: &[String], on: &[usize], method: &str) -> Row {
    let mask: Vec<bool> = (0..names.len()).map(|i| on.contains(&i)).collect();
    let label = if on.is_empty() {
        "none".to_string()
    } else {
        on.iter().map(|&i| names[i].as_str()).collect::<Vec<_>>().join(" + ")
    };
    row(label, &[method.to_string(), format!("distill.layer_mask={}", list(&mask))])
}

/// Rows of a sweep, in table order.
pub fn rows(axis: Axis, base: &ExperimentConfig) -> Vec<Row> {
    match axis {
        Axis::PoolingVariant => {
            let m = feature_kd_method(base);
            PoolVariant::ALL
                .iter()
                .map(|v| {
                    let name = v.name();
                    row(name, &[m.clone(), format!("distill.variant=\"{name}\"")])
                })
                .collect()
        }
        Axis::RcOps => [
            ("parallel", false, false, false),
            ("+merge", true, false, false),
            ("+frozen", true, true, false),
            ("+drop-path", true, true, true),
        ]
        .iter()
        .map(|&(label, merge, freeze, dp)| {
            row(
                label,
                &[
                    "method.name=\"rc_only\"".into(),
                    format!("method.merge={merge}"),
                    format!("method.freeze={freeze}"),
                    format!("method.drop_path={dp}"),
                ],
            )
        })
        .collect(),
        Axis::ClassOrder => ["A", "B", "C", "D", "E"]
            .iter()
            .map(|o| row(format!("order {o}"), &[format!("protocol.class_order=\"{o}\"")]))
            .collect(),
        Axis::KdLayers => {
            let names = tap_names(base.model.stages.len());
            let n = names.len();
            let m = "method.name=\"pcd_only\"";
            let mut out = vec![mask_row(&names, &[], m)];
            for i in 0..n {
                out.push(mask_row(&names, &[i], m));
            }
            // growing encoder prefixes, then growing suffixes that end at the decoder
            for k in 2..n {
                out.push(mask_row(&names, &(0..k).collect::<Vec<_>>(), m));
            }
            for k in (1..n - 1).rev() {
                out.push(mask_row(&names, &(k..n).collect::<Vec<_>>(), m));
            }
            out.push(mask_row(&names, &(0..n).collect::<Vec<_>>(), m));
            out.dedup();
            out
        }
        Axis::Kernels => {
            let m = feature_kd_method(base);
            let ks = base.distill.pool.spatial_kernels.clone();
            let mut sets: Vec<Vec<usize>> = ks.iter().map(|&k| vec![k]).collect();
            sets.extend((2..=ks.len()).map(|n| ks[..n].to_vec()));
            sets.iter()
                .map(|s| row(list(s), &[m.clone(), format!("distill.spatial_kernels={}", list(s))]))
                .collect()
        }
        Axis::Hparams => {
            let lambdas = [1.0, 10.0, 20.0, 50.0, 100.0, 150.0, 200.0];
            let gammas = [0.0001, 0.001, 0.005, 0.01, 0.05, 0.1];
            let mut out = Vec::new();
            for l in lambdas {
                for g in gammas {
                    out.push(row(
                        format!("lambda={l},gamma={g}"),
                        &[format!("loss.lambda={l:?}"), format!("loss.gamma={g:?}")],
                    ));
                }
            }
            out
        }
    }
}

pub fn row_config(base: &ExperimentConfig, r: &Row) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml_str(&base.to_toml_string(), &r.overrides)
        .with_context(|| format!("row {:?}", r.label))
}

pub struct Sweep {
    pub dir: PathBuf,
    pub csv: PathBuf,
    pub table: String,
}

/// Runs every row into `<outdir>/ablate-<axis>-<base id>/` and writes the merged table.
pub fn run_sweep(axis: Axis, base: &ExperimentConfig, outdir: &Path, progress: bool) -> Result<Sweep> {
    let dir = outdir.join(format!("ablate-{}-{}", axis.name(), &base.hash()[..12]));
    std::fs::create_dir_all(&dir)?;
    let runs = dir.join("runs");
    let mut records = Vec::new();
    let rows = rows(axis, base);
    for (i, r) in rows.iter().enumerate() {
        let cfg = row_config(base, r)?;
        if progress {
            eprintln!("[{}/{}] {} ({})", i + 1, rows.len(), r.label, cfg.run_id());
        }
        let s = run_experiment(&cfg, &runs, &RunOptions { progress, ..Default::default() })
            .with_context(|| format!("row {:?}", r.label))?;
        let rep = s.final_report();
        records.push(AblationRecord {
            format_version: RESULTS_FORMAT_VERSION,
            axis: axis.name().into(),
            row: r.label.clone(),
            run_id: s.run_id.clone(),
            seed: cfg.seed,
            miou_old: rep.and_then(|r| r.miou_old),
            miou_new: rep.and_then(|r| r.miou_new),
            miou_all: rep.and_then(|r| r.miou_all),
        });
    }
    let csv = dir.join(format!("ablation_{}.csv", axis.name()));
    let mut w = csv::Writer::from_path(&csv)?;
    for r in &records {
        w.serialize(r)?;
    }
    w.flush()?;
    drop(w);
    let table = ablation_outputs(&csv)?;
    Ok(Sweep { dir, csv, table })
}
