//! Tables and SVG plots rendered from the CSV files of a run or a sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plotters::prelude::*;
use rcil_core::trainer::RESULTS_FORMAT_VERSION;
use serde::Deserialize;

#[derive(Clone, Debug, Deserialize)]
pub struct CurveRecord {
    pub format_version: u32,
    pub step: usize,
    pub miou_old: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
    pub n_outputs: usize,
    pub backbone_macs: u64,
    pub head_macs: u64,
}

#[derive(Clone, Debug, Deserialize)]
pub struct HistoryRecord {
    pub term: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, Deserialize)]
pub struct AblationRecord {
    pub format_version: u32,
    pub axis: String,
    pub row: String,
    pub run_id: String,
    pub seed: u64,
    pub miou_old: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        out.push(row.with_context(|| format!("{}: row {}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x))
}

/// Per-step markdown table of a run.
pub fn curves_table(curves: &[CurveRecord]) -> String {
    let mut s = String::from("| step | classes | old | new | all | backbone MACs | head MACs |\n|---|---|---|---|---|---|---|\n");
    for c in curves {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            c.step + 1,
            c.n_outputs,
            pct(c.miou_old),
            pct(c.miou_new),
            pct(c.miou_all),
            c.backbone_macs,
            c.head_macs
        );
    }
    s
}

fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let pts = || series.iter().flat_map(|(_, v)| v.iter());
    if pts().next().is_none() {
        bail!("nothing to plot for {}", path.display());
    }
    let (x0, x1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let pad = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, b + 0.5) };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0.min(0.0), y1);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(x0..x1, y0..y1 * 1.05)?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
        let colors = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];
        for (i, (name, pts)) in series.iter().enumerate() {
            let c = colors[i % colors.len()];
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), c.stroke_width(2)))?
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], c));
            chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, c.filled())))?;
        }
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| anyhow::anyhow!("plotting {}: {e}", path.display()))
}

/// Writes `plots/miou_per_step.svg` and `plots/loss.svg` under a run directory.
pub fn run_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let curves: Vec<CurveRecord> = read_csv(&run_dir.join("curves.csv"))?;
    let plots = run_dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    let mut written = Vec::new();
    let group = |f: fn(&CurveRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        curves.iter().filter_map(|c| f(c).map(|v| ((c.step + 1) as f64, 100.0 * v))).collect()
    };
    let p = plots.join("miou_per_step.svg");
    line_plot(
        &p,
        "mIoU at each step",
        "step",
        "mIoU (%)",
        &[("old", group(|c| c.miou_old)), ("new", group(|c| c.miou_new)), ("all", group(|c| c.miou_all))],
    )?;
    written.push(p);

    let hist_path = run_dir.join("history.csv");
    if hist_path.exists() {
        let hist: Vec<HistoryRecord> = read_csv(&hist_path)?;
        let total: Vec<(f64, f64)> = hist
            .iter()
            .filter(|h| h.term == "total")
            .enumerate()
            .map(|(i, h)| (i as f64, h.value))
            .collect();
        if !total.is_empty() {
            let p = plots.join("loss.svg");
            line_plot(&p, "training loss", "iteration", "loss", &[("total", total)])?;
            written.push(p);
        }
    }
    Ok(written)
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    } else {
        0.0
    };
    Some((m, var.sqrt()))
}

fn mean_std_cell(rows: &[AblationRecord], f: fn(&AblationRecord) -> Option<f64>) -> String {
    let v: Vec<f64> = rows.iter().filter_map(f).collect();
    mean_std(&v).map_or_else(|| "-".into(), |(m, s)| format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s))
}

/// Markdown table for a sweep; hyper-parameter grids become a lambda by gamma matrix.
pub fn ablation_table(rows: &[AblationRecord]) -> String {
    let axis = rows.first().map_or("", |r| r.axis.as_str());
    if axis == "hparams" {
        return hparam_matrix(rows);
    }
    let mut s = String::from("| setting | old | new | all |\n|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(s, "| {} | {} | {} | {} |", r.row, pct(r.miou_old), pct(r.miou_new), pct(r.miou_all));
    }
    if axis == "class_order" {
        let _ = writeln!(
            s,
            "| mean ± std | {} | {} | {} |",
            mean_std_cell(rows, |r| r.miou_old),
            mean_std_cell(rows, |r| r.miou_new),
            mean_std_cell(rows, |r| r.miou_all)
        );
    }
    s
}

fn parse_hparam_label(label: &str) -> Option<(String, String)> {
    let (l, g) = label.split_once(',')?;
    Some((l.strip_prefix("lambda=")?.to_string(), g.strip_prefix("gamma=")?.to_string()))
}

fn hparam_matrix(rows: &[AblationRecord]) -> String {
    let mut lambdas: Vec<String> = Vec::new();
    let mut gammas: Vec<String> = Vec::new();
    for r in rows {
        if let Some((l, g)) = parse_hparam_label(&r.row) {
            if !lambdas.contains(&l) {
                lambdas.push(l);
            }
            if !gammas.contains(&g) {
                gammas.push(g);
            }
        }
    }
    let mut s = format!("| lambda \\ gamma | {} |\n|---|{}\n", gammas.join(" | "), "---|".repeat(gammas.len()));
    for l in &lambdas {
        let cells: Vec<String> = gammas
            .iter()
            .map(|g| {
                rows.iter()
                    .find(|r| parse_hparam_label(&r.row) == Some((l.clone(), g.clone())))
                    .map_or_else(|| "-".into(), |r| pct(r.miou_all))
            })
            .collect();
        let _ = writeln!(s, "| {l} | {} |", cells.join(" | "));
    }
    s
}

/// Writes `ablation_<axis>.md` and `plots/ablation_<axis>.svg` next to the sweep CSV.
pub fn ablation_outputs(csv_path: &Path) -> Result<String> {
    let rows: Vec<AblationRecord> = read_csv(csv_path)?;
    let Some(first) = rows.first() else {
        bail!("{} has no rows", csv_path.display());
    };
    let dir = csv_path.parent().unwrap_or(Path::new("."));
    let table = ablation_table(&rows);
    std::fs::write(dir.join(format!("ablation_{}.md", first.axis)), &table)?;
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    let pts = |f: fn(&AblationRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter().enumerate().filter_map(|(i, r)| f(r).map(|v| (i as f64, 100.0 * v))).collect()
    };
    line_plot(
        &plots.join(format!("ablation_{}.svg", first.axis)),
        &format!("{} (rows in table order)", first.axis),
        "row",
        "final mIoU (%)",
        &[("old", pts(|r| r.miou_old)), ("new", pts(|r| r.miou_new)), ("all", pts(|r| r.miou_all))],
    )?;
    Ok(table)
}

/// Re-renders whatever a directory holds: a run, a sweep, or both.
pub fn render_dir(dir: &Path) -> Result<String> {
    let mut out = String::new();
    if dir.join("curves.csv").exists() {
        let curves: Vec<CurveRecord> = read_csv(&dir.join("curves.csv"))?;
        if let Some(c) = curves.iter().find(|c| c.format_version != RESULTS_FORMAT_VERSION) {
            bail!("curves.csv has format version {}, expected {RESULTS_FORMAT_VERSION}", c.format_version);
        }
        out.push_str(&curves_table(&curves));
        for p in run_plots(dir)? {
            let _ = writeln!(out, "wrote {}", p.display());
        }
    }
    let mut sweeps: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ablation_") && n.ends_with(".csv"))
        })
        .collect();
    sweeps.sort();
    for p in sweeps {
        out.push_str(&ablation_outputs(&p)?);
    }
    if out.is_empty() {
        bail!("{} holds neither curves.csv nor ablation_*.csv", dir.display());
    }
    Ok(out)
}
