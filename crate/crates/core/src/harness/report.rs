//! Tables and plots over finished run directories, and seed/rate sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::pipeline::{load_run_config, run_pipeline, EvalMetrics, Phase, RunLayout, RunManifest};
use crate::error::{Error, IoContext, Result};
use crate::landscape::{write_heatmap, LandscapeReport};
use crate::search::read_trace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: PathBuf,
    pub method: String,
    pub accuracy: Option<f64>,
    pub flops_reduction_pct: Option<f64>,
    pub param_reduction_pct: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.2}"))
}

impl ReportTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,accuracy,flops_reduction_pct,param_reduction_pct\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.method,
                cell(r.accuracy),
                cell(r.flops_reduction_pct),
                cell(r.param_reduction_pct)
            ));
        }
        out
    }
}

/// Row of one run. Metrics count only while the manifest marks the
/// evaluation complete; anything else is left as `None`.
fn row_of(run: &Path) -> ReportRow {
    let layout = RunLayout::new(run);
    let evaluated = RunManifest::load(run).is_ok_and(|m| m.is_complete(Phase::Evaluate));
    let metrics: Option<EvalMetrics> = if evaluated {
        std::fs::read(layout.eval_metrics()).ok().and_then(|b| serde_json::from_slice(&b).ok())
    } else {
        None
    };
    let method = match &metrics {
        Some(m) => m.method.clone(),
        None => load_run_config(run).map(|c| c.method).unwrap_or_else(|_| "N/A".into()),
    };
    ReportRow {
        run: run.to_path_buf(),
        method,
        accuracy: metrics.as_ref().map(|m| m.accuracy),
        flops_reduction_pct: metrics.as_ref().map(|m| m.flops_reduction_pct),
        param_reduction_pct: metrics.as_ref().map(|m| m.param_reduction_pct),
    }
}

/// One row per run, sorted with [`sort_rows`].
pub fn collect_rows(runs: &[PathBuf]) -> ReportTable {
    let mut rows: Vec<ReportRow> = runs.iter().map(|r| row_of(r)).collect();
    sort_rows(&mut rows);
    ReportTable { rows }
}

/// Ascending FLOPs reduction, rows without a value last, stable otherwise.
pub fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| match (a.flops_reduction_pct, b.flops_reduction_pct) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

/// Write `table.csv`, `rate_accuracy.png`, `trace.png` and one
/// `heatmap_{i}.png` per run with a landscape grid into `out`.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<ReportTable> {
    std::fs::create_dir_all(out).at(out)?;
    let table = collect_rows(runs);
    let p = out.join("table.csv");
    std::fs::write(&p, table.to_csv()).at(&p)?;

    let points: Vec<(f64, f64)> =
        table.rows.iter().filter_map(|r| Some((r.flops_reduction_pct?, r.accuracy?))).collect();
    line_plot(&[points], &out.join("rate_accuracy.png"))?;

    let mut traces = Vec::new();
    for run in runs {
        if let Ok(trace) = read_trace(&RunLayout::new(run).trace()) {
            let mut pts = vec![(0.0, 0.0)];
            if let Some(base) = trace.first().map(|r| r.flops_before as f64) {
                for r in &trace {
                    pts.push((r.iteration as f64, 100.0 * (1.0 - r.flops_after as f64 / base)));
                }
            }
            traces.push(pts);
        }
    }
    line_plot(&traces, &out.join("trace.png"))?;

    for (i, run) in runs.iter().enumerate() {
        let summary: Option<LandscapeReport> =
            std::fs::read(RunLayout::new(run).landscape_summary()).ok().and_then(|b| serde_json::from_slice(&b).ok());
        if let Some(grid) = summary.and_then(|s| s.grid) {
            write_heatmap(&grid, &out.join(format!("heatmap_{i}.png")), 16)?;
        }
    }
    Ok(table)
}

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 24;
const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Axes plus one polyline with square markers per series, scaled to the
/// joint data range. Series are drawn in order.
pub fn line_plot(series: &[Vec<(f64, f64)>], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (left, bottom, right, top) = (MARGIN as i64, (H - MARGIN) as i64, (W - MARGIN) as i64, MARGIN as i64);
    draw_line(&mut img, (left, bottom), (right, bottom), axis);
    draw_line(&mut img, (left, bottom), (left, top), axis);
    let all: Vec<(f64, f64)> = series.iter().flatten().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    if !all.is_empty() {
        let span = |v: Vec<f64>| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 1.0, hi + 1.0)
            }
        };
        let (x0, x1) = span(all.iter().map(|p| p.0).collect());
        let (y0, y1) = span(all.iter().map(|p| p.1).collect());
        let to_px = |(x, y): (f64, f64)| {
            let px = left as f64 + (x - x0) / (x1 - x0) * (right - left) as f64;
            let py = bottom as f64 - (y - y0) / (y1 - y0) * (bottom - top) as f64;
            (px.round() as i64, py.round() as i64)
        };
        for (i, s) in series.iter().enumerate() {
            let c = Rgb(PALETTE[i % PALETTE.len()]);
            let pts: Vec<(i64, i64)> = s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).map(to_px).collect();
            for w in pts.windows(2) {
                draw_line(&mut img, w[0], w[1], c);
            }
            for &(x, y) in &pts {
                for d in -2..=2 {
                    draw_line(&mut img, (x - 2, y + d), (x + 2, y + d), c);
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Rates from 25% to 70% in steps of 5 points.
pub fn default_sweep_rates() -> Vec<f64> {
    (5..=14).map(|i| i as f64 * 0.05).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target_rate: f64,
    pub runs: usize,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub flops_reduction_mean: Option<f64>,
    pub flops_reduction_std: Option<f64>,
    pub param_reduction_mean: Option<f64>,
    pub param_reduction_std: Option<f64>,
}

/// Mean and sample standard deviation; the deviation needs two values.
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "target_rate,runs,accuracy_mean,accuracy_std,flops_reduction_mean,flops_reduction_std,param_reduction_mean,param_reduction_std\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.target_rate,
            r.runs,
            cell(r.accuracy_mean),
            cell(r.accuracy_std),
            cell(r.flops_reduction_mean),
            cell(r.flops_reduction_std),
            cell(r.param_reduction_mean),
            cell(r.param_reduction_std)
        ));
    }
    out
}

pub fn sweep_run_dir(root: &Path, rate: f64, seed: u64) -> PathBuf {
    root.join(format!("tau_{:03}_seed_{seed}", (rate * 100.0).round() as i64))
}

/// Full pipeline for every `(rate, seed)` pair under `root`, then
/// `root/report/` and `root/sweep.csv` with per-rate mean and std.
pub fn sweep(base: &RunConfig, rates: &[f64], seeds: &[u64], root: &Path) -> Result<Vec<SweepRow>> {
    let mut dirs = Vec::new();
    let mut by_rate: BTreeMap<usize, Vec<PathBuf>> = BTreeMap::new();
    for (ri, &rate) in rates.iter().enumerate() {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.run_dir = sweep_run_dir(root, rate, seed);
            cfg.search.target_rate = rate;
            cfg.seed = seed;
            cfg.search.seed = seed;
            cfg.finetune.seed = seed;
            cfg.splits.seed = seed;
            log::info!("sweep: rate {rate}, seed {seed}");
            run_pipeline(cfg.clone())?;
            by_rate.entry(ri).or_default().push(cfg.run_dir.clone());
            dirs.push(cfg.run_dir);
        }
    }
    report(&dirs, &root.join("report"))?;
    let mut rows = Vec::new();
    for (ri, runs) in by_rate {
        let t = collect_rows(&runs);
        let pick = |f: fn(&ReportRow) -> Option<f64>| t.rows.iter().filter_map(f).collect::<Vec<_>>();
        let (am, asd) = mean_std(&pick(|r| r.accuracy));
        let (fm, fsd) = mean_std(&pick(|r| r.flops_reduction_pct));
        let (pm, psd) = mean_std(&pick(|r| r.param_reduction_pct));
        rows.push(SweepRow {
            target_rate: rates[ri],
            runs: runs.len(),
            accuracy_mean: am,
            accuracy_std: asd,
            flops_reduction_mean: fm,
            flops_reduction_std: fsd,
            param_reduction_mean: pm,
            param_reduction_std: psd,
        });
    }
    let p = root.join("sweep.csv");
    std::fs::write(&p, sweep_csv(&rows)).at(&p)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_metrics_are_na() {
        let dir = tempfile::tempdir().unwrap();
        let t = collect_rows(&[dir.path().join("nowhere")]);
        assert_eq!(t.to_csv(), "method,accuracy,flops_reduction_pct,param_reduction_pct\nN/A,N/A,N/A,N/A\n");
    }

    #[test]
    fn rows_sort_by_flops_reduction() {
        let row = |f: Option<f64>| ReportRow { run: "r".into(), method: "m".into(), accuracy: Some(1.0), flops_reduction_pct: f, param_reduction_pct: None };
        let mut t = ReportTable { rows: vec![row(None), row(Some(50.0)), row(Some(25.0))] };
        sort_rows(&mut t.rows);
        let f: Vec<_> = t.rows.iter().map(|r| r.flops_reduction_pct).collect();
        assert_eq!(f, vec![Some(25.0), Some(50.0), None]);
    }

    #[test]
    fn stats_and_rates() {
        assert_eq!(mean_std(&[]), (None, None));
        assert_eq!(mean_std(&[2.0]), (Some(2.0), None));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (Some(2.0), Some(1.0)));
        let r = default_sweep_rates();
        assert_eq!(r.len(), 10);
        assert!((r[0] - 0.25).abs() < 1e-12 && (r[9] - 0.70).abs() < 1e-12);
    }

    #[test]
    fn plot_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![vec![(0.0, 1.0), (1.0, 3.0), (2.0, 2.0)]];
        line_plot(&s, &dir.path().join("a.png")).unwrap();
        line_plot(&s, &dir.path().join("b.png")).unwrap();
        line_plot(&[], &dir.path().join("empty.png")).unwrap();
        assert_eq!(std::fs::read(dir.path().join("a.png")).unwrap(), std::fs::read(dir.path().join("b.png")).unwrap());
    }
}
