use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use weightsym::metanet::{read_history_csv, read_metrics_csv, MetricsRow};

/// Metrics and loss history read from one run directory.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dir: PathBuf,
    pub variant: String,
    pub rows: Vec<MetricsRow>,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub split: String,
    pub runs: usize,
    pub tau_mean: f64,
    pub tau_se: f64,
    pub loss_mean: f64,
    pub loss_se: f64,
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn read_metrics(path: &Path) -> Result<Option<Vec<MetricsRow>>> {
    let file = std::fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    read_metrics_csv(file).with_context(|| format!("parsing {}", path.display()))
}

fn read_history(path: &Path) -> Result<Vec<f64>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_history_csv(std::fs::File::open(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// `quasi-on` / `quasi-off` from the run's checkpoint, else the directory name.
fn variant_of(dir: &Path) -> String {
    let from_model = std::fs::read(dir.join("model.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
        .and_then(|v| v["config"]["quasi"].as_bool());
    match from_model {
        Some(true) => "quasi-on".into(),
        Some(false) => "quasi-off".into(),
        None => dir.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned()),
    }
}

pub fn load_run(dir: &Path) -> Result<RunData> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading run directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut rows = Vec::new();
    for f in &files {
        if let Some(r) = read_metrics(f)? {
            rows.extend(r);
        }
    }
    Ok(RunData {
        dir: dir.to_path_buf(),
        variant: variant_of(dir),
        rows,
        history: read_history(&dir.join("history.csv"))?,
    })
}

/// Splits in first-seen order across all runs.
fn split_order(runs: &[RunData]) -> Vec<String> {
    let mut order: Vec<String> = Vec::new();
    for r in runs.iter().flat_map(|r| &r.rows) {
        if !order.contains(&r.split) {
            order.push(r.split.clone());
        }
    }
    order
}

pub fn summarize(runs: &[RunData]) -> Vec<SummaryRow> {
    let splits = split_order(runs);
    let mut groups: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for run in runs {
        for row in &run.rows {
            let idx = splits.iter().position(|s| *s == row.split).expect("split was collected");
            let g = groups.entry((run.variant.clone(), idx)).or_default();
            g.0.push(row.tau);
            g.1.push(row.loss);
        }
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((variant, idx), (taus, losses))| {
            let (tau_mean, tau_se) = mean_se(&taus);
            let (loss_mean, loss_se) = mean_se(&losses);
            SummaryRow { variant, split: splits[idx].clone(), runs: taus.len(), tau_mean, tau_se, loss_mean, loss_se }
        })
        .collect();

    // Paired quasi-on minus quasi-off over seeds present in both.
    for split in &splits {
        let by_seed = |variant: &str| -> BTreeMap<u64, (f64, f64)> {
            runs.iter()
                .filter(|r| r.variant == variant)
                .flat_map(|r| &r.rows)
                .filter(|r| &r.split == split)
                .map(|r| (r.seed, (r.tau, r.loss)))
                .collect()
        };
        let (on, off) = (by_seed("quasi-on"), by_seed("quasi-off"));
        let diffs: Vec<(f64, f64)> =
            on.iter().filter_map(|(s, a)| off.get(s).map(|b| (a.0 - b.0, a.1 - b.1))).collect();
        if diffs.is_empty() {
            continue;
        }
        let (tau_mean, tau_se) = mean_se(&diffs.iter().map(|d| d.0).collect::<Vec<_>>());
        let (loss_mean, loss_se) = mean_se(&diffs.iter().map(|d| d.1).collect::<Vec<_>>());
        out.push(SummaryRow {
            variant: "on-minus-off".into(),
            split: split.clone(),
            runs: diffs.len(),
            tau_mean,
            tau_se,
            loss_mean,
            loss_se,
        });
    }
    out
}

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(
            s,
            "{:<13} {:<12} tau {:+.4} ± {:.4}  loss {:.4} ± {:.4}  ({} runs)",
            r.variant, r.split, r.tau_mean, r.tau_se, r.loss_mean, r.loss_se, r.runs
        );
    }
    s
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
    errors: Option<Vec<f64>>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], x_ticks: Option<&[String]>) -> String {
    let pts = series.iter().flat_map(|s| {
        let errs = s.errors.clone().unwrap_or_else(|| vec![0.0; s.points.len()]);
        s.points.iter().zip(errs).flat_map(|(&(x, y), e)| [(x, y - e), (x, y + e)]).collect::<Vec<_>>()
    });
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{title}</text>"#, WIDTH / 2.0);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#);
    for (v, anchor) in [(y0, bottom), (y1, top)] {
        let _ = writeln!(s, r#"<text x="{}" y="{anchor:.1}" text-anchor="end">{v:.3}</text>"#, left - 6.0);
    }
    match x_ticks {
        Some(ticks) => {
            for (i, t) in ticks.iter().enumerate() {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.1}" y="{}" text-anchor="middle">{t}</text>"#,
                    sx(i as f64),
                    bottom + 18.0
                );
            }
        }
        None => {
            for v in [x0, x1] {
                let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{v}</text>"#, sx(v), bottom + 18.0);
            }
        }
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, WIDTH / 2.0, HEIGHT - 16.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ =
            writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, path.join(" "));
        if let Some(errs) = &ser.errors {
            for (&(x, y), e) in ser.points.iter().zip(errs) {
                let _ = writeln!(
                    s,
                    r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="{color}"/>"#,
                    sx(x),
                    sy(y - e),
                    sy(y + e)
                );
            }
        }
        let ly = top + 16.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#, right, ser.label);
    }
    s.push_str("</svg>\n");
    s
}

pub fn loss_curves_svg(runs: &[RunData]) -> String {
    let series: Vec<Series> = runs
        .iter()
        .filter(|r| !r.history.is_empty())
        .map(|r| Series {
            label: format!("{} {}", r.variant, r.dir.file_name().map_or(String::new(), |n| n.to_string_lossy().into())),
            points: r.history.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect(),
            errors: None,
        })
        .collect();
    svg_plot("Training loss", "epoch", "loss", &series, None)
}

/// Mean τ per split and variant with standard-error bars; with augmented
/// evaluation labels this is the τ-vs-augmentation plot.
pub fn tau_by_split_svg(runs: &[RunData], summary: &[SummaryRow]) -> String {
    let splits = split_order(runs);
    let mut variants: Vec<&str> = Vec::new();
    for r in summary.iter().filter(|r| r.variant != "on-minus-off") {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let series: Vec<Series> = variants
        .iter()
        .map(|v| {
            let rows: Vec<(f64, f64, f64)> = splits
                .iter()
                .enumerate()
                .filter_map(|(i, sp)| {
                    summary.iter().find(|r| r.variant == *v && &r.split == sp).map(|r| (i as f64, r.tau_mean, r.tau_se))
                })
                .collect();
            Series {
                label: v.to_string(),
                points: rows.iter().map(|r| (r.0, r.1)).collect(),
                errors: Some(rows.iter().map(|r| r.2).collect()),
            }
        })
        .collect();
    svg_plot("Kendall τ by evaluation set", "evaluation set", "τ", &series, Some(&splits))
}
