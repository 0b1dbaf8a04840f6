//! Run reports rendered from the files in a run directory: a summary text
//! table and self-contained SVG line charts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::EvalReport;
use crate::error::{Error, Result};

use super::ablation::TableRow;
use super::artifacts as art;
use super::run::{RunManifest, Stage, StageStatus};

pub const SUMMARY: &str = "summary.txt";
pub const REWARDS_SVG: &str = "rewards.svg";
pub const ACCURACY_SVG: &str = "accuracy.svg";
pub const NO_RL_NOTE: &str = "no RL stage";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvgOptions {
    pub width: f64,
    pub height: f64,
    pub margin: f64,
}

impl Default for SvgOptions {
    fn default() -> Self {
        SvgOptions {
            width: 640.0,
            height: 400.0,
            margin: 48.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Data → pixel mapping of a chart. Degenerate ranges are widened by ±0.5
/// so a constant series sits mid-plot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axes {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub opts: SvgOptions,
}

impl Axes {
    pub fn fit(series: &[Series], opts: SvgOptions) -> Self {
        let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
        let range = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo <= 0.0 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x_min, x_max) = range(&mut pts().map(|p| p.0));
        let (y_min, y_max) = range(&mut pts().map(|p| p.1));
        Axes {
            x_min,
            x_max,
            y_min,
            y_max,
            opts,
        }
    }

    pub fn px(&self, x: f64) -> f64 {
        let o = &self.opts;
        o.margin + (x - self.x_min) / (self.x_max - self.x_min) * (o.width - 2.0 * o.margin)
    }

    pub fn py(&self, y: f64) -> f64 {
        let o = &self.opts;
        o.height - o.margin - (y - self.y_min) / (self.y_max - self.y_min) * (o.height - 2.0 * o.margin)
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line chart with one `<polyline>` per series (non-finite points dropped).
/// `x_labels` replaces numeric x tick labels with names at those x values.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    x_labels: Option<&[(f64, String)]>,
    opts: SvgOptions,
) -> String {
    let ax = Axes::fit(series, opts);
    let (w, h, m) = (opts.width, opts.height, opts.margin);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        m / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<g stroke="black" stroke-width="1"><line x1="{m}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/><line x1="{m}" y1="{m}" x2="{m}" y2="{:.3}"/></g>"#,
        h - m,
        w - m,
        h - m,
        h - m
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle" font-size="11">{}</text>"#,
        w / 2.0,
        h - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{:.3}" text-anchor="middle" font-size="11" transform="rotate(-90 12 {:.3})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (v, y) in [(ax.y_min, ax.py(ax.y_min)), (ax.y_max, ax.py(ax.y_max))] {
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{y:.3}" text-anchor="end" font-size="10">{v:.4}</text>"#,
            m - 4.0
        );
    }
    match x_labels {
        Some(labels) => {
            for (x, name) in labels {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.3}" y="{:.3}" text-anchor="middle" font-size="9">{}</text>"#,
                    ax.px(*x),
                    h - m + 14.0,
                    escape(name)
                );
            }
        }
        None => {
            for v in [ax.x_min, ax.x_max] {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.3}" y="{:.3}" text-anchor="middle" font-size="10">{v}</text>"#,
                    ax.px(v),
                    h - m + 14.0
                );
            }
        }
    }
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.3},{:.3}", ax.px(x), ax.py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-series="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(&ser.name),
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{:.3}" font-size="10" fill="{color}">{}</text>"#,
            w - m + 4.0 - 120.0,
            m + 12.0 * k as f64,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Reward curves from `rl_history.csv`: one series per mean reward column.
pub fn reward_series(history_csv: &[u8]) -> Result<Vec<Series>> {
    let f = art::RL_HISTORY;
    let recs = art::read_csv_records(history_csv, f, &art::RL_HISTORY_COLUMNS)?;
    let names = ["r_norm", "r_sem", "r_cov", "r_exp"];
    let mut series: Vec<Series> = names
        .iter()
        .map(|n| Series {
            name: n.to_string(),
            points: Vec::with_capacity(recs.len()),
        })
        .collect();
    for (k, rec) in recs.iter().enumerate() {
        let step = art::parse_f64(&rec[0], f, k)?;
        for (j, s) in series.iter_mut().enumerate() {
            s.points.push((step, art::parse_f64(&rec[1 + j], f, k)?));
        }
    }
    Ok(series)
}

/// Accuracy per configuration, x = row index.
pub fn accuracy_series(rows: &[TableRow]) -> (Vec<Series>, Vec<(f64, String)>) {
    let labels = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (i as f64, r.variant.clone()))
        .collect();
    let mut series = vec![Series {
        name: "closed-set accuracy".into(),
        points: rows
            .iter()
            .enumerate()
            .map(|(i, r)| (i as f64, r.mean_accuracy))
            .collect(),
    }];
    let novel: Vec<(f64, f64)> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.mean_novel_accuracy.map(|v| (i as f64, v)))
        .collect();
    if !novel.is_empty() {
        series.push(Series {
            name: "novel accuracy".into(),
            points: novel,
        });
    }
    (series, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub summary: String,
    pub rewards_svg: Option<String>,
    pub accuracy_svg: Option<String>,
}

/// Builds the report for `dir` without writing anything. Needs a run
/// manifest, an ablation table, or both.
pub fn build_report(dir: &Path, opts: SvgOptions) -> Result<ReportFiles> {
    let manifest = if dir.join(art::MANIFEST).exists() {
        Some(RunManifest::load(dir)?)
    } else {
        None
    };
    let ablation = if dir.join(art::ABLATION_TABLE).exists() {
        Some(art::parse_ablation_table(&art::read_bytes(dir, art::ABLATION_TABLE)?)?)
    } else {
        None
    };
    if manifest.is_none() && ablation.is_none() {
        return Err(Error::MissingInput(format!(
            "{} has neither {} nor {}",
            dir.display(),
            art::MANIFEST,
            art::ABLATION_TABLE
        )));
    }

    let mut summary = String::new();
    let mut rewards_svg = None;
    let mut accuracy_rows: Vec<TableRow> = Vec::new();

    if let Some(m) = &manifest {
        let _ = writeln!(summary, "run {} (seed {}, version {})", m.run_id, m.seed, m.code_version);
        let _ = writeln!(summary);
        let _ = writeln!(summary, "{:<10} {:<10} {:>10}  metrics", "stage", "status", "seconds");
        for rec in &m.stages {
            let metrics: Vec<String> = rec.metrics.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
            let status = match rec.status {
                StageStatus::Completed => "completed",
                StageStatus::Skipped => "skipped",
                StageStatus::Failed => "FAILED",
            };
            let _ = writeln!(
                summary,
                "{:<10} {:<10} {:>10.2}  {}",
                rec.stage.name(),
                status,
                rec.wall_clock_secs,
                metrics.join(" ")
            );
            if let Some(note) = &rec.note {
                let _ = writeln!(summary, "{:<10} note: {note}", "");
            }
        }
        let _ = writeln!(summary);

        let history = m
            .record(Stage::Rl)
            .filter(|r| r.outputs.contains_key(art::RL_HISTORY))
            .map(|_| art::read_bytes(dir, art::RL_HISTORY))
            .transpose()?;
        let series = history.as_deref().map(reward_series).transpose()?;
        match series {
            Some(s) if s.first().is_some_and(|s| !s.points.is_empty()) => {
                let first = &s[0].points;
                let _ = writeln!(
                    summary,
                    "reward fine-tuning: {} steps, mean r_norm {:.6} -> {:.6}",
                    first.len(),
                    first[0].1,
                    first[first.len() - 1].1
                );
                rewards_svg = Some(line_chart(
                    "Reward components vs RL step",
                    "step",
                    "mean reward",
                    &s,
                    None,
                    opts,
                ));
            }
            _ => {
                let _ = writeln!(summary, "{NO_RL_NOTE}: reward history is empty");
            }
        }

        if m.record(Stage::Eval).is_some_and(|r| r.status == StageStatus::Completed) {
            let eval: EvalReport = art::read_json(dir, art::EVAL)?;
            let _ = writeln!(summary, "closed-set accuracy: {:.6}", eval.closed_set_accuracy);
            if let Some(v) = eval.novel_accuracy {
                let _ = writeln!(summary, "novel-identity accuracy: {v:.6}");
            }
            accuracy_rows.push(TableRow {
                variant: "run".into(),
                runs: 1,
                failed: 0,
                mean_accuracy: eval.closed_set_accuracy,
                std_accuracy: 0.0,
                mean_novel_accuracy: eval.novel_accuracy,
            });
        }
    }

    if let Some(rows) = ablation {
        if manifest.is_some() {
            let _ = writeln!(summary);
        }
        let _ = writeln!(summary, "ablation");
        let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
        let _ = writeln!(summary, "{:<width$} {:>5} {:>6}  accuracy (mean ± std)", "variant", "runs", "failed");
        for r in &rows {
            let _ = writeln!(
                summary,
                "{:<width$} {:>5} {:>6}  {:.4} ± {:.4}",
                r.variant, r.runs, r.failed, r.mean_accuracy, r.std_accuracy
            );
        }
        for w in rows.windows(2) {
            let d = w[1].mean_accuracy - w[0].mean_accuracy;
            let _ = writeln!(
                summary,
                "  {} -> {}: {:+.4} {}",
                w[0].variant,
                w[1].variant,
                d,
                if d > 0.0 { "improves" } else { "does not improve" }
            );
        }
        accuracy_rows = rows;
    }

    let accuracy_svg = (!accuracy_rows.is_empty()).then(|| {
        let (series, labels) = accuracy_series(&accuracy_rows);
        line_chart(
            "Held-out accuracy vs configuration",
            "configuration",
            "accuracy",
            &series,
            Some(&labels),
            opts,
        )
    });
    Ok(ReportFiles {
        summary,
        rewards_svg,
        accuracy_svg,
    })
}

/// Writes the report files into `out` (typically the run directory) and
/// returns the names written.
pub fn write_report(dir: &Path, out: &Path, opts: SvgOptions) -> Result<Vec<&'static str>> {
    let files = build_report(dir, opts)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = vec![SUMMARY];
    art::write_bytes(out, SUMMARY, files.summary.as_bytes())?;
    if let Some(svg) = &files.rewards_svg {
        art::write_bytes(out, REWARDS_SVG, svg.as_bytes())?;
        written.push(REWARDS_SVG);
    }
    if let Some(svg) = &files.accuracy_svg {
        art::write_bytes(out, ACCURACY_SVG, svg.as_bytes())?;
        written.push(ACCURACY_SVG);
    }
    Ok(written)
}
