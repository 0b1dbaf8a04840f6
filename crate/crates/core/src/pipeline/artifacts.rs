//! Fixed-name run-directory files: CSV column contracts, JSON payloads and
//! content hashes.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::training::LossPoint;
use crate::downstream::{CurvePoint, SelectionLogRow};
use crate::error::{Error, Result};
use crate::rewards::RewardBreakdown;
use crate::rl::PolicyGradientReport;
use crate::world::{LabeledSample, Origin};

use super::ablation::{AblationTable, TableRow};

pub const MANIFEST: &str = "manifest.json";
pub const WORLD: &str = "world.json";
pub const EXTRACTOR: &str = "extractor.json";
pub const PRETRAIN: &str = "pretrain.json";
pub const PRETRAIN_LOSS: &str = "pretrain_loss.csv";
pub const COLDSTART: &str = "coldstart.json";
pub const COLDSTART_LOSS: &str = "coldstart_loss.csv";
pub const RL: &str = "rl.json";
pub const RL_HISTORY: &str = "rl_history.csv";
pub const REWARDS: &str = "rewards.csv";
pub const POOL: &str = "pool.csv";
pub const CLASSIFIER: &str = "classifier.json";
pub const TRAIN_CURVES: &str = "train_curves.csv";
pub const SELECTION: &str = "selection.csv";
pub const EVAL: &str = "eval.json";
pub const ABLATION_TABLE: &str = "ablation_table.csv";
pub const ABLATION_CELLS: &str = "ablation_cells.csv";
pub const ABLATION_LADDER: &str = "ablation_monotonicity.csv";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` via a temporary file and rename; returns the content hash.
pub fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> Result<String> {
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(bytes))
}

pub fn read_bytes(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| Error::io(&path, e))
}

pub fn file_hash(dir: &Path, name: &str) -> Result<String> {
    Ok(sha256_hex(&read_bytes(dir, name)?))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    serde_json::from_slice(&read_bytes(dir, name)?).map_err(|e| Error::Report {
        file: name.to_string(),
        reason: e.to_string(),
    })
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Serde(format!("csv flush: {e}")))
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn loss_csv(curve: &[LossPoint]) -> Result<Vec<u8>> {
    csv_bytes(
        &["step", "loss"],
        curve.iter().map(|p| vec![p.step.to_string(), num(p.loss)]),
    )
}

pub const RL_HISTORY_COLUMNS: [&str; 7] = [
    "step",
    "mean_r_norm",
    "mean_r_sem",
    "mean_r_cov",
    "mean_r_exp",
    "grad_norm",
    "kl",
];

pub fn rl_history_csv(history: &[PolicyGradientReport]) -> Result<Vec<u8>> {
    csv_bytes(
        &RL_HISTORY_COLUMNS,
        history.iter().map(|r| {
            vec![
                r.step.to_string(),
                num(r.mean_r_norm),
                num(r.mean_r_sem),
                num(r.mean_r_cov),
                num(r.mean_r_exp),
                num(r.grad_norm),
                num(r.kl),
            ]
        }),
    )
}

/// One row per generated sample: step, identity (class row), sample index
/// within its identity batch, raw and standardized terms, `r_norm`.
pub fn rewards_csv(steps: &[Vec<Vec<RewardBreakdown>>]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for (step, groups) in steps.iter().enumerate() {
        for batch in groups {
            for (i, b) in batch.iter().enumerate() {
                rows.push(vec![
                    step.to_string(),
                    b.identity.to_string(),
                    i.to_string(),
                    num(b.r_sem),
                    num(b.r_cov),
                    num(b.r_exp),
                    num(b.std_sem),
                    num(b.std_cov),
                    num(b.std_exp),
                    num(b.r_norm),
                ]);
            }
        }
    }
    csv_bytes(
        &[
            "step", "identity", "sample", "r_sem", "r_cov", "r_exp", "std_sem", "std_cov",
            "std_exp", "r_norm",
        ],
        rows,
    )
}

pub fn pool_csv(pool: &[LabeledSample]) -> Result<Vec<u8>> {
    let dim = pool.first().map_or(0, |s| s.x.len());
    let mut header = vec!["index".to_string(), "label".to_string()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(
        &header_refs,
        pool.iter().enumerate().map(|(i, s)| {
            let mut row = vec![i.to_string(), s.y.to_string()];
            row.extend(s.x.iter().map(|v| num(*v)));
            row
        }),
    )
}

pub fn parse_pool_csv(bytes: &[u8]) -> Result<Vec<LabeledSample>> {
    let bad = |reason: String| Error::Report {
        file: POOL.to_string(),
        reason,
    };
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() < 3 {
            return Err(bad(format!("row {k} has {} columns", rec.len())));
        }
        let y = rec[1]
            .parse::<usize>()
            .map_err(|e| bad(format!("row {k} label: {e}")))?;
        let x = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("row {k}: {e}")))?;
        out.push(LabeledSample {
            x,
            y,
            origin: Origin::Synthetic,
        });
    }
    Ok(out)
}

pub fn curves_csv(points: &[CurvePoint]) -> Result<Vec<u8>> {
    csv_bytes(
        &["iteration", "loss", "synthetic_used", "snapshot_accuracy"],
        points.iter().map(|p| {
            vec![
                p.iteration.to_string(),
                num(p.loss),
                p.synthetic_used.to_string(),
                p.snapshot_accuracy.map(num).unwrap_or_default(),
            ]
        }),
    )
}

pub fn selection_csv(rows: &[SelectionLogRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &["iteration", "candidate", "pool_index", "label", "delta", "kept"],
        rows.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                r.candidate.to_string(),
                r.pool_index.to_string(),
                r.label.to_string(),
                num(r.delta),
                u8::from(r.kept).to_string(),
            ]
        }),
    )
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub const ABLATION_TABLE_COLUMNS: [&str; 6] = [
    "variant",
    "runs",
    "failed",
    "mean_accuracy",
    "std_accuracy",
    "mean_novel_accuracy",
];

pub fn ablation_table_csv(table: &AblationTable) -> Result<Vec<u8>> {
    csv_bytes(
        &ABLATION_TABLE_COLUMNS,
        table.rows.iter().map(|r| {
            vec![
                r.variant.clone(),
                r.runs.to_string(),
                r.failed.to_string(),
                num(r.mean_accuracy),
                num(r.std_accuracy),
                opt(r.mean_novel_accuracy),
            ]
        }),
    )
}

pub fn ablation_cells_csv(table: &AblationTable) -> Result<Vec<u8>> {
    csv_bytes(
        &["variant", "seed", "closed_set_accuracy", "novel_accuracy", "error"],
        table.cells.iter().map(|c| {
            vec![
                c.variant.clone(),
                c.seed.to_string(),
                opt(c.closed_set_accuracy),
                opt(c.novel_accuracy),
                c.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

pub fn ablation_ladder_csv(table: &AblationTable) -> Result<Vec<u8>> {
    csv_bytes(
        &["from", "to", "delta", "improves"],
        table.monotonicity.iter().map(|s| {
            vec![
                s.from.clone(),
                s.to.clone(),
                num(s.delta),
                u8::from(s.improves).to_string(),
            ]
        }),
    )
}

/// Reads CSV records after checking the header; errors name `file`.
pub fn read_csv_records(bytes: &[u8], file: &str, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let bad = |reason: String| Error::Report {
        file: file.to_string(),
        reason,
    };
    let mut r = csv::Reader::from_reader(bytes);
    let got = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(bad(format!("unexpected header `{}`", got.iter().collect::<Vec<_>>().join(","))));
    }
    r.records()
        .map(|rec| rec.map_err(|e| bad(e.to_string())))
        .collect()
}

pub fn parse_f64(field: &str, file: &str, row: usize) -> Result<f64> {
    field.parse::<f64>().map_err(|e| Error::Report {
        file: file.to_string(),
        reason: format!("row {row}: `{field}`: {e}"),
    })
}

pub fn parse_ablation_table(bytes: &[u8]) -> Result<Vec<TableRow>> {
    let f = ABLATION_TABLE;
    read_csv_records(bytes, f, &ABLATION_TABLE_COLUMNS)?
        .iter()
        .enumerate()
        .map(|(k, rec)| {
            let count = |s: &str| {
                s.parse::<usize>().map_err(|e| Error::Report {
                    file: f.to_string(),
                    reason: format!("row {k}: {e}"),
                })
            };
            Ok(TableRow {
                variant: rec[0].to_string(),
                runs: count(&rec[1])?,
                failed: count(&rec[2])?,
                mean_accuracy: parse_f64(&rec[3], f, k)?,
                std_accuracy: parse_f64(&rec[4], f, k)?,
                mean_novel_accuracy: match &rec[5] {
                    "" => None,
                    v => Some(parse_f64(v, f, k)?),
                },
            })
        })
        .collect()
}
