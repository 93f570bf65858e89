//! Result-file serialization. All floating-point values are printed
//! with 6 decimals; rows are emitted in canonical sort order so that
//! identical inputs reproduce identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{HecId, MetricRecord};
use crate::ranking::{BootstrapResult, LeaderboardRow, SignificanceMatrix};
use crate::strata::RegressionResult;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LEADERBOARD_FILE: &str = "leaderboard.csv";
pub const BOOTSTRAP_FILE: &str = "bootstrap.json";
pub const SIGNIFICANCE_FILE: &str = "significance.csv";
pub const STRATA_FILE: &str = "strata.csv";
pub const DENDROGRAM_FILE: &str = "dendrogram.newick";

pub fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// Writes to a sibling temp file and renames into place, so readers
/// never observe a partially written file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Data(format!("cannot write to {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.{}.tmp",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut rows: Vec<&MetricRecord> = records.iter().collect();
    rows.sort_by(|a, b| {
        (&a.team_id, &a.case_id, a.composite_idx, a.hec.name()).cmp(&(
            &b.team_id,
            &b.case_id,
            b.composite_idx,
            b.hec.name(),
        ))
    });
    let mut out = String::from("team_id,case_id,composite_idx,hec,dice,surface_dice\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.team_id,
            r.case_id,
            r.composite_idx,
            r.hec.name(),
            fmt6(r.dice),
            fmt6(r.surface_dice)
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("metrics csv is empty".to_string()))?;
    if header.trim() != "team_id,case_id,composite_idx,hec,dice,surface_dice" {
        return Err(Error::Data(format!("unexpected metrics csv header: {header}")));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Data(format!(
                "metrics csv line {}: expected 6 fields, found {}",
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| {
            Error::Data(format!("metrics csv line {}: bad {what}: {line}", lineno + 2))
        };
        records.push(MetricRecord {
            team_id: fields[0].to_string(),
            case_id: fields[1].to_string(),
            composite_idx: fields[2].parse().map_err(|_| bad("composite_idx"))?,
            hec: HecId::from_name(fields[3])?,
            dice: fields[4].parse().map_err(|_| bad("dice"))?,
            surface_dice: fields[5].parse().map_err(|_| bad("surface_dice"))?,
        });
    }
    Ok(records)
}

pub fn leaderboard_csv(rows: &[LeaderboardRow]) -> String {
    let mut out = String::from(
        "final_rank,team_id,agg_dice,agg_surface_dice,rank_dice,rank_surface_dice,mean_rank,tiebreak_tumor_dice\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.final_rank,
            r.team_id,
            fmt6(r.agg_dice),
            fmt6(r.agg_surface_dice),
            fmt6(r.rank_dice),
            fmt6(r.rank_surface_dice),
            fmt6(r.mean_rank),
            fmt6(r.tiebreak_tumor_dice)
        ));
    }
    out
}

/// JSON document with the rank-frequency matrix and per-sample
/// aggregates. Hand-formatted so floats keep exactly 6 decimals.
pub fn bootstrap_json(result: &BootstrapResult) -> String {
    let teams = result
        .teams
        .iter()
        .map(|t| format!("\"{t}\""))
        .collect::<Vec<_>>()
        .join(",");
    let freq = result
        .rank_frequency
        .iter()
        .map(|row| {
            format!(
                "[{}]",
                row.iter().map(|&v| fmt6(v)).collect::<Vec<_>>().join(",")
            )
        })
        .collect::<Vec<_>>()
        .join(",\n    ");
    let aggregates = result
        .aggregates
        .iter()
        .map(|sample| {
            format!(
                "[{}]",
                sample
                    .iter()
                    .map(|&(d, s)| format!("[{},{}]", fmt6(d), fmt6(s)))
                    .collect::<Vec<_>>()
                    .join(",")
            )
        })
        .collect::<Vec<_>>()
        .join(",\n    ");
    format!(
        "{{\n  \"samples\": {},\n  \"teams\": [{}],\n  \"rank_frequency\": [\n    {}\n  ],\n  \"aggregates\": [\n    {}\n  ]\n}}\n",
        result.samples, teams, freq, aggregates
    )
}

/// T x T matrix; each off-diagonal cell is `<raw p>:<R|->` (R when the
/// Holm-adjusted decision rejects), the diagonal is empty.
pub fn significance_csv(m: &SignificanceMatrix) -> String {
    let mut out = String::from("team_id");
    for t in &m.teams {
        out.push(',');
        out.push_str(t);
    }
    out.push('\n');
    for (i, t) in m.teams.iter().enumerate() {
        out.push_str(t);
        for j in 0..m.teams.len() {
            out.push(',');
            if let Some(p) = m.raw_p[i][j] {
                out.push_str(&fmt6(p));
                out.push(':');
                out.push(if m.rejected[i][j] { 'R' } else { '-' });
            }
        }
        out.push('\n');
    }
    out
}

pub fn strata_csv(fit: &RegressionResult) -> String {
    let mut out = String::from("variable,coefficient,p_value\n");
    for ((name, &coef), &p) in fit
        .names
        .iter()
        .zip(&fit.coefficients)
        .zip(&fit.p_values)
    {
        out.push_str(&format!("{},{},{}\n", name, fmt6(coef), fmt6(p)));
    }
    out
}
