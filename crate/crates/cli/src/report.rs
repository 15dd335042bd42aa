//! Plain-text modality × approach grid over collected run records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

use crate::commands::{collect_runs, emit, RunRecord};
use crate::{Failure, ReportArgs};

const COLUMNS: [(&str, &str); 4] = [("none", "Per-paragraph"), ("crf", "CRF"), ("sw", "SW transformer"), ("hat", "HAT")];

/// Baselines first, then single modalities, then fusion rows.
fn row_rank(modality: &str) -> (u8, String) {
    let group = match modality {
        "dummy" => 0,
        "topk" => 1,
        "text" => 2,
        "vision" => 3,
        "font" => 4,
        _ => 5,
    };
    (group, modality.to_string())
}

/// Renders the grid; each cell shows the run with the best mean F1 as
/// `accuracy / mean F1` in percent.
pub fn render(runs: &[RunRecord]) -> String {
    let mut cells: BTreeMap<(u8, String), BTreeMap<&str, &RunRecord>> = BTreeMap::new();
    for r in runs {
        let Some((col, _)) = COLUMNS.iter().find(|(key, _)| *key == r.approach) else {
            log::warn!("run with unknown approach {:?} left out", r.approach);
            continue;
        };
        let row = cells.entry(row_rank(&r.modality)).or_default();
        match row.get(col) {
            Some(old) if old.metrics.mean_f1 >= r.metrics.mean_f1 => {}
            _ => {
                row.insert(col, r);
            }
        }
    }
    let first = cells.keys().map(|(_, m)| m.len()).max().unwrap_or(0).max("Modality".len());
    let width = 15;
    let mut out = String::new();
    let _ = write!(out, "{:<first$}", "Modality");
    for (_, title) in COLUMNS {
        let _ = write!(out, " | {title:<width$}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(first));
    for _ in COLUMNS {
        out.push_str(&format!("-+-{}", "-".repeat(width)));
    }
    out.push('\n');
    for ((_, modality), row) in &cells {
        let _ = write!(out, "{modality:<first$}");
        for (key, _) in COLUMNS {
            let cell = row.get(key).map_or("-".to_string(), |r| {
                format!("{:.2} / {:.2}", 100.0 * r.metrics.accuracy, 100.0 * r.metrics.mean_f1)
            });
            let _ = write!(out, " | {cell:<width$}");
        }
        out.push('\n');
    }
    out.push_str("cells: accuracy / mean F1 (%)\n");
    out
}

pub fn report(a: &ReportArgs) -> Result<(), Failure> {
    let dir = a
        .runs
        .as_deref()
        .or(a.common.out.as_deref())
        .ok_or_else(|| Failure::Invalid("report needs --runs or --out".into()))?;
    if !dir.is_dir() {
        return Err(Failure::Invalid(format!("{} is not a directory", dir.display())));
    }
    let runs: Vec<RunRecord> = collect_runs(dir)?.into_iter().map(|(_, r)| r).collect();
    if runs.is_empty() {
        return Err(Failure::Invalid(format!("no run records under {}", dir.display())));
    }
    let table = render(&runs);
    emit(table.trim_end())?;
    if let Some(out) = &a.common.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.txt"), &table)?;
    }
    Ok(())
}
