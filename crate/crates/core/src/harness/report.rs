use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackMode, SweepRow, SWEEP_COLUMNS};
use crate::error::{Error, Result};

pub const REPORT_FILE: &str = "accuracy_vs_epsilon.csv";

/// One point of a method's accuracy-vs-ε series, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub attack: String,
    pub mode: AttackMode,
    pub k: usize,
    pub epsilon: f64,
    pub accuracy: f64,
    pub min: f64,
    pub max: f64,
    pub runs: usize,
}

/// Sweep CSV files under `dir`, recursively, in path order.
pub fn find_sweeps(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("sweep") && n.ends_with(".csv"))
            {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads one sweep file, requiring exactly the sweep columns.
pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = r.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    if header != SWEEP_COLUMNS {
        return Err(bad(format!("columns {header:?}, expected {SWEEP_COLUMNS:?}")));
    }
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset: e.position().map_or(0, |p| p.byte()),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Merges sweep rows into per-method series sorted by method, attack,
/// mode, k and ε.
pub fn aggregate(rows: &[SweepRow]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, String, &str, usize, u64), (AttackMode, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        // Bit patterns of non-negative floats sort like the values.
        let key = (r.method.clone(), r.attack.clone(), r.mode.name(), r.k, r.epsilon.to_bits());
        groups.entry(key).or_insert_with(|| (r.mode, Vec::new())).1.push(r.accuracy);
    }
    groups
        .into_iter()
        .map(|((method, attack, _, k, eps), (mode, accs))| ReportRow {
            method,
            attack,
            mode,
            k,
            epsilon: f64::from_bits(eps),
            accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            min: accs.iter().copied().fold(f64::INFINITY, f64::min),
            max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            runs: accs.len(),
        })
        .collect()
}

/// Aggregates every sweep file under `dir` and writes the table to
/// `dir/accuracy_vs_epsilon.csv`.
pub fn report(dir: &Path) -> Result<Vec<ReportRow>> {
    let files = find_sweeps(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no sweep CSV files under {}", dir.display())));
    }
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_sweep(f)?);
    }
    let table = aggregate(&rows);
    let out = dir.join(REPORT_FILE);
    let mut w = csv::Writer::from_path(&out)?;
    for r in &table {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&out, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::write_sweep_csv;

    fn row(method: &str, eps: f64, acc: f64, seed: u64) -> SweepRow {
        SweepRow {
            method: method.into(),
            attack: "fgsm".into(),
            mode: AttackMode::NonTargeted,
            epsilon: eps,
            k: 1,
            accuracy: acc,
            seed,
        }
    }

    #[test]
    fn merges_methods_and_seeds() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        write_sweep_csv(&dir.path().join("a/sweep.csv"), &[row("baseline", 0.0, 0.9, 1), row("baseline", 0.1, 0.2, 1)]).unwrap();
        write_sweep_csv(&dir.path().join("sweep_b.csv"), &[row("baseline", 0.1, 0.4, 2), row("defense", 0.1, 0.5, 1)]).unwrap();
        let t = report(dir.path()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!((t[0].method.as_str(), t[0].epsilon, t[0].accuracy), ("baseline", 0.0, 0.9));
        assert_eq!(t[1].runs, 2);
        assert!((t[1].accuracy - 0.3).abs() < 1e-15);
        assert_eq!((t[1].min, t[1].max), (0.2, 0.4));
        assert_eq!(t[2].method, "defense");
        assert!(dir.path().join(REPORT_FILE).is_file());
    }

    #[test]
    fn wrong_columns_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("sweep_bad.csv");
        fs::write(&f, "method,attack,mode,epsilon,k,accuracy\nx,fgsm,non_targeted,0,1,0.5\n").unwrap();
        let e = report(dir.path()).unwrap_err();
        assert!(e.to_string().contains("sweep_bad.csv"), "{e}");
        assert!(report(&dir.path().join("missing")).is_err());
    }
}
