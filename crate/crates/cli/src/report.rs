//! Markdown comparison table: one row per method and decoder, metric
//! columns per shot count, each cell the mean over test tasks.

use std::collections::BTreeMap;
use std::fmt::Write;

use migs_core::eval::{MetricsReport, MetricsRow};

use crate::config::Metric;

type Column = (&'static str, fn(&MetricsRow) -> f64);

fn columns(metrics: &[Metric]) -> Vec<Column> {
    let mut cols: Vec<Column> = Vec::new();
    for m in metrics {
        match m {
            Metric::Fid => cols.push(("FID", |r| r.fid)),
            Metric::Kid => cols.push(("KID", |r| r.kid)),
            Metric::Prd => {
                cols.push(("F8", |r| r.f8));
                cols.push(("F1/8", |r| r.f1_8));
            }
        }
    }
    cols
}

pub fn comparison_table(report: &MetricsReport, shots: &[usize], metrics: &[Metric]) -> String {
    let cols = columns(metrics);
    let mut out = String::from("# Few-shot comparison\n\n");
    let _ = writeln!(
        out,
        "Extractor fingerprint: `{}`  ",
        report.extractor_fingerprint
    );
    let _ = writeln!(out, "Config hash: `{}`\n", report.config_hash);
    out.push_str("| method | decoder |");
    for s in shots {
        for (name, _) in &cols {
            let _ = write!(out, " {s}-shot {name} |");
        }
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---:|".repeat(shots.len() * cols.len()));
    out.push('\n');

    // First-seen order keeps the candidate order of the report.
    let mut keys: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, usize), Vec<&MetricsRow>> = BTreeMap::new();
    for r in &report.rows {
        let key = (r.method.clone(), r.decoder.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
        groups
            .entry((r.method.clone(), r.decoder.clone(), r.shots))
            .or_default()
            .push(r);
    }
    for (method, decoder) in keys {
        let _ = write!(out, "| {method} | {decoder} |");
        for &s in shots {
            let rows = groups.get(&(method.clone(), decoder.clone(), s));
            for (_, get) in &cols {
                match rows {
                    Some(rows) => {
                        let mean = rows.iter().map(|r| get(r)).sum::<f64>() / rows.len() as f64;
                        let _ = write!(out, " {mean:.4} |");
                    }
                    None => out.push_str(" - |"),
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, task: &str, shots: usize, fid: f64) -> MetricsRow {
        MetricsRow {
            task_id: task.into(),
            method: method.into(),
            decoder: "spade".into(),
            shots,
            fid,
            kid: 0.5,
            f8: 0.25,
            f1_8: 0.75,
            n_real: 4,
            n_fake: 4,
        }
    }

    #[test]
    fn cells_average_over_tasks() {
        let report = MetricsReport {
            extractor_fingerprint: "ab".into(),
            config_hash: "cd".into(),
            rows: vec![
                row("migs", "t0", 5, 1.0),
                row("baseline", "t0", 5, 4.0),
                row("migs", "t1", 5, 3.0),
                row("baseline", "t1", 5, 6.0),
            ],
        };
        let table = comparison_table(&report, &[5, 10], &[Metric::Fid, Metric::Prd]);
        assert!(table
            .contains("| method | decoder | 5-shot FID | 5-shot F8 | 5-shot F1/8 | 10-shot FID |"));
        assert!(table.contains("| migs | spade | 2.0000 | 0.2500 | 0.7500 | - | - | - |"));
        assert!(table.contains("| baseline | spade | 5.0000 |"));
        assert!(table.find("| migs").unwrap() < table.find("| baseline").unwrap());
    }
}
