//! Plain-text and CSV summary tables.
//!
//! Methods always appear in [`MethodKind::ALL`] order and scenarios in name
//! order, so reports diff cleanly between runs.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::{average_accuracy, mce, ErrorGrid, RunRecord};
use crate::baselines::MethodKind;
use crate::scenarios::Regime;

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    /// `scenario,method,seeds,acc_a,acc_b,acc_all`
    pub summary_csv: String,
    /// `method,shift,severity,error` plus per-method `avg_acc` / `mce` rows.
    pub corruption_csv: String,
}

const ABLATION: [MethodKind; 5] = [
    MethodKind::Source,
    MethodKind::ModelOnly,
    MethodKind::MitaWoM,
    MethodKind::MitaSame,
    MethodKind::Mita,
];

#[derive(Default)]
struct Cell {
    a: Vec<f64>,
    b: Vec<f64>,
    all: Vec<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

fn csv_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn report(records: &[RunRecord]) -> Report {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|x, y| {
        (&x.scenario, x.method, x.seed, &x.run_id).cmp(&(&y.scenario, y.method, y.seed, &y.run_id))
    });

    let mut cells: BTreeMap<(&str, MethodKind), Cell> = BTreeMap::new();
    let mut scenario_info: BTreeMap<&str, &RunRecord> = BTreeMap::new();
    for r in &sorted {
        let c = cells.entry((r.scenario.as_str(), r.method)).or_default();
        c.a.extend(r.accuracy.a);
        c.b.extend(r.accuracy.b);
        c.all.push(r.accuracy.all);
        scenario_info.entry(r.scenario.as_str()).or_insert(r);
    }

    let mut text = String::new();
    let mut summary_csv = String::from("scenario,method,seeds,acc_a,acc_b,acc_all\n");
    for (scenario, info) in &scenario_info {
        let desc = match &info.dist_b {
            Some(b) => format!("A={} B={} ratio={}", info.dist_a, b, info.ratio),
            None => format!("{}", info.dist_a),
        };
        let _ = writeln!(text, "== {scenario} [{}] {desc}", regime_name(info.regime));
        let _ = writeln!(text, "{:<14} {:>5} {:>8} {:>8} {:>8}", "method", "seeds", "A", "B", "All");
        for m in MethodKind::ALL {
            let Some(c) = cells.get(&(*scenario, m)) else { continue };
            let (a, b, all) = (mean(&c.a), mean(&c.b), mean(&c.all));
            let _ = writeln!(
                text,
                "{:<14} {:>5} {:>8} {:>8} {:>8}",
                m.name(),
                c.all.len(),
                pct(a),
                pct(b),
                pct(all)
            );
            let _ = writeln!(
                summary_csv,
                "{scenario},{},{},{},{},{}",
                m.name(),
                c.all.len(),
                csv_num(a),
                csv_num(b),
                csv_num(all)
            );
        }
        text.push('\n');
    }

    // ablation view: All accuracy per scenario
    let scenarios: Vec<&str> = scenario_info.keys().copied().collect();
    if ABLATION.iter().any(|m| scenarios.iter().any(|s| cells.contains_key(&(*s, *m)))) {
        let _ = writeln!(text, "== ablation (All accuracy)");
        let _ = write!(text, "{:<14}", "method");
        for s in &scenarios {
            let _ = write!(text, " {:>12}", truncate(s, 12));
        }
        text.push('\n');
        for m in ABLATION {
            if !scenarios.iter().any(|s| cells.contains_key(&(*s, m))) {
                continue;
            }
            let _ = write!(text, "{:<14}", m.name());
            for s in &scenarios {
                let v = cells.get(&(*s, m)).and_then(|c| mean(&c.all));
                let _ = write!(text, " {:>12}", pct(v));
            }
            text.push('\n');
        }
        text.push('\n');
    }

    let corruption_csv = corruption_table(&sorted, &mut text);
    Report {
        text,
        summary_csv,
        corruption_csv,
    }
}

fn regime_name(r: Regime) -> &'static str {
    match r {
        Regime::Pure => "pure",
        Regime::Mixture => "mixture",
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Per-method error grids from pure-regime records (errors averaged over
/// seeds), per-shift accuracy, AverAcc and mCE against `source`.
fn corruption_table(sorted: &[&RunRecord], text: &mut String) -> String {
    let mut acc: BTreeMap<MethodKind, BTreeMap<(String, u8), Vec<f64>>> = BTreeMap::new();
    for r in sorted.iter().filter(|r| r.regime == Regime::Pure) {
        for (shift, sev, e) in r.error_grid.cells() {
            acc.entry(r.method)
                .or_default()
                .entry((shift.to_string(), sev))
                .or_default()
                .push(e);
        }
    }
    let mut csv = String::from("method,shift,severity,error\n");
    if acc.is_empty() {
        return csv;
    }
    let grids: BTreeMap<MethodKind, ErrorGrid> = acc
        .iter()
        .map(|(m, cells)| {
            let mut g = ErrorGrid::new();
            for ((shift, sev), errs) in cells {
                let e = errs.iter().sum::<f64>() / errs.len() as f64;
                g.insert(shift, *sev, e).expect("averaged error rates stay in [0, 1]");
            }
            (*m, g)
        })
        .collect();
    let shifts: Vec<String> = {
        let mut s: Vec<String> = grids.values().flat_map(|g| g.shifts().map(String::from)).collect();
        s.sort();
        s.dedup();
        s
    };
    let baseline = grids.get(&MethodKind::Source);
    let _ = writeln!(text, "== pure-regime corruption table (accuracy %, severities averaged)");
    let _ = write!(text, "{:<14}", "method");
    for s in &shifts {
        let _ = write!(text, " {:>14}", truncate(s, 14));
    }
    let _ = writeln!(text, " {:>8} {:>8}", "Avg", "mCE");
    for m in MethodKind::ALL {
        let Some(g) = grids.get(&m) else { continue };
        let _ = write!(text, "{:<14}", m.name());
        for s in &shifts {
            let errs: Vec<f64> = g.cells().filter(|(n, _, _)| n == s).map(|(_, _, e)| e).collect();
            let v = mean(&errs).map(|e| 100.0 * (1.0 - e));
            let _ = write!(text, " {:>14}", pct(v));
        }
        let avg = average_accuracy(g).ok();
        let m_ce = baseline.and_then(|b| mce(g, b).ok());
        let _ = writeln!(text, " {:>8} {:>8}", pct(avg), pct(m_ce));
        for (shift, sev, e) in g.cells() {
            let _ = writeln!(csv, "{},{shift},{sev},{e:.6}", m.name());
        }
        let _ = writeln!(csv, "{},avg_acc,,{}", m.name(), csv_num(avg));
        let _ = writeln!(csv, "{},mce,,{}", m.name(), csv_num(m_ce));
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::GroupAccuracy;

    fn rec(method: MethodKind, seed: u64, all: f64) -> RunRecord {
        let mut grid = ErrorGrid::new();
        grid.insert("rotate", 3, 1.0 - all / 100.0).unwrap();
        RunRecord {
            run_id: format!("{method}-p-{seed}"),
            method,
            scenario: "p".into(),
            scenario_fingerprint: "f".into(),
            regime: Regime::Pure,
            dist_a: "rotate-3".into(),
            dist_b: None,
            ratio: 1.0,
            seed,
            num_batches: 1,
            accuracy: GroupAccuracy {
                a: Some(all),
                b: None,
                all,
                n_a: 10,
                n_b: 0,
            },
            error_grid: grid,
            data_energy: None,
            cd_loss: None,
            trace_files: vec![],
            wall_time_s: 0.1,
            config: serde_json::Value::Null,
        }
    }

    #[test]
    fn single_pure_record() {
        let r = report(&[rec(MethodKind::Source, 1, 80.0)]);
        assert!(r.text.contains("source"));
        let row = r.summary_csv.lines().nth(1).unwrap();
        assert_eq!(row, "p,source,1,80.000000,,80.000000");
        assert!(r.corruption_csv.contains("source,avg_acc,,80.000000"));
        assert!(r.corruption_csv.contains("source,mce,,100.000000"));
    }

    #[test]
    fn method_order_is_fixed() {
        let recs = vec![
            rec(MethodKind::Mita, 1, 90.0),
            rec(MethodKind::Source, 1, 80.0),
            rec(MethodKind::ModelOnly, 1, 85.0),
        ];
        let mut rev = recs.clone();
        rev.reverse();
        let a = report(&recs);
        assert_eq!(a, report(&rev));
        let methods: Vec<&str> = a
            .summary_csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(methods, vec!["source", "model_only", "mita"]);
        assert!(a.text.contains("== ablation"));
    }
}
