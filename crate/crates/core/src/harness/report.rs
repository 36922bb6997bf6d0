use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::experiment::{RatioRow, ResultRow, Stage};

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cell(v: &[f64]) -> String {
    let (m, s) = mean_std(v);
    format!("{m:.4e} ({s:.2e})")
}

/// One CSV line per row, with full provenance.
pub fn rows_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(
        "method,task,split,seed,stage,mse,nll,nmerci,rmsce,crps,ce,n_points,config_hash,train_hash,test_hash\n",
    );
    for r in rows {
        let m = &r.report;
        let ce = m
            .conservation_error
            .map(|v| format!("{v:.6e}"))
            .unwrap_or_default();
        let stage = match r.stage {
            Stage::Before => "before",
            Stage::After => "after",
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{stage},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{ce},{},{},{},{}",
            m.method.label(),
            m.task,
            m.split,
            m.seed,
            m.mse,
            m.nll,
            m.nmerci,
            m.rmsce,
            m.crps,
            m.n_points,
            r.provenance.config_hash,
            r.provenance.train_hash,
            r.provenance.test_hash,
        );
    }
    s
}

/// One line per (method, split, stage) with `mean (std)` across seeds.
pub fn aggregate_csv(rows: &[ResultRow]) -> String {
    type Key = (String, String, Stage);
    let mut groups: BTreeMap<Key, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.report.method.label().to_string(),
            r.report.split.to_string(),
            r.stage,
        );
        groups.entry(key).or_default().push(r);
    }
    let mut s = String::from("method,split,stage,n_seeds,MSE,NLL,n-MeRCI,RMSCE,CRPS,CE\n");
    for ((method, split, stage), g) in groups {
        let col = |f: &dyn Fn(&ResultRow) -> f64| cell(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
        let ce: Vec<f64> = g
            .iter()
            .filter_map(|r| r.report.conservation_error)
            .collect();
        let ce = if ce.is_empty() {
            String::new()
        } else {
            cell(&ce)
        };
        let stage = match stage {
            Stage::Before => "before",
            Stage::After => "after",
        };
        let _ = writeln!(
            s,
            "{method},{split},{stage},{},{},{},{},{},{},{ce}",
            g.len(),
            col(&|r| r.report.mse),
            col(&|r| r.report.nll),
            col(&|r| r.report.nmerci),
            col(&|r| r.report.rmsce),
            col(&|r| r.report.crps),
        );
    }
    s
}

/// MSE ratio before/after the constrained correction, `mean (std)` across seeds.
pub fn ratio_csv(ratios: &[RatioRow]) -> String {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in ratios {
        groups
            .entry((r.method.label().to_string(), r.split.to_string()))
            .or_default()
            .push(r.ratio);
    }
    let mut s = String::from("method,split,n_seeds,mse_ratio\n");
    for ((m, sp), v) in groups {
        let _ = writeln!(s, "{m},{sp},{},{}", v.len(), cell(&v));
    }
    s
}

/// A gnuplot script that plots `column` against `x_column` of a CSV file,
/// one line per value of the first column.
pub fn gnuplot_stub(csv_name: &str, x_column: usize, column: usize, ylabel: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set logscale y\n\
         set ylabel '{ylabel}'\n\
         plot '{csv_name}' using {x_column}:{column} with linespoints\n"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_uses_sample_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
        assert_eq!(cell(&[1.0, 3.0]), "2.0000e0 (1.41e0)");
    }

    #[test]
    fn stub_names_the_csv() {
        assert!(gnuplot_stub("cost.csv", 3, 7, "MSE").contains("'cost.csv' using 3:7"));
    }
}
