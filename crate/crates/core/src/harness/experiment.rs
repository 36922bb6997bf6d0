use std::path::Path;

use serde::{Deserialize, Serialize};

use super::methods::{predict, save_trained, train_method, TrainedMethod};
use super::{ExperimentConfig, ExperimentData};
use crate::constraint::{apply_probconserv, build_constraint_all, ConstraintSystem};
use crate::error::Result;
use crate::metrics::{score, MetricReport};
use crate::pde_suite::{Dataset, PdeTask, Split};
use crate::uq::Method;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Before,
    After,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub train_hash: String,
    pub test_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub stage: Stage,
    #[serde(flatten)]
    pub report: MetricReport,
    #[serde(flatten)]
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub method: Method,
    pub split: Split,
    pub seed: u64,
    pub mse_before: f64,
    pub mse_after: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub ratios: Vec<RatioRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub method: Method,
    pub seed: u64,
    pub splits: Vec<Split>,
    pub probconserv: bool,
}

/// `MSE_before / MSE_after`; 1 when both vanish.
pub fn mse_ratio(before: f64, after: f64) -> f64 {
    if before == after {
        1.0
    } else {
        before / after
    }
}

/// One mass constraint per time slice for every sample of `ds`.
pub fn constraints_for(task: &PdeTask, ds: &Dataset) -> Result<Vec<ConstraintSystem>> {
    ds.params
        .iter()
        .map(|&c| build_constraint_all(task, c))
        .collect()
}

/// The jobs `run_experiment` would execute, in order.
pub fn plan(cfg: &ExperimentConfig) -> Vec<Job> {
    cfg.seeds
        .iter()
        .flat_map(|&seed| {
            cfg.methods.iter().map(move |&method| Job {
                method,
                seed,
                splits: cfg.splits.clone(),
                probconserv: cfg.probconserv,
            })
        })
        .collect()
}

/// Score a trained method on every test split, before and (optionally)
/// after the constrained correction.
pub fn evaluate_trained(
    cfg: &ExperimentConfig,
    tm: &TrainedMethod,
    data: &ExperimentData,
    config_hash: &str,
) -> Result<ExperimentOutput> {
    let task = cfg.pde_task();
    let train_hash = data.train.content_hash();
    let mut out = ExperimentOutput::default();
    for &split in &cfg.splits {
        let test = data.test(split)?;
        let provenance = Provenance {
            config_hash: config_hash.to_string(),
            train_hash: train_hash.clone(),
            test_hash: test.content_hash(),
        };
        let cs = constraints_for(&task, test)?;
        let s = predict(tm, &test.inputs)?;
        let before = score(&s, &test.targets, Some(&cs), cfg.task, split, tm.seed)?;
        let mse_before = before.mse;
        out.rows.push(ResultRow {
            stage: Stage::Before,
            report: before,
            provenance: provenance.clone(),
        });
        if cfg.probconserv && tm.method != Method::Fno {
            let corrected = apply_probconserv(&s, &cs)?;
            let after = score(
                &corrected,
                &test.targets,
                Some(&cs),
                cfg.task,
                split,
                tm.seed,
            )?;
            out.ratios.push(RatioRow {
                method: tm.method,
                split,
                seed: tm.seed,
                mse_before,
                mse_after: after.mse,
                ratio: mse_ratio(mse_before, after.mse),
            });
            out.rows.push(ResultRow {
                stage: Stage::After,
                report: after,
                provenance,
            });
        }
    }
    Ok(out)
}

/// Train every (seed, method), score it, and optionally keep the trained
/// artifacts under `checkpoint_dir/{method}/seed{seed}`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    checkpoint_dir: Option<&Path>,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    let td = data.train_data()?;
    let mut out = ExperimentOutput::default();
    for &seed in &cfg.seeds {
        let mut base = None;
        for &method in &cfg.methods {
            let tm = train_method(cfg, method, seed, &td, base.as_ref())?;
            if method == Method::Fno {
                base = Some(tm.models[0].clone());
            }
            if let Some(dir) = checkpoint_dir {
                save_trained(
                    &dir.join(method.name()).join(format!("seed{seed}")),
                    &tm,
                    cfg,
                )?;
            }
            let o = evaluate_trained(cfg, &tm, data, &hash)?;
            out.rows.extend(o.rows);
            out.ratios.extend(o.ratios);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::methods::tests::tiny_config;

    #[test]
    fn identical_mse_gives_unit_ratio() {
        assert_eq!(mse_ratio(0.3, 0.3), 1.0);
        assert_eq!(mse_ratio(0.0, 0.0), 1.0);
        assert_eq!(mse_ratio(0.4, 0.2), 2.0);
    }

    #[test]
    fn plan_covers_seeds_times_methods() {
        let cfg = ExperimentConfig::default();
        let p = plan(&cfg);
        assert_eq!(p.len(), 25);
        assert_eq!(p[0].seed, 0);
        assert_eq!(p[5].seed, 1);
    }

    #[test]
    fn experiment_rows_are_conservative_after_correction_and_reproducible() {
        let mut cfg = tiny_config();
        cfg.methods = vec![Method::Fno, Method::Ensemble, Method::Bayesian];
        let data = ExperimentData::build(&cfg).unwrap();
        let a = run_experiment(&cfg, &data, None).unwrap();
        // fno: before only; ensemble and bayesian: before + after
        assert_eq!(a.rows.len(), 5);
        assert_eq!(a.ratios.len(), 2);
        for r in a.rows.iter().filter(|r| r.stage == Stage::After) {
            assert!(r.report.conservation_error.unwrap() < 1e-8);
            assert!(r.report.all_finite());
        }
        let b = run_experiment(&cfg, &data, None).unwrap();
        assert_eq!(a, b);
    }
}
