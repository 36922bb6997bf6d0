use serde::{Deserialize, Serialize};

use super::diversity::head_distances;
use super::methods::{predict, train_method, TrainedMethod};
use super::{ExperimentConfig, ExperimentData};
use crate::error::{invalid, Result};
use crate::fno::{count_flops, FnoModel};
use crate::metrics::{mse, nmerci};
use crate::pde_suite::Split;
use crate::trainer::Diversity;
use crate::uq::Method;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub diversity: String,
    pub lambda: f64,
    pub seed: u64,
    pub split: Split,
    pub mse: f64,
    pub nmerci: f64,
    pub mean_head_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: Method,
    pub width: usize,
    pub flops: u64,
    pub params: usize,
    pub seed: u64,
    pub split: Split,
    pub mse: f64,
    pub nmerci: f64,
}

fn mean_offdiag(d: &[Vec<f64>]) -> f64 {
    let n = d.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += d[i][j];
        }
    }
    s / (n * (n - 1) / 2).max(1) as f64
}

fn point_scores(tm: &TrainedMethod, data: &ExperimentData, split: Split) -> Result<(f64, f64)> {
    let test = data.test(split)?;
    let s = predict(tm, &test.inputs)?;
    let (m, u) = (s.mean.data(), test.targets.data());
    let err: Vec<f64> = m.iter().zip(u).map(|(a, b)| (a - b).abs()).collect();
    Ok((mse(m, u)?, nmerci(&err, s.std.data())?.value))
}

/// DiverseNO scores for every penalty kind × λ. The λ = 0 model does not
/// depend on the kind, so it is trained once per seed and reported under
/// every kind.
pub fn ablate_diversity(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    kinds: &[Diversity],
    lambdas: &[f64],
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let td = data.train_data()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut zero: Option<TrainedMethod> = None;
        for &kind in kinds {
            for &lambda in lambdas {
                let c = ExperimentConfig {
                    lambda_diverse: Some(lambda),
                    diversity: kind,
                    ..cfg.clone()
                };
                let tm = match (&zero, lambda == 0.0) {
                    (Some(z), true) => z.clone(),
                    _ => train_method(&c, Method::Diverse, seed, &td, None)?,
                };
                if lambda == 0.0 && zero.is_none() {
                    zero = Some(tm.clone());
                }
                let dist = mean_offdiag(&head_distances(&tm.models[0]));
                for &split in &cfg.splits {
                    let (m, n) = point_scores(&tm, data, split)?;
                    rows.push(AblationRow {
                        diversity: kind.to_string(),
                        lambda,
                        seed,
                        split,
                        mse: m,
                        nmerci: n,
                        mean_head_distance: dist,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Widths of the two methods to compare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSweepSpec {
    pub ensemble_widths: Vec<usize>,
    pub diverse_widths: Vec<usize>,
}

/// Total FLOPs of one forward pass of `method` at `width`.
fn method_cost(cfg: &ExperimentConfig, method: Method, width: usize) -> Result<(u64, usize)> {
    let (heads, copies) = match method {
        Method::Ensemble => (1, cfg.ensemble_members),
        Method::Diverse => (cfg.diverse_heads, 1),
        _ => {
            return Err(invalid(format!(
                "cost sweep compares ensemble and diverse, not {method}"
            )))
        }
    };
    let mc = crate::fno::FnoConfig {
        width,
        ..cfg.model_config(heads, 0.0)
    };
    let params = FnoModel::new(mc, 0)?.params.n_params();
    Ok((
        copies as u64 * count_flops(&mc, cfg.nt, cfg.nx),
        copies * params,
    ))
}

/// Width of `method` whose forward FLOPs are closest to `target`.
pub fn matched_width(cfg: &ExperimentConfig, method: Method, target: u64) -> Result<usize> {
    let mut best = (u64::MAX, 1);
    for w in 1..=512 {
        let (f, _) = method_cost(cfg, method, w)?;
        let gap = f.abs_diff(target);
        if gap < best.0 {
            best = (gap, w);
        }
        if f > target {
            break;
        }
    }
    Ok(best.1)
}

/// Train and score ensembles and diverse models at the given widths on
/// every configured split.
pub fn cost_sweep(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    spec: &CostSweepSpec,
) -> Result<Vec<CostRow>> {
    cfg.validate()?;
    let td = data.train_data()?;
    let mut rows = Vec::new();
    let jobs = spec
        .ensemble_widths
        .iter()
        .map(|&w| (Method::Ensemble, w))
        .chain(spec.diverse_widths.iter().map(|&w| (Method::Diverse, w)));
    for (method, width) in jobs {
        let mut c = cfg.clone();
        c.model.width = width;
        let (flops, params) = method_cost(cfg, method, width)?;
        for &seed in &cfg.seeds {
            let tm = train_method(&c, method, seed, &td, None)?;
            for &split in &cfg.splits {
                let (m, n) = point_scores(&tm, data, split)?;
                rows.push(CostRow {
                    method,
                    width,
                    flops,
                    params,
                    seed,
                    split,
                    mse: m,
                    nmerci: n,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::methods::tests::tiny_config;
    use crate::trainer::DiversityKind;

    #[test]
    fn zero_lambda_is_kind_independent() {
        let cfg = tiny_config();
        let data = ExperimentData::build(&cfg).unwrap();
        let td = data.train_data().unwrap();
        let models: Vec<_> = [
            DiversityKind::Weights,
            DiversityKind::Outputs,
            DiversityKind::Gradients,
        ]
        .into_iter()
        .map(|kind| {
            let c = ExperimentConfig {
                lambda_diverse: Some(0.0),
                diversity: Diversity {
                    kind,
                    standardized: true,
                },
                ..cfg.clone()
            };
            train_method(&c, Method::Diverse, 0, &td, None)
                .unwrap()
                .models[0]
                .params
                .clone()
        })
        .collect();
        assert_eq!(models[0], models[1]);
        assert_eq!(models[0], models[2]);
    }

    #[test]
    fn ablation_reports_every_lambda() {
        let cfg = tiny_config();
        let data = ExperimentData::build(&cfg).unwrap();
        let lambdas = [0.0, 1e-2, 1e-1, 1.0, 1e1, 1e2];
        let rows = ablate_diversity(&cfg, &data, &[Diversity::default()], &lambdas).unwrap();
        assert_eq!(rows.len(), 6);
        for (r, l) in rows.iter().zip(lambdas) {
            assert_eq!(r.lambda, l);
            assert!(r.mse.is_finite() && r.nmerci.is_finite());
        }
    }

    #[test]
    fn cost_rows_use_the_flop_formula() {
        let cfg = tiny_config();
        let data = ExperimentData::build(&cfg).unwrap();
        let spec = CostSweepSpec {
            ensemble_widths: vec![2],
            diverse_widths: vec![3],
        };
        let rows = cost_sweep(&cfg, &data, &spec).unwrap();
        assert_eq!(rows.len(), 2);
        let e = crate::fno::FnoConfig {
            width: 2,
            ..cfg.model_config(1, 0.0)
        };
        assert_eq!(rows[0].flops, 2 * count_flops(&e, 8, 8));
        let d = crate::fno::FnoConfig {
            width: 3,
            ..cfg.model_config(3, 0.0)
        };
        assert_eq!(rows[1].flops, count_flops(&d, 8, 8));
    }

    #[test]
    fn shared_trunk_has_fewer_params() {
        let cfg = tiny_config();
        let (_, pe) = method_cost(&cfg, Method::Ensemble, 4).unwrap();
        let c3 = ExperimentConfig {
            diverse_heads: 2,
            ..cfg.clone()
        };
        let (_, pd) = method_cost(&c3, Method::Diverse, 4).unwrap();
        assert!(pd < pe);
    }

    #[test]
    fn matched_width_brackets_target() {
        let cfg = tiny_config();
        let (target, _) = method_cost(&cfg, Method::Ensemble, 4).unwrap();
        let w = matched_width(&cfg, Method::Diverse, target).unwrap();
        let below = method_cost(&cfg, Method::Diverse, w - 1).unwrap().0;
        let above = method_cost(&cfg, Method::Diverse, w + 1).unwrap().0;
        let here = method_cost(&cfg, Method::Diverse, w).unwrap().0;
        assert!(here.abs_diff(target) <= below.abs_diff(target));
        assert!(here.abs_diff(target) <= above.abs_diff(target));
    }
}
