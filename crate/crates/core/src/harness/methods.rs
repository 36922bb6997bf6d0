use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::error::{invalid, Error, Result};
use crate::fno::{load_checkpoint, save_checkpoint, CheckpointMeta, FnoModel};
use crate::metrics::gaussian_nll;
use crate::numerics::Tensor;
use crate::pde_suite::Dataset;
use crate::trainer::{
    evaluate, select_lambda, train, EpochLog, LossKind, TrainConfig, LAMBDA_GRID,
};
use crate::uq::{
    diverse_predict, ensemble_predict, fno_predict, laplace_fit, laplace_predict,
    mc_dropout_predict, variance_predict, LaplacePosterior, Method, PosteriorSummary,
};

const LAPLACE_FILE: &str = "laplace.json";
const LOG_FILE: &str = "train_log.json";

pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    /// Unlabeled inputs for the outputs diversity penalty.
    pub ood_pool: Option<Tensor>,
}

/// Everything needed to produce a predictive summary for one method and seed.
#[derive(Debug, Clone)]
pub struct TrainedMethod {
    pub method: Method,
    pub seed: u64,
    /// One model, or the ensemble members.
    pub models: Vec<FnoModel>,
    pub laplace: Option<LaplacePosterior>,
    pub mc_masks: usize,
    /// Validation MSE of the point prediction, per model.
    pub val_mse: Vec<f64>,
    /// Per-epoch losses of each trained model; empty for a reused base.
    pub logs: Vec<Vec<EpochLog>>,
}

struct Fitted {
    model: FnoModel,
    val_mse: f64,
    log: Vec<EpochLog>,
}

fn fit(model: FnoModel, data: &TrainData, tc: TrainConfig) -> Result<Fitted> {
    let out = train(model, data.train, data.val, &tc, data.ood_pool.as_ref())?;
    Ok(Fitted {
        model: out.model,
        val_mse: out.best_val_mse,
        log: out.log,
    })
}

/// Pick the prior precision root by validation NLL.
pub fn fit_laplace_selected(
    model: &FnoModel,
    train_set: &Dataset,
    val: &Dataset,
    alphas: &[f64],
) -> Result<LaplacePosterior> {
    let mut best: Option<(f64, LaplacePosterior)> = None;
    for &a in alphas {
        let post = laplace_fit(model, train_set, a)?;
        let s = laplace_predict(model, &post, &val.inputs)?;
        let nll = gaussian_nll(s.mean.data(), s.std.data(), val.targets.data())?;
        if best.as_ref().is_none_or(|(b, _)| nll < *b) {
            best = Some((nll, post));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| invalid("empty Laplace prior grid"))
}

/// Train `method` for one seed. `base` may supply an already trained plain
/// FNO of the same seed, which the Laplace method then reuses.
pub fn train_method(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    data: &TrainData,
    base: Option<&FnoModel>,
) -> Result<TrainedMethod> {
    let tc = cfg.train_config(method, seed);
    let single = |n_heads: usize, p: f64, tc: TrainConfig| -> Result<Fitted> {
        fit(FnoModel::new(cfg.model_config(n_heads, p), seed)?, data, tc)
    };
    let (fitted, laplace) = match method {
        Method::Fno => (
            vec![single(
                1,
                0.0,
                TrainConfig {
                    loss: LossKind::RelL2,
                    ..tc
                },
            )?],
            None,
        ),
        Method::Ensemble => {
            let mut members = Vec::with_capacity(cfg.ensemble_members);
            for k in 0..cfg.ensemble_members as u64 {
                let s = seed * 1000 + k;
                let m = FnoModel::new(cfg.model_config(1, 0.0), s)?;
                members.push(fit(
                    m,
                    data,
                    TrainConfig {
                        seed: s,
                        loss: LossKind::RelL2,
                        ..tc
                    },
                )?);
            }
            (members, None)
        }
        Method::Diverse => {
            let lambda = match cfg.lambda_diverse {
                Some(l) => l,
                None => {
                    let sweep = diverse_lambda_sweep(cfg, seed, data, &LAMBDA_GRID)?;
                    let pairs: Vec<(f64, f64)> =
                        sweep.iter().map(|(l, t)| (*l, t.val_mse[0])).collect();
                    let chosen = select_lambda(&pairs)?;
                    let (_, tm) = sweep
                        .into_iter()
                        .find(|(l, _)| *l == chosen)
                        .expect("selected from sweep");
                    return Ok(tm);
                }
            };
            let f = single(
                cfg.diverse_heads,
                0.0,
                TrainConfig {
                    loss: LossKind::DiverseRelL2,
                    lambda_diverse: lambda,
                    diversity: cfg.diversity,
                    ..tc
                },
            )?;
            (vec![f], None)
        }
        Method::Variance => (
            vec![single(
                2,
                0.0,
                TrainConfig {
                    loss: LossKind::Nll,
                    ..tc
                },
            )?],
            None,
        ),
        Method::McDropout => (
            vec![single(
                1,
                cfg.dropout_p,
                TrainConfig {
                    loss: LossKind::RelL2,
                    ..tc
                },
            )?],
            None,
        ),
        Method::Bayesian => {
            let f = match base {
                Some(b) => Fitted {
                    model: b.clone(),
                    val_mse: evaluate(b, data.val, LossKind::RelL2, 16)?.1,
                    log: Vec::new(),
                },
                None => single(
                    1,
                    0.0,
                    TrainConfig {
                        loss: LossKind::RelL2,
                        ..tc
                    },
                )?,
            };
            let post = fit_laplace_selected(&f.model, data.train, data.val, &cfg.laplace_alphas)?;
            (vec![f], Some(post))
        }
    };
    let val_mse = fitted.iter().map(|f| f.val_mse).collect();
    let (models, logs) = fitted.into_iter().map(|f| (f.model, f.log)).unzip();
    Ok(TrainedMethod {
        method,
        seed,
        models,
        laplace,
        mc_masks: cfg.mc_masks,
        val_mse,
        logs,
    })
}

/// A diverse model per λ, for selection and diagnostics.
pub fn diverse_lambda_sweep(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &TrainData,
    lambdas: &[f64],
) -> Result<Vec<(f64, TrainedMethod)>> {
    lambdas
        .iter()
        .map(|&l| {
            let c = ExperimentConfig {
                lambda_diverse: Some(l),
                ..cfg.clone()
            };
            train_method(&c, Method::Diverse, seed, data, None).map(|tm| (l, tm))
        })
        .collect()
}

/// Predictive summary on `inputs` (`[N, nt, nx, C]`).
pub fn predict(tm: &TrainedMethod, inputs: &Tensor) -> Result<PosteriorSummary> {
    let first = tm
        .models
        .first()
        .ok_or_else(|| invalid("trained method has no models"))?;
    let mut s = match tm.method {
        Method::Fno => fno_predict(first, inputs)?,
        Method::Ensemble => ensemble_predict(&tm.models, inputs)?,
        Method::Diverse => diverse_predict(first, inputs)?,
        Method::Variance => variance_predict(first, inputs)?,
        Method::McDropout => mc_dropout_predict(first, inputs, tm.mc_masks, tm.seed)?,
        Method::Bayesian => {
            let post = tm
                .laplace
                .as_ref()
                .ok_or_else(|| invalid("Laplace method without a fitted posterior"))?;
            laplace_predict(first, post, inputs)?
        }
    };
    s.meta.seeds = vec![tm.seed];
    Ok(s)
}

#[derive(Serialize, Deserialize)]
struct MethodManifest {
    method: Method,
    seed: u64,
    members: usize,
    mc_masks: usize,
    val_mse: Vec<f64>,
}

/// `dir/manifest.json`, one checkpoint per model under `dir/member{k}`, and
/// `dir/laplace.json` when present.
pub fn save_trained(dir: &Path, tm: &TrainedMethod, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, m) in tm.models.iter().enumerate() {
        let meta = CheckpointMeta {
            config: m.config,
            seed: tm.seed,
            task: cfg.task,
            method: tm.method.name().into(),
            epoch: 0,
            val_mse: tm.val_mse.get(k).copied().unwrap_or_default(),
        };
        save_checkpoint(&dir.join(format!("member{k}")), m, &meta)?;
    }
    if let Some(p) = &tm.laplace {
        fs::write(dir.join(LAPLACE_FILE), serde_json::to_vec(p)?)?;
    }
    let man = MethodManifest {
        method: tm.method,
        seed: tm.seed,
        members: tm.models.len(),
        mc_masks: tm.mc_masks,
        val_mse: tm.val_mse.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&man)?)?;
    fs::write(dir.join(LOG_FILE), serde_json::to_vec_pretty(&tm.logs)?)?;
    Ok(())
}

pub fn load_trained(dir: &Path) -> Result<TrainedMethod> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let man: MethodManifest = serde_json::from_slice(&fs::read(&path)?)?;
    let models = (0..man.members)
        .map(|k| load_checkpoint(&dir.join(format!("member{k}"))).map(|(m, _)| m))
        .collect::<Result<_>>()?;
    let log_path = dir.join(LOG_FILE);
    let logs = if log_path.exists() {
        serde_json::from_slice(&fs::read(&log_path)?)?
    } else {
        Vec::new()
    };
    let lp = dir.join(LAPLACE_FILE);
    let laplace = if man.method == Method::Bayesian {
        if !lp.exists() {
            return Err(Error::MissingArtifact(lp));
        }
        Some(serde_json::from_slice(&fs::read(&lp)?)?)
    } else {
        None
    };
    Ok(TrainedMethod {
        method: man.method,
        seed: man.seed,
        models,
        laplace,
        mc_masks: man.mc_masks,
        val_mse: man.val_mse,
        logs,
    })
}
