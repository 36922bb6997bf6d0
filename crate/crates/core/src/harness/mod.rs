//! End-to-end pipelines: data generation, per-method training and
//! prediction, constrained correction, scoring, diagnostics and reports.

mod diversity;
mod experiment;
mod methods;
mod report;
mod sweeps;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::fno::FnoConfig;
use crate::pde_suite::{build_dataset, Dataset, PdeFamily, PdeTask, Split};
use crate::trainer::{Diversity, TrainConfig};
use crate::uq::Method;

pub use diversity::{
    coefficient_of_variation, diversity_report, head_distances, write_diversity_report,
    DiversityReport, LayerCov,
};
pub use experiment::{
    constraints_for, evaluate_trained, mse_ratio, plan, run_experiment, ExperimentOutput, Job,
    Provenance, RatioRow, ResultRow, Stage,
};
pub use methods::{
    diverse_lambda_sweep, fit_laplace_selected, load_trained, predict, save_trained, train_method,
    TrainData, TrainedMethod,
};
pub use report::{aggregate_csv, gnuplot_stub, ratio_csv, rows_csv};
pub use sweeps::{
    ablate_diversity, cost_sweep, matched_width, AblationRow, CostRow, CostSweepSpec,
};

pub const DATA_DIR_ENV: &str = "OODNO_DATA_DIR";
pub const LAPLACE_ALPHAS: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: PdeFamily,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Test splits to score.
    pub splits: Vec<Split>,
    pub nx: usize,
    pub nt: usize,
    /// Labeled in-range samples, before the validation hold-out.
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    /// Every `val_stride`-th sample (ranked by parameter) is held out.
    pub val_stride: usize,
    /// Grid dimensions and head count are overridden per method.
    pub model: FnoConfig,
    pub train: TrainConfig,
    /// Per-method learning rates overriding `train.lr`.
    pub lr_by_method: BTreeMap<Method, f64>,
    pub ensemble_members: usize,
    pub diverse_heads: usize,
    /// `None` selects λ per seed from the standard grid by validation MSE.
    pub lambda_diverse: Option<f64>,
    pub diversity: Diversity,
    pub dropout_p: f64,
    pub mc_masks: usize,
    pub laplace_alphas: Vec<f64>,
    pub probconserv: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: PdeFamily::Heat,
            methods: Method::UQ.to_vec(),
            seeds: (0..5).collect(),
            splits: Split::OOD.to_vec(),
            nx: 64,
            nt: 64,
            n_train: 400,
            n_test: 50,
            data_seed: 0,
            val_stride: 5,
            model: FnoConfig::default(),
            train: TrainConfig::default(),
            lr_by_method: BTreeMap::new(),
            ensemble_members: 10,
            diverse_heads: 10,
            lambda_diverse: None,
            diversity: Diversity::default(),
            dropout_p: 0.1,
            mc_masks: crate::uq::DEFAULT_MC_MASKS,
            laplace_alphas: LAPLACE_ALPHAS.to_vec(),
            probconserv: true,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self =
            serde_json::from_slice(&std::fs::read(path)?).map_err(|e| crate::Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(invalid("at least one method is required"));
        }
        if self.splits.is_empty() {
            return Err(invalid("at least one test split is required"));
        }
        if self.splits.contains(&Split::Train) {
            return Err(invalid("the training split cannot be a test split"));
        }
        if self.n_train < self.val_stride || self.val_stride < 2 {
            return Err(invalid(
                "need val_stride >= 2 and at least val_stride training samples",
            ));
        }
        if self.methods.contains(&Method::Ensemble) && self.ensemble_members < 2 {
            return Err(invalid("an ensemble needs at least two members"));
        }
        if self.methods.contains(&Method::Diverse) && self.diverse_heads < 2 {
            return Err(invalid("a diverse model needs at least two heads"));
        }
        if self.methods.contains(&Method::McDropout)
            && !(self.dropout_p > 0.0 && self.dropout_p < 1.0)
        {
            return Err(invalid("MC dropout needs 0 < dropout_p < 1"));
        }
        if self.laplace_alphas.is_empty() || self.laplace_alphas.iter().any(|&a| !(a > 0.0)) {
            return Err(invalid("Laplace prior grid must be nonempty and positive"));
        }
        self.model_config(1, 0.0).validate()
    }

    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            lr: self
                .lr_by_method
                .get(&method)
                .copied()
                .unwrap_or(self.train.lr),
            ..self.train
        }
    }

    pub fn pde_task(&self) -> PdeTask {
        PdeTask::with_grid(self.task, self.nx, self.nt)
    }

    /// The configured architecture on this grid with `n_heads` heads.
    pub fn model_config(&self, n_heads: usize, dropout_p: f64) -> FnoConfig {
        FnoConfig {
            nx: self.nx,
            nt: self.nt,
            n_heads,
            dropout_p,
            ..self.model
        }
    }

    /// sha256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&bytes)
    }

    pub fn data_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}_{}x{}", self.task, self.nt, self.nx))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `$OODNO_DATA_DIR`, falling back to `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn split_seed(cfg: &ExperimentConfig, split: Split) -> u64 {
    let k = Split::ALL.iter().position(|&s| s == split).unwrap_or(0) as u64;
    cfg.data_seed.wrapping_mul(31).wrapping_add(k)
}

/// Build and save the training set and every configured test split under
/// [`ExperimentConfig::data_dir`].
pub fn generate_data(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<PathBuf>> {
    generate_data_in(cfg, &cfg.data_dir(root))
}

/// [`generate_data`] into an explicit directory.
pub fn generate_data_in(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let task = cfg.pde_task();
    let mut written = Vec::new();
    for split in std::iter::once(Split::Train).chain(cfg.splits.iter().copied()) {
        let n = if split == Split::Train {
            cfg.n_train
        } else {
            cfg.n_test
        };
        let ds = build_dataset(&task, split, n, split_seed(cfg, split))?;
        ds.save(dir)?;
        written.push(Dataset::paths(dir, split).2);
    }
    Ok(written)
}

/// Datasets of one experiment, loaded from disk or built in memory.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub val: Dataset,
    pub tests: Vec<Dataset>,
}

impl ExperimentData {
    pub fn load(cfg: &ExperimentConfig, root: &Path) -> Result<Self> {
        let dir = cfg.data_dir(root);
        let full = Dataset::load(&dir, Split::Train)?;
        let tests = cfg
            .splits
            .iter()
            .map(|&s| Dataset::load(&dir, s))
            .collect::<Result<_>>()?;
        Self::assemble(cfg, full, tests)
    }

    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let task = cfg.pde_task();
        let full = build_dataset(
            &task,
            Split::Train,
            cfg.n_train,
            split_seed(cfg, Split::Train),
        )?;
        let tests = cfg
            .splits
            .iter()
            .map(|&s| build_dataset(&task, s, cfg.n_test, split_seed(cfg, s)))
            .collect::<Result<_>>()?;
        Self::assemble(cfg, full, tests)
    }

    fn assemble(cfg: &ExperimentConfig, full: Dataset, tests: Vec<Dataset>) -> Result<Self> {
        if full.family != cfg.task || full.grid.nx != cfg.nx || full.grid.nt != cfg.nt {
            return Err(invalid(format!(
                "stored training data is {} on {}x{}, config asks for {} on {}x{}",
                full.family, full.grid.nt, full.grid.nx, cfg.task, cfg.nt, cfg.nx
            )));
        }
        let (train, val) = full.split_validation(cfg.val_stride, cfg.data_seed)?;
        Ok(Self { train, val, tests })
    }

    pub fn test(&self, split: Split) -> Result<&Dataset> {
        self.tests
            .iter()
            .find(|d| d.split == split)
            .ok_or_else(|| invalid(format!("no {split} test data loaded")))
    }

    /// Unlabeled inputs from every test split, for the outputs penalty.
    pub fn ood_pool(&self) -> Result<crate::Tensor> {
        let parts: Vec<crate::Tensor> = self
            .tests
            .iter()
            .flat_map(|d| (0..d.len()).map(|i| d.input(i)))
            .collect();
        crate::Tensor::stack(&parts)
    }

    pub fn train_data(&self) -> Result<TrainData<'_>> {
        Ok(TrainData {
            train: &self.train,
            val: &self.val,
            ood_pool: Some(self.ood_pool()?),
        })
    }
}
