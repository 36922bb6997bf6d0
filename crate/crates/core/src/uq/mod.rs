//! Predictive mean and standard deviation from each uncertainty method.

mod laplace;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fno::FnoModel;
use crate::numerics::io::{read_tensor, write_tensor, Dtype, TensorMeta};
use crate::numerics::Tensor;

pub use laplace::{laplace_fit, laplace_predict, LaplacePosterior};

/// Floor applied to the variance model's standard deviation.
pub const VARIANCE_STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_MC_MASKS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fno,
    Ensemble,
    Diverse,
    Variance,
    McDropout,
    Bayesian,
}

impl Method {
    pub const UQ: [Method; 5] = [
        Self::Ensemble,
        Self::Diverse,
        Self::Variance,
        Self::McDropout,
        Self::Bayesian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fno => "fno",
            Self::Ensemble => "ensemble",
            Self::Diverse => "diverse",
            Self::Variance => "variance",
            Self::McDropout => "mcdropout",
            Self::Bayesian => "bayesian",
        }
    }

    /// Name used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Self::Fno => "FNO",
            Self::Ensemble => "EnsembleNO",
            Self::Diverse => "DiverseNO",
            Self::Variance => "VarianceNO",
            Self::McDropout => "MC-DropoutNO",
            Self::Bayesian => "BayesianNO",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            Self::Fno,
            Self::Ensemble,
            Self::Diverse,
            Self::Variance,
            Self::McDropout,
            Self::Bayesian,
        ]
        .into_iter()
        .find(|m| m.name().eq_ignore_ascii_case(s) || m.label().eq_ignore_ascii_case(s))
        .ok_or_else(|| invalid(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryMeta {
    pub seeds: Vec<u64>,
    pub members: Option<usize>,
    pub heads: Option<usize>,
    pub dropout_p: Option<f64>,
    pub alpha: Option<f64>,
}

/// Per-point predictive mean and standard deviation. The leading axis
/// indexes test samples: `mean, std: [N, nt, nx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub mean: Tensor,
    pub std: Tensor,
    pub method: Method,
    pub meta: SummaryMeta,
}

#[derive(Serialize, Deserialize)]
struct SummaryFile {
    method: Method,
    meta: SummaryMeta,
}

impl PosteriorSummary {
    pub fn validate(&self) -> Result<()> {
        self.mean
            .expect_same_shape("posterior summary", &self.std)?;
        if !self.mean.all_finite()
            || !self.std.all_finite()
            || self.std.data().iter().any(|&s| s < 0.0)
        {
            return Err(invalid(
                "posterior summary has non-finite entries or negative std",
            ));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.mean.shape()[0]
    }

    /// Writes `<stem>_mean.bin`, `<stem>_std.bin` and `<stem>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (m, s, j) = Self::paths(path);
        if let Some(dir) = j.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let meta = |name: &str| TensorMeta {
            name: name.into(),
            dtype: Dtype::Float64,
            role: "posterior".into(),
        };
        write_tensor(&m, &self.mean, &meta("mean"))?;
        write_tensor(&s, &self.std, &meta("std"))?;
        let f = SummaryFile {
            method: self.method,
            meta: self.meta.clone(),
        };
        std::fs::write(j, serde_json::to_vec_pretty(&f)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, s, j) = Self::paths(path);
        if !j.exists() {
            return Err(Error::MissingArtifact(j));
        }
        let f: SummaryFile = serde_json::from_slice(&std::fs::read(&j)?)?;
        let out = Self {
            mean: read_tensor(&m)?,
            std: read_tensor(&s)?,
            method: f.method,
            meta: f.meta,
        };
        out.validate()?;
        Ok(out)
    }

    fn paths(path: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
        let stem = path.with_extension("");
        let s = stem.to_string_lossy();
        (
            format!("{s}_mean.bin").into(),
            format!("{s}_std.bin").into(),
            format!("{s}.json").into(),
        )
    }
}

/// Pointwise sample mean and unbiased standard deviation across `samples`
/// (all the same shape), accumulated in a fixed order.
pub fn sample_moments(samples: &[Tensor]) -> Result<(Tensor, Tensor)> {
    let k = samples.len();
    if k < 2 {
        return Err(invalid(format!(
            "need at least 2 predictive samples, got {k}"
        )));
    }
    for s in &samples[1..] {
        samples[0].expect_same_shape("sample_moments", s)?;
    }
    let n = samples[0].len();
    let mut mean = vec![0.0; n];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let mut var = vec![0.0; n];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s.data()).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let shape = samples[0].shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), mean)?,
        Tensor::new(
            shape,
            var.into_iter()
                .map(|v| (v / (k - 1) as f64).sqrt())
                .collect(),
        )?,
    ))
}

/// `[N, M, nt, nx]` → M tensors of `[N, nt, nx]`.
fn split_heads(out: &Tensor) -> Vec<Tensor> {
    let s = out.shape();
    let (n, m, p) = (s[0], s[1], s[2] * s[3]);
    (0..m)
        .map(|h| {
            Tensor::from_fn(&[n, s[2], s[3]], |k| {
                let (i, q) = (k / p, k % p);
                out.data()[(i * m + h) * p + q]
            })
        })
        .collect()
}

/// Inference in chunks to bound tape memory.
fn predict_chunked(
    model: &FnoModel,
    inputs: &Tensor,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    let n = inputs.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(16) {
        let items: Vec<Tensor> = (start..(start + 16).min(n))
            .map(|i| inputs.outer(i))
            .collect();
        parts.push(model.predict_batch(&Tensor::stack(&items)?, rng.as_deref_mut())?);
    }
    let mut shape = parts[0].shape().to_vec();
    shape[0] = n;
    Tensor::new(
        shape,
        parts.into_iter().flat_map(Tensor::into_data).collect(),
    )
}

/// Point prediction of a plain single-head model (zero std).
pub fn fno_predict(model: &FnoModel, inputs: &Tensor) -> Result<PosteriorSummary> {
    let out = predict_chunked(model, inputs, None)?;
    let mean = split_heads(&out).swap_remove(0);
    Ok(PosteriorSummary {
        std: Tensor::zeros(mean.shape()),
        mean,
        method: Method::Fno,
        meta: SummaryMeta::default(),
    })
}

pub fn ensemble_predict(models: &[FnoModel], inputs: &Tensor) -> Result<PosteriorSummary> {
    if models.len() < 2 {
        return Err(invalid(format!(
            "an ensemble needs K >= 2 members, got {}",
            models.len()
        )));
    }
    let preds: Vec<Tensor> = models
        .iter()
        .map(|m| predict_chunked(m, inputs, None).map(|o| split_heads(&o).swap_remove(0)))
        .collect::<Result<_>>()?;
    let (mean, std) = sample_moments(&preds)?;
    Ok(PosteriorSummary {
        mean,
        std,
        method: Method::Ensemble,
        meta: SummaryMeta {
            members: Some(models.len()),
            ..SummaryMeta::default()
        },
    })
}

pub fn diverse_predict(model: &FnoModel, inputs: &Tensor) -> Result<PosteriorSummary> {
    let m = model.config.n_heads;
    if m < 2 {
        return Err(invalid(format!(
            "a multi-head summary needs M >= 2 heads, got {m}"
        )));
    }
    let (mean, std) = sample_moments(&split_heads(&predict_chunked(model, inputs, None)?))?;
    Ok(PosteriorSummary {
        mean,
        std,
        method: Method::Diverse,
        meta: SummaryMeta {
            heads: Some(m),
            ..SummaryMeta::default()
        },
    })
}

pub fn variance_predict(model: &FnoModel, inputs: &Tensor) -> Result<PosteriorSummary> {
    if model.config.n_heads != 2 {
        return Err(invalid(
            "the variance model has exactly two heads (mean, log-variance)",
        ));
    }
    let mut heads = split_heads(&predict_chunked(model, inputs, None)?);
    let lv = heads.pop().expect("two heads");
    let mean = heads.pop().expect("two heads");
    Ok(PosteriorSummary {
        std: lv.map(|v| (0.5 * v).exp().max(VARIANCE_STD_FLOOR)),
        mean,
        method: Method::Variance,
        meta: SummaryMeta::default(),
    })
}

pub fn mc_dropout_predict(
    model: &FnoModel,
    inputs: &Tensor,
    n_masks: usize,
    seed: u64,
) -> Result<PosteriorSummary> {
    let p = model.config.dropout_p;
    if p <= 0.0 {
        return Err(invalid(
            "MC dropout needs a model trained with dropout_p > 0",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let passes: Vec<Tensor> = (0..n_masks)
        .map(|_| {
            predict_chunked(model, inputs, Some(&mut rng)).map(|o| split_heads(&o).swap_remove(0))
        })
        .collect::<Result<_>>()?;
    let (mean, std) = sample_moments(&passes)?;
    Ok(PosteriorSummary {
        mean,
        std,
        method: Method::McDropout,
        meta: SummaryMeta {
            seeds: vec![seed],
            members: Some(n_masks),
            dropout_p: Some(p),
            ..SummaryMeta::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fno::FnoConfig;

    fn cfg(n_heads: usize, dropout_p: f64) -> FnoConfig {
        FnoConfig {
            width: 4,
            hidden: 3,
            n_layers: 2,
            modes_t: 2,
            modes_x: 2,
            nt: 8,
            nx: 8,
            n_heads,
            dropout_p,
            ..FnoConfig::default()
        }
    }

    fn inputs(n: usize) -> Tensor {
        Tensor::from_fn(&[n, 8, 8, 3], |k| ((k * 37) % 19) as f64 / 19.0)
    }

    #[test]
    fn two_sample_formula() {
        let p = Tensor::from_vec(vec![1.0, 4.0]);
        let q = Tensor::from_vec(vec![3.0, -2.0]);
        let (m, s) = sample_moments(&[p, q]).unwrap();
        assert_eq!(m.data(), &[2.0, 1.0]);
        assert!((s.data()[0] - 2.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((s.data()[1] - 6.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identical_members_have_zero_std() {
        let m = FnoModel::new(cfg(1, 0.0), 0).unwrap();
        let s = ensemble_predict(&[m.clone(), m.clone(), m], &inputs(2)).unwrap();
        assert!(s.std.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.mean.shape(), &[2, 8, 8]);
    }

    #[test]
    fn single_member_is_rejected() {
        let m = FnoModel::new(cfg(1, 0.0), 0).unwrap();
        assert!(ensemble_predict(&[m], &inputs(1)).is_err());
        assert!(diverse_predict(&FnoModel::new(cfg(1, 0.0), 0).unwrap(), &inputs(1)).is_err());
    }

    #[test]
    fn head_permutation_leaves_summary_unchanged() {
        let m = FnoModel::new(cfg(4, 0.0), 2).unwrap();
        let mut p = m.clone();
        p.params.heads.reverse();
        let (a, b) = (
            diverse_predict(&m, &inputs(2)).unwrap(),
            diverse_predict(&p, &inputs(2)).unwrap(),
        );
        for (x, y) in a.std.data().iter().zip(b.std.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn variance_head_zero_logvar_is_unit_std() {
        let mut m = FnoModel::new(cfg(2, 0.0), 0).unwrap();
        m.params.heads[1] = crate::fno::HeadParams::zeros(&m.config);
        let s = variance_predict(&m, &inputs(1)).unwrap();
        assert!(s.std.data().iter().all(|&v| v == 1.0));
        m.params.heads[1].b2 = Tensor::from_vec(vec![2.0 * (1e-7f64).ln()]);
        let s = variance_predict(&m, &inputs(1)).unwrap();
        assert!(s.std.data().iter().all(|&v| v == VARIANCE_STD_FLOOR));
    }

    #[test]
    fn mc_dropout_reproducible_and_requires_dropout() {
        let m = FnoModel::new(cfg(1, 0.25), 0).unwrap();
        let a = mc_dropout_predict(&m, &inputs(1), 10, 7).unwrap();
        assert_eq!(a, mc_dropout_predict(&m, &inputs(1), 10, 7).unwrap());
        assert!(a.std.max_abs() > 0.0);
        let m0 = FnoModel::new(cfg(1, 0.0), 0).unwrap();
        assert!(mc_dropout_predict(&m0, &inputs(1), 10, 7).is_err());
    }

    #[test]
    fn summary_round_trip() {
        let m = FnoModel::new(cfg(3, 0.0), 0).unwrap();
        let s = diverse_predict(&m, &inputs(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ood_large.bin");
        s.save(&path).unwrap();
        assert_eq!(PosteriorSummary::load(&path).unwrap(), s);
    }
}
