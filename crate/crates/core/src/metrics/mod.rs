//! Point and probabilistic scores for Gaussian predictive fields.
//!
//! Every score pools all grid points of all samples. Percentiles use linear
//! interpolation between order statistics (numpy's default).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::constraint::ConstraintSystem;
use crate::error::{invalid, Result};
use crate::numerics::Tensor;
use crate::pde_suite::{PdeFamily, Split};
use crate::uq::{Method, PosteriorSummary};

pub const STD_FLOOR: f64 = 1e-12;
pub const NMERCI_PERCENTILE: f64 = 0.95;
pub const RMSCE_LEVELS: usize = 100;

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(invalid(format!(
            "{what}: {a} predictions against {b} truths"
        )));
    }
    if a == 0 {
        return Err(invalid(format!("{what}: no points")));
    }
    Ok(())
}

/// Linear-interpolation percentile of unsorted data, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn mse(mean: &[f64], truth: &[f64]) -> Result<f64> {
    check_len("mse", mean.len(), truth.len())?;
    Ok(mean
        .iter()
        .zip(truth)
        .map(|(m, u)| (m - u).powi(2))
        .sum::<f64>()
        / mean.len() as f64)
}

/// Summed Gaussian negative log density.
pub fn gaussian_nll(mean: &[f64], std: &[f64], truth: &[f64]) -> Result<f64> {
    check_len("nll", mean.len(), truth.len())?;
    check_len("nll", std.len(), truth.len())?;
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    Ok(mean
        .iter()
        .zip(std)
        .zip(truth)
        .map(|((m, s), u)| {
            let s = s.max(STD_FLOOR);
            half_ln_2pi + s.ln() + 0.5 * ((u - m) / s).powi(2)
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NMerci {
    pub value: f64,
    /// Set when every absolute error is equal, so the score is undefined
    /// and reported as 0.
    pub degenerate: bool,
}

/// `((1/N) Σ τσ_i − MAE) / (max|e| − MAE)` with `τ` the 95th percentile of
/// `|e_i|/σ_i`.
pub fn nmerci(abs_errors: &[f64], stds: &[f64]) -> Result<NMerci> {
    check_len("n-MeRCI", abs_errors.len(), stds.len())?;
    let n = abs_errors.len() as f64;
    let mae = abs_errors.iter().sum::<f64>() / n;
    let max = abs_errors.iter().copied().fold(0.0, f64::max);
    if max - mae <= 1e-12 * max {
        return Ok(NMerci {
            value: 0.0,
            degenerate: true,
        });
    }
    let floored: Vec<f64> = stds.iter().map(|s| s.max(STD_FLOOR)).collect();
    let ratios: Vec<f64> = abs_errors
        .iter()
        .zip(&floored)
        .map(|(e, s)| e / s)
        .collect();
    let tau = percentile(&ratios, NMERCI_PERCENTILE);
    let mrci = tau * floored.iter().sum::<f64>() / n;
    Ok(NMerci {
        value: (mrci - mae) / (max - mae),
        degenerate: false,
    })
}

/// Central coverage levels `(j − ½)/100`, `j = 1..100`.
pub fn rmsce_levels() -> Vec<f64> {
    (1..=RMSCE_LEVELS)
        .map(|j| (j as f64 - 0.5) / RMSCE_LEVELS as f64)
        .collect()
}

/// Root mean squared gap between nominal and empirical coverage of the
/// intervals `μ ± z_{(1+p)/2} σ`.
pub fn rmsce(mean: &[f64], std: &[f64], truth: &[f64]) -> Result<f64> {
    check_len("rmsce", mean.len(), truth.len())?;
    check_len("rmsce", std.len(), truth.len())?;
    let mut z: Vec<f64> = mean
        .iter()
        .zip(std)
        .zip(truth)
        .map(|((m, s), u)| (u - m).abs() / s.max(STD_FLOOR))
        .collect();
    z.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    let n = z.len() as f64;
    let levels = rmsce_levels();
    let sq: f64 = levels
        .iter()
        .map(|&p| {
            let half = normal.inverse_cdf(0.5 * (1.0 + p));
            let covered = z.partition_point(|&v| v <= half) as f64 / n;
            (p - covered).powi(2)
        })
        .sum();
    Ok((sq / levels.len() as f64).sqrt())
}

/// Closed-form CRPS of `N(μ, σ²)` at `u`.
pub fn crps_point(mean: f64, std: f64, truth: f64) -> f64 {
    let s = std.max(STD_FLOOR);
    let z = (truth - mean) / s;
    let cdf = 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    s * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::f64::consts::PI.sqrt())
}

pub fn crps_gaussian(mean: &[f64], std: &[f64], truth: &[f64]) -> Result<f64> {
    check_len("crps", mean.len(), truth.len())?;
    check_len("crps", std.len(), truth.len())?;
    Ok(mean
        .iter()
        .zip(std)
        .zip(truth)
        .map(|((m, s), u)| crps_point(*m, *s, *u))
        .sum::<f64>()
        / mean.len() as f64)
}

/// Mean over constrained slices of `|G_row·u − b_row|` for one `[nt, nx]` field.
pub fn conservation_error(field: &[f64], cs: &ConstraintSystem) -> Result<f64> {
    check_len("conservation error", field.len(), cs.n_points())?;
    let r = cs.residual(field);
    Ok(r.iter().map(|v| v.abs()).sum::<f64>() / r.len().max(1) as f64)
}

/// Conservation error of every sample mean, averaged over samples.
pub fn summary_conservation_error(mean: &Tensor, constraints: &[ConstraintSystem]) -> Result<f64> {
    let n = mean.shape()[0];
    if constraints.len() != n {
        return Err(invalid(format!(
            "{} constraint systems for {n} samples",
            constraints.len()
        )));
    }
    let p = mean.len() / n.max(1);
    let mut total = 0.0;
    for (i, cs) in constraints.iter().enumerate() {
        total += conservation_error(&mean.data()[i * p..(i + 1) * p], cs)?;
    }
    Ok(total / n.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: Method,
    pub task: PdeFamily,
    pub split: Split,
    pub seed: u64,
    pub mse: f64,
    pub nll: f64,
    pub nmerci: f64,
    pub nmerci_degenerate: bool,
    pub rmsce: f64,
    pub crps: f64,
    /// `None` when no constraint was supplied.
    pub conservation_error: Option<f64>,
    pub n_points: usize,
}

impl MetricReport {
    pub fn all_finite(&self) -> bool {
        [self.mse, self.nll, self.nmerci, self.rmsce, self.crps]
            .iter()
            .chain(self.conservation_error.as_ref())
            .all(|v| v.is_finite())
    }
}

/// Score a summary against truths of the same `[N, nt, nx]` shape.
pub fn score(
    summary: &PosteriorSummary,
    truths: &Tensor,
    constraints: Option<&[ConstraintSystem]>,
    task: PdeFamily,
    split: Split,
    seed: u64,
) -> Result<MetricReport> {
    summary.validate()?;
    summary.mean.expect_same_shape("score", truths)?;
    let (m, s, u) = (summary.mean.data(), summary.std.data(), truths.data());
    let abs_err: Vec<f64> = m.iter().zip(u).map(|(a, b)| (a - b).abs()).collect();
    let nm = nmerci(&abs_err, s)?;
    Ok(MetricReport {
        method: summary.method,
        task,
        split,
        seed,
        mse: mse(m, u)?,
        nll: gaussian_nll(m, s, u)?,
        nmerci: nm.value,
        nmerci_degenerate: nm.degenerate,
        rmsce: rmsce(m, s, u)?,
        crps: crps_gaussian(m, s, u)?,
        conservation_error: constraints
            .map(|c| summary_conservation_error(&summary.mean, c))
            .transpose()?,
        n_points: m.len(),
    })
}
