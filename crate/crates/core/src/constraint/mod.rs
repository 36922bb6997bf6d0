//! Linear conservation constraints `G u = b` and the closed-form
//! constrained update of a Gaussian predictive field.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::linalg::Cholesky;
use crate::numerics::Tensor;
use crate::pde_suite::{mass_target, PdeTask};
use crate::uq::PosteriorSummary;

pub const SIGMA_G: f64 = 1e-9;

/// `G u = b + σ_G ε` over a flattened `[nt, nx]` field. Each row is a
/// trapezoid rule over one time slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSystem {
    pub nt: usize,
    pub nx: usize,
    /// Time-slice index of each row.
    pub rows: Vec<usize>,
    /// Quadrature weights `Δx·[½, 1, …, 1, ½]`, shared by all rows.
    pub weights: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma_g: f64,
}

impl ConstraintSystem {
    pub fn n_constraints(&self) -> usize {
        self.rows.len()
    }

    pub fn n_points(&self) -> usize {
        self.nt * self.nx
    }

    /// Dense `G` as `[n_constraints, nt·nx]`.
    pub fn dense_g(&self) -> Tensor {
        let n = self.n_points();
        let mut g = Tensor::zeros(&[self.rows.len(), n]);
        for (r, &j) in self.rows.iter().enumerate() {
            g.data_mut()[r * n + j * self.nx..r * n + (j + 1) * self.nx]
                .copy_from_slice(&self.weights);
        }
        g
    }

    /// `G u` for one field `[nt, nx]` (or its flattening).
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|&j| {
                u[j * self.nx..(j + 1) * self.nx]
                    .iter()
                    .zip(&self.weights)
                    .map(|(a, w)| a * w)
                    .sum()
            })
            .collect()
    }

    /// `G u − b`.
    pub fn residual(&self, u: &[f64]) -> Vec<f64> {
        self.apply(u)
            .iter()
            .zip(&self.b)
            .map(|(g, b)| g - b)
            .collect()
    }
}

fn slice_index(task: &PdeTask, t: f64) -> Result<usize> {
    let g = task.grid;
    let s = t / g.dt();
    let j = s.round();
    if (s - j).abs() > 1e-9 || j < 0.0 || j as usize >= g.nt {
        return Err(invalid(format!(
            "time {t} is not on the grid (dt = {})",
            g.dt()
        )));
    }
    Ok(j as usize)
}

/// One mass constraint per requested time, which must be grid times.
pub fn build_constraint(task: &PdeTask, c: f64, times: &[f64]) -> Result<ConstraintSystem> {
    let g = task.grid;
    let rows = times
        .iter()
        .map(|&t| slice_index(task, t))
        .collect::<Result<Vec<_>>>()?;
    let b = rows
        .iter()
        .map(|&j| mass_target(task, c, g.t(j)))
        .collect::<Result<_>>()?;
    let dx = g.dx();
    let mut weights = vec![dx; g.nx];
    weights[0] *= 0.5;
    weights[g.nx - 1] *= 0.5;
    Ok(ConstraintSystem {
        nt: g.nt,
        nx: g.nx,
        rows,
        weights,
        b,
        sigma_g: SIGMA_G,
    })
}

/// Constraints on every time slice of the grid.
pub fn build_constraint_all(task: &PdeTask, c: f64) -> Result<ConstraintSystem> {
    build_constraint(task, c, &task.grid.ts())
}

/// `μ̃ = μ − ΣGᵀ(GΣGᵀ + σ_G²I)⁻¹(Gμ − b)` and `sqrt(diag Σ̃)` with
/// `Σ̃ = Σ − ΣGᵀ(GΣGᵀ + σ_G²I)⁻¹GΣ`, `Σ = diag(std²)`, for a dense row-major
/// `G` of `b.len()` rows.
pub fn probconserv_update(
    g: &[f64],
    b: &[f64],
    sigma_g: f64,
    mean: &[f64],
    std: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (nc, n) = (b.len(), mean.len());
    if std.len() != n || g.len() != nc * n {
        return Err(invalid(format!(
            "constraint of {} entries for {nc} rows does not fit {n} mean / {} std points",
            g.len(),
            std.len()
        )));
    }
    let var: Vec<f64> = std.iter().map(|s| s * s).collect();
    let mut a = vec![0.0; nc * nc];
    for k in 0..nc {
        let gk = &g[k * n..(k + 1) * n];
        for l in 0..=k {
            let gl = &g[l * n..(l + 1) * n];
            let v: f64 = (0..n).map(|p| gk[p] * var[p] * gl[p]).sum();
            a[k * nc + l] = v;
            a[l * nc + k] = v;
        }
        a[k * nc + k] += sigma_g * sigma_g;
    }
    let chol = Cholesky::factor(&a, nc)?;
    let r: Vec<f64> = (0..nc)
        .map(|k| {
            g[k * n..(k + 1) * n]
                .iter()
                .zip(mean)
                .map(|(x, y)| x * y)
                .sum::<f64>()
                - b[k]
        })
        .collect();
    let y = chol.solve(&r);
    // H = A⁻¹G, one column per point
    let mut h = vec![0.0; nc * n];
    let mut col = vec![0.0; nc];
    for p in 0..n {
        for k in 0..nc {
            col[k] = g[k * n + p];
        }
        if col.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (k, v) in chol.solve(&col).into_iter().enumerate() {
            h[k * n + p] = v;
        }
    }
    let mut new_mean = mean.to_vec();
    let mut new_std = std.to_vec();
    for p in 0..n {
        let corr: f64 = (0..nc).map(|k| g[k * n + p] * y[k]).sum();
        let quad: f64 = (0..nc).map(|k| g[k * n + p] * h[k * n + p]).sum();
        new_mean[p] -= var[p] * corr;
        new_std[p] = (var[p] - var[p] * var[p] * quad).max(0.0).sqrt();
    }
    Ok((new_mean, new_std))
}

/// [`probconserv_update`] for one `[nt, nx]` field against a slice system.
pub fn probconserv_field(
    mean: &[f64],
    std: &[f64],
    cs: &ConstraintSystem,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if mean.len() != cs.n_points() {
        return Err(invalid(format!(
            "field of {} points does not match a {}x{} constraint grid",
            mean.len(),
            cs.nt,
            cs.nx
        )));
    }
    probconserv_update(cs.dense_g().data(), &cs.b, cs.sigma_g, mean, std)
}

/// Apply the update sample by sample; `constraints[i]` belongs to sample `i`
/// of the summary.
pub fn apply_probconserv(
    summary: &PosteriorSummary,
    constraints: &[ConstraintSystem],
) -> Result<PosteriorSummary> {
    let n = summary.n_samples();
    if constraints.len() != n {
        return Err(invalid(format!(
            "{} constraint systems for {n} samples",
            constraints.len()
        )));
    }
    let p = summary.mean.len() / n.max(1);
    let mut mean = Vec::with_capacity(summary.mean.len());
    let mut std = Vec::with_capacity(summary.std.len());
    for (i, cs) in constraints.iter().enumerate() {
        let (m, s) = probconserv_field(
            &summary.mean.data()[i * p..(i + 1) * p],
            &summary.std.data()[i * p..(i + 1) * p],
            cs,
        )?;
        mean.extend(m);
        std.extend(s);
    }
    Ok(PosteriorSummary {
        mean: Tensor::new(summary.mean.shape().to_vec(), mean)?,
        std: Tensor::new(summary.std.shape().to_vec(), std)?,
        method: summary.method,
        meta: summary.meta.clone(),
    })
}
