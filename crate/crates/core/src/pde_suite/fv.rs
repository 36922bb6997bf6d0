//! Implicit finite-volume solver for `u_t = (k(u) u_x)_x` and a
//! Crank–Nicolson heat solver, both used as cross-check oracles for the
//! closed-form targets.
//!
//! Unknowns live on nodes `x_j = x_lo + j·h` (boundary nodes carry the
//! Dirichlet data); node `j` owns the control volume `[x_j - h/2, x_j + h/2]`.

use serde::{Deserialize, Serialize};

use super::analytic::pme_exact;
use super::{Grid, PdeFamily, SolutionField};
use crate::error::{invalid, Error, Result};
use crate::numerics::linalg::solve_tridiagonal;

/// How the face diffusivity between two nodes is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceAveraging {
    /// `2 k_l k_r / (k_l + k_r)`. Zero whenever one side is zero, so a
    /// front advancing into `u = 0` never moves for degenerate `k`.
    Harmonic,
    Arithmetic,
    /// Flux `-(K(u_r) - K(u_l))/h` with `K' = k`: the face coefficient is the
    /// mean of `k` over `[u_l, u_r]`.
    Kirchhoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FvOptions {
    pub n_nodes: usize,
    pub n_steps: usize,
    pub newton_tol: f64,
    pub max_newton: usize,
    pub averaging: FaceAveraging,
}

impl Default for FvOptions {
    fn default() -> Self {
        Self {
            n_nodes: 256,
            n_steps: 2048,
            newton_tol: 1e-10,
            max_newton: 60,
            averaging: FaceAveraging::Kirchhoff,
        }
    }
}

/// Full space-time history of a finite-volume run.
#[derive(Debug, Clone)]
pub struct FvSolution {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    /// `u[n][j]` at time `t[n]`, boundary nodes included.
    pub u: Vec<Vec<f64>>,
    /// Flux entering through the left face and leaving through the right
    /// face during step `n → n+1` (evaluated at the new time level).
    pub boundary_flux: Vec<(f64, f64)>,
}

impl FvSolution {
    pub fn h(&self) -> f64 {
        self.x[1] - self.x[0]
    }

    /// Mass held by interior control volumes at step `n`.
    pub fn interior_mass(&self, n: usize) -> f64 {
        let u = &self.u[n];
        self.h() * u[1..u.len() - 1].iter().sum::<f64>()
    }

    /// Bilinear interpolation onto a (coarser) output grid.
    pub fn resample(&self, grid: &Grid, param: f64) -> SolutionField {
        let interp = |xs: &[f64], v: f64| -> (usize, f64) {
            let n = xs.len();
            let h = (xs[n - 1] - xs[0]) / (n - 1) as f64;
            let s = ((v - xs[0]) / h).clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            (i, s - i as f64)
        };
        SolutionField::tabulate(grid, param, |x, t| {
            let (n, wt) = interp(&self.t, t);
            let (j, wx) = interp(&self.x, x);
            let at = |n: usize| self.u[n][j] * (1.0 - wx) + self.u[n][j + 1] * wx;
            at(n) * (1.0 - wt) + at(n + 1) * wt
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Coefficient {
    Constant(f64),
    Power(f64),
    Indicator(f64),
}

impl Coefficient {
    fn k(self, u: f64) -> f64 {
        match self {
            Self::Constant(k) => k,
            Self::Power(m) => u.max(0.0).powf(m),
            Self::Indicator(us) => {
                if u >= us {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn dk(self, u: f64) -> f64 {
        match self {
            Self::Constant(_) | Self::Indicator(_) => 0.0,
            Self::Power(m) => {
                if u > 0.0 {
                    m * u.powf(m - 1.0)
                } else {
                    0.0
                }
            }
        }
    }

    fn kirchhoff(self, u: f64) -> f64 {
        match self {
            Self::Constant(k) => k * u,
            Self::Power(m) => u.max(0.0).powf(m + 1.0) / (m + 1.0),
            Self::Indicator(us) => (u - us).max(0.0),
        }
    }
}

/// Face flux `F(u_l, u_r)` (positive rightwards) and its partials.
fn face_flux(c: Coefficient, avg: FaceAveraging, ul: f64, ur: f64, h: f64) -> (f64, f64, f64) {
    match avg {
        FaceAveraging::Kirchhoff => (
            -(c.kirchhoff(ur) - c.kirchhoff(ul)) / h,
            c.k(ul) / h,
            -c.k(ur) / h,
        ),
        FaceAveraging::Arithmetic => {
            let kb = 0.5 * (c.k(ul) + c.k(ur));
            let d = (ur - ul) / h;
            (
                -kb * d,
                -0.5 * c.dk(ul) * d + kb / h,
                -0.5 * c.dk(ur) * d - kb / h,
            )
        }
        FaceAveraging::Harmonic => {
            let (kl, kr) = (c.k(ul), c.k(ur));
            let s = kl + kr;
            let d = (ur - ul) / h;
            if s <= 0.0 {
                return (0.0, 0.0, 0.0);
            }
            let kb = 2.0 * kl * kr / s;
            let dkb_l = 2.0 * kr * kr / (s * s) * c.dk(ul);
            let dkb_r = 2.0 * kl * kl / (s * s) * c.dk(ur);
            (-kb * d, -dkb_l * d + kb / h, -dkb_r * d - kb / h)
        }
    }
}

fn coefficient(family: PdeFamily, c: f64) -> Result<Coefficient> {
    match family {
        PdeFamily::Heat if c > 0.0 => Ok(Coefficient::Constant(c)),
        PdeFamily::Pme if c >= 1.0 => Ok(Coefficient::Power(c)),
        PdeFamily::Stefan if c > 0.0 && c < 1.0 => Ok(Coefficient::Indicator(c)),
        PdeFamily::Advection => Err(invalid("advection is not a diffusion problem")),
        _ => Err(invalid(format!("parameter {c} is invalid for {family}"))),
    }
}

fn boundary(family: PdeFamily, c: f64, x_lo: f64, t: f64) -> (f64, f64) {
    match family {
        PdeFamily::Pme => (pme_exact(c, x_lo, t), 0.0),
        PdeFamily::Stefan => (1.0, 0.0),
        _ => (0.0, 0.0),
    }
}

fn initial(family: PdeFamily, x: f64) -> f64 {
    match family {
        PdeFamily::Heat => x.sin(),
        _ => 0.0,
    }
}

/// Backward-Euler finite-volume solve with Newton iterations and
/// backtracking line search.
pub fn solve_gpme_fv(
    family: PdeFamily,
    c: f64,
    grid: &Grid,
    opts: &FvOptions,
) -> Result<FvSolution> {
    let coef = coefficient(family, c)?;
    let n = opts.n_nodes;
    if n < 3 || opts.n_steps == 0 {
        return Err(invalid("finite-volume grid needs >= 3 nodes and >= 1 step"));
    }
    let h = (grid.x_hi - grid.x_lo) / (n - 1) as f64;
    let dt = grid.t_final / opts.n_steps as f64;
    let x: Vec<f64> = (0..n).map(|j| grid.x_lo + j as f64 * h).collect();
    let t: Vec<f64> = (0..=opts.n_steps).map(|s| s as f64 * dt).collect();

    let mut u: Vec<f64> = x.iter().map(|&x| initial(family, x)).collect();
    let (bl, br) = boundary(family, c, grid.x_lo, 0.0);
    u[0] = bl;
    u[n - 1] = br;

    let mut history = Vec::with_capacity(opts.n_steps + 1);
    history.push(u.clone());
    let mut fluxes = Vec::with_capacity(opts.n_steps);
    let r = dt / h;
    let m = n - 2;

    let residual = |v: &[f64], old: &[f64], out: &mut [f64]| {
        let mut f_left = face_flux(coef, opts.averaging, v[0], v[1], h).0;
        for j in 1..n - 1 {
            let f_right = face_flux(coef, opts.averaging, v[j], v[j + 1], h).0;
            out[j - 1] = v[j] - old[j] - r * (f_left - f_right);
            f_left = f_right;
        }
    };
    let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));

    let mut res = vec![0.0; m];
    let (mut sub, mut diag, mut sup) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for step in 1..=opts.n_steps {
        let old = u.clone();
        let (bl, br) = boundary(family, c, grid.x_lo, t[step]);
        u[0] = bl;
        u[n - 1] = br;

        residual(&u, &old, &mut res);
        let mut norm = inf_norm(&res);
        let mut trace = vec![norm];
        let mut iters = 0;
        while norm > opts.newton_tol {
            if iters == opts.max_newton {
                return Err(Error::NewtonDivergence {
                    time: t[step],
                    trace,
                });
            }
            iters += 1;
            for j in 1..n - 1 {
                let (_, dl_l, dl_r) = face_flux(coef, opts.averaging, u[j - 1], u[j], h);
                let (_, dr_l, dr_r) = face_flux(coef, opts.averaging, u[j], u[j + 1], h);
                let k = j - 1;
                sub[k] = -r * dl_l;
                diag[k] = 1.0 - r * (dl_r - dr_l);
                sup[k] = r * dr_r;
            }
            let rhs: Vec<f64> = res.iter().map(|v| -v).collect();
            let delta = solve_tridiagonal(&sub, &diag, &sup, &rhs)?;

            let mut step_len = 1.0;
            let mut trial = u.clone();
            let mut trial_res = vec![0.0; m];
            loop {
                for j in 1..n - 1 {
                    trial[j] = u[j] + step_len * delta[j - 1];
                }
                residual(&trial, &old, &mut trial_res);
                let trial_norm = inf_norm(&trial_res);
                if trial_norm <= (1.0 - 1e-4 * step_len) * norm || step_len < 1e-6 {
                    u.copy_from_slice(&trial);
                    res.copy_from_slice(&trial_res);
                    norm = trial_norm;
                    break;
                }
                step_len *= 0.5;
            }
            trace.push(norm);
        }
        let f_in = face_flux(coef, opts.averaging, u[0], u[1], h).0;
        let f_out = face_flux(coef, opts.averaging, u[n - 2], u[n - 1], h).0;
        fluxes.push((f_in, f_out));
        history.push(u.clone());
    }

    Ok(FvSolution {
        x,
        t,
        u: history,
        boundary_flux: fluxes,
    })
}

/// Crank–Nicolson for `u_t = k u_xx`, `u(x,0) = sin x`, zero Dirichlet data.
pub fn heat_crank_nicolson(
    k: f64,
    grid: &Grid,
    n_nodes: usize,
    n_steps: usize,
) -> Result<FvSolution> {
    if !(k > 0.0) {
        return Err(invalid(format!("diffusivity must be positive, got {k}")));
    }
    let n = n_nodes;
    let h = (grid.x_hi - grid.x_lo) / (n - 1) as f64;
    let dt = grid.t_final / n_steps as f64;
    let x: Vec<f64> = (0..n).map(|j| grid.x_lo + j as f64 * h).collect();
    let t: Vec<f64> = (0..=n_steps).map(|s| s as f64 * dt).collect();
    let mut u: Vec<f64> = x.iter().map(|x| x.sin()).collect();
    u[0] = 0.0;
    u[n - 1] = 0.0;
    let lam = k * dt / (h * h);
    let m = n - 2;
    let sub = vec![-0.5 * lam; m];
    let diag = vec![1.0 + lam; m];
    let sup = vec![-0.5 * lam; m];
    let mut history = vec![u.clone()];
    let mut fluxes = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let rhs: Vec<f64> = (1..n - 1)
            .map(|j| u[j] + 0.5 * lam * (u[j - 1] - 2.0 * u[j] + u[j + 1]))
            .collect();
        let inner = solve_tridiagonal(&sub, &diag, &sup, &rhs)?;
        u[1..n - 1].copy_from_slice(&inner);
        fluxes.push((-k * (u[1] - u[0]) / h, -k * (u[n - 1] - u[n - 2]) / h));
        history.push(u.clone());
    }
    Ok(FvSolution {
        x,
        t,
        u: history,
        boundary_flux: fluxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde_suite::{heat_exact, PdeTask, StefanSimilarity};

    fn quick(n_nodes: usize, n_steps: usize, averaging: FaceAveraging) -> FvOptions {
        FvOptions {
            n_nodes,
            n_steps,
            averaging,
            ..FvOptions::default()
        }
    }

    #[test]
    fn harmonic_averaging_locks_degenerate_front() {
        let grid = PdeTask::new(PdeFamily::Stefan).grid;
        let sol = solve_gpme_fv(
            PdeFamily::Stefan,
            0.6,
            &grid,
            &quick(64, 64, FaceAveraging::Harmonic),
        )
        .unwrap();
        let last = sol.u.last().unwrap();
        assert!(last[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kirchhoff_front_advances() {
        let grid = PdeTask::new(PdeFamily::Stefan).grid;
        let sol = solve_gpme_fv(
            PdeFamily::Stefan,
            0.6,
            &grid,
            &quick(64, 64, FaceAveraging::Kirchhoff),
        )
        .unwrap();
        assert!(sol.u.last().unwrap()[5] > 0.6);
    }

    #[test]
    fn mass_balance_per_step() {
        for (family, c) in [
            (PdeFamily::Pme, 3.0),
            (PdeFamily::Stefan, 0.6),
            (PdeFamily::Heat, 2.0),
        ] {
            let grid = PdeTask::new(family).grid;
            for avg in [FaceAveraging::Kirchhoff, FaceAveraging::Arithmetic] {
                // The arithmetic face value of a jump coefficient has no
                // useful derivative; Newton stalls on Stefan there.
                if family == PdeFamily::Stefan && avg == FaceAveraging::Arithmetic {
                    continue;
                }
                let sol = solve_gpme_fv(family, c, &grid, &quick(64, 128, avg)).unwrap();
                let dt = sol.t[1];
                for n in 0..sol.boundary_flux.len() {
                    let dm = (sol.interior_mass(n + 1) - sol.interior_mass(n)) / dt;
                    let (fin, fout) = sol.boundary_flux[n];
                    assert!(
                        (dm - (fin - fout)).abs() < 1e-8,
                        "{family} {avg:?} step {n}: {dm} vs {}",
                        fin - fout
                    );
                }
            }
        }
    }

    #[test]
    fn boundary_rows_hold_dirichlet_data() {
        let grid = PdeTask::new(PdeFamily::Pme).grid;
        let sol = solve_gpme_fv(
            PdeFamily::Pme,
            2.0,
            &grid,
            &quick(32, 32, FaceAveraging::Kirchhoff),
        )
        .unwrap();
        for (n, row) in sol.u.iter().enumerate() {
            assert!((row[0] - pme_exact(2.0, 0.0, sol.t[n])).abs() < 1e-12);
            assert_eq!(*row.last().unwrap(), 0.0);
        }
    }

    #[test]
    fn crank_nicolson_heat_close_to_exact() {
        let grid = PdeTask::new(PdeFamily::Heat).grid;
        let sol = heat_crank_nicolson(1.0, &grid, 512, 400).unwrap();
        let j = 511 / 4;
        let x = sol.x[j];
        assert!((sol.u.last().unwrap()[j] - heat_exact(1.0, x, 1.0)).abs() < 1e-4);
    }

    #[test]
    fn stefan_front_tracks_similarity_solution() {
        let grid = PdeTask::new(PdeFamily::Stefan).grid;
        let sol = solve_gpme_fv(
            PdeFamily::Stefan,
            0.6,
            &grid,
            &quick(128, 512, FaceAveraging::Kirchhoff),
        )
        .unwrap();
        let exact = StefanSimilarity::new(0.6).unwrap().front(0.1);
        let last = sol.u.last().unwrap();
        let j = last.iter().rposition(|&v| v >= 0.6).unwrap();
        assert!((sol.x[j] - exact).abs() < 3.0 * sol.h());
    }

    #[test]
    fn rejects_bad_parameters() {
        let g = PdeTask::new(PdeFamily::Pme).grid;
        let o = FvOptions::default();
        assert!(solve_gpme_fv(PdeFamily::Pme, 0.5, &g, &o).is_err());
        assert!(solve_gpme_fv(PdeFamily::Stefan, 1.2, &g, &o).is_err());
        assert!(solve_gpme_fv(PdeFamily::Advection, 1.0, &g, &o).is_err());
    }
}
