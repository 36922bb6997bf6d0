use std::f64::consts::PI;

use super::{Grid, SolutionField};
use crate::error::{invalid, Result};

/// `e^{-kt} sin x`, the heat solution for `u(x,0) = sin x` on `[0, 2π]`.
pub fn heat_exact(k: f64, x: f64, t: f64) -> f64 {
    (-k * t).exp() * x.sin()
}

pub fn solve_heat(k: f64, grid: &Grid) -> Result<SolutionField> {
    if !(k > 0.0) {
        return Err(invalid(format!("diffusivity must be positive, got {k}")));
    }
    let mut field = SolutionField::tabulate(grid, k, |x, t| heat_exact(k, x, t));
    // sin(2π) is 2.4e-16 in floating point; pin the Dirichlet rows exactly.
    let (nt, nx) = (grid.nt, grid.nx);
    for j in 0..nt {
        field.values.set(&[j, 0], 0.0);
        field.values.set(&[j, nx - 1], 0.0);
    }
    Ok(field)
}

/// Step `1_{x ≤ 0.5 + βt}` translated at speed β.
pub fn advection_exact(beta: f64, x: f64, t: f64) -> f64 {
    if x <= 0.5 + beta * t {
        1.0
    } else {
        0.0
    }
}

pub fn solve_advection(beta: f64, grid: &Grid) -> Result<SolutionField> {
    if !(beta > 0.0) {
        return Err(invalid(format!(
            "advection speed must be positive, got {beta}"
        )));
    }
    Ok(SolutionField::tabulate(grid, beta, |x, t| {
        advection_exact(beta, x, t)
    }))
}

/// Travelling-wave PME solution `max(0, m(t - x))^{1/m}`; its front moves
/// at unit speed and the left boundary value is `(mt)^{1/m}`.
pub fn pme_exact(m: f64, x: f64, t: f64) -> f64 {
    let s = m * (t - x);
    if s > 0.0 {
        s.powf(1.0 / m)
    } else {
        0.0
    }
}

/// Similarity solution of the Stefan problem with `u(0,t) = 1` and zero
/// initial data: `u = 1 - β erf(x / 2√t)` behind the front `x* = 2α√t`,
/// zero ahead of it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StefanSimilarity {
    pub u_star: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl StefanSimilarity {
    /// Solve `u(x*) = u*` together with the front flux balance
    /// `u*·dx*/dt = -u_x(x*⁻)` for `(α, β)` by bisection.
    pub fn new(u_star: f64) -> Result<Self> {
        if !(u_star > 0.0 && u_star < 1.0) {
            return Err(invalid(format!(
                "Stefan threshold must lie in (0, 1), got {u_star}"
            )));
        }
        // g(α) = u*·α·√π·erf(α)·e^{α²} − (1 − u*) is increasing on α > 0.
        let g = |a: f64| u_star * a * PI.sqrt() * libm::erf(a) * (a * a).exp() - (1.0 - u_star);
        let (mut lo, mut hi) = (0.0, 1.0);
        while g(hi) < 0.0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        let alpha = 0.5 * (lo + hi);
        let beta = (1.0 - u_star) / libm::erf(alpha);
        Ok(Self {
            u_star,
            alpha,
            beta,
        })
    }

    pub fn front(&self, t: f64) -> f64 {
        2.0 * self.alpha * t.max(0.0).sqrt()
    }

    pub fn eval(&self, x: f64, t: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        if t <= 0.0 || x > self.front(t) {
            return 0.0;
        }
        1.0 - self.beta * libm::erf(x / (2.0 * t.sqrt()))
    }

    /// `∫_0^{x*} u dx`, using `∫_0^a erf(x/c) dx = a·erf(a/c) + c(e^{-a²/c²} − 1)/√π`.
    pub fn mass(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let c = 2.0 * t.sqrt();
        let a = self.front(t);
        let erf_int =
            a * libm::erf(self.alpha) + c * ((-self.alpha * self.alpha).exp() - 1.0) / PI.sqrt();
        a - self.beta * erf_int
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde_suite::{PdeFamily, PdeTask};

    #[test]
    fn heat_initial_condition_and_boundaries() {
        let task = PdeTask::new(PdeFamily::Heat);
        let f = solve_heat(2.5, &task.grid).unwrap();
        for (i, &x) in f.grid_x.iter().enumerate() {
            assert!((f.at(0, i) - x.sin()).abs() < 1e-15 || i == 63);
        }
        for j in 0..64 {
            assert_eq!(f.at(j, 0), 0.0);
            assert_eq!(f.at(j, 63), 0.0);
        }
        assert!(f.values.all_finite());
    }

    #[test]
    fn heat_value_at_quarter_period() {
        assert!((heat_exact(1.0, PI / 2.0, 1.0) - 0.367_879_441_171_442_3).abs() < 1e-15);
    }

    #[test]
    fn heat_rejects_nonpositive_k() {
        let g = PdeTask::new(PdeFamily::Heat).grid;
        assert!(solve_heat(0.0, &g).is_err());
        assert!(solve_heat(-1.0, &g).is_err());
    }

    #[test]
    fn advection_step_moves() {
        assert_eq!(advection_exact(1.0, 0.5, 0.0), 1.0);
        assert_eq!(advection_exact(1.0, 0.51, 0.0), 0.0);
        assert_eq!(advection_exact(1.0, 0.74, 0.25), 1.0);
        assert_eq!(advection_exact(1.0, 0.76, 0.25), 0.0);
        let g = PdeTask::new(PdeFamily::Advection).grid;
        assert!(solve_advection(0.0, &g).is_err());
        let f = solve_advection(1.5, &g).unwrap();
        for j in 0..g.nt {
            assert_eq!(f.at(j, 0), 1.0);
            if 0.5 + 1.5 * g.t(j) < 1.0 {
                assert_eq!(f.at(j, g.nx - 1), 0.0);
            }
        }
    }

    #[test]
    fn pme_profile_satisfies_pde_pointwise() {
        // u_t = (u^m u_x)_x checked by central differences away from the front.
        for m in [1.0, 2.0, 3.0, 6.0] {
            let (x, t, h) = (0.3, 0.8, 1e-4);
            let u = |x: f64, t: f64| pme_exact(m, x, t);
            let flux = |x: f64| u(x, t).powf(m) * (u(x + h, t) - u(x - h, t)) / (2.0 * h);
            let lhs = (u(x, t + h) - u(x, t - h)) / (2.0 * h);
            let rhs = (flux(x + h) - flux(x - h)) / (2.0 * h);
            assert!((lhs - rhs).abs() < 1e-5, "m={m}: {lhs} vs {rhs}");
        }
        assert_eq!(pme_exact(2.0, 0.0, 0.0), 0.0);
        assert!((pme_exact(2.0, 0.0, 0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stefan_similarity_conditions() {
        for u_star in [0.5, 0.6, 0.75] {
            let s = StefanSimilarity::new(u_star).unwrap();
            let t = 0.05;
            let xf = s.front(t);
            let behind = 1.0 - s.beta * libm::erf(xf / (2.0 * t.sqrt()));
            assert!((behind - u_star).abs() < 1e-12);
            // interface balance u*·x*'(t) = −u_x(x*⁻)
            let speed = s.alpha / t.sqrt();
            let grad = -s.beta * (-(s.alpha * s.alpha)).exp() / (PI * t).sqrt();
            assert!((u_star * speed + grad).abs() < 1e-10);
            assert_eq!(s.eval(xf + 1e-9, t), 0.0);
            assert_eq!(s.eval(0.0, t), 1.0);
        }
        assert!(StefanSimilarity::new(1.0).is_err());
        assert!(StefanSimilarity::new(0.0).is_err());
    }

    #[test]
    fn stefan_mass_matches_quadrature() {
        let s = StefanSimilarity::new(0.6).unwrap();
        let t = 0.1;
        let n = 200_000;
        let xf = s.front(t);
        let h = xf / n as f64;
        let quad: f64 = (0..n).map(|i| s.eval((i as f64 + 0.5) * h, t) * h).sum();
        assert!((quad - s.mass(t)).abs() < 1e-9);
    }
}
