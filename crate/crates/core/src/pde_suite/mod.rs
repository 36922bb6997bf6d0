//! Benchmark PDE tasks: heat, porous medium, Stefan and linear advection,
//! with their train and out-of-domain parameter ranges, exact solutions,
//! a finite-volume cross-check solver and dataset generation.

mod analytic;
mod dataset;
mod fv;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

pub use analytic::{
    advection_exact, heat_exact, pme_exact, solve_advection, solve_heat, StefanSimilarity,
};
pub use dataset::{build_dataset, input_field, Dataset, DatasetManifest, INPUT_CHANNELS};
pub use fv::{heat_crank_nicolson, solve_gpme_fv, FaceAveraging, FvOptions, FvSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PdeFamily {
    Heat,
    Pme,
    Stefan,
    Advection,
}

impl PdeFamily {
    pub const ALL: [PdeFamily; 4] = [Self::Heat, Self::Pme, Self::Stefan, Self::Advection];

    pub fn name(self) -> &'static str {
        match self {
            Self::Heat => "heat",
            Self::Pme => "pme",
            Self::Stefan => "stefan",
            Self::Advection => "advection",
        }
    }
}

impl fmt::Display for PdeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PdeFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown task '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    OodSmall,
    OodMedium,
    OodLarge,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Self::Train,
        Self::Val,
        Self::OodSmall,
        Self::OodMedium,
        Self::OodLarge,
    ];
    pub const OOD: [Split; 3] = [Self::OodSmall, Self::OodMedium, Self::OodLarge];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::OodSmall => "ood_small",
            Self::OodMedium => "ood_medium",
            Self::OodLarge => "ood_large",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Self::Train => 1,
            Self::Val => 2,
            Self::OodSmall => 3,
            Self::OodMedium => 4,
            Self::OodLarge => 5,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s) || v.name().replace('_', "-") == s)
            .ok_or_else(|| invalid(format!("unknown split '{s}'")))
    }
}

/// Closed parameter interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lo..=self.hi).contains(&v)
    }

    /// True when the overlap has positive length. Ranges that only share an
    /// endpoint (heat `[1,5]` vs `[5,6]`) are disjoint in measure.
    pub fn overlaps(&self, other: &Range) -> bool {
        self.lo.max(other.lo) < self.hi.min(other.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodRanges {
    pub small: Range,
    pub medium: Range,
    pub large: Range,
}

/// Table of train / OOD parameter ranges per family.
pub fn param_ranges(family: PdeFamily) -> (Range, OodRanges) {
    use PdeFamily::*;
    let r = Range::new;
    match family {
        Heat => (
            r(1.0, 5.0),
            OodRanges {
                small: r(5.0, 6.0),
                medium: r(6.0, 7.0),
                large: r(7.0, 8.0),
            },
        ),
        Pme => (
            r(2.0, 3.0),
            OodRanges {
                small: r(1.0, 2.0),
                medium: r(4.0, 5.0),
                large: r(5.0, 6.0),
            },
        ),
        Stefan => (
            r(0.6, 0.65),
            OodRanges {
                small: r(0.55, 0.6),
                medium: r(0.7, 0.75),
                large: r(0.5, 0.55),
            },
        ),
        Advection => (
            r(1.0, 2.0),
            OodRanges {
                small: r(0.5, 1.0),
                medium: r(2.5, 3.0),
                large: r(3.0, 3.5),
            },
        ),
    }
}

/// Uniform space-time grid including both spatial boundaries and both
/// `t = 0` and `t = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_lo: f64,
    pub x_hi: f64,
    pub t_final: f64,
    pub nx: usize,
    pub nt: usize,
}

impl Grid {
    pub fn dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / (self.nx - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_final / (self.nt - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.nx {
            self.x_hi
        } else {
            self.x_lo + i as f64 * self.dx()
        }
    }

    pub fn t(&self, j: usize) -> f64 {
        if j + 1 == self.nt {
            self.t_final
        } else {
            j as f64 * self.dt()
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn ts(&self) -> Vec<f64> {
        (0..self.nt).map(|j| self.t(j)).collect()
    }

    pub fn width(&self) -> f64 {
        self.x_hi - self.x_lo
    }

    /// Evaluate `f(x, t)` into a `[nt, nx]` tensor.
    pub fn tabulate(&self, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (xs, ts) = (self.xs(), self.ts());
        Tensor::from_fn(&[self.nt, self.nx], |k| f(xs[k % self.nx], ts[k / self.nx]))
    }
}

/// One PDE family together with its domain, grid and parameter ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeTask {
    pub family: PdeFamily,
    pub grid: Grid,
    pub param_range_train: Range,
    pub param_ranges_ood: OodRanges,
}

pub const DEFAULT_NX: usize = 64;
pub const DEFAULT_NT: usize = 64;

impl PdeTask {
    pub fn new(family: PdeFamily) -> Self {
        Self::with_grid(family, DEFAULT_NX, DEFAULT_NT)
    }

    pub fn with_grid(family: PdeFamily, nx: usize, nt: usize) -> Self {
        let (x_lo, x_hi, t_final) = match family {
            PdeFamily::Heat => (0.0, 2.0 * std::f64::consts::PI, 1.0),
            PdeFamily::Pme | PdeFamily::Advection => (0.0, 1.0, 1.0),
            PdeFamily::Stefan => (0.0, 1.0, 0.1),
        };
        let (train, ood) = param_ranges(family);
        Self {
            family,
            grid: Grid {
                x_lo,
                x_hi,
                t_final,
                nx,
                nt,
            },
            param_range_train: train,
            param_ranges_ood: ood,
        }
    }

    /// Range for a split. Validation shares the training range.
    pub fn range(&self, split: Split) -> Range {
        match split {
            Split::Train | Split::Val => self.param_range_train,
            Split::OodSmall => self.param_ranges_ood.small,
            Split::OodMedium => self.param_ranges_ood.medium,
            Split::OodLarge => self.param_ranges_ood.large,
        }
    }

    /// Exact solution on the task grid.
    pub fn solve(&self, c: f64) -> Result<SolutionField> {
        match self.family {
            PdeFamily::Heat => solve_heat(c, &self.grid),
            PdeFamily::Advection => solve_advection(c, &self.grid),
            PdeFamily::Pme => {
                if c < 1.0 {
                    return Err(invalid(format!("PME degree must be >= 1, got {c}")));
                }
                Ok(SolutionField::tabulate(&self.grid, c, |x, t| {
                    pme_exact(c, x, t)
                }))
            }
            PdeFamily::Stefan => {
                let sim = StefanSimilarity::new(c)?;
                Ok(SolutionField::tabulate(&self.grid, c, |x, t| {
                    sim.eval(x, t)
                }))
            }
        }
    }

    /// Left/right Dirichlet values at time `t`.
    pub fn boundary_values(&self, c: f64, t: f64) -> (f64, f64) {
        match self.family {
            PdeFamily::Heat => (0.0, 0.0),
            PdeFamily::Pme => (pme_exact(c, self.grid.x_lo, t), 0.0),
            PdeFamily::Stefan => (1.0, 0.0),
            PdeFamily::Advection => (1.0, advection_exact(c, self.grid.x_hi, t)),
        }
    }
}

/// Sampled solution `u(x, t)` on a grid, rows indexed by time.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionField {
    pub values: Tensor,
    pub grid_x: Vec<f64>,
    pub grid_t: Vec<f64>,
    pub param: f64,
}

impl SolutionField {
    pub fn tabulate(grid: &Grid, param: f64, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            values: grid.tabulate(f),
            grid_x: grid.xs(),
            grid_t: grid.ts(),
            param,
        }
    }

    pub fn at(&self, j: usize, i: usize) -> f64 {
        self.values.get(&[j, i])
    }
}

/// i.i.d. uniform draws on the split's range, reproducible from `seed`.
pub fn sample_task_params(task: &PdeTask, split: Split, n: usize, seed: u64) -> Vec<f64> {
    let range = task.range(split);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    (0..n)
        .map(|_| rng.random_range(range.lo..=range.hi))
        .collect()
}

/// `∫_Ω u(x, t) dx` of the exact solution.
pub fn mass_target(task: &PdeTask, c: f64, t: f64) -> Result<f64> {
    if !(0.0..=task.grid.t_final * (1.0 + 1e-12)).contains(&t) {
        return Err(invalid(format!(
            "time {t} outside [0, {}]",
            task.grid.t_final
        )));
    }
    Ok(match task.family {
        PdeFamily::Heat => 0.0,
        PdeFamily::Advection => (0.5 + c * t).min(task.grid.x_hi),
        PdeFamily::Pme => {
            // valid while the front x = t stays inside the unit domain
            c.powf(1.0 / c) * (c / (c + 1.0)) * t.powf((c + 1.0) / c)
        }
        PdeFamily::Stefan => StefanSimilarity::new(c)?.mass(t),
    })
}
