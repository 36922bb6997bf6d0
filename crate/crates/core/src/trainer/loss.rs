use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fno::HeadVars;
use crate::numerics::{Tape, Tensor, Var};

const LOG_VAR_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiversityKind {
    /// Distance between head projection weights.
    Weights,
    /// Distance between head predictions on unlabeled OOD inputs.
    Outputs,
    /// Distance between per-head loss gradients w.r.t. the final layer.
    Gradients,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Diversity {
    pub kind: DiversityKind,
    /// Z-score each head's quantity before taking distances.
    pub standardized: bool,
}

impl Default for Diversity {
    fn default() -> Self {
        Self {
            kind: DiversityKind::Weights,
            standardized: false,
        }
    }
}

impl std::fmt::Display for Diversity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let k = match self.kind {
            DiversityKind::Weights => "weights",
            DiversityKind::Outputs => "outputs",
            DiversityKind::Gradients => "gradients",
        };
        if self.standardized {
            write!(f, "{k}-std")
        } else {
            f.write_str(k)
        }
    }
}

impl Diversity {
    pub const ALL: [Diversity; 6] = [
        Self {
            kind: DiversityKind::Weights,
            standardized: false,
        },
        Self {
            kind: DiversityKind::Weights,
            standardized: true,
        },
        Self {
            kind: DiversityKind::Outputs,
            standardized: false,
        },
        Self {
            kind: DiversityKind::Outputs,
            standardized: true,
        },
        Self {
            kind: DiversityKind::Gradients,
            standardized: false,
        },
        Self {
            kind: DiversityKind::Gradients,
            standardized: true,
        },
    ];
}

impl std::str::FromStr for Diversity {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.to_string() == s)
            .ok_or_else(|| invalid(format!("unknown diversity kind '{s}'")))
    }
}

/// `[B, nt, nx]` targets repeated over `m` heads → `[B, m, nt, nx]`.
fn tile_heads(targets: &Tensor, m: usize) -> Result<Tensor> {
    let &[b, nt, nx] = targets.shape() else {
        return Err(invalid(format!(
            "targets must be [B, nt, nx], got {:?}",
            targets.shape()
        )));
    };
    let p = nt * nx;
    let mut out = Vec::with_capacity(b * m * p);
    for i in 0..b {
        for _ in 0..m {
            out.extend_from_slice(&targets.data()[i * p..(i + 1) * p]);
        }
    }
    Tensor::new(vec![b, m, nt, nx], out)
}

/// Per-sample inverse squared norms `1/‖u_i‖²`, laid out like the tiled
/// predictions.
fn inv_norms(targets: &Tensor, m: usize) -> Result<Tensor> {
    let b = targets.shape()[0];
    let p = targets.len() / b.max(1);
    let mut out = Vec::with_capacity(b * m * p);
    for i in 0..b {
        let n2: f64 = targets.data()[i * p..(i + 1) * p]
            .iter()
            .map(|v| v * v)
            .sum();
        if n2 == 0.0 {
            return Err(invalid(format!(
                "target {i} has zero norm; relative L2 is undefined"
            )));
        }
        out.extend(std::iter::repeat_n(1.0 / n2, m * p));
    }
    Tensor::new(vec![b, m, targets.shape()[1], targets.shape()[2]], out)
}

/// `(1/(B·M))·Σ_i Σ_m ‖û_m − u‖² / ‖u‖²` for `preds: [B, M, nt, nx]`.
pub fn rel_l2_loss(tape: &mut Tape, preds: Var, targets: &Tensor) -> Result<Var> {
    let s = tape.shape(preds).to_vec();
    if s.len() != 4 || targets.shape() != [s[0], s[2], s[3]] {
        return Err(crate::Error::ShapeMismatch {
            op: "rel_l2_loss",
            lhs: s,
            rhs: targets.shape().to_vec(),
        });
    }
    let m = s[1];
    let t = tape.constant(tile_heads(targets, m)?);
    let d = tape.sub(preds, t)?;
    let d2 = tape.square(d);
    let w = tape.mul_const(d2, inv_norms(targets, m)?)?;
    let total = tape.sum(w);
    Ok(tape.scale(total, 1.0 / (s[0] * m) as f64))
}

/// `Σ_{m<k} ‖q_m − q_k‖²` over per-head quantities.
pub fn pairwise_sq_distance(tape: &mut Tape, q: &[Var]) -> Result<Var> {
    let mut terms = Vec::new();
    for a in 0..q.len() {
        for b in a + 1..q.len() {
            let d = tape.sub(q[a], q[b])?;
            let d2 = tape.square(d);
            terms.push(tape.sum(d2));
        }
    }
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for t in terms {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Flatten every tensor of a head into one vector `θ_m`.
pub fn flatten_head(tape: &mut Tape, head: &HeadVars) -> Result<Var> {
    let parts: Vec<Var> = head
        .vars()
        .iter()
        .map(|&v| {
            let n = tape.shape(v).iter().product();
            tape.reshape(v, &[n])
        })
        .collect::<Result<_>>()?;
    tape.concat(&parts, 0)
}

/// `−(2λ/(M(M−1)))·Σ_{m<k} ‖q_m − q_k‖²`, the term added to the data loss.
pub fn diversity_penalty(
    tape: &mut Tape,
    quantities: &[Var],
    lambda: f64,
    standardized: bool,
) -> Result<Var> {
    let m = quantities.len();
    if m < 2 {
        return Err(invalid(format!(
            "diversity penalty needs at least 2 heads, got {m}"
        )));
    }
    let q: Vec<Var> = if standardized {
        quantities.iter().map(|&v| tape.standardize(v)).collect()
    } else {
        quantities.to_vec()
    };
    let pen = pairwise_sq_distance(tape, &q)?;
    Ok(tape.scale(pen, -2.0 * lambda / (m * (m - 1)) as f64))
}

/// Data loss plus the weight-diversity penalty.
pub fn diverse_loss(
    tape: &mut Tape,
    preds: Var,
    targets: &Tensor,
    heads: &[HeadVars],
    lambda: f64,
    standardized: bool,
) -> Result<Var> {
    let base = rel_l2_loss(tape, preds, targets)?;
    if lambda == 0.0 {
        return Ok(base);
    }
    let thetas: Vec<Var> = heads
        .iter()
        .map(|h| flatten_head(tape, h))
        .collect::<Result<_>>()?;
    let pen = diversity_penalty(tape, &thetas, lambda, standardized)?;
    tape.add(base, pen)
}

/// Mean over all points of `0.5·(log σ² + (u−μ)²/σ² + log 2π)` with
/// `σ² ≥ 1e-12`; `mean, log_var: [B, 1, nt, nx]`.
pub fn nll_loss(tape: &mut Tape, mean: Var, log_var: Var, targets: &Tensor) -> Result<Var> {
    let s = tape.shape(mean).to_vec();
    if tape.shape(log_var) != s.as_slice()
        || s.len() != 4
        || s[1] != 1
        || targets.shape() != [s[0], s[2], s[3]]
    {
        return Err(crate::Error::ShapeMismatch {
            op: "nll_loss",
            lhs: s,
            rhs: targets.shape().to_vec(),
        });
    }
    let t = tape.constant(targets.clone().reshape(&s)?);
    let lv = tape.clamp_min(log_var, LOG_VAR_FLOOR);
    let neg = tape.scale(lv, -1.0);
    let prec = tape.exp(neg);
    let d = tape.sub(t, mean)?;
    let d2 = tape.square(d);
    let q = tape.mul(d2, prec)?;
    let inner = tape.add(lv, q)?;
    let mean_inner = tape.mean(inner);
    let half = tape.scale(mean_inner, 0.5);
    Ok(tape.add_scalar(half, 0.5 * (2.0 * std::f64::consts::PI).ln()))
}

/// Split `[B, 2, nt, nx]` variance-model output into (μ, log σ²).
pub fn split_mean_logvar(tape: &mut Tape, out: Var) -> Result<(Var, Var)> {
    Ok((tape.slice(out, 1, 0, 1)?, tape.slice(out, 1, 1, 1)?))
}

/// Among λ whose validation MSE is within 10% of the best, the largest.
pub fn select_lambda(candidates: &[(f64, f64)]) -> Result<f64> {
    let best = candidates
        .iter()
        .map(|&(_, mse)| mse)
        .fold(f64::INFINITY, f64::min);
    candidates
        .iter()
        .filter(|&&(_, mse)| mse <= 1.10 * best)
        .map(|&(l, _)| l)
        .fold(None, |acc: Option<f64>, l| {
            Some(acc.map_or(l, |a| a.max(l)))
        })
        .ok_or_else(|| invalid("select_lambda needs at least one finite candidate"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(seed: u64) -> Tensor {
        Tensor::from_fn(&[2, 4, 4], |k| {
            ((k as u64 * 31 + seed * 17) % 13) as f64 / 13.0 + 0.1
        })
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).item()
    }

    fn heads_of(t: &Tensor, m: usize) -> Tensor {
        tile_heads(t, m).unwrap()
    }

    #[test]
    fn rel_l2_zero_and_scaling() {
        let u = field(1);
        let zero = eval(|tp| {
            let p = tp.constant(heads_of(&u, 1));
            rel_l2_loss(tp, p, &u).unwrap()
        });
        assert_eq!(zero, 0.0);
        let one = eval(|tp| {
            let p = tp.constant(heads_of(&u, 1).map(|v| 2.0 * v));
            rel_l2_loss(tp, p, &u).unwrap()
        });
        assert!((one - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rel_l2_two_heads_is_mean_of_singles() {
        let u = field(1);
        let (a, b) = (field(2), field(3));
        let single = |p: &Tensor| {
            eval(|tp| {
                let v = tp.constant(p.clone().reshape(&[2, 1, 4, 4]).unwrap());
                rel_l2_loss(tp, v, &u).unwrap()
            })
        };
        let both = eval(|tp| {
            let va = tp.constant(a.clone().reshape(&[2, 1, 4, 4]).unwrap());
            let vb = tp.constant(b.clone().reshape(&[2, 1, 4, 4]).unwrap());
            let c = tp.concat(&[va, vb], 1).unwrap();
            rel_l2_loss(tp, c, &u).unwrap()
        });
        assert!((both - 0.5 * (single(&a) + single(&b))).abs() < 1e-14);
    }

    #[test]
    fn rel_l2_rejects_zero_target() {
        let u = Tensor::zeros(&[1, 2, 2]);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        assert!(rel_l2_loss(&mut tape, p, &u).is_err());
    }

    #[test]
    fn penalty_matches_brute_force_and_is_translation_invariant() {
        let thetas: Vec<Vec<f64>> = (0..4)
            .map(|m| {
                (0..5)
                    .map(|j| ((m * 7 + j * 3) % 11) as f64 * 0.1)
                    .collect()
            })
            .collect();
        let lambda = 0.7;
        let brute: f64 = {
            let mut s = 0.0;
            for a in 0..4 {
                for b in a + 1..4 {
                    s += thetas[a]
                        .iter()
                        .zip(&thetas[b])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>();
                }
            }
            -2.0 * lambda / 12.0 * s
        };
        let run = |shift: f64| {
            eval(|tp| {
                let q: Vec<Var> = thetas
                    .iter()
                    .map(|t| tp.constant(Tensor::from_vec(t.iter().map(|v| v + shift).collect())))
                    .collect();
                diversity_penalty(tp, &q, lambda, false).unwrap()
            })
        };
        assert!((run(0.0) - brute).abs() < 1e-13);
        assert!((run(3.5) - brute).abs() < 1e-12);
    }

    #[test]
    fn penalty_requires_two_heads() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::ones(&[3]));
        assert!(diversity_penalty(&mut tape, &[q], 1.0, false).is_err());
    }

    #[test]
    fn nll_at_truth_with_unit_variance() {
        let u = field(4);
        let v = eval(|tp| {
            let mu = tp.constant(u.clone().reshape(&[2, 1, 4, 4]).unwrap());
            let lv = tp.constant(Tensor::zeros(&[2, 1, 4, 4]));
            nll_loss(tp, mu, lv, &u).unwrap()
        });
        assert!((v - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn nll_gradient_vanishes_at_truth() {
        let u = field(4);
        let mut tape = Tape::new();
        let mu = tape.param(u.clone().reshape(&[2, 1, 4, 4]).unwrap());
        let lv = tape.constant(Tensor::full(&[2, 1, 4, 4], 0.3));
        let l = nll_loss(&mut tape, mu, lv, &u).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(mu).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn lambda_selection_hand_cases() {
        assert_eq!(
            select_lambda(&[(0.01, 1.0), (1.0, 1.05), (100.0, 2.0)]).unwrap(),
            1.0
        );
        let grid = [0.01, 0.1, 1.0, 10.0, 100.0];
        let flat: Vec<(f64, f64)> = grid.iter().map(|&l| (l, 0.3)).collect();
        assert_eq!(select_lambda(&flat).unwrap(), 100.0);
        assert_eq!(select_lambda(&[(10.0, 4.0)]).unwrap(), 10.0);
        assert!(select_lambda(&[]).is_err());
    }
}
