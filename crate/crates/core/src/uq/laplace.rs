use serde::{Deserialize, Serialize};

use super::{Method, PosteriorSummary, SummaryMeta};
use crate::error::{invalid, Result};
use crate::fno::{forward, to_channel_first, FnoModel};
use crate::numerics::linalg::Cholesky;
use crate::numerics::{Tape, Tensor};
use crate::pde_suite::Dataset;

const JITTER: f64 = 1e-10;

/// Gaussian posterior over the final projection layer `[w2 | b2]` of a
/// single-head model, with every other weight held at its MAP value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplacePosterior {
    pub alpha: f64,
    /// Feature dimension `hidden + 1` (bias feature last).
    pub dim: usize,
    /// MAP weights `[w2 | b2]`.
    pub map_weights: Vec<f64>,
    /// Row-major `dim × dim` precision `Λ`.
    pub precision: Vec<f64>,
    /// Row-major `Λ⁻¹`.
    pub covariance: Vec<f64>,
}

/// Penultimate features of head 0 for a batch: `[B, hidden, nt, nx]`, plus
/// the MAP output `[B, nt, nx]`.
fn features(model: &FnoModel, inputs: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape, false);
    let x = tape.constant(to_channel_first(inputs)?);
    let f = forward(&mut tape, &model.config, &pv, x, None)?;
    let out = tape.value(f.output);
    let s = out.shape();
    let mean = out.clone().reshape(&[s[0], s[2], s[3]])?;
    Ok((tape.value(f.hidden[0]).clone(), mean))
}

/// Add `Σ_p φ_p φ_pᵀ · scale` for one sample whose hidden features are the
/// rows of `h` (`hidden × P`), with a constant bias feature appended.
fn add_gram(lambda: &mut [f64], h: &[f64], hidden: usize, p: usize, scale: f64) {
    let d = hidden + 1;
    let mut gram = vec![0.0; hidden * hidden];
    // SAFETY: slices sized by construction; row-major strides.
    unsafe {
        matrixmultiply::dgemm(
            hidden,
            p,
            hidden,
            1.0,
            h.as_ptr(),
            p as isize,
            1,
            h.as_ptr(),
            1,
            p as isize,
            0.0,
            gram.as_mut_ptr(),
            hidden as isize,
            1,
        );
    }
    for i in 0..hidden {
        for j in 0..hidden {
            lambda[i * d + j] += scale * gram[i * hidden + j];
        }
        let s: f64 = h[i * p..(i + 1) * p].iter().sum();
        lambda[i * d + hidden] += scale * s;
        lambda[hidden * d + i] += scale * s;
    }
    lambda[hidden * d + hidden] += scale * p as f64;
}

/// `Λ = α²I + Σ_i Φ_iᵀΦ_i / s_i²` with `s_i² = ‖u_i‖²/α²`.
pub fn laplace_fit(model: &FnoModel, train: &Dataset, alpha: f64) -> Result<LaplacePosterior> {
    if model.config.n_heads != 1 {
        return Err(invalid("the Laplace head expects a single-head model"));
    }
    if !(alpha > 0.0) {
        return Err(invalid(format!(
            "prior precision root must be positive, got {alpha}"
        )));
    }
    let hidden = model.config.hidden;
    let d = hidden + 1;
    let p = model.config.nt * model.config.nx;
    let mut lambda = vec![0.0; d * d];
    for i in 0..d {
        lambda[i * d + i] = alpha * alpha;
    }
    let idx: Vec<usize> = (0..train.len()).collect();
    for part in idx.chunks(8) {
        let (x, y) = train.batch(part)?;
        let (hid, _) = features(model, &x)?;
        for (b, _) in part.iter().enumerate() {
            let u = &y.data()[b * p..(b + 1) * p];
            let s2 = u.iter().map(|v| v * v).sum::<f64>() / (alpha * alpha);
            if s2 == 0.0 {
                return Err(invalid("zero-norm training target in Laplace fit"));
            }
            add_gram(
                &mut lambda,
                &hid.data()[b * hidden * p..(b + 1) * hidden * p],
                hidden,
                p,
                1.0 / s2,
            );
        }
    }
    let chol = Cholesky::factor_with_jitter(&lambda, d, JITTER)?;
    let head = &model.params.heads[0];
    let mut map_weights = head.w2.data().to_vec();
    map_weights.extend_from_slice(head.b2.data());
    Ok(LaplacePosterior {
        alpha,
        dim: d,
        map_weights,
        precision: lambda,
        covariance: chol.inverse(),
    })
}

/// Predictive mean (MAP) and variance `φᵀΛ⁻¹φ + ‖mean‖²/α²`.
pub fn laplace_predict(
    model: &FnoModel,
    post: &LaplacePosterior,
    inputs: &Tensor,
) -> Result<PosteriorSummary> {
    let hidden = model.config.hidden;
    if post.dim != hidden + 1 {
        return Err(invalid(format!(
            "posterior dimension {} does not match hidden width {hidden}",
            post.dim
        )));
    }
    let (hid, mean) = features(model, inputs)?;
    let (n, p) = (mean.shape()[0], model.config.nt * model.config.nx);
    let d = post.dim;
    let mut var = vec![0.0; n * p];
    let mut phi = vec![0.0; d * p];
    let mut cphi = vec![0.0; d * p];
    for b in 0..n {
        phi[..hidden * p].copy_from_slice(&hid.data()[b * hidden * p..(b + 1) * hidden * p]);
        phi[hidden * p..].fill(1.0);
        // SAFETY: C is d×d, Φ is d×P, both row-major.
        unsafe {
            matrixmultiply::dgemm(
                d,
                d,
                p,
                1.0,
                post.covariance.as_ptr(),
                d as isize,
                1,
                phi.as_ptr(),
                p as isize,
                1,
                0.0,
                cphi.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        let m = &mean.data()[b * p..(b + 1) * p];
        let noise = m.iter().map(|v| v * v).sum::<f64>() / (post.alpha * post.alpha);
        for q in 0..p {
            let quad: f64 = (0..d).map(|k| phi[k * p + q] * cphi[k * p + q]).sum();
            var[b * p + q] = quad.max(0.0) + noise;
        }
    }
    let std = Tensor::new(
        mean.shape().to_vec(),
        var.into_iter().map(f64::sqrt).collect(),
    )?;
    Ok(PosteriorSummary {
        mean,
        std,
        method: Method::Bayesian,
        meta: SummaryMeta {
            alpha: Some(post.alpha),
            ..SummaryMeta::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fno::FnoConfig;
    use crate::pde_suite::{build_dataset, PdeFamily, PdeTask, Split};

    fn setup() -> (FnoModel, Dataset) {
        let task = PdeTask::with_grid(PdeFamily::Heat, 8, 8);
        let cfg = FnoConfig {
            width: 4,
            hidden: 3,
            n_layers: 2,
            modes_t: 2,
            modes_x: 2,
            nt: 8,
            nx: 8,
            ..FnoConfig::default()
        };
        (
            FnoModel::new(cfg, 1).unwrap(),
            build_dataset(&task, Split::Train, 5, 0).unwrap(),
        )
    }

    #[test]
    fn precision_matches_naive_outer_products() {
        let (m, ds) = setup();
        let alpha = 0.7;
        let post = laplace_fit(&m, &ds, alpha).unwrap();
        let (hid, _) = features(&m, &ds.inputs).unwrap();
        let (h, p, d) = (3, 64, 4);
        let mut naive = vec![0.0; d * d];
        for i in 0..d {
            naive[i * d + i] = alpha * alpha;
        }
        for b in 0..5 {
            let u = ds.target(b);
            let s2 = u.sum_sq() / (alpha * alpha);
            for q in 0..p {
                let phi: Vec<f64> = (0..h)
                    .map(|k| hid.data()[(b * h + k) * p + q])
                    .chain([1.0])
                    .collect();
                for i in 0..d {
                    for j in 0..d {
                        naive[i * d + j] += phi[i] * phi[j] / s2;
                    }
                }
            }
        }
        for (a, b) in post.precision.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn variance_matches_dense_quadratic_form_and_floor() {
        let (m, ds) = setup();
        let post = laplace_fit(&m, &ds, 1.0).unwrap();
        let x = ds.inputs.outer(2).reshape(&[1, 8, 8, 3]).unwrap();
        let s = laplace_predict(&m, &post, &x).unwrap();
        let (hid, mean) = features(&m, &x).unwrap();
        let noise = mean.sum_sq();
        for q in [0usize, 17, 63] {
            let phi: Vec<f64> = (0..3)
                .map(|k| hid.data()[k * 64 + q])
                .chain([1.0])
                .collect();
            let mut quad = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    quad += phi[i] * post.covariance[i * 4 + j] * phi[j];
                }
            }
            let v = s.std.data()[q].powi(2);
            assert!((v - (quad + noise)).abs() < 1e-10 * (1.0 + v));
            assert!(v >= noise);
        }
    }

    #[test]
    fn variance_shrinks_with_alpha() {
        let (m, ds) = setup();
        let x = ds.inputs.outer(0).reshape(&[1, 8, 8, 3]).unwrap();
        let stds: Vec<Tensor> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&a| {
                laplace_predict(&m, &laplace_fit(&m, &ds, a).unwrap(), &x)
                    .unwrap()
                    .std
            })
            .collect();
        for q in [3usize, 30, 60] {
            assert!(stds[0].data()[q] >= stds[1].data()[q]);
            assert!(stds[1].data()[q] >= stds[2].data()[q]);
        }
    }

    #[test]
    fn scalar_conjugate_case() {
        // One example, one feature: Λ = α² + φ²/s².
        let mut lambda = vec![0.0; 4];
        lambda[0] = 4.0;
        lambda[3] = 4.0;
        add_gram(&mut lambda, &[0.5], 1, 1, 1.0 / 3.0);
        assert!((lambda[0] - (4.0 + 0.25 / 3.0)).abs() < 1e-15);
        assert!((lambda[3] - (4.0 + 1.0 / 3.0)).abs() < 1e-15);
    }
}
