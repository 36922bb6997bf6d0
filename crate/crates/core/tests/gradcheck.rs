//! Reverse-mode gradients against central finite differences.

use oodno_core::fno::{forward, to_channel_first, FnoConfig, FnoModel};
use oodno_core::numerics::{Tape, Tensor, Var};
use oodno_core::pde_suite::{build_dataset, PdeFamily, PdeTask, Split};
use oodno_core::trainer::{diverse_loss, nll_loss, rel_l2_loss, split_mean_logvar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Entries far below the largest gradient are measured against a floor of
/// `floor · scale`: central differences carry ~1e-10 absolute roundoff.
fn rel_err(a: f64, b: f64, scale: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor * scale)
}

/// Builds a scalar from the parameters and compares every gradient entry.
fn check(inputs: Vec<Tensor>, tol: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    let scale = analytic.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= EPS;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let a = analytic[k].data()[i];
            assert!(
                rel_err(a, fd, scale, 1e-6) < tol,
                "input {k} entry {i}: analytic {a} vs fd {fd}"
            );
        }
    }
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(tape.shape(out), &mut rng);
    let p = tape.mul_const(out, r).unwrap();
    tape.sum(p)
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    check(vec![a.clone(), b.clone()], 1e-6, |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(s, v[1]).unwrap();
        let m = t.mul(d, v[1]).unwrap();
        let g = t.gelu(m);
        let e = t.exp(g);
        let q = t.square(e);
        let c = t.scale(q, 0.3);
        let c = t.add_scalar(c, 2.0);
        let r = t.sqrt(c);
        project(t, r, 2)
    });
    check(vec![a], 1e-6, |t, v| {
        let c = t.clamp_min(v[0], 0.1);
        let m = t.mean(c);
        let s = t.sum(v[0]);
        let p = t.mul(m, s).unwrap();
        t.square(p)
    });
}

#[test]
fn linear_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check(
        vec![random(&[3, 5], &mut rng), random(&[5, 2], &mut rng)],
        1e-6,
        |t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            project(t, m, 4)
        },
    );
    let x = random(&[2, 3, 4, 4], &mut rng);
    let w = random(&[5, 3], &mut rng);
    let b = random(&[5], &mut rng);
    check(vec![x, w, b], 1e-6, |t, v| {
        let y = t.channel_linear(v[0], v[1], Some(v[2])).unwrap();
        project(t, y, 5)
    });
}

#[test]
fn shape_ops_and_standardize() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    check(
        vec![random(&[2, 3, 4], &mut rng), random(&[2, 1, 4], &mut rng)],
        1e-6,
        |t, v| {
            let s = t.slice(v[0], 1, 1, 2).unwrap();
            let c = t.concat(&[s, v[1]], 1).unwrap();
            let r = t.reshape(c, &[24]).unwrap();
            let z = t.standardize(r);
            project(t, z, 7)
        },
    );
}

#[test]
fn fourier_round_trip_and_spectral_mix() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[2, 3, 8, 8], &mut rng);
    let w = random(&[3, 2, 4, 3, 2], &mut rng);
    check(vec![x, w], 1e-5, |t, v| {
        let z = t.rfft2(v[0]).unwrap();
        let wc = t.as_complex(v[1]).unwrap();
        let m = t.spectral_mix(z, wc, 2, 3).unwrap();
        let y = t.irfft2(m).unwrap();
        project(t, y, 9)
    });
}

fn small_model(n_heads: usize) -> (FnoModel, Tensor, Tensor) {
    let cfg = FnoConfig {
        width: 8,
        modes_t: 4,
        modes_x: 4,
        hidden: 8,
        n_heads,
        nt: 16,
        nx: 16,
        ..FnoConfig::default()
    };
    let task = PdeTask::with_grid(PdeFamily::Heat, 16, 16);
    let ds = build_dataset(&task, Split::Train, 2, 0).unwrap();
    (FnoModel::new(cfg, 11).unwrap(), ds.inputs, ds.targets)
}

/// Compare on a fixed random subset of entries of every parameter tensor,
/// and along random directions through all parameters at once.
fn check_model(
    model: &FnoModel,
    loss: impl Fn(&mut Tape, &FnoModel, Var, &oodno_core::fno::ParamVars) -> Var,
    inputs: &Tensor,
) {
    let run = |m: &FnoModel| -> f64 {
        let mut tape = Tape::new();
        let pv = m.params.bind(&mut tape, true);
        let x = tape.constant(to_channel_first(inputs).unwrap());
        let l = loss(&mut tape, m, x, &pv);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let pv = model.params.bind(&mut tape, true);
    let x = tape.constant(to_channel_first(inputs).unwrap());
    let l = loss(&mut tape, model, x, &pv);
    let grads = tape.backward(l).unwrap();
    let vars = pv.vars();
    let shapes: Vec<Vec<usize>> = model
        .params
        .tensors()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&shapes)
        .map(|(&v, s)| grads.get_or_zeros(v, s))
        .collect();
    let scale = analytic.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for (k, g) in analytic.iter().enumerate() {
        for _ in 0..6 {
            let i = rng.random_range(0..g.len());
            let mut p = model.clone();
            p.params.tensors_mut()[k].data_mut()[i] += EPS;
            let mut m = model.clone();
            m.params.tensors_mut()[k].data_mut()[i] -= EPS;
            let fd = (run(&p) - run(&m)) / (2.0 * EPS);
            worst = worst.max(rel_err(g.data()[i], fd, scale, 1e-3));
        }
    }
    assert!(worst < 1e-4, "worst entrywise relative error {worst}");
    for d in 0..3 {
        let dirs: Vec<Tensor> = analytic
            .iter()
            .map(|g| random(g.shape(), &mut rng))
            .collect();
        let shift = |sign: f64| {
            let mut m = model.clone();
            for (t, v) in m.params.tensors_mut().into_iter().zip(&dirs) {
                for (a, b) in t.data_mut().iter_mut().zip(v.data()) {
                    *a += sign * EPS * b;
                }
            }
            run(&m)
        };
        let fd = (shift(1.0) - shift(-1.0)) / (2.0 * EPS);
        let dot: f64 = analytic
            .iter()
            .zip(&dirs)
            .map(|(g, v)| {
                g.data()
                    .iter()
                    .zip(v.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum();
        assert!(
            (dot - fd).abs() / dot.abs().max(fd.abs()) < 1e-4,
            "direction {d}: {dot} vs {fd}"
        );
    }
}

#[test]
fn fno_rel_l2_gradient() {
    let (model, x, y) = small_model(1);
    check_model(
        &model,
        |t, m, xv, pv| {
            let f = forward(t, &m.config, pv, xv, None).unwrap();
            rel_l2_loss(t, f.output, &y).unwrap()
        },
        &x,
    );
}

#[test]
fn fno_diverse_gradient() {
    let (model, x, y) = small_model(3);
    check_model(
        &model,
        |t, m, xv, pv| {
            let f = forward(t, &m.config, pv, xv, None).unwrap();
            diverse_loss(t, f.output, &y, &pv.heads, 0.5, false).unwrap()
        },
        &x,
    );
}

#[test]
fn fno_nll_gradient() {
    let (model, x, y) = small_model(2);
    check_model(
        &model,
        |t, m, xv, pv| {
            let f = forward(t, &m.config, pv, xv, None).unwrap();
            let (mu, lv) = split_mean_logvar(t, f.output).unwrap();
            nll_loss(t, mu, lv, &y).unwrap()
        },
        &x,
    );
}
