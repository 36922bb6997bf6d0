//! The benchmark workloads must stay valid as the library evolves.

use oodno_core::constraint::{build_constraint_all, probconserv_field};
use oodno_core::fno::{forward, FnoConfig, FnoModel};
use oodno_core::numerics::{Tape, Tensor};
use oodno_core::pde_suite::{PdeFamily, PdeTask};

#[test]
fn fno_step_is_finite_for_multihead_config() {
    let cfg = FnoConfig {
        width: 16,
        hidden: 32,
        n_heads: 10,
        nt: 16,
        nx: 16,
        modes_t: 5,
        modes_x: 5,
        ..FnoConfig::default()
    };
    let model = FnoModel::new(cfg, 0).unwrap();
    let x = Tensor::from_fn(&[2, 3, 16, 16], |k| (k as f64 * 0.01).sin());
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let xv = tape.constant(x);
    let f = forward(&mut tape, &cfg, &p, xv, None).unwrap();
    assert_eq!(tape.shape(f.output), &[2, 10, 16, 16]);
    let sq = tape.square(f.output);
    let l = tape.mean(sq);
    assert!(tape.value(l).item().is_finite());
    tape.backward(l).unwrap();
}

#[test]
fn default_grid_correction_meets_the_constraint() {
    let task = PdeTask::new(PdeFamily::Heat);
    let cs = build_constraint_all(&task, 2.0).unwrap();
    let n = cs.n_points();
    let mean: Vec<f64> = (0..n).map(|k| (k as f64 * 0.1).sin()).collect();
    let std: Vec<f64> = (0..n).map(|k| 0.1 + (k % 7) as f64 * 0.01).collect();
    let (mu, sd) = probconserv_field(&mean, &std, &cs).unwrap();
    let r = cs.residual(&mu);
    assert!(r.iter().all(|v| v.abs() < 1e-8), "{r:?}");
    assert!(sd.iter().zip(&std).all(|(a, b)| a <= b));
}
