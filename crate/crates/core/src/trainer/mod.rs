//! Losses, the Adam training loop with early stopping, and λ selection.

mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fno::{forward, to_channel_first, FnoModel, Forward, ParamVars};
use crate::numerics::{Tape, Tensor, Var};
use crate::pde_suite::Dataset;

pub use loss::{
    diverse_loss, diversity_penalty, flatten_head, nll_loss, pairwise_sq_distance, rel_l2_loss,
    select_lambda, split_mean_logvar, Diversity, DiversityKind,
};

/// Regularization strengths searched for the diversity penalty.
pub const LAMBDA_GRID: [f64; 5] = [1e-2, 1e-1, 1.0, 1e1, 1e2];
pub const LR_GRID: [f64; 3] = [1e-4, 1e-3, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    RelL2,
    Nll,
    DiverseRelL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub lambda_diverse: f64,
    pub diversity: Diversity,
    /// Samples per tape; gradients are accumulated across micro-batches.
    pub micro_batch: usize,
    /// Return the weights at the best validation loss rather than those
    /// after the last epoch run.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            lr: 1e-3,
            max_epochs: 500,
            patience: 50,
            seed: 0,
            loss: LossKind::RelL2,
            lambda_diverse: 0.0,
            diversity: Diversity::default(),
            micro_batch: 5,
            restore_best: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mse: f64,
    /// Diversity term of the objective at this epoch's weights (0 if none).
    pub val_penalty: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights at the best validation loss.
    pub model: FnoModel,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_mse: f64,
    pub log: Vec<EpochLog>,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Collapse `[B, M, nt, nx]` model output to the point prediction used for
/// validation MSE: the head average, or the μ head for NLL models.
pub fn point_prediction(out: &Tensor, loss: LossKind) -> Tensor {
    let s = out.shape();
    let (b, m, p) = (s[0], s[1], s[2] * s[3]);
    let heads = if loss == LossKind::Nll { 1 } else { m };
    Tensor::from_fn(&[b, s[2], s[3]], |k| {
        let (i, q) = (k / p, k % p);
        (0..heads)
            .map(|h| out.data()[(i * m + h) * p + q])
            .sum::<f64>()
            / heads as f64
    })
}

fn data_loss(tape: &mut Tape, f: &Forward, targets: &Tensor, loss: LossKind) -> Result<Var> {
    match loss {
        LossKind::RelL2 | LossKind::DiverseRelL2 => rel_l2_loss(tape, f.output, targets),
        LossKind::Nll => {
            let (mu, lv) = split_mean_logvar(tape, f.output)?;
            nll_loss(tape, mu, lv, targets)
        }
    }
}

/// Mean validation loss and MSE of the point prediction over `ds`.
pub fn evaluate(
    model: &FnoModel,
    ds: &Dataset,
    loss: LossKind,
    chunk: usize,
) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut lsum, mut sq, mut npts) = (0.0, 0.0, 0usize);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (x, y) = ds.batch(part)?;
        let mut tape = Tape::new();
        let pv = model.params.bind(&mut tape, false);
        let xv = tape.constant(to_channel_first(&x)?);
        let f = forward(&mut tape, &model.config, &pv, xv, None)?;
        let l = data_loss(&mut tape, &f, &y, loss)?;
        lsum += tape.value(l).item() * part.len() as f64;
        let pred = point_prediction(tape.value(f.output), loss);
        sq += pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        npts += y.len();
    }
    Ok((lsum / ds.len() as f64, sq / npts as f64))
}

/// `∂(rel-L2)/∂w2_m` for each head, built on the tape so that its distance
/// can itself be differentiated.
fn head_gradients(tape: &mut Tape, f: &Forward, targets: &Tensor) -> Result<Vec<Var>> {
    let s = tape.shape(f.output).to_vec();
    let (b, nt, nx) = (s[0], s[2], s[3]);
    let p = nt * nx;
    let weights = Tensor::from_fn(&[b, 1, nt, nx], |k| {
        let i = k / p;
        let n2: f64 = targets.data()[i * p..(i + 1) * p]
            .iter()
            .map(|v| v * v)
            .sum();
        2.0 / (n2 * b as f64)
    });
    let tgt = tape.constant(targets.clone().reshape(&[b, 1, nt, nx])?);
    let mut out = Vec::with_capacity(s[1]);
    for (m, &hid) in f.hidden.iter().enumerate() {
        let h = tape.shape(hid)[1];
        let om = tape.slice(f.output, 1, m, 1)?;
        let d = tape.sub(om, tgt)?;
        let r = tape.mul_const(d, weights.clone())?;
        let mut g: Option<Var> = None;
        for i in 0..b {
            let ri = tape.slice(r, 0, i, 1)?;
            let ri = tape.reshape(ri, &[p, 1])?;
            let hi = tape.slice(hid, 0, i, 1)?;
            let hi = tape.reshape(hi, &[h, p])?;
            let gi = tape.matmul(hi, ri)?;
            g = Some(match g {
                Some(acc) => tape.add(acc, gi)?,
                None => gi,
            });
        }
        let g = g.ok_or_else(|| invalid("empty batch"))?;
        out.push(tape.reshape(g, &[h])?);
    }
    Ok(out)
}

fn accumulate(acc: &mut [Tensor], tape: &Tape, pv: &ParamVars, grads: &crate::numerics::Gradients) {
    for (a, v) in acc.iter_mut().zip(pv.vars()) {
        if let Some(g) = grads.get(v) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
        debug_assert_eq!(a.shape(), tape.shape(v));
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    ood_inputs: Option<&'a Tensor>,
    dropout_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer<'_> {
    fn diversity_active(&self, n_heads: usize) -> Result<bool> {
        if self.cfg.loss != LossKind::DiverseRelL2 || self.cfg.lambda_diverse == 0.0 {
            return Ok(false);
        }
        if n_heads < 2 {
            return Err(invalid(format!(
                "λ = {} needs at least 2 heads, model has {n_heads}",
                self.cfg.lambda_diverse
            )));
        }
        Ok(true)
    }

    /// One optimizer step's gradient and loss on `indices`.
    fn batch_gradient(
        &mut self,
        model: &FnoModel,
        ds: &Dataset,
        indices: &[usize],
    ) -> Result<(f64, Vec<Tensor>)> {
        let cfg = self.cfg;
        let mut acc: Vec<Tensor> = model
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut total = 0.0;
        let diverse = self.diversity_active(model.config.n_heads)?;
        let (lambda, div) = (cfg.lambda_diverse, cfg.diversity);
        for (ci, part) in indices.chunks(cfg.micro_batch.max(1)).enumerate() {
            let (x, y) = ds.batch(part)?;
            let mut tape = Tape::new();
            let pv = model.params.bind(&mut tape, true);
            let xv = tape.constant(to_channel_first(&x)?);
            let f = forward(
                &mut tape,
                &model.config,
                &pv,
                xv,
                Some(&mut self.dropout_rng),
            )?;
            let l = data_loss(&mut tape, &f, &y, cfg.loss)?;
            let mut l = tape.scale(l, part.len() as f64 / indices.len() as f64);
            // The gradient-diversity term uses the first micro-batch only.
            if diverse && div.kind == DiversityKind::Gradients && ci == 0 {
                let g = head_gradients(&mut tape, &f, &y)?;
                let pen = diversity_penalty(&mut tape, &g, lambda, div.standardized)?;
                l = tape.add(l, pen)?;
            }
            total += tape.value(l).item();
            let grads = tape.backward(l)?;
            accumulate(&mut acc, &tape, &pv, &grads);
        }
        if diverse && div.kind != DiversityKind::Gradients {
            let mut tape = Tape::new();
            let pv = model.params.bind(&mut tape, true);
            let q: Vec<Var> = match div.kind {
                DiversityKind::Weights => pv
                    .heads
                    .iter()
                    .map(|h| flatten_head(&mut tape, h))
                    .collect::<Result<_>>()?,
                _ => {
                    let ood = self.ood_inputs.ok_or_else(|| {
                        invalid("the outputs diversity penalty needs unlabeled OOD inputs")
                    })?;
                    let xo = self.ood_batch(ood)?;
                    let xv = tape.constant(to_channel_first(&xo)?);
                    let f = forward(&mut tape, &model.config, &pv, xv, None)?;
                    let n = tape.shape(f.output)[0] * model.config.nt * model.config.nx;
                    (0..model.config.n_heads)
                        .map(|m| {
                            let s = tape.slice(f.output, 1, m, 1)?;
                            tape.reshape(s, &[n])
                        })
                        .collect::<Result<_>>()?
                }
            };
            let pen = diversity_penalty(&mut tape, &q, lambda, div.standardized)?;
            total += tape.value(pen).item();
            let grads = tape.backward(pen)?;
            accumulate(&mut acc, &tape, &pv, &grads);
        }
        Ok((total, acc))
    }

    /// The diversity term of the objective at the current weights, on the
    /// validation set (gradients kind) or the whole OOD pool (outputs kind).
    fn validation_penalty(&self, model: &FnoModel, val: &Dataset) -> Result<f64> {
        if !self.diversity_active(model.config.n_heads)? {
            return Ok(0.0);
        }
        let div = self.cfg.diversity;
        let mut tape = Tape::new();
        let pv = model.params.bind(&mut tape, false);
        let q: Vec<Var> = match div.kind {
            DiversityKind::Weights => pv
                .heads
                .iter()
                .map(|h| flatten_head(&mut tape, h))
                .collect::<Result<_>>()?,
            DiversityKind::Gradients => {
                if val.is_empty() {
                    return Ok(0.0);
                }
                let idx: Vec<usize> = (0..val.len()).collect();
                let (x, y) = val.batch(&idx)?;
                let xv = tape.constant(to_channel_first(&x)?);
                let f = forward(&mut tape, &model.config, &pv, xv, None)?;
                head_gradients(&mut tape, &f, &y)?
            }
            DiversityKind::Outputs => {
                let ood = self.ood_inputs.ok_or_else(|| {
                    invalid("the outputs diversity penalty needs unlabeled OOD inputs")
                })?;
                let xv = tape.constant(to_channel_first(ood)?);
                let f = forward(&mut tape, &model.config, &pv, xv, None)?;
                let n = tape.shape(f.output)[0] * model.config.nt * model.config.nx;
                (0..model.config.n_heads)
                    .map(|m| {
                        let s = tape.slice(f.output, 1, m, 1)?;
                        tape.reshape(s, &[n])
                    })
                    .collect::<Result<_>>()?
            }
        };
        let pen = diversity_penalty(&mut tape, &q, self.cfg.lambda_diverse, div.standardized)?;
        Ok(tape.value(pen).item())
    }

    /// Rotate through the unlabeled OOD pool, `micro_batch` inputs per step.
    fn ood_batch(&self, ood: &Tensor) -> Result<Tensor> {
        let n = ood.shape()[0];
        if n == 0 {
            return Err(invalid("empty OOD input pool"));
        }
        let k = self.cfg.micro_batch.clamp(1, n);
        let items: Vec<Tensor> = (0..k).map(|j| ood.outer((self.step * k + j) % n)).collect();
        Tensor::stack(&items)
    }
}

/// Train `model` on `train`, early-stopping on `val`. `ood_inputs`
/// (`[N, nt, nx, C]`, no targets) is only consulted by the outputs
/// diversity penalty.
pub fn train(
    model: FnoModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    ood_inputs: Option<&Tensor>,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    if cfg.loss == LossKind::Nll && model.config.n_heads != 2 {
        return Err(invalid(
            "NLL training needs a (mean, log-variance) two-head model",
        ));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut tr = Trainer {
        cfg,
        ood_inputs,
        dropout_rng,
        step: 0,
    };
    tr.diversity_active(model.config.n_heads)?;

    let eval_chunk = cfg.micro_batch.max(1) * 2;
    // Early stopping watches the data loss only; the diversity term is logged.
    let (v0, m0) = evaluate(&model, val_set, cfg.loss, eval_chunk)?;
    let mut best = TrainOutcome {
        model: model.clone(),
        best_epoch: 0,
        best_val_loss: v0,
        best_val_mse: m0,
        log: Vec::new(),
    };
    let mut model = model;
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (l, grads) = tr.batch_gradient(&model, train_set, batch)?;
            if !l.is_finite() || !grads.iter().all(Tensor::all_finite) {
                return Err(Error::Diverged {
                    epoch,
                    last_finite: Box::new(model.params),
                });
            }
            adam.step(model.params.tensors_mut(), &grads);
            tr.step += 1;
            epoch_loss += l;
            n_batches += 1;
        }
        if !model.params.all_finite() {
            return Err(Error::Diverged {
                epoch,
                last_finite: Box::new(best.model.params),
            });
        }
        let (vl, vm) = evaluate(&model, val_set, cfg.loss, eval_chunk)?;
        best.log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / n_batches.max(1) as f64,
            val_loss: vl,
            val_penalty: tr.validation_penalty(&model, val_set)?,
            val_mse: vm,
        });
        // An empty validation split keeps the latest weights.
        if vl < best.best_val_loss || !best.best_val_loss.is_finite() {
            best.model = model.clone();
            best.best_epoch = epoch;
            best.best_val_loss = vl;
            best.best_val_mse = vm;
        } else if epoch - best.best_epoch >= cfg.patience {
            break;
        }
    }
    if let (false, Some(last)) = (cfg.restore_best, best.log.last().cloned()) {
        best.best_epoch = last.epoch;
        best.best_val_loss = last.val_loss;
        best.best_val_mse = last.val_mse;
        best.model = model;
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fno::FnoConfig;
    use crate::pde_suite::{build_dataset, PdeFamily, PdeTask, Split};

    fn setup(n_heads: usize) -> (FnoModel, Dataset, Dataset) {
        let task = PdeTask::with_grid(PdeFamily::Heat, 8, 8);
        let ds = build_dataset(&task, Split::Train, 10, 0).unwrap();
        let (tr, va) = ds.split_validation(5, 0).unwrap();
        let cfg = FnoConfig {
            width: 4,
            hidden: 4,
            modes_t: 2,
            modes_x: 2,
            n_layers: 2,
            n_heads,
            nt: 8,
            nx: 8,
            ..FnoConfig::default()
        };
        (FnoModel::new(cfg, 3).unwrap(), tr, va)
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (m, tr, va) = setup(1);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(train(m.clone(), &tr, &va, &cfg, None).unwrap().model, m);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (m, tr, va) = setup(1);
        let cfg = TrainConfig {
            max_epochs: 15,
            batch_size: 4,
            micro_batch: 2,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let a = train(m.clone(), &tr, &va, &cfg, None).unwrap();
        let b = train(m.clone(), &tr, &va, &cfg, None).unwrap();
        assert_eq!(a.model, b.model);
        assert!(a.best_val_loss < evaluate(&m, &va, LossKind::RelL2, 4).unwrap().0);
    }

    #[test]
    fn last_epoch_weights_on_request() {
        let (m, tr, va) = setup(1);
        let cfg = TrainConfig {
            max_epochs: 6,
            batch_size: 4,
            lr: 1e-2,
            restore_best: false,
            ..TrainConfig::default()
        };
        let out = train(m.clone(), &tr, &va, &cfg, None).unwrap();
        assert_eq!(out.best_epoch, 6);
        assert_eq!(out.best_val_mse, out.log[5].val_mse);
        assert_eq!(
            out.best_val_mse,
            evaluate(&out.model, &va, LossKind::RelL2, 4).unwrap().1
        );
    }

    #[test]
    fn micro_batching_matches_full_batch_gradient() {
        let (m, tr, _) = setup(2);
        let grad = |micro| {
            let cfg = TrainConfig {
                micro_batch: micro,
                ..TrainConfig::default()
            };
            let mut t = Trainer {
                cfg: &cfg,
                ood_inputs: None,
                dropout_rng: ChaCha8Rng::seed_from_u64(0),
                step: 0,
            };
            t.batch_gradient(&m, &tr, &[0, 1, 2, 3, 4, 5]).unwrap()
        };
        let ((la, ga), (lb, gb)) = (grad(6), grad(2));
        assert!((la - lb).abs() < 1e-14);
        for (x, y) in ga.iter().zip(&gb) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() < 1e-12 * (1.0 + p.abs()));
            }
        }
    }

    #[test]
    fn diversity_requires_two_heads() {
        let (m, tr, va) = setup(1);
        let cfg = TrainConfig {
            loss: LossKind::DiverseRelL2,
            lambda_diverse: 1.0,
            ..TrainConfig::default()
        };
        assert!(train(m, &tr, &va, &cfg, None).is_err());
    }

    #[test]
    fn weight_penalty_pushes_heads_apart() {
        let (m, tr, va) = setup(3);
        let dist = |m: &FnoModel| {
            let h = &m.params.heads;
            let (a, b) = (h[0].flatten(), h[1].flatten());
            a.iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        };
        let run = |lambda| {
            let cfg = TrainConfig {
                max_epochs: 5,
                batch_size: 4,
                loss: LossKind::DiverseRelL2,
                lambda_diverse: lambda,
                patience: 100,
                ..TrainConfig::default()
            };
            let out = train(m.clone(), &tr, &va, &cfg, None).unwrap();
            dist(&out.model)
        };
        assert!(run(10.0) > run(0.0));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let g = Tensor::from_vec(vec![0.5, -3.0]);
        let mut adam = Adam::new(0.1);
        adam.step(vec![&mut p], &[g]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
    }
}
