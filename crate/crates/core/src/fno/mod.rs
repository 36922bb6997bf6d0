//! Fourier Neural Operator over the space-time grid.
//!
//! Activations are kept channel-first, `[B, C, nt, nx]`. The trunk is a
//! pointwise lifting followed by `n_layers` spectral blocks; each head is
//! its own `width → hidden → 1` projection.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FnoConfig {
    pub n_layers: usize,
    pub width: usize,
    pub modes_t: usize,
    pub modes_x: usize,
    pub in_channels: usize,
    pub n_heads: usize,
    /// Hidden width of each projection head.
    pub hidden: usize,
    pub dropout_p: f64,
    pub nt: usize,
    pub nx: usize,
}

impl Default for FnoConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            width: 32,
            modes_t: 12,
            modes_x: 12,
            in_channels: 3,
            n_heads: 1,
            hidden: 128,
            dropout_p: 0.0,
            nt: 64,
            nx: 64,
        }
    }
}

impl FnoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 {
            return Err(invalid("an FNO needs at least one head"));
        }
        if self.width == 0 || self.hidden == 0 || self.in_channels == 0 {
            return Err(invalid("width, hidden and in_channels must be positive"));
        }
        if self.modes_t == 0 || self.modes_x == 0 {
            return Err(invalid("at least one Fourier mode per axis is required"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(invalid(format!(
                "dropout probability {} not in [0, 1)",
                self.dropout_p
            )));
        }
        crate::numerics::fft::check_pow2(self.nt)?;
        crate::numerics::fft::check_pow2(self.nx)?;
        Ok(())
    }

    /// Time modes actually kept: rows `0..mt` and `nt-mt..nt`.
    pub fn eff_modes_t(&self) -> usize {
        self.modes_t.min(self.nt / 2)
    }

    /// Space modes actually kept: columns `0..mx` of the half spectrum.
    pub fn eff_modes_x(&self) -> usize {
        self.modes_x.min(self.nx / 2 + 1)
    }

    pub fn spectral_shape(&self) -> [usize; 5] {
        [
            self.width,
            self.width,
            2 * self.eff_modes_t(),
            self.eff_modes_x(),
            2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Complex weights stored as `[w, w, 2·mt, mx, 2]` (re, im).
    pub spectral: Tensor,
    pub pointwise_w: Tensor,
    pub pointwise_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl HeadParams {
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// All head weights as one flat vector `θ_m`.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FnoParams {
    pub lift_w: Tensor,
    pub lift_b: Tensor,
    pub layers: Vec<LayerParams>,
    pub heads: Vec<HeadParams>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

impl HeadParams {
    pub fn init(cfg: &FnoConfig, rng: &mut ChaCha8Rng) -> Self {
        let b1 = 1.0 / (cfg.width as f64).sqrt();
        let b2 = 1.0 / (cfg.hidden as f64).sqrt();
        Self {
            w1: uniform(rng, &[cfg.hidden, cfg.width], b1),
            b1: uniform(rng, &[cfg.hidden], b1),
            w2: uniform(rng, &[1, cfg.hidden], b2),
            b2: uniform(rng, &[1], b2),
        }
    }

    pub fn zeros(cfg: &FnoConfig) -> Self {
        Self {
            w1: Tensor::zeros(&[cfg.hidden, cfg.width]),
            b1: Tensor::zeros(&[cfg.hidden]),
            w2: Tensor::zeros(&[1, cfg.hidden]),
            b2: Tensor::zeros(&[1]),
        }
    }
}

impl FnoParams {
    /// Fan-in scaled uniform init for pointwise maps; spectral weights are
    /// `U(0,1)/w²` in both real and imaginary parts.
    pub fn init(cfg: &FnoConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cfg.width;
        let lb = 1.0 / (cfg.in_channels as f64).sqrt();
        let lift_w = uniform(&mut rng, &[w, cfg.in_channels], lb);
        let lift_b = uniform(&mut rng, &[w], lb);
        let spec_scale = 1.0 / (w * w) as f64;
        let pb = 1.0 / (w as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                spectral: Tensor::from_fn(&cfg.spectral_shape(), |_| {
                    spec_scale * rng.random::<f64>()
                }),
                pointwise_w: uniform(&mut rng, &[w, w], pb),
                pointwise_b: uniform(&mut rng, &[w], pb),
            })
            .collect();
        let heads = (0..cfg.n_heads)
            .map(|_| HeadParams::init(cfg, &mut rng))
            .collect();
        Ok(Self {
            lift_w,
            lift_b,
            layers,
            heads,
        })
    }

    /// Parameter tensors in a fixed order, paired with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("lift_w".to_string(), &self.lift_w),
            ("lift_b".to_string(), &self.lift_b),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}_spectral"), &layer.spectral));
            out.push((format!("layer{l}_pointwise_w"), &layer.pointwise_w));
            out.push((format!("layer{l}_pointwise_b"), &layer.pointwise_b));
        }
        for (m, head) in self.heads.iter().enumerate() {
            for (name, t) in ["w1", "b1", "w2", "b2"].iter().zip(head.tensors()) {
                out.push((format!("head{m}_{name}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.lift_w, &mut self.lift_b];
        for layer in &mut self.layers {
            out.extend([
                &mut layer.spectral,
                &mut layer.pointwise_w,
                &mut layer.pointwise_b,
            ]);
        }
        for head in &mut self.heads {
            out.extend([&mut head.w1, &mut head.b1, &mut head.w2, &mut head.b2]);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Put every tensor on `tape`, as parameters or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ParamVars {
            lift_w: put(&self.lift_w),
            lift_b: put(&self.lift_b),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    spectral: put(&l.spectral),
                    pointwise_w: put(&l.pointwise_w),
                    pointwise_b: put(&l.pointwise_b),
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| HeadVars {
                    w1: put(&h.w1),
                    b1: put(&h.b1),
                    w2: put(&h.w2),
                    b2: put(&h.b2),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub spectral: Var,
    pub pointwise_w: Var,
    pub pointwise_b: Var,
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl HeadVars {
    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Tape handles for an [`FnoParams`], in the same order as
/// [`FnoParams::tensors_mut`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub lift_w: Var,
    pub lift_b: Var,
    pub layers: Vec<LayerVars>,
    pub heads: Vec<HeadVars>,
}

impl ParamVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.lift_w, self.lift_b];
        for l in &self.layers {
            out.extend([l.spectral, l.pointwise_w, l.pointwise_b]);
        }
        for h in &self.heads {
            out.extend(h.vars());
        }
        out
    }
}

/// Result of one forward pass on a tape.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B, n_heads, nt, nx]`.
    pub output: Var,
    /// Per head, the penultimate features `[B, hidden, nt, nx]` (after GELU
    /// and dropout).
    pub hidden: Vec<Var>,
}

/// `[B, nt, nx, C]` → `[B, C, nt, nx]`.
pub fn to_channel_first(x: &Tensor) -> Result<Tensor> {
    let &[b, nt, nx, c] = x.shape() else {
        return Err(invalid(format!(
            "expected [B, nt, nx, C] input, got {:?}",
            x.shape()
        )));
    };
    let d = x.data();
    let plane = nt * nx;
    Tensor::new(
        vec![b, c, nt, nx],
        (0..b * c * plane)
            .map(|k| {
                let (bi, rem) = (k / (c * plane), k % (c * plane));
                let (ch, p) = (rem / plane, rem % plane);
                d[(bi * plane + p) * c + ch]
            })
            .collect(),
    )
}

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = Tensor::from_fn(tape.shape(x), |_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            });
            tape.dropout_mask_apply(x, mask)
        }
        _ => Ok(x),
    }
}

/// One spectral block: `irfft2(W ⊙ truncate(rfft2(x))) + pointwise(x)`,
/// followed by GELU unless `last`.
pub fn spectral_conv(
    tape: &mut Tape,
    cfg: &FnoConfig,
    layer: &LayerVars,
    x: Var,
    last: bool,
) -> Result<Var> {
    let z = tape.rfft2(x)?;
    let w = tape.as_complex(layer.spectral)?;
    let mixed = tape.spectral_mix(z, w, cfg.eff_modes_t(), cfg.eff_modes_x())?;
    let spec = tape.irfft2(mixed)?;
    let pw = tape.channel_linear(x, layer.pointwise_w, Some(layer.pointwise_b))?;
    let s = tape.add(spec, pw)?;
    Ok(if last { s } else { tape.gelu(s) })
}

/// Forward pass on `input: [B, C_in, nt, nx]`. Dropout masks are drawn from
/// `rng` when given and `dropout_p > 0`; pass `None` for deterministic
/// inference.
pub fn forward(
    tape: &mut Tape,
    cfg: &FnoConfig,
    p: &ParamVars,
    input: Var,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward> {
    let s = tape.shape(input);
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.nt || s[3] != cfg.nx {
        return Err(crate::Error::ShapeMismatch {
            op: "fno_forward",
            lhs: s.to_vec(),
            rhs: vec![
                s.first().copied().unwrap_or(0),
                cfg.in_channels,
                cfg.nt,
                cfg.nx,
            ],
        });
    }
    let mut h = tape.channel_linear(input, p.lift_w, Some(p.lift_b))?;
    h = dropout(tape, h, cfg.dropout_p, rng.as_deref_mut())?;
    let n = p.layers.len();
    for (l, layer) in p.layers.iter().enumerate() {
        h = spectral_conv(tape, cfg, layer, h, l + 1 == n)?;
    }
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut hidden = Vec::with_capacity(p.heads.len());
    for head in &p.heads {
        let a = tape.channel_linear(h, head.w1, Some(head.b1))?;
        let a = tape.gelu(a);
        let a = dropout(tape, a, cfg.dropout_p, rng.as_deref_mut())?;
        outs.push(tape.channel_linear(a, head.w2, Some(head.b2))?);
        hidden.push(a);
    }
    let output = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 1)?
    };
    Ok(Forward { output, hidden })
}

/// A configuration together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FnoModel {
    pub config: FnoConfig,
    pub params: FnoParams,
}

impl FnoModel {
    pub fn new(config: FnoConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: FnoParams::init(&config, seed)?,
            config,
        })
    }

    /// Inference on `[B, nt, nx, C_in]`, returning `[B, n_heads, nt, nx]`.
    pub fn predict_batch(&self, inputs: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(to_channel_first(inputs)?);
        let f = forward(&mut tape, &self.config, &p, x, rng)?;
        Ok(tape.value(f.output).clone())
    }

    /// Single sample `[nt, nx, C_in]` → `[n_heads, nt, nx]`.
    pub fn predict(&self, input: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        let out = self.predict_batch(&input.clone().reshape(&shape)?, rng)?;
        Ok(out.outer(0))
    }
}

/// Analytic operation count for one forward pass of a single sample.
///
/// With `P = nt·nx`, `w = width`, `h = hidden`:
/// lifting `2·P·C_in·w`; per spectral layer `2·5·P·log2(P)·w` for the
/// forward and inverse FFTs, `8·w²·mt·mx` for the complex multiply-adds and
/// `2·P·w²` for the pointwise map; per head `2·P·w·h + 2·P·h`.
pub fn count_flops(cfg: &FnoConfig, nt: usize, nx: usize) -> u64 {
    let p = (nt * nx) as u64;
    let w = cfg.width as u64;
    let h = cfg.hidden as u64;
    let log2p = (nt * nx).trailing_zeros() as u64;
    let (mt, mx) = (
        cfg.modes_t.min(nt / 2) as u64,
        cfg.modes_x.min(nx / 2 + 1) as u64,
    );
    let lifting = 2 * p * cfg.in_channels as u64 * w;
    let layer = 2 * 5 * p * log2p * w + 8 * w * w * mt * mx + 2 * p * w * w;
    let head = 2 * p * w * h + 2 * p * h;
    lifting + cfg.n_layers as u64 * layer + cfg.n_heads as u64 * head
}
