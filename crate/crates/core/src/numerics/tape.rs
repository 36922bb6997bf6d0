//! Reverse-mode differentiation over a linear tape of recorded primitives.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use num_complex::Complex64;

use super::fft;
use super::tensor::{ComplexTensor, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Value {
    Real(Tensor),
    Complex(ComplexTensor),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    ChannelLinear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gelu(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Standardize(Var),
    AsComplex(Var),
    Rfft2(Var),
    Irfft2(Var),
    SpectralMix {
        x: Var,
        w: Var,
        modes_t: usize,
        modes_x: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    /// Gradient of a real node; `None` when the node does not influence the
    /// loss or was not tracked.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        match self.grads.get(v.0)? {
            Some(Value::Real(t)) => Some(t),
            _ => None,
        }
    }

    /// Gradient with the node's shape, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * GELU_INV_SQRT2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * GELU_INV_SQRT2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, with optional transposes expressed via strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover the m×k, k×n and m×n extents addressed by
    // the strides above.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Split a shape around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn spectral_row(r: usize, modes_t: usize, h: usize) -> usize {
    if r < modes_t {
        r
    } else {
        h - 2 * modes_t + r
    }
}

/// Copy the retained block of one `h × wh` spectrum into `out` (row-major
/// over `2·modes_t × modes_x`).
fn gather_modes(
    plane: &[Complex64],
    h: usize,
    wh: usize,
    modes_t: usize,
    modes_x: usize,
    out: &mut [Complex64],
) {
    for r in 0..2 * modes_t {
        let row = spectral_row(r, modes_t, h);
        out[r * modes_x..(r + 1) * modes_x].copy_from_slice(&plane[row * wh..row * wh + modes_x]);
    }
}

/// Inverse of [`gather_modes`]; bins outside the block are left untouched.
fn scatter_modes(
    block: &[Complex64],
    h: usize,
    wh: usize,
    modes_t: usize,
    modes_x: usize,
    plane: &mut [Complex64],
) {
    for r in 0..2 * modes_t {
        let row = spectral_row(r, modes_t, h);
        plane[row * wh..row * wh + modes_x].copy_from_slice(&block[r * modes_x..(r + 1) * modes_x]);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_real(&mut self, t: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Value::Real(t), op, rg)
    }

    fn push_complex(&mut self, t: ComplexTensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Value::Complex(t), op, rg)
    }

    /// Input that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Real(t), Op::Leaf, false)
    }

    /// Leaf whose gradient is collected by `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Value::Real(t), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Real(t) => t,
            Value::Complex(_) => panic!("node {} holds a complex value", v.0),
        }
    }

    pub fn complex_value(&self, v: Var) -> &ComplexTensor {
        match &self.nodes[v.0].value {
            Value::Complex(t) => t,
            Value::Real(_) => panic!("node {} holds a real value", v.0),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        match &self.nodes[v.0].value {
            Value::Real(t) => t.shape(),
            Value::Complex(t) => t.shape(),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let out = ta.zip_map(tb, f)?;
        Ok(self.push_real(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise product with a fixed tensor (dropout masks, quadrature
    /// weights).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(mismatch("mul_const", tx.shape(), c.shape()));
        }
        let out = tx.zip_map(&c, |a, b| a * b)?;
        Ok(self.push_real(out, Op::MulConst(x, c), &[x]))
    }

    /// Apply a precomputed dropout mask (entries `0` or `1/(1-p)`).
    pub fn dropout_mask_apply(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        self.mul_const(x, mask)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push_real(out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push_real(out, Op::AddScalar(x), &[x])
    }

    /// Plain matrix product `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        };
        if k != k2 {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push_real(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Channel mixing `[B, Cin, ..] -> [B, Cout, ..]` with weight `[Cout, Cin]`
    /// and optional bias `[Cout]`, applied independently at every grid point.
    pub fn channel_linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() < 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(mismatch("channel_linear", xs, ws));
        }
        let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
        let spatial: usize = xs[2..].iter().product();
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [cout] {
                return Err(mismatch("channel_linear bias", bs, &[cout]));
            }
        }
        let mut out = vec![0.0; batch * cout * spatial];
        for bi in 0..batch {
            let xin = &tx.data()[bi * cin * spatial..(bi + 1) * cin * spatial];
            let o = &mut out[bi * cout * spatial..(bi + 1) * cout * spatial];
            if let Some(b) = b {
                for (c, row) in o.chunks_exact_mut(spatial).enumerate() {
                    row.fill(self.value(b).data()[c]);
                }
            }
            gemm(
                cout,
                cin,
                spatial,
                tw.data(),
                false,
                xin,
                false,
                o,
                b.is_some(),
            );
        }
        let mut shape = xs.to_vec();
        shape[1] = cout;
        let out = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_real(out, Op::ChannelLinear { x, w, b }, &inputs))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push_real(out, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push_real(out, Op::Exp(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push_real(out, Op::Square(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::sqrt);
        self.push_real(out, Op::Sqrt(x), &[x])
    }

    /// `max(x, floor)`; the gradient is passed only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor));
        self.push_real(out, Op::ClampMin(x, floor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_real(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        self.push_real(out, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push_real(out, Op::Reshape(x), &[x]))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(format!(
                "slice {start}..{} on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_split(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = len;
        let out = Tensor::new(new_shape, out)?;
        Ok(self.push_real(out, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid("concat of zero tensors"));
        };
        let base_shape = self.value(first).shape().to_vec();
        if axis >= base_shape.len() {
            return Err(invalid(format!(
                "concat axis {axis} out of range for {base_shape:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let same = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(mismatch("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        Ok(self.push_real(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Z-score over all elements: `(x - mean) / sqrt(var + 1e-12)`.
    pub fn standardize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.len().max(1) as f64;
        let m = t.sum() / n;
        let var = t.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = (var + STANDARDIZE_EPS).sqrt();
        let out = t.map(|v| (v - m) / s);
        self.push_real(out, Op::Standardize(x), &[x])
    }

    /// Reinterpret a real tensor with trailing `(re, im)` axis as complex.
    pub fn as_complex(&mut self, x: Var) -> Result<Var> {
        let z = ComplexTensor::from_real_pairs(self.value(x))?;
        Ok(self.push_complex(z, Op::AsComplex(x), &[x]))
    }

    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let z = fft::rfft2(self.value(x))?;
        Ok(self.push_complex(z, Op::Rfft2(x), &[x]))
    }

    /// Inverse real transform; output width is `2·(Wh − 1)`.
    pub fn irfft2(&mut self, x: Var) -> Result<Var> {
        let z = self.complex_value(x);
        let wh = *z
            .shape()
            .last()
            .ok_or_else(|| invalid("irfft2 of rank-0 value"))?;
        let out = fft::irfft2(z, 2 * (wh - 1))?;
        Ok(self.push_real(out, Op::Irfft2(x), &[x]))
    }

    /// Complex channel mixing on the retained low-frequency block.
    ///
    /// `x: [B, Cin, H, Wh]`, `w: [Cin, Cout, 2·modes_t, modes_x]`. Retained
    /// rows are `0..modes_t` and `H-modes_t..H`; columns `0..modes_x`. All
    /// other output bins are zero.
    pub fn spectral_mix(&mut self, x: Var, w: Var, modes_t: usize, modes_x: usize) -> Result<Var> {
        let (zx, zw) = (self.complex_value(x), self.complex_value(w));
        let (xs, ws) = (zx.shape(), zw.shape());
        let [batch, cin, h, wh] = *xs else {
            return Err(mismatch("spectral_mix", xs, ws));
        };
        if ws.len() != 4 || ws[0] != cin || ws[2] != 2 * modes_t || ws[3] != modes_x {
            return Err(mismatch("spectral_mix", xs, ws));
        }
        if 2 * modes_t > h || modes_x > wh {
            return Err(invalid(format!(
                "modes ({modes_t}, {modes_x}) exceed spectrum extent ({h}, {wh})"
            )));
        }
        let cout = ws[1];
        let plane = h * wh;
        let nr = 2 * modes_t * modes_x;
        let mut out = vec![Complex64::new(0.0, 0.0); batch * cout * plane];
        let wd = zw.data();
        let mut xg = vec![Complex64::new(0.0, 0.0); cin * nr];
        let mut og = vec![Complex64::new(0.0, 0.0); cout * nr];
        for b in 0..batch {
            for i in 0..cin {
                let src = &zx.data()[(b * cin + i) * plane..(b * cin + i + 1) * plane];
                gather_modes(src, h, wh, modes_t, modes_x, &mut xg[i * nr..(i + 1) * nr]);
            }
            og.fill(Complex64::new(0.0, 0.0));
            for i in 0..cin {
                let xi = &xg[i * nr..(i + 1) * nr];
                for o in 0..cout {
                    let wio = &wd[(i * cout + o) * nr..(i * cout + o + 1) * nr];
                    for ((acc, &xv), &wv) in og[o * nr..(o + 1) * nr].iter_mut().zip(xi).zip(wio) {
                        *acc += xv * wv;
                    }
                }
            }
            for o in 0..cout {
                let dst = &mut out[(b * cout + o) * plane..(b * cout + o + 1) * plane];
                scatter_modes(&og[o * nr..(o + 1) * nr], h, wh, modes_t, modes_x, dst);
            }
        }
        let out = ComplexTensor::new(vec![batch, cout, h, wh], out)?;
        Ok(self.push_complex(
            out,
            Op::SpectralMix {
                x,
                w,
                modes_t,
                modes_x,
            },
            &[x, w],
        ))
    }

    /// Populate gradients of a scalar `loss` with respect to every tracked
    /// node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Value>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Value::Real(Tensor::full(lv.shape(), 1.0)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Value>], v: Var, g: Value) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match (&mut grads[v.0], g) {
            (slot @ None, g) => *slot = Some(g),
            (Some(Value::Real(acc)), Value::Real(g)) => {
                acc.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
            (Some(Value::Complex(acc)), Value::Complex(g)) => {
                acc.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
            _ => unreachable!("gradient kind does not match node kind"),
        }
    }

    fn real_grad(g: &Value) -> &Tensor {
        match g {
            Value::Real(t) => t,
            Value::Complex(_) => unreachable!("expected a real gradient"),
        }
    }

    fn complex_grad(g: &Value) -> &ComplexTensor {
        match g {
            Value::Complex(t) => t,
            Value::Real(_) => unreachable!("expected a complex gradient"),
        }
    }

    fn propagate(&self, idx: usize, g: &Value, grads: &mut [Option<Value>]) -> Result<()> {
        use Value::{Complex, Real};
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let g = Self::real_grad(g);
                self.accumulate(grads, *a, Real(g.clone()));
                self.accumulate(grads, *b, Real(g.clone()));
            }
            Op::Sub(a, b) => {
                let g = Self::real_grad(g);
                self.accumulate(grads, *a, Real(g.clone()));
                self.accumulate(grads, *b, Real(g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let g = Self::real_grad(g);
                let ga = g.zip_map(self.value(*b), |g, y| g * y)?;
                let gb = g.zip_map(self.value(*a), |g, x| g * x)?;
                self.accumulate(grads, *a, Real(ga));
                self.accumulate(grads, *b, Real(gb));
            }
            Op::MulConst(x, c) => {
                let g = Self::real_grad(g);
                self.accumulate(grads, *x, Real(g.zip_map(c, |g, c| g * c)?));
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, Real(Self::real_grad(g).map(|v| v * s)));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let g = Self::real_grad(g);
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Real(g.clone().reshape(&shape)?));
            }
            Op::MatMul(a, b) => {
                let g = Self::real_grad(g);
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    self.accumulate(grads, *a, Real(Tensor::new(vec![m, k], ga)?));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    self.accumulate(grads, *b, Real(Tensor::new(vec![k, n], gb)?));
                }
            }
            Op::ChannelLinear { x, w, b } => {
                let g = Self::real_grad(g);
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (batch, cin) = (tx.shape()[0], tx.shape()[1]);
                let cout = tw.shape()[0];
                let spatial: usize = tx.shape()[2..].iter().product();
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; tx.len()];
                    for bi in 0..batch {
                        gemm(
                            cin,
                            cout,
                            spatial,
                            tw.data(),
                            true,
                            &g.data()[bi * cout * spatial..(bi + 1) * cout * spatial],
                            false,
                            &mut gx[bi * cin * spatial..(bi + 1) * cin * spatial],
                            false,
                        );
                    }
                    self.accumulate(grads, *x, Real(Tensor::new(tx.shape().to_vec(), gx)?));
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; cout * cin];
                    for bi in 0..batch {
                        gemm(
                            cout,
                            spatial,
                            cin,
                            &g.data()[bi * cout * spatial..(bi + 1) * cout * spatial],
                            false,
                            &tx.data()[bi * cin * spatial..(bi + 1) * cin * spatial],
                            true,
                            &mut gw,
                            true,
                        );
                    }
                    self.accumulate(grads, *w, Real(Tensor::new(vec![cout, cin], gw)?));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; cout];
                    for (i, chunk) in g.data().chunks_exact(spatial).enumerate() {
                        gb[i % cout] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, Real(Tensor::from_vec(gb)));
                }
            }
            Op::Gelu(x) => {
                let g = Self::real_grad(g);
                let gx = g.zip_map(self.value(*x), |g, x| g * gelu_grad(x))?;
                self.accumulate(grads, *x, Real(gx));
            }
            Op::Exp(x) => {
                let g = Self::real_grad(g);
                let out = self.value(Var(idx));
                self.accumulate(grads, *x, Real(g.zip_map(out, |g, y| g * y)?));
            }
            Op::Square(x) => {
                let g = Self::real_grad(g);
                let gx = g.zip_map(self.value(*x), |g, x| 2.0 * g * x)?;
                self.accumulate(grads, *x, Real(gx));
            }
            Op::Sqrt(x) => {
                let g = Self::real_grad(g);
                let out = self.value(Var(idx));
                self.accumulate(grads, *x, Real(g.zip_map(out, |g, y| 0.5 * g / y)?));
            }
            Op::ClampMin(x, floor) => {
                let floor = *floor;
                let g = Self::real_grad(g);
                let gx = g.zip_map(self.value(*x), |g, x| if x > floor { g } else { 0.0 })?;
                self.accumulate(grads, *x, Real(gx));
            }
            Op::Sum(x) => {
                let g = Self::real_grad(g).item();
                self.accumulate(grads, *x, Real(Tensor::full(self.shape(*x), g)));
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let n = shape.iter().product::<usize>().max(1) as f64;
                let g = Self::real_grad(g).item() / n;
                self.accumulate(grads, *x, Real(Tensor::full(&shape, g)));
            }
            Op::Slice { x, axis, start } => {
                let g = Self::real_grad(g);
                let xs = self.shape(*x).to_vec();
                let len = g.shape()[*axis];
                let (outer, n, inner) = axis_split(&xs, *axis);
                let mut gx = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Real(Tensor::new(xs, gx)?));
            }
            Op::Concat { parts, axis } => {
                let g = Self::real_grad(g);
                let total = g.shape()[*axis];
                let (outer, _, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let n = ps[*axis];
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[src..src + n * inner]);
                        }
                        self.accumulate(grads, p, Real(Tensor::new(ps, gp)?));
                    }
                    offset += n;
                }
            }
            Op::Standardize(x) => {
                let g = Self::real_grad(g);
                let tx = self.value(*x);
                let y = self.value(Var(idx));
                let n = tx.len().max(1) as f64;
                let m = tx.sum() / n;
                let var = tx.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                let s = (var + STANDARDIZE_EPS).sqrt();
                let g_mean = g.sum() / n;
                let gy_mean = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / n;
                let gx = g.zip_map(y, |g, y| (g - g_mean - y * gy_mean) / s)?;
                self.accumulate(grads, *x, Real(gx));
            }
            Op::AsComplex(x) => {
                let g = Self::complex_grad(g);
                self.accumulate(grads, *x, Real(g.to_real_pairs()));
            }
            Op::Rfft2(x) => {
                let g = Self::complex_grad(g);
                let w = *self.shape(*x).last().unwrap();
                self.accumulate(grads, *x, Real(fft::rfft2_adjoint(g, w)?));
            }
            Op::Irfft2(x) => {
                let g = Self::real_grad(g);
                self.accumulate(grads, *x, Complex(fft::irfft2_adjoint(g)?));
            }
            Op::SpectralMix {
                x,
                w,
                modes_t,
                modes_x,
            } => {
                let g = Self::complex_grad(g);
                let (zx, zw) = (self.complex_value(*x), self.complex_value(*w));
                let [batch, cin, h, wh] = *zx.shape() else {
                    unreachable!()
                };
                let cout = zw.shape()[1];
                let (mt, mx) = (*modes_t, *modes_x);
                let plane = h * wh;
                let nr = 2 * mt * mx;
                let want_x = self.requires_grad(*x);
                let want_w = self.requires_grad(*w);
                let mut gx = want_x.then(|| ComplexTensor::zeros(zx.shape()));
                let mut gw = want_w.then(|| ComplexTensor::zeros(zw.shape()));
                let wd = zw.data();
                let zero = Complex64::new(0.0, 0.0);
                let mut xg = vec![zero; cin * nr];
                let mut gg = vec![zero; cout * nr];
                let mut gxg = vec![zero; nr];
                for b in 0..batch {
                    for o in 0..cout {
                        let src = &g.data()[(b * cout + o) * plane..(b * cout + o + 1) * plane];
                        gather_modes(src, h, wh, mt, mx, &mut gg[o * nr..(o + 1) * nr]);
                    }
                    for i in 0..cin {
                        let src = &zx.data()[(b * cin + i) * plane..(b * cin + i + 1) * plane];
                        gather_modes(src, h, wh, mt, mx, &mut xg[i * nr..(i + 1) * nr]);
                    }
                    for i in 0..cin {
                        let xi = &xg[i * nr..(i + 1) * nr];
                        gxg.fill(zero);
                        for o in 0..cout {
                            let go = &gg[o * nr..(o + 1) * nr];
                            let wrange = (i * cout + o) * nr..(i * cout + o + 1) * nr;
                            if want_x {
                                for ((acc, &gz), &wv) in
                                    gxg.iter_mut().zip(go).zip(&wd[wrange.clone()])
                                {
                                    *acc += gz * wv.conj();
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                for ((acc, &gz), &xv) in
                                    gw.data_mut()[wrange].iter_mut().zip(go).zip(xi)
                                {
                                    *acc += xv.conj() * gz;
                                }
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            let dst = &mut gx.data_mut()
                                [(b * cin + i) * plane..(b * cin + i + 1) * plane];
                            scatter_modes(&gxg, h, wh, mt, mx, dst);
                        }
                    }
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, Complex(gx));
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, Complex(gw));
                }
            }
        }
        Ok(())
    }
}

const STANDARDIZE_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        match tape.add(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(3));
        let a = Tensor::from_fn(&[3, 2], |k| k as f64 - 2.5);
        let av = tape.constant(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn gelu_fixes_zero() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_sum_of_squares_gradient_is_x() {
        let mut tape = Tape::new();
        let xt = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let x = tape.param(xt.clone());
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &xt);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3]));
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::ones(&[2]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn slice_and_concat_invert() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 5, 3], |i| i as f64));
        let a = tape.slice(x, 1, 0, 2).unwrap();
        let b = tape.slice(x, 1, 2, 3).unwrap();
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
}
