//! Radix-2 iterative Cooley–Tukey FFT and the real 2-d transforms built on it.
//!
//! Conventions follow numpy: the forward transform is unnormalized and the
//! inverse carries the `1/n` factor. `rfft2` keeps the non-negative half of
//! the last axis (`W/2 + 1` bins).

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex64;

use super::tensor::{ComplexTensor, Tensor};
use crate::error::{invalid, Error, Result};

struct Plan {
    twiddles: Vec<Complex64>,
    inv_twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl Plan {
    fn new(n: usize) -> Self {
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| {
                if n == 1 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        let twiddles: Vec<Complex64> = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        let inv_twiddles = twiddles.iter().map(|w| w.conj()).collect();
        Self {
            twiddles,
            inv_twiddles,
            bitrev,
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<Plan>>> = RefCell::new(HashMap::new());
}

fn plan(n: usize) -> Rc<Plan> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry(n)
            .or_insert_with(|| Rc::new(Plan::new(n)))
            .clone()
    })
}

pub fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        Err(Error::NotPowerOfTwo(n))
    } else {
        Ok(())
    }
}

/// Unnormalized in-place transform. `inverse` flips the exponent sign only.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) -> Result<()> {
    check_pow2(buf.len())?;
    transform(buf, &plan(buf.len()), inverse);
    Ok(())
}

fn transform(buf: &mut [Complex64], plan: &Plan, inverse: bool) {
    let n = buf.len();
    for i in 0..n {
        let j = plan.bitrev[i];
        if i < j {
            buf.swap(i, j);
        }
    }
    let tw = if inverse {
        &plan.inv_twiddles
    } else {
        &plan.twiddles
    };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for chunk in buf.chunks_exact_mut(len) {
            let (lo, hi) = chunk.split_at_mut(half);
            for (k, (a, b)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
                let t = *b * tw[k * stride];
                *b = *a - t;
                *a += t;
            }
        }
        len <<= 1;
    }
}

/// Transform every column of a row-major `h × w` complex block, skipping
/// columns that are identically zero.
fn fft_columns(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let p = plan(h);
    let zero = Complex64::new(0.0, 0.0);
    let mut col = vec![zero; h];
    for c in 0..w {
        let mut any = false;
        for r in 0..h {
            col[r] = data[r * w + c];
            any |= col[r] != zero;
        }
        if !any {
            continue;
        }
        transform(&mut col, &p, inverse);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }
}

/// Real-to-half-complex 2-d transform of one `h × w` slab.
pub fn rfft2_slab(x: &[f64], h: usize, w: usize, out: &mut [Complex64]) -> Result<()> {
    check_pow2(h)?;
    check_pow2(w)?;
    let wh = w / 2 + 1;
    debug_assert_eq!(x.len(), h * w);
    debug_assert_eq!(out.len(), h * wh);
    let p = plan(w);
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for r in 0..h {
        for (z, &v) in row.iter_mut().zip(&x[r * w..(r + 1) * w]) {
            *z = Complex64::new(v, 0.0);
        }
        transform(&mut row, &p, false);
        out[r * wh..(r + 1) * wh].copy_from_slice(&row[..wh]);
    }
    fft_columns(out, h, wh, false);
    Ok(())
}

/// Inverse of [`rfft2_slab`], including the `1/(h·w)` factor. Imaginary
/// parts of the zero and Nyquist columns are ignored, as in numpy.
pub fn irfft2_slab(spec: &[Complex64], h: usize, w: usize, out: &mut [f64]) -> Result<()> {
    check_pow2(h)?;
    check_pow2(w)?;
    let wh = w / 2 + 1;
    debug_assert_eq!(spec.len(), h * wh);
    let mut tmp = spec.to_vec();
    fft_columns(&mut tmp, h, wh, true);
    let p = plan(w);
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    let scale = 1.0 / (h * w) as f64;
    for r in 0..h {
        let half = &tmp[r * wh..(r + 1) * wh];
        row[0] = Complex64::new(half[0].re, 0.0);
        for k in 1..wh {
            row[k] = half[k];
        }
        if w > 1 {
            row[w / 2] = Complex64::new(half[w / 2].re, 0.0);
        }
        for k in 1..(w + 1) / 2 {
            row[w - k] = half[k].conj();
        }
        transform(&mut row, &p, true);
        for (o, z) in out[r * w..(r + 1) * w].iter_mut().zip(&row) {
            *o = z.re * scale;
        }
    }
    Ok(())
}

fn split_2d(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [lead @ .., h, w] => Ok((lead.iter().product(), *h, *w)),
        _ => Err(invalid(format!("2-d FFT needs rank >= 2, got {shape:?}"))),
    }
}

/// Batched `rfft2` over the last two axes: `[.., H, W] -> [.., H, W/2+1]`.
pub fn rfft2(x: &Tensor) -> Result<ComplexTensor> {
    let (batch, h, w) = split_2d(x.shape())?;
    let wh = w / 2 + 1;
    let mut out = vec![Complex64::new(0.0, 0.0); batch * h * wh];
    for b in 0..batch {
        rfft2_slab(
            &x.data()[b * h * w..(b + 1) * h * w],
            h,
            w,
            &mut out[b * h * wh..(b + 1) * h * wh],
        )?;
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = wh;
    ComplexTensor::new(shape, out)
}

/// Batched `irfft2` producing real slabs of width `w`.
pub fn irfft2(spec: &ComplexTensor, w: usize) -> Result<Tensor> {
    let (batch, h, wh) = split_2d(spec.shape())?;
    if wh != w / 2 + 1 {
        return Err(invalid(format!(
            "spectrum has {wh} columns, expected {} for output width {w}",
            w / 2 + 1
        )));
    }
    let mut out = vec![0.0; batch * h * w];
    for b in 0..batch {
        irfft2_slab(
            &spec.data()[b * h * wh..(b + 1) * h * wh],
            h,
            w,
            &mut out[b * h * w..(b + 1) * h * w],
        )?;
    }
    let mut shape = spec.shape().to_vec();
    *shape.last_mut().unwrap() = w;
    Tensor::new(shape, out)
}

/// Adjoint of `irfft2` under the real inner product on (re, im) pairs:
/// `c_k/(H·W) · rfft2(g)` with `c_k = 2` on interior columns.
pub fn irfft2_adjoint(g: &Tensor) -> Result<ComplexTensor> {
    let (_, h, w) = split_2d(g.shape())?;
    let mut spec = rfft2(g)?;
    let wh = w / 2 + 1;
    let scale = 1.0 / (h * w) as f64;
    for (i, z) in spec.data_mut().iter_mut().enumerate() {
        let k = i % wh;
        let c = if k == 0 || (w % 2 == 0 && k == w / 2) {
            1.0
        } else {
            2.0
        };
        *z *= c * scale;
    }
    Ok(spec)
}

/// Adjoint of `rfft2`: `Re Σ_{k ≤ W/2} G[h,k] e^{+iθ}`, which is `H·W·irfft2`
/// of the spectrum with interior columns halved.
pub fn rfft2_adjoint(g: &ComplexTensor, w: usize) -> Result<Tensor> {
    let (_, h, wh) = split_2d(g.shape())?;
    let mut spec = g.clone();
    for (i, z) in spec.data_mut().iter_mut().enumerate() {
        let k = i % wh;
        if !(k == 0 || (w % 2 == 0 && k == w / 2)) {
            *z *= 0.5;
        }
    }
    let mut out = irfft2(&spec, w)?;
    let scale = (h * w) as f64;
    out.data_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}
