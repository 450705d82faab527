//! Dense row-major `f64` tensors and the numeric kernels the autodiff graph
//! dispatches to.
//!
//! Storage is reference counted so cloning a tensor is cheap; writes go
//! through [`Tensor::data_mut`], which copies on demand.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Panicking constructor for internal call sites where the length is
    /// known to match.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::new(shape, data).expect("tensor length matches shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(&[], vec![value])
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Elementwise binary op with size-1 broadcasting between equal-rank
    /// operands.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor::from_vec(&self.shape, data));
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let n: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(n);
        let (a, b) = (self.data(), other.data());
        for_each_index(&out_shape, |ia_ib| {
            let (mut oa, mut ob) = (0, 0);
            for (d, &i) in ia_ib.iter().enumerate() {
                oa += i * sa[d];
                ob += i * sb[d];
            }
            out.push(f(a[oa], b[ob]));
        });
        Ok(Tensor::from_vec(&out_shape, out))
    }

    /// Sums broadcast axes away so the result has `shape`. Inverse of
    /// [`Tensor::expand`] in the adjoint sense.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        if shape.len() != self.rank()
            || shape
                .iter()
                .zip(&self.shape)
                .any(|(&t, &s)| t != s && t != 1)
        {
            return Err(Error::dim(format!(
                "cannot sum {:?} down to {shape:?}",
                self.shape
            )));
        }
        let strides = broadcast_strides(shape, &self.shape);
        let mut out = vec![0.0; shape.iter().product()];
        let src = self.data();
        let mut k = 0;
        for_each_index(&self.shape, |idx| {
            let o: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out[o] += src[k];
            k += 1;
        });
        Ok(Tensor::from_vec(shape, out))
    }

    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        if shape.len() != self.rank()
            || shape
                .iter()
                .zip(&self.shape)
                .any(|(&t, &s)| t != s && s != 1)
        {
            return Err(Error::dim(format!(
                "cannot expand {:?} to {shape:?}",
                self.shape
            )));
        }
        let strides = broadcast_strides(&self.shape, shape);
        let src = self.data();
        let mut out = Vec::with_capacity(shape.iter().product());
        for_each_index(shape, |idx| {
            let o: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out.push(src[o]);
        });
        Ok(Tensor::from_vec(shape, out))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let [b, m, n] = dims3(&self.shape)?;
        let src = self.data();
        let mut out = vec![0.0; b * m * n];
        for bi in 0..b {
            let s = &src[bi * m * n..(bi + 1) * m * n];
            let o = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    o[j * m + i] = s[i * n + j];
                }
            }
        }
        Ok(Tensor::from_vec(&[b, n, m], out))
    }

    /// Slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::dim(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let src = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor::from_vec(&shape, out))
    }

    /// Places `self` at offset `start` of a zero tensor whose `axis` has
    /// length `total`. Adjoint of [`Tensor::narrow`].
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Result<Tensor> {
        let len = self.shape[axis];
        if start + len > total {
            return Err(Error::dim("pad_axis out of range"));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = total;
        let mut out = vec![0.0; outer * total * inner];
        let src = self.data();
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        Ok(Tensor::from_vec(&shape, out))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let rank = first.rank();
        for p in parts {
            if p.rank() != rank
                || p.shape
                    .iter()
                    .enumerate()
                    .any(|(d, &s)| d != axis && s != first.shape[d])
            {
                return Err(Error::dim(format!(
                    "concat shape mismatch {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor::from_vec(&shape, out))
    }
}

pub(crate) fn dims3(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[a, b, c] => Ok([a, b, c]),
        _ => Err(Error::dim(format!("expected rank-3 tensor, got {shape:?}"))),
    }
}

pub(crate) fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::dim(format!("expected rank-4 tensor, got {shape:?}"))),
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.iter().any(|&s| s == 0) {
        return;
    }
    let mut idx = vec![0; shape.len()];
    loop {
        f(&idx);
        let mut d = shape.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// `c[b] = a[b] · b[b]` for rank-3 operands.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [ba, m, k] = dims3(a.shape())?;
    let [bb, k2, n] = dims3(b.shape())?;
    if ba != bb || k != k2 {
        return Err(Error::dim(format!(
            "bmm shape mismatch {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; ba * m * n];
    for i in 0..ba {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..],
            (k as isize, 1),
            &b.data()[i * k * n..],
            (n as isize, 1),
            &mut out[i * m * n..],
            false,
        );
    }
    Ok(Tensor::from_vec(&[ba, m, n], out))
}

/// Thin wrapper over the dgemm microkernel; strides are (row, col).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every slice covers the index range implied by its shape and
    // strides; the callers slice from the start of each matrix.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution: stride 1, zero "same" padding, odd square kernels.

fn check_conv(x: &[usize], w: &[usize]) -> Result<([usize; 4], [usize; 4])> {
    let xd = dims4(x)?;
    let wd = dims4(w)?;
    if wd[2] != wd[3] || wd[2] % 2 == 0 {
        return Err(Error::dim(format!("kernel must be odd and square, got {w:?}")));
    }
    if xd[1] != wd[1] {
        return Err(Error::dim(format!(
            "input has {} channels but kernel expects {}",
            xd[1], wd[1]
        )));
    }
    Ok((xd, wd))
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, d) in dst.iter_mut().enumerate() {
                        let sx = xx as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, &v) in src.iter().enumerate() {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y = w * x` (cross-correlation), output spatially aligned with input.
pub fn conv2d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let ([b, ci, h, wd], [co, _, k, _]) = check_conv(x.shape(), w.shape())?;
    let hw = h * wd;
    let ckk = ci * k * k;
    let mut out = vec![0.0; b * co * hw];
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
    for bi in 0..b {
        let xb = &x.data()[bi * ci * hw..(bi + 1) * ci * hw];
        let rhs: &[f64] = if k == 1 {
            xb
        } else {
            im2col(xb, ci, h, wd, k, &mut cols);
            &cols
        };
        gemm(
            co,
            ckk,
            hw,
            w.data(),
            (ckk as isize, 1),
            rhs,
            (hw as isize, 1),
            &mut out[bi * co * hw..],
            false,
        );
    }
    Ok(Tensor::from_vec(&[b, co, h, wd], out))
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(g: &Tensor, w: &Tensor) -> Result<Tensor> {
    let [b, co, h, wd] = dims4(g.shape())?;
    let [co2, ci, k, _] = dims4(w.shape())?;
    if co != co2 {
        return Err(Error::dim("conv2d_input_grad channel mismatch"));
    }
    let hw = h * wd;
    let ckk = ci * k * k;
    let mut out = vec![0.0; b * ci * hw];
    let mut cols = vec![0.0; ckk * hw];
    for bi in 0..b {
        let gb = &g.data()[bi * co * hw..(bi + 1) * co * hw];
        let ob = &mut out[bi * ci * hw..(bi + 1) * ci * hw];
        if k == 1 {
            gemm(ci, co, hw, w.data(), (1, ckk as isize), gb, (hw as isize, 1), ob, false);
        } else {
            gemm(ckk, co, hw, w.data(), (1, ckk as isize), gb, (hw as isize, 1), &mut cols, false);
            col2im_add(&cols, ci, h, wd, k, ob);
        }
    }
    Ok(Tensor::from_vec(&[b, ci, h, wd], out))
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_weight_grad(x: &Tensor, g: &Tensor, k: usize) -> Result<Tensor> {
    let [b, ci, h, wd] = dims4(x.shape())?;
    let [b2, co, h2, w2] = dims4(g.shape())?;
    if b != b2 || h != h2 || wd != w2 || k % 2 == 0 {
        return Err(Error::dim("conv2d_weight_grad shape mismatch"));
    }
    let hw = h * wd;
    let ckk = ci * k * k;
    let mut out = vec![0.0; co * ckk];
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
    for bi in 0..b {
        let xb = &x.data()[bi * ci * hw..(bi + 1) * ci * hw];
        let gb = &g.data()[bi * co * hw..(bi + 1) * co * hw];
        let rhs: &[f64] = if k == 1 {
            xb
        } else {
            im2col(xb, ci, h, wd, k, &mut cols);
            &cols
        };
        // out[co, ckk] += g[co, hw] · rhs[ckk, hw]ᵀ
        gemm(co, hw, ckk, gb, (hw as isize, 1), rhs, (1, hw as isize), &mut out, true);
    }
    Ok(Tensor::from_vec(&[co, ci, k, k], out))
}

// ---------------------------------------------------------------------------
// Resampling.

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x.shape())?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; b * c * h2 * w2];
    for p in 0..b * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Tensor::from_vec(&[b, c, h2, w2], out))
}

pub fn avgpool2(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("2x pooling needs even dims, got {h}x{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * h2 * w2];
    for p in 0..b * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * w + 2 * xx;
                dst[y * w2 + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    Ok(Tensor::from_vec(&[b, c, h2, w2], out))
}

/// Nearest-neighbour resize of every plane to `(oh, ow)`.
pub fn resize_nearest(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x.shape())?;
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let sy = y * h / oh;
            for xx in 0..ow {
                dst[y * ow + xx] = src[sy * w + xx * w / ow];
            }
        }
    }
    Ok(Tensor::from_vec(&[b, c, oh, ow], out))
}

// [1, 2, 1] / 4 along one axis with edge clamping; `transpose` applies the
// adjoint operator.
fn blur_line(src: &[f64], dst: &mut [f64], stride: usize, n: usize, transpose: bool) {
    let at = |i: usize| src[i * stride];
    if n == 1 {
        dst[0] = at(0);
        return;
    }
    for i in 0..n {
        let v = if !transpose {
            let l = at(i.saturating_sub(1));
            let r = at((i + 1).min(n - 1));
            0.25 * l + 0.5 * at(i) + 0.25 * r
        } else {
            // Column i of the clamped blur matrix.
            let mut v = 0.5 * at(i);
            if i > 0 {
                v += 0.25 * at(i - 1);
            }
            if i + 1 < n {
                v += 0.25 * at(i + 1);
            }
            if i == 0 {
                v += 0.25 * at(0);
            }
            if i == n - 1 {
                v += 0.25 * at(n - 1);
            }
            v
        };
        dst[i * stride] = v;
    }
}

fn blur_impl(x: &Tensor, transpose: bool) -> Result<Tensor> {
    let [b, c, h, w] = dims4(x.shape())?;
    let mut tmp = vec![0.0; b * c * h * w];
    let mut out = vec![0.0; b * c * h * w];
    for p in 0..b * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let t = &mut tmp[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            blur_line(&src[y * w..], &mut t[y * w..], 1, w, transpose);
        }
        let o = &mut out[p * h * w..(p + 1) * h * w];
        for xx in 0..w {
            blur_line(&t[xx..], &mut o[xx..], w, h, transpose);
        }
    }
    Ok(Tensor::from_vec(&[b, c, h, w], out))
}

/// Separable `[1, 2, 1] / 4` blur with clamped borders (constant maps are
/// fixed points).
pub fn blur(x: &Tensor) -> Result<Tensor> {
    blur_impl(x, false)
}

pub fn blur_transpose(x: &Tensor) -> Result<Tensor> {
    blur_impl(x, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor) -> Tensor {
        let [b, ci, h, wd] = dims4(x.shape()).unwrap();
        let [co, _, k, _] = dims4(w.shape()).unwrap();
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(&[b, co, h, wd]);
        let o = out.data_mut();
        for bi in 0..b {
            for c in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut s = 0.0;
                        for cin in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    s += w.data()[((c * ci + cin) * k + ky) * k + kx]
                                        * x.data()[((bi * ci + cin) * h + sy as usize) * wd + sx as usize];
                                }
                            }
                        }
                        o[((bi * co + c) * h + y) * wd + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &k in &[1, 3, 5] {
            let x = Tensor::randn(&[2, 3, 5, 4], &mut rng);
            let w = Tensor::randn(&[2, 3, k, k], &mut rng);
            let fast = conv2d(&x, &w).unwrap();
            assert!(fast.max_abs_diff(&naive_conv(&x, &w)) < 1e-12);
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &k in &[1, 3] {
            let x = Tensor::randn(&[2, 3, 4, 5], &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], &mut rng);
            let g = Tensor::randn(&[2, 4, 4, 5], &mut rng);
            let y = conv2d(&x, &w).unwrap();
            let gx = conv2d_input_grad(&g, &w).unwrap();
            let gw = conv2d_weight_grad(&x, &g, k).unwrap();
            assert!((dot(&y, &g) - dot(&x, &gx)).abs() < 1e-10);
            assert!((dot(&y, &g) - dot(&w, &gw)).abs() < 1e-10);
        }
    }

    #[test]
    fn blur_adjoint_and_constant_preservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[1, 2, 5, 3], &mut rng);
        let g = Tensor::randn(&[1, 2, 5, 3], &mut rng);
        let lhs = dot(&blur(&x).unwrap(), &g);
        let rhs = dot(&x, &blur_transpose(&g).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
        let c = Tensor::full(&[1, 1, 4, 4], 2.5);
        assert_eq!(blur(&c).unwrap(), c);
    }

    #[test]
    fn pooling_and_upsampling_are_scaled_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[1, 2, 4, 6], &mut rng);
        let g = Tensor::randn(&[1, 2, 2, 3], &mut rng);
        let lhs = dot(&avgpool2(&x).unwrap(), &g);
        let rhs = 0.25 * dot(&x, &upsample2(&g).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sum_to_and_expand_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[2, 1, 3], &mut rng);
        let g = Tensor::randn(&[2, 4, 3], &mut rng);
        let lhs = dot(&x.expand(&[2, 4, 3]).unwrap(), &g);
        let rhs = dot(&x, &g.sum_to(&[2, 1, 3]).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn narrow_pad_concat() {
        let t = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let n = t.narrow(1, 1, 2).unwrap();
        assert_eq!(n.data(), &[2., 3., 5., 6.]);
        let p = n.pad_axis(1, 1, 3).unwrap();
        assert_eq!(p.data(), &[0., 2., 3., 0., 5., 6.]);
        let a = t.narrow(1, 0, 1).unwrap();
        let c = Tensor::concat(&[&a, &n], 1).unwrap();
        assert_eq!(c, t);
    }

    #[test]
    fn bmm_matches_manual() {
        let a = Tensor::from_vec(&[1, 2, 2], vec![1., 2., 3., 4.]);
        let b = Tensor::from_vec(&[1, 2, 1], vec![5., 6.]);
        assert_eq!(bmm(&a, &b).unwrap().data(), &[17., 39.]);
    }
}
