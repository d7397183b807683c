//! Forward kernels and their adjoints.
//!
//! Every function here is pure. The `*_backward` companions take the
//! upstream gradient and return gradients for the inputs; the tape in
//! [`crate::graph`] dispatches to them.
//!
//! Spatial tensors are laid out `H×W×C` (channels fastest) and
//! convolution weights `kh×kw×Cin×Cout`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Matrix products

/// `A·B` for `A: m×k`, `B: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `Aᵀ·B` for `A: k×m`, `B: k×n`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.matrix_dims("matmul_tn")?;
    let (k2, n) = b.matrix_dims("matmul_tn")?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for t in 0..k {
        let brow = &bd[t * n..(t + 1) * n];
        for i in 0..m {
            let av = ad[t * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `A·Bᵀ` for `A: m×k`, `B: n×k`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.matrix_dims("matmul_nt")?;
    let (n, k2) = b.matrix_dims("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.matrix_dims("transpose")?;
    let d = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

// ---------------------------------------------------------------------------
// Softmax

/// Column-wise softmax: each column of the result sums to one.
pub fn softmax_columns<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = m.matrix_dims("softmax_columns")?;
    let d = m.data();
    if d.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax_columns: NaN input".into()));
    }
    let mut out = vec![T::zero(); r * c];
    let mut colmax = vec![T::neg_infinity(); c];
    for i in 0..r {
        for j in 0..c {
            colmax[j] = colmax[j].max(d[i * c + j]);
        }
    }
    let mut colsum = vec![T::zero(); c];
    for i in 0..r {
        for j in 0..c {
            let e = (d[i * c + j] - colmax[j]).exp();
            out[i * c + j] = e;
            colsum[j] += e;
        }
    }
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] /= colsum[j];
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Adjoint of [`softmax_columns`] given its output `y`.
pub fn softmax_columns_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (y.shape()[0], y.shape()[1]);
    let (yd, gd) = (y.data(), dy.data());
    let mut inner = vec![T::zero(); c];
    for i in 0..r {
        for j in 0..c {
            inner[j] += yd[i * c + j] * gd[i * c + j];
        }
    }
    Tensor::from_fn(y.shape(), |idx| {
        let j = idx % c;
        yd[idx] * (gd[idx] - inner[j])
    })
}

// ---------------------------------------------------------------------------
// Convolution

/// Output extent of a convolution along one axis, if integral.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = (input + 2 * pad).checked_sub(kernel)?;
    if stride == 0 || span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (h, wd, cin) = x.hwc("conv2d")?;
        let [kh, kw, wcin, cout] = w.shape()[..] else {
            return Err(Error::InvalidShape(format!(
                "conv2d weight must be kh×kw×Cin×Cout, got {:?}",
                w.shape()
            )));
        };
        if wcin != cin {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel must be odd, got {kh}×{kw}"
            )));
        }
        let (Some(oh), Some(ow)) = (
            conv_out_size(h, kh, stride, pad),
            conv_out_size(wd, kw, stride, pad),
        ) else {
            return Err(Error::InvalidShape(format!(
                "conv2d output size not integral for input {h}×{wd}, kernel {kh}×{kw}, stride {stride}, pad {pad}"
            )));
        };
        Ok(Self {
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            oh,
            ow,
            stride,
            pad,
        })
    }

    /// Input coordinate hit by output `o` and tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k).checked_sub(self.pad)?;
        (p < extent).then_some(p)
    }
}

/// Zero-padded 2-D cross-correlation.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    if b.len() != g.cout {
        return Err(Error::shape("conv2d bias", b.shape(), &[g.cout]));
    }
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let px = &mut out[(oy * g.ow + ox) * g.cout..][..g.cout];
            px.copy_from_slice(bd);
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xin = &xd[(iy * g.w + ix) * g.cin..][..g.cin];
                    let wblk = &wd[(ky * g.kw + kx) * g.cin * g.cout..][..g.cin * g.cout];
                    for (ci, &a) in xin.iter().enumerate() {
                        if a == T::zero() {
                            continue;
                        }
                        let wrow = &wblk[ci * g.cout..][..g.cout];
                        for (o, &wv) in px.iter_mut().zip(wrow) {
                            *o += a * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.oh, g.ow, g.cout], out)
}

/// Adjoint of [`conv2d`]: returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    if dy.shape() != [g.oh, g.ow, g.cout] {
        return Err(Error::shape("conv2d_backward", dy.shape(), &[g.oh, g.ow, g.cout]));
    }
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![T::zero(); xd.len()];
    let mut dw = vec![T::zero(); wd.len()];
    let mut db = vec![T::zero(); g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let gp = &gd[(oy * g.ow + ox) * g.cout..][..g.cout];
            for (d, &v) in db.iter_mut().zip(gp) {
                *d += v;
            }
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let base = (iy * g.w + ix) * g.cin;
                    let wbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let wrow = &wd[wbase + ci * g.cout..][..g.cout];
                        dx[base + ci] += dot(wrow, gp);
                        let a = xd[base + ci];
                        if a == T::zero() {
                            continue;
                        }
                        let dwrow = &mut dw[wbase + ci * g.cout..][..g.cout];
                        for (d, &v) in dwrow.iter_mut().zip(gp) {
                            *d += a * v;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![g.cout], db)?,
    ))
}

// ---------------------------------------------------------------------------
// Bilinear resize

/// For each output index: the two source indices and the weight of the second.
fn resize_plan<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, h2: usize, w2: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.hwc("bilinear_resize")?;
    if h2 == 0 || w2 == 0 {
        return Err(Error::InvalidShape("bilinear_resize target must be ≥ 1".into()));
    }
    if (h2, w2) == (h, w) {
        return Ok(x.clone());
    }
    let py = resize_plan::<T>(h, h2);
    let px = resize_plan::<T>(w, w2);
    let d = x.data();
    let mut out = vec![T::zero(); h2 * w2 * c];
    for (oy, &(y0, y1, fy)) in py.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in px.iter().enumerate() {
            let o = &mut out[(oy * w2 + ox) * c..][..c];
            let (a, b) = ((y0 * w + x0) * c, (y0 * w + x1) * c);
            let (cc, dd) = ((y1 * w + x0) * c, (y1 * w + x1) * c);
            let one = T::one();
            for k in 0..c {
                let top = (one - fx) * d[a + k] + fx * d[b + k];
                let bot = (one - fx) * d[cc + k] + fx * d[dd + k];
                o[k] = (one - fy) * top + fy * bot;
            }
        }
    }
    Tensor::new(vec![h2, w2, c], out)
}

/// Adjoint of [`bilinear_resize`] back onto an `h×w` grid.
pub fn bilinear_resize_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (h2, w2, c) = dy.hwc("bilinear_resize_backward")?;
    if (h2, w2) == (h, w) {
        return Ok(dy.clone());
    }
    let py = resize_plan::<T>(h, h2);
    let px = resize_plan::<T>(w, w2);
    let g = dy.data();
    let mut dx = vec![T::zero(); h * w * c];
    let one = T::one();
    for (oy, &(y0, y1, fy)) in py.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in px.iter().enumerate() {
            let gp = &g[(oy * w2 + ox) * c..][..c];
            let taps = [
                ((y0 * w + x0) * c, (one - fy) * (one - fx)),
                ((y0 * w + x1) * c, (one - fy) * fx),
                ((y1 * w + x0) * c, fy * (one - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            for (base, wt) in taps {
                for k in 0..c {
                    dx[base + k] += wt * gp[k];
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], dx)
}

// ---------------------------------------------------------------------------
// Channel concatenation

/// Concatenates along the last axis; leading dimensions must agree.
pub fn concat_last<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra != rb || a.shape()[..ra - 1] != b.shape()[..rb - 1] {
        return Err(Error::shape("concat", a.shape(), b.shape()));
    }
    let (ca, cb) = (a.shape()[ra - 1], b.shape()[rb - 1]);
    let rows = a.len() / ca;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for r in 0..rows {
        out.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        out.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    let mut shape = a.shape().to_vec();
    shape[ra - 1] = ca + cb;
    Tensor::new(shape, out)
}

/// Splits the last axis at `ca`, inverse of [`concat_last`].
pub fn split_last<T: Scalar>(t: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let r = t.rank();
    let c = t.shape()[r - 1];
    if ca == 0 || ca >= c {
        return Err(Error::InvalidShape(format!("split at {ca} of {c} channels")));
    }
    let cb = c - ca;
    let rows = t.len() / c;
    let mut a = Vec::with_capacity(rows * ca);
    let mut b = Vec::with_capacity(rows * cb);
    for row in t.data().chunks_exact(c) {
        a.extend_from_slice(&row[..ca]);
        b.extend_from_slice(&row[ca..]);
    }
    let mut sa = t.shape().to_vec();
    sa[r - 1] = ca;
    let mut sb = t.shape().to_vec();
    sb[r - 1] = cb;
    Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
}

// ---------------------------------------------------------------------------
// Elementwise

/// Pointwise operators. Binary operators accept identical shapes or a
/// one-element operand on either side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<T> {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Softplus,
    Scale(T),
}

pub fn elementwise<T: Scalar>(op: Elementwise<T>, operands: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match (op, operands) {
        (Elementwise::Add, [a, b]) => add(a, b),
        (Elementwise::Sub, [a, b]) => sub(a, b),
        (Elementwise::Mul, [a, b]) => mul(a, b),
        (Elementwise::Relu, [a]) => Ok(relu(a)),
        (Elementwise::Sigmoid, [a]) => Ok(sigmoid(a)),
        (Elementwise::Softplus, [a]) => Ok(softplus(a)),
        (Elementwise::Scale(s), [a]) => Ok(scale(a, s)),
        (op, ops) => Err(Error::Argument(format!(
            "{op:?} does not take {} operands",
            ops.len()
        ))),
    }
}

fn broadcast<T: Scalar>(
    name: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    } else if b.len() == 1 {
        let s = b.data()[0];
        Ok(a.map(|x| f(x, s)))
    } else if a.len() == 1 {
        let s = a.data()[0];
        Ok(b.map(|y| f(s, y)))
    } else {
        Err(Error::shape(name, a.shape(), b.shape()))
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|x| x.max(T::zero()))
}

pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(sigmoid_scalar)
}

pub fn softplus<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(softplus_scalar)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Reduces a broadcast gradient back to an operand's shape.
pub(crate) fn unbroadcast<T: Scalar>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else {
        Tensor::full(shape, g.sum())
    }
}
