//! Value-level kernels: forward and backward passes of the primitive
//! operations, with no graph bookkeeping. [`crate::graph`] wraps these.

use crate::error::{config, input, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeom { stride, padding, dilation }
    }

    /// Output extent along one spatial axis, or an error when the window does
    /// not fit even once.
    pub fn out_size(&self, len: usize, k: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 || k == 0 {
            return Err(config(format!("invalid conv geometry {:?} with k={}", self, k)));
        }
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span {
            return Err(config(format!(
                "conv window {} exceeds padded input {} ({:?})",
                span, padded, self
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, geom: ConvGeom) -> Result<ConvDims> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, kh, kw] = w.shape();
    if wcin != cin {
        return Err(input(format!("conv2d: input has {} channels, weight expects {}", cin, wcin)));
    }
    if kh != kw {
        return Err(input(format!("conv2d: non-square kernel {}x{}", kh, kw)));
    }
    let ho = geom.out_size(h, kh)?;
    let wo = geom.out_size(wd, kw)?;
    Ok(ConvDims { n, cin, h, w: wd, cout, k: kh, ho, wo })
}

/// Unfolds sample `n` of `x` into a `(cin*k*k) x (ho*wo)` column matrix.
fn im2col<T: Real>(x: &[T], d: &ConvDims, geom: ConvGeom, col: &mut [T]) {
    let hw_out = d.ho * d.wo;
    let (s, p, dil) = (geom.stride as isize, geom.padding as isize, geom.dilation as isize);
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = ((ci * d.k + ki) * d.k + kj) * hw_out;
                let dst = &mut col[row..row + hw_out];
                for oh in 0..d.ho {
                    let ih = oh as isize * s - p + ki as isize * dil;
                    let out_row = &mut dst[oh * d.wo..(oh + 1) * d.wo];
                    if ih < 0 || ih >= d.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = ow as isize * s - p + kj as isize * dil;
                        *v = if iw < 0 || iw >= d.w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto the input plane, accumulating overlaps.
fn col2im<T: Real>(col: &[T], d: &ConvDims, geom: ConvGeom, dx: &mut [T]) {
    let hw_out = d.ho * d.wo;
    let (s, p, dil) = (geom.stride as isize, geom.padding as isize, geom.dilation as isize);
    for ci in 0..d.cin {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = ((ci * d.k + ki) * d.k + kj) * hw_out;
                let src = &col[row..row + hw_out];
                for oh in 0..d.ho {
                    let ih = oh as isize * s - p + ki as isize * dil;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for ow in 0..d.wo {
                        let iw = ow as isize * s - p + kj as isize * dil;
                        if iw >= 0 && iw < d.w as isize {
                            dst[iw as usize] += src[oh * d.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip), with optional per-channel bias.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, w, geom)?;
    if let Some(b) = bias {
        if b.numel() != d.cout {
            return Err(input(format!("conv2d: bias has {} entries for {} filters", b.numel(), d.cout)));
        }
    }
    let rows = d.cin * d.k * d.k;
    let hw_out = d.ho * d.wo;
    let mut col = vec![T::zero(); rows * hw_out];
    let mut out = Tensor::zeros([d.n, d.cout, d.ho, d.wo]);
    let wdata = w.data();
    let in_stride = d.cin * d.h * d.w;
    for n in 0..d.n {
        im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &d, geom, &mut col);
        let o = &mut out.data_mut()[n * d.cout * hw_out..(n + 1) * d.cout * hw_out];
        for co in 0..d.cout {
            let orow = &mut o[co * hw_out..(co + 1) * hw_out];
            if let Some(b) = bias {
                let bv = b.data()[co];
                orow.iter_mut().for_each(|v| *v = bv);
            }
            let wrow = &wdata[co * rows..(co + 1) * rows];
            for (q, &wv) in wrow.iter().enumerate() {
                if wv == T::zero() {
                    continue;
                }
                let crow = &col[q * hw_out..(q + 1) * hw_out];
                for (ov, &cv) in orow.iter_mut().zip(crow) {
                    *ov += wv * cv;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

/// Backward pass of [`conv2d`] for upstream gradient `gout`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    geom: ConvGeom,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let d = conv_dims(x, w, geom)?;
    let rows = d.cin * d.k * d.k;
    let hw_out = d.ho * d.wo;
    let in_stride = d.cin * d.h * d.w;
    let (need_dx, need_dw, need_db) = need;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = need_db.then(|| Tensor::zeros([d.cout, 1, 1, 1]));
    let mut col = vec![T::zero(); rows * hw_out];
    let mut dcol = vec![T::zero(); rows * hw_out];
    let wdata = w.data();
    for n in 0..d.n {
        let g = &gout.data()[n * d.cout * hw_out..(n + 1) * d.cout * hw_out];
        if let Some(db) = db.as_mut() {
            for co in 0..d.cout {
                db.data_mut()[co] += g[co * hw_out..(co + 1) * hw_out].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &d, geom, &mut col);
            let dwd = dw.data_mut();
            for co in 0..d.cout {
                let grow = &g[co * hw_out..(co + 1) * hw_out];
                for q in 0..rows {
                    let crow = &col[q * hw_out..(q + 1) * hw_out];
                    let mut acc = T::zero();
                    for (&a, &b) in grow.iter().zip(crow) {
                        acc += a * b;
                    }
                    dwd[co * rows + q] += acc;
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcol.iter_mut().for_each(|v| *v = T::zero());
            for co in 0..d.cout {
                let grow = &g[co * hw_out..(co + 1) * hw_out];
                let wrow = &wdata[co * rows..(co + 1) * rows];
                for (q, &wv) in wrow.iter().enumerate() {
                    if wv == T::zero() {
                        continue;
                    }
                    let drow = &mut dcol[q * hw_out..(q + 1) * hw_out];
                    for (dv, &gv) in drow.iter_mut().zip(grow) {
                        *dv += wv * gv;
                    }
                }
            }
            col2im(&dcol, &d, geom, &mut dx.data_mut()[n * in_stride..(n + 1) * in_stride]);
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Windowed maximum; padded positions never win. Returns the output and, per
/// output element, the flat input index that produced it (first maximum in
/// row-major scan order).
pub fn maxpool2d<T: Real>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.shape();
    if padding * 2 > k {
        return Err(config(format!("maxpool padding {} too large for window {}", padding, k)));
    }
    let geom = ConvGeom::new(stride, padding, 1);
    let ho = geom.out_size(h, k)?;
    let wo = geom.out_size(w, k)?;
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    let xd = x.data();
    let mut oi = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..k {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * w + iw as usize;
                        if best_i == usize::MAX || xd[idx] > best {
                            best = xd[idx];
                            best_i = idx;
                        }
                    }
                }
                out.data_mut()[oi] = best;
                arg[oi] = best_i;
                oi += 1;
            }
        }
    }
    Ok((out, arg))
}

pub fn upsample_nearest2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, 2 * h, 2 * w], |[a, b, i, j]| x.at([a, b, i / 2, j / 2]))
}

pub fn upsample_nearest2x_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = g.shape();
    let mut dx = Tensor::zeros([n, c, h2 / 2, w2 / 2]);
    for a in 0..n {
        for b in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    let o = dx.offset([a, b, i / 2, j / 2]);
                    dx.data_mut()[o] += g.at([a, b, i, j]);
                }
            }
        }
    }
    dx
}

/// Rearranges each 2x2 spatial patch into channels: output channel
/// `q * C + c` holds phase `q` of input channel `c`, with phases ordered
/// (even row, even col), (odd row, even col), (even row, odd col), (odd row, odd col).
pub fn space_to_depth<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(input(format!("space_to_depth needs even spatial dims, got {}x{}", h, w)));
    }
    Ok(Tensor::from_fn([n, 4 * c, h / 2, w / 2], |[a, oc, i, j]| {
        let (q, ch) = (oc / c, oc % c);
        let (di, dj) = [(0, 0), (1, 0), (0, 1), (1, 1)][q];
        x.at([a, ch, 2 * i + di, 2 * j + dj])
    }))
}

pub fn space_to_depth_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let [n, c4, h, w] = g.shape();
    let c = c4 / 4;
    let mut dx = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for a in 0..n {
        for oc in 0..c4 {
            let (q, ch) = (oc / c, oc % c);
            let (di, dj) = [(0, 0), (1, 0), (0, 1), (1, 1)][q];
            for i in 0..h {
                for j in 0..w {
                    dx.set([a, ch, 2 * i + di, 2 * j + dj], g.at([a, oc, i, j]));
                }
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| input("concat of zero tensors"))?;
    let [n, _, h, w] = first.shape();
    let mut total = 0;
    for x in xs {
        let s = x.shape();
        if s[0] != n || s[2] != h || s[3] != w {
            return Err(input(format!("concat: {:?} does not align with {:?}", s, first.shape())));
        }
        total += s[1];
    }
    let mut out = Tensor::zeros([n, total, h, w]);
    let mut start = 0;
    for x in xs {
        out.accumulate_block(1, start, x);
        start += x.shape()[1];
    }
    Ok(out)
}

/// Epsilon added to the variance in [`sample_norm`].
pub const NORM_EPS: f64 = 1e-5;

/// Normalises every sample over its `C × H × W` values to zero mean and unit
/// variance. Returns the output and `1 / sqrt(var + eps)` per sample.
pub fn sample_norm<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let n = x.shape()[0];
    let m = x.numel() / n.max(1);
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(n);
    for chunk in out.data_mut().chunks_mut(m.max(1)) {
        let mean = chunk.iter().map(|v| v.f64()).sum::<f64>() / m as f64;
        let var = chunk.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / m as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        for v in chunk.iter_mut() {
            *v = T::c((v.f64() - mean) * is);
        }
        inv.push(T::c(is));
    }
    (out, inv)
}

/// Gradient of [`sample_norm`] given its output `y` and `inv`.
pub fn sample_norm_backward<T: Real>(y: &Tensor<T>, inv: &[T], g: &Tensor<T>) -> Tensor<T> {
    let n = y.shape()[0];
    let m = y.numel() / n.max(1);
    let mut dx = g.clone();
    for ((dc, yc), &is) in dx.data_mut().chunks_mut(m.max(1)).zip(y.data().chunks(m.max(1))).zip(inv) {
        let mg = dc.iter().map(|v| v.f64()).sum::<f64>() / m as f64;
        let mgy = dc.iter().zip(yc).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() / m as f64;
        for (d, &yv) in dc.iter_mut().zip(yc) {
            *d = T::c(is.f64() * (d.f64() - mg - yv.f64() * mgy));
        }
    }
    dx
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax over a slice (max subtraction).
pub fn softmax<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(input("softmax of an empty vector"));
    }
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

pub fn log_softmax<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(input("log_softmax of an empty vector"));
    }
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = v.iter().map(|&x| (x - m).exp()).sum();
    let lse = m + s.ln();
    Ok(v.iter().map(|&x| x - lse).collect())
}
