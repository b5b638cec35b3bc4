//! Forward and backward kernels for the layers used by the network and the
//! perceptual feature extractor.
//!
//! Convolutions are lowered to GEMM through im2col. The column buffer is built
//! for a band of output rows at a time so peak memory stays bounded at large
//! resolutions (1024x1024 inference would otherwise need gigabytes of columns).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real, Shape, Tensor};

/// Upper bound on im2col buffer elements per band.
const BAND_ELEMS: usize = 1 << 16;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Static description of a (possibly transposed) 2-D convolution.
///
/// Weight layout is `[out_ch, in_ch, k, k]` for ordinary convolutions and
/// `[in_ch, out_ch, k, k]` for transposed ones, row-major in both cases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { in_ch, out_ch, kernel, stride, pad, transposed: false }
    }

    pub fn transposed(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { in_ch, out_ch, kernel, stride, pad, transposed: true }
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        if self.transposed {
            [self.in_ch, self.out_ch, self.kernel, self.kernel]
        } else {
            [self.out_ch, self.in_ch, self.kernel, self.kernel]
        }
    }

    pub fn weight_len(&self) -> usize {
        self.in_ch * self.out_ch * self.kernel * self.kernel
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        if self.transposed {
            let oh = ((h - 1) * s + k).checked_sub(2 * p);
            let ow = ((w - 1) * s + k).checked_sub(2 * p);
            match (oh, ow) {
                (Some(oh), Some(ow)) if h > 0 && w > 0 && oh > 0 && ow > 0 => Ok((oh, ow)),
                _ => Err(Error::Dimension(format!("transposed conv cannot map {h}x{w}"))),
            }
        } else {
            if h + 2 * p < k || w + 2 * p < k {
                return Err(Error::Dimension(format!("{h}x{w} input smaller than {k}x{k} kernel")));
            }
            Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
        }
    }
}

/// Geometry of an ordinary convolution from an `ci x h x w` input.
#[derive(Clone, Copy, Debug)]
struct Geom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn col_rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn band_rows(&self) -> usize {
        (BAND_ELEMS / (self.col_rows() * self.wo).max(1)).clamp(1, self.ho)
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.band_rows();
        let ho = self.ho;
        (0..ho).step_by(step).map(move |r0| (r0, (r0 + step).min(ho)))
    }
}

/// Valid `[lo, hi)` range of output columns whose source column
/// `ox * s + kx - p` falls inside `[0, w)`.
#[inline]
fn valid_cols(g: &Geom, kx: usize) -> (usize, usize) {
    let (s, p, w) = (g.s, g.p, g.w);
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // ox * s + kx - p <= w - 1  <=>  ox <= (w - 1 + p - kx) / s
    let hi = if w + p > kx { ((w - 1 + p - kx) / s + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], g: &Geom, r0: usize, r1: usize, col: &mut [T]) {
    let n = (r1 - r0) * g.wo;
    let (k, s, p) = (g.k, g.s, g.p);
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                let (lo, hi) = valid_cols(g, kx);
                for oy in r0..r1 {
                    let drow = &mut dst[(oy - r0) * g.wo..(oy - r0 + 1) * g.wo];
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if s == 1 {
                        let start = lo + kx - p;
                        drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &Geom, r0: usize, r1: usize, x: &mut [T]) {
    let n = (r1 - r0) * g.wo;
    let (k, s, p) = (g.k, g.s, g.p);
    for c in 0..g.ci {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let srcrow = &col[row * n..(row + 1) * n];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                for oy in r0..r1 {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &srcrow[(oy - r0) * g.wo..(oy - r0 + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if s == 1 {
                        let start = lo + kx - p;
                        for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * s + kx - p] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_weights<T>(spec: &ConvSpec, w: &[T], b: &[T]) -> Result<()> {
    if w.len() != spec.weight_len() || b.len() != spec.out_ch {
        return Err(Error::Config(format!(
            "weight/bias lengths {}/{} do not match {:?}",
            w.len(),
            b.len(),
            spec
        )));
    }
    Ok(())
}

fn check_input<T: Real>(spec: &ConvSpec, x: &Tensor<T>) -> Result<()> {
    if x.channels() != spec.in_ch {
        return Err(Error::Config(format!(
            "layer expects {} input channels, got {}",
            spec.in_ch,
            x.channels()
        )));
    }
    Ok(())
}

/// Geometry of the ordinary convolution that maps `from` (the input of a
/// plain conv, or the output of a transposed conv) down to `to`.
fn geom_for(spec: &ConvSpec, from: Shape) -> Result<Geom> {
    let (ho, wo) = ConvSpec { transposed: false, ..*spec }.output_dims(from.height, from.width)?;
    Ok(Geom {
        ci: from.channels,
        h: from.height,
        w: from.width,
        k: spec.kernel,
        s: spec.stride,
        p: spec.pad,
        ho,
        wo,
    })
}

fn add_bias<T: Real>(y: &mut Tensor<T>, b: &[T]) {
    for (c, &bias) in b.iter().enumerate() {
        for v in y.plane_mut(c) {
            *v += bias;
        }
    }
}

fn plane_sums<T: Real>(dy: &Tensor<T>) -> Vec<T> {
    (0..dy.channels()).map(|c| dy.plane(c).iter().copied().sum()).collect()
}

/// Gradients produced by a convolution backward pass.
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

/// Runs the layer described by `spec` (plain or transposed).
pub fn conv_forward<T: Real>(x: &Tensor<T>, spec: &ConvSpec, w: &[T], b: &[T]) -> Result<Tensor<T>> {
    check_weights(spec, w, b)?;
    check_input(spec, x)?;
    if spec.transposed {
        conv_transpose2d(x, spec, w, b)
    } else {
        conv2d(x, spec, w, b)
    }
}

pub fn conv_backward<T: Real>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &[T],
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    check_input(spec, x)?;
    if spec.transposed {
        conv_transpose2d_backward(x, spec, w, dy, need_dx)
    } else {
        conv2d_backward(x, spec, w, dy, need_dx)
    }
}

fn conv2d<T: Real>(x: &Tensor<T>, spec: &ConvSpec, w: &[T], b: &[T]) -> Result<Tensor<T>> {
    let g = geom_for(spec, x.shape())?;
    let mut y = Tensor::zeros(Shape::new(spec.out_ch, g.ho, g.wo));
    let plane = g.ho * g.wo;
    let wmat = MatRef::row_major(w, spec.out_ch, g.col_rows());
    let mut col = vec![T::zero(); g.col_rows() * g.band_rows() * g.wo];
    for (r0, r1) in g.bands() {
        let n = (r1 - r0) * g.wo;
        let col = &mut col[..g.col_rows() * n];
        im2col(x.data(), &g, r0, r1, col);
        gemm(
            T::one(),
            wmat,
            MatRef::row_major(col, g.col_rows(), n),
            T::zero(),
            &mut y.data_mut()[r0 * g.wo..],
            (plane, 1),
        );
    }
    add_bias(&mut y, b);
    Ok(y)
}

fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &[T],
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = geom_for(spec, x.shape())?;
    if dy.shape() != Shape::new(spec.out_ch, g.ho, g.wo) {
        return Err(Error::Shape(format!("conv output gradient has shape {}", dy.shape())));
    }
    let plane = g.ho * g.wo;
    let kk = g.col_rows();
    let mut dw = vec![T::zero(); spec.weight_len()];
    // Unit stride: the input gradient is itself a convolution of `dy` with
    // the spatially flipped, channel-transposed kernel, which avoids the
    // scatter in col2im.
    let direct_dx = need_dx && spec.stride == 1 && 2 * spec.pad < 2 * spec.kernel - 1;
    let mut dx = (need_dx && !direct_dx).then(|| Tensor::zeros(x.shape()));
    let mut col = vec![T::zero(); kk * g.band_rows() * g.wo];
    let mut dcol = if dx.is_some() { vec![T::zero(); col.len()] } else { Vec::new() };
    let wmat = MatRef::row_major(w, spec.out_ch, kk);
    for (r0, r1) in g.bands() {
        let n = (r1 - r0) * g.wo;
        let col = &mut col[..kk * n];
        im2col(x.data(), &g, r0, r1, col);
        let dy_band = MatRef { data: &dy.data()[r0 * g.wo..], rows: spec.out_ch, cols: n, rs: plane, cs: 1 };
        gemm(T::one(), dy_band, MatRef::row_major(col, kk, n).t(), T::one(), &mut dw, (kk, 1));
        if let Some(dx) = dx.as_mut() {
            let dcol = &mut dcol[..kk * n];
            gemm(T::one(), wmat.t(), dy_band, T::zero(), dcol, (n, 1));
            col2im(dcol, &g, r0, r1, dx.data_mut());
        }
    }
    if direct_dx {
        let k = spec.kernel;
        let mut wf = vec![T::zero(); w.len()];
        for co in 0..spec.out_ch {
            for ci in 0..spec.in_ch {
                for ky in 0..k {
                    for kx in 0..k {
                        wf[((ci * spec.out_ch + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                            w[((co * spec.in_ch + ci) * k + ky) * k + kx];
                    }
                }
            }
        }
        let flipped = ConvSpec::conv(spec.out_ch, spec.in_ch, k, 1, k - 1 - spec.pad);
        let zero_bias = vec![T::zero(); spec.in_ch];
        let d = conv2d(dy, &flipped, &wf, &zero_bias)?;
        if d.shape() != x.shape() {
            return Err(Error::Shape(format!("input gradient {} vs input {}", d.shape(), x.shape())));
        }
        dx = Some(d);
    }
    Ok(ConvGrads { dx, dw, db: plane_sums(dy) })
}

fn conv_transpose2d<T: Real>(x: &Tensor<T>, spec: &ConvSpec, w: &[T], b: &[T]) -> Result<Tensor<T>> {
    let (oh, ow) = spec.output_dims(x.height(), x.width())?;
    let out_shape = Shape::new(spec.out_ch, oh, ow);
    // The adjoint conv maps the output grid back onto the input grid.
    let g = geom_for(spec, out_shape)?;
    debug_assert_eq!((g.ho, g.wo), (x.height(), x.width()));
    let mut y = Tensor::zeros(out_shape);
    let kk = g.col_rows();
    let plane = g.ho * g.wo;
    let wmat = MatRef::row_major(w, spec.in_ch, kk);
    let mut col = vec![T::zero(); kk * g.band_rows() * g.wo];
    for (r0, r1) in g.bands() {
        let n = (r1 - r0) * g.wo;
        let col = &mut col[..kk * n];
        let x_band = MatRef { data: &x.data()[r0 * g.wo..], rows: spec.in_ch, cols: n, rs: plane, cs: 1 };
        gemm(T::one(), wmat.t(), x_band, T::zero(), col, (n, 1));
        col2im(col, &g, r0, r1, y.data_mut());
    }
    add_bias(&mut y, b);
    Ok(y)
}

fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &[T],
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (oh, ow) = spec.output_dims(x.height(), x.width())?;
    if dy.shape() != Shape::new(spec.out_ch, oh, ow) {
        return Err(Error::Shape(format!("transposed conv output gradient has shape {}", dy.shape())));
    }
    let g = geom_for(spec, dy.shape())?;
    let kk = g.col_rows();
    let plane = g.ho * g.wo;
    let wmat = MatRef::row_major(w, spec.in_ch, kk);
    let mut dw = vec![T::zero(); spec.weight_len()];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![T::zero(); kk * g.band_rows() * g.wo];
    for (r0, r1) in g.bands() {
        let n = (r1 - r0) * g.wo;
        let col = &mut col[..kk * n];
        im2col(dy.data(), &g, r0, r1, col);
        let colm = MatRef::row_major(&*col, kk, n);
        let x_band = MatRef { data: &x.data()[r0 * g.wo..], rows: spec.in_ch, cols: n, rs: plane, cs: 1 };
        gemm(T::one(), x_band, colm.t(), T::one(), &mut dw, (kk, 1));
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), wmat, colm, T::zero(), &mut dx.data_mut()[r0 * g.wo..], (plane, 1));
        }
    }
    Ok(ConvGrads { dx, dw, db: plane_sums(dy) })
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let slope = T::of(LEAKY_SLOPE);
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let slope = T::of(LEAKY_SLOPE);
    x.zip_map(dy, |v, g| if v > T::zero() { g } else { g * slope })
}

/// Bilinear 2x upsampling with half-pixel centres (no corner alignment).
///
/// Along each axis, output sample `2k` is `0.75 x[k] + 0.25 x[k-1]` and
/// `2k+1` is `0.75 x[k] + 0.25 x[k+1]`, with indices clamped at the border.
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let (near, far) = (T::of(0.75), T::of(0.25));
    let mut rows = vec![T::zero(); 2 * h * w];
    let mut y = Tensor::zeros(Shape::new(c, 2 * h, 2 * w));
    for ch in 0..c {
        let src = x.plane(ch);
        for r in 0..h {
            let up = r.saturating_sub(1);
            let down = (r + 1).min(h - 1);
            for col in 0..w {
                let v = src[r * w + col];
                rows[(2 * r) * w + col] = near * v + far * src[up * w + col];
                rows[(2 * r + 1) * w + col] = near * v + far * src[down * w + col];
            }
        }
        let dst = y.plane_mut(ch);
        for r in 0..2 * h {
            let srow = &rows[r * w..(r + 1) * w];
            let drow = &mut dst[r * 2 * w..(r + 1) * 2 * w];
            for col in 0..w {
                let v = srow[col];
                drow[2 * col] = near * v + far * srow[col.saturating_sub(1)];
                drow[2 * col + 1] = near * v + far * srow[(col + 1).min(w - 1)];
            }
        }
    }
    y
}

/// Adjoint of [`upsample2x`].
pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h2, w2) = (dy.channels(), dy.height(), dy.width());
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::Dimension(format!("upsample gradient {} has odd dims", dy.shape())));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let (near, far) = (T::of(0.75), T::of(0.25));
    let mut rows = vec![T::zero(); h2 * w];
    let mut dx = Tensor::zeros(Shape::new(c, h, w));
    for ch in 0..c {
        rows.fill(T::zero());
        let g = dy.plane(ch);
        for r in 0..h2 {
            let grow = &g[r * w2..(r + 1) * w2];
            let drow = &mut rows[r * w..(r + 1) * w];
            for col in 0..w {
                let (a, b) = (grow[2 * col], grow[2 * col + 1]);
                drow[col] += near * (a + b);
                drow[col.saturating_sub(1)] += far * a;
                drow[(col + 1).min(w - 1)] += far * b;
            }
        }
        let dst = dx.plane_mut(ch);
        for r in 0..h {
            let up = r.saturating_sub(1);
            let down = (r + 1).min(h - 1);
            for col in 0..w {
                let a = rows[(2 * r) * w + col];
                let b = rows[(2 * r + 1) * w + col];
                dst[r * w + col] += near * (a + b);
                dst[up * w + col] += far * a;
                dst[down * w + col] += far * b;
            }
        }
    }
    Ok(dx)
}

/// 2x2 average pooling.
pub fn downsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!("cannot halve {h}x{w}: dims must be even and non-zero")));
    }
    let quarter = T::of(0.25);
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(Shape::new(c, ho, wo));
    for ch in 0..c {
        let src = x.plane(ch);
        let dst = y.plane_mut(ch);
        for r in 0..ho {
            let a = &src[2 * r * w..(2 * r + 1) * w];
            let b = &src[(2 * r + 1) * w..(2 * r + 2) * w];
            for col in 0..wo {
                dst[r * wo + col] = (a[2 * col] + a[2 * col + 1] + b[2 * col] + b[2 * col + 1]) * quarter;
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`downsample2x`].
pub fn downsample2x_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let quarter = T::of(0.25);
    let (h, w) = (dy.height() * 2, dy.width() * 2);
    Tensor::from_fn(Shape::new(dy.channels(), h, w), |c, y, x| dy.at(c, y / 2, x / 2) * quarter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct-loop reference for an ordinary convolution.
    fn naive_conv(x: &Tensor<f64>, spec: &ConvSpec, w: &[f64], b: &[f64]) -> Tensor<f64> {
        let (ho, wo) = spec.output_dims(x.height(), x.width()).unwrap();
        let k = spec.kernel;
        Tensor::from_fn(Shape::new(spec.out_ch, ho, wo), |o, oy, ox| {
            let mut acc = b[o];
            for c in 0..spec.in_ch {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.height() && (ix as usize) < x.width() {
                            acc += w[((o * spec.in_ch + c) * k + ky) * k + kx] * x.at(c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    /// Scatter-form reference for a transposed convolution.
    fn naive_conv_t(x: &Tensor<f64>, spec: &ConvSpec, w: &[f64], b: &[f64]) -> Tensor<f64> {
        let (oh, ow) = spec.output_dims(x.height(), x.width()).unwrap();
        let k = spec.kernel;
        let mut y = Tensor::from_fn(Shape::new(spec.out_ch, oh, ow), |o, _, _| b[o]);
        for c in 0..spec.in_ch {
            for iy in 0..x.height() {
                for ix in 0..x.width() {
                    for o in 0..spec.out_ch {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (iy * spec.stride + ky) as isize - spec.pad as isize;
                                let ox = (ix * spec.stride + kx) as isize - spec.pad as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    let v = y.at(o, oy as usize, ox as usize)
                                        + w[((c * spec.out_ch + o) * k + ky) * k + kx] * x.at(c, iy, ix);
                                    y.set(o, oy as usize, ox as usize, v);
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn impulse_correlation_matches_hand_result() {
        // A 3x3 kernel applied to a centred impulse reproduces the kernel
        // flipped through the centre (correlation, not convolution).
        let spec = ConvSpec::conv(1, 1, 3, 1, 1);
        let kernel: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let x = Tensor::from_fn(Shape::new(1, 5, 5), |_, y, x| if (y, x) == (2, 2) { 1.0 } else { 0.0 });
        let y = conv_forward(&x, &spec, &kernel, &[0.0]).unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                assert_eq!(y.at(0, 1 + dy, 1 + dx), kernel[(2 - dy) * 3 + (2 - dx)]);
            }
        }
        assert_eq!(y.at(0, 0, 0), 0.0);
    }

    #[test]
    fn conv_matches_naive_for_strides_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(ci, co, k, s, p, h, w) in
            &[(3, 4, 3, 1, 1, 7, 9), (2, 5, 3, 2, 1, 8, 8), (4, 2, 3, 2, 1, 9, 6), (1, 1, 1, 1, 0, 3, 3)]
        {
            let spec = ConvSpec::conv(ci, co, k, s, p);
            let x = random(Shape::new(ci, h, w), &mut rng);
            let wt: Vec<f64> = (0..spec.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = conv_forward(&x, &spec, &wt, &b).unwrap();
            let slow = naive_conv(&x, &spec, &wt, &b);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn transposed_conv_matches_scatter_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec::transposed(3, 2, 4, 2, 1);
        let x = random(Shape::new(3, 5, 4), &mut rng);
        let wt: Vec<f64> = (0..spec.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = vec![0.3, -0.2];
        let y = conv_forward(&x, &spec, &wt, &b).unwrap();
        assert_eq!((y.height(), y.width()), (10, 8));
        assert!(y.max_abs_diff(&naive_conv_t(&x, &spec, &wt, &b)).unwrap() < 1e-12);
    }

    #[test]
    fn backward_passes_are_adjoint_to_forward() {
        // <dy, J v> == <J^T dy, v> for input and weight directions.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in [ConvSpec::conv(3, 4, 3, 2, 1), ConvSpec::conv(2, 2, 3, 1, 1), ConvSpec::transposed(4, 3, 4, 2, 1)] {
            let x = random(Shape::new(spec.in_ch, 6, 8), &mut rng);
            let wt: Vec<f64> = (0..spec.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let zero_b = vec![0.0; spec.out_ch];
            let y = conv_forward(&x, &spec, &wt, &zero_b).unwrap();
            let dy = random(y.shape(), &mut rng);
            let grads = conv_backward(&x, &spec, &wt, &dy, true).unwrap();
            // Linear in x: <dy, conv(x)> = <dx, x>.
            let lhs = dot(dy.data(), y.data());
            assert!((lhs - dot(grads.dx.as_ref().unwrap().data(), x.data())).abs() < 1e-9);
            // Linear in w: <dy, conv_w(x)> = <dw, w>.
            assert!((lhs - dot(&grads.dw, &wt)).abs() < 1e-9);
            let db_want: Vec<f64> = (0..spec.out_ch).map(|c| dy.plane(c).iter().sum()).collect();
            assert_eq!(grads.db, db_want);
        }
    }

    #[test]
    fn banded_im2col_matches_single_band() {
        // Enough columns to force several bands.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::conv(64, 2, 3, 1, 1);
        let x = random(Shape::new(64, 80, 512), &mut rng);
        let wt: Vec<f64> = (0..spec.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = geom_for(&spec, x.shape()).unwrap();
        assert!(g.band_rows() < g.ho);
        let y = conv_forward(&x, &spec, &wt, &[0.0, 0.0]).unwrap();
        let probe = naive_conv(&x, &spec, &wt, &[0.0, 0.0]);
        assert!(y.max_abs_diff(&probe).unwrap() < 1e-9);
    }

    #[test]
    fn upsample_hand_values_and_constant() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2), vec![0.0f64, 1.0]).unwrap();
        let y = upsample2x(&x);
        assert_eq!(y.shape(), Shape::new(1, 2, 4));
        for r in 0..2 {
            let row: Vec<f64> = (0..4).map(|c| y.at(0, r, c)).collect();
            assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        }
        let c = Tensor::filled(Shape::new(2, 1, 1), 0.3f64);
        assert!(upsample2x(&c).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn resampling_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(Shape::new(2, 3, 5), &mut rng);
        let dy = random(Shape::new(2, 6, 10), &mut rng);
        let lhs = dot(dy.data(), upsample2x(&x).data());
        let rhs = dot(upsample2x_backward(&dy).unwrap().data(), x.data());
        assert!((lhs - rhs).abs() < 1e-12);

        let x = random(Shape::new(2, 6, 4), &mut rng);
        let dy = random(Shape::new(2, 3, 2), &mut rng);
        let lhs = dot(dy.data(), downsample2x(&x).unwrap().data());
        let rhs = dot(downsample2x_backward(&dy).data(), x.data());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn downsample_rejects_odd_dims() {
        assert!(matches!(downsample2x(&Tensor::<f32>::zeros(Shape::new(1, 3, 4))), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_rejects_wrong_channel_count() {
        let spec = ConvSpec::conv(3, 2, 3, 1, 1);
        let x = Tensor::<f32>::zeros(Shape::new(4, 4, 4));
        let err = conv_forward(&x, &spec, &vec![0.0; spec.weight_len()], &[0.0; 2]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
