//! Differentiable training objectives.
//!
//! Every loss is a mean over its elements and comes in a value-only form and
//! a `*_grad` form returning the gradient with respect to the prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvLayer, Exec, ParamStore, Tape};
use crate::kernels::ConvSpec;
use crate::tensor::{Real, Shape, Tensor};

/// Weights of the combined objective `l1*L1 + ssim*L_SSIM + perceptual*L_p + tv*L_tv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, ssim: 5e-3, perceptual: 6e-3, tv: 2e-8 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("ssim", self.ssim), ("perceptual", self.perceptual), ("tv", self.tv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Gaussian-window SSIM parameters; values are assumed to span `data_range`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

impl SsimConfig {
    pub fn kernel(&self) -> Vec<f64> {
        let half = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

fn same_shape<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    pred.expect_same_shape(target)
}

fn inv_len<T: Real>(t: &Tensor<T>) -> T {
    T::of(1.0 / t.len() as f64)
}

pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape(pred, target)?;
    Ok(pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs()).sum::<T>() * inv_len(pred))
}

pub fn l1_loss_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let n = inv_len(pred);
    let grad = pred.zip_map(target, |p, t| {
        let d = p - t;
        if d > T::zero() {
            n
        } else if d < T::zero() {
            -n
        } else {
            T::zero()
        }
    })?;
    Ok((l1_loss(pred, target)?, grad))
}

pub fn l2_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape(pred, target)?;
    Ok(pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() * inv_len(pred))
}

pub fn l2_loss_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let k = T::of(2.0) * inv_len(pred);
    let grad = pred.zip_map(target, |p, t| k * (p - t))?;
    Ok((l2_loss(pred, target)?, grad))
}

/// Separable "valid" filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut horiz = vec![0.0; h * wo];
    for r in 0..h {
        let row = &plane[r * w..(r + 1) * w];
        for c in 0..wo {
            horiz[r * wo + c] = g.iter().zip(&row[c..c + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for (i, &gi) in g.iter().enumerate() {
            let src = &horiz[(r + i) * wo..(r + i + 1) * wo];
            for (o, &s) in out[r * wo..(r + 1) * wo].iter_mut().zip(src) {
                *o += gi * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(map: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut horiz = vec![0.0; h * wo];
    for r in 0..ho {
        for (i, &gi) in g.iter().enumerate() {
            let dst = &mut horiz[(r + i) * wo..(r + i + 1) * wo];
            for (d, &s) in dst.iter_mut().zip(&map[r * wo..(r + 1) * wo]) {
                *d += gi * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let row = &mut out[r * w..(r + 1) * w];
        for c in 0..wo {
            let v = horiz[r * wo + c];
            for (i, &gi) in g.iter().enumerate() {
                row[c + i] += gi * v;
            }
        }
    }
    out
}

/// Mean SSIM (over window positions, then channels) and optionally its
/// gradient with respect to `x`. Computed in `f64` regardless of `T`.
fn ssim_core<T: Real>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig, want_grad: bool) -> Result<(f64, Option<Tensor<T>>)> {
    same_shape(x, y)?;
    let (c, h, w) = (x.channels(), x.height(), x.width());
    if h < cfg.window || w < cfg.window || cfg.window == 0 {
        return Err(Error::Dimension(format!("{h}x{w} image is smaller than the {0}x{0} SSIM window", cfg.window)));
    }
    let g = cfg.kernel();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let (ho, wo) = (h + 1 - cfg.window, w + 1 - cfg.window);
    let norm = 1.0 / (c * ho * wo) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor::<T>::zeros(x.shape()));
    for ch in 0..c {
        let xs: Vec<f64> = x.plane(ch).iter().map(|v| v.as_f64()).collect();
        let ys: Vec<f64> = y.plane(ch).iter().map(|v| v.as_f64()).collect();
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(&xs, h, w, &g);
        let my = filter_valid(&ys, h, w, &g);
        let exx = filter_valid(&sq(&xs, &xs), h, w, &g);
        let eyy = filter_valid(&sq(&ys, &ys), h, w, &g);
        let exy = filter_valid(&sq(&xs, &ys), h, w, &g);
        let n = ho * wo;
        let (mut d_mx, mut d_exx, mut d_exy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let a1 = 2.0 * ux * uy + c1;
            let a2 = 2.0 * (exy[i] - ux * uy) + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = (exx[i] - ux * ux) + (eyy[i] - uy * uy) + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                d_mx[i] = norm * s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
                d_exx[i] = -norm * s / b2;
                d_exy[i] = norm * s * 2.0 / a2;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let gm = filter_valid_adjoint(&d_mx, h, w, &g);
            let gxx = filter_valid_adjoint(&d_exx, h, w, &g);
            let gxy = filter_valid_adjoint(&d_exy, h, w, &g);
            for (i, dst) in grad.plane_mut(ch).iter_mut().enumerate() {
                *dst = T::of(gm[i] + 2.0 * xs[i] * gxx[i] + ys[i] * gxy[i]);
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean structural similarity between two images.
pub fn ssim_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    ssim_core(a, b, cfg, false).map(|(v, _)| v)
}

/// `1 - SSIM` with the default Gaussian window.
pub fn ssim_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    ssim_loss_with(pred, target, &SsimConfig::default())
}

pub fn ssim_loss_with<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, cfg: &SsimConfig) -> Result<T> {
    Ok(T::of(1.0 - ssim_with(pred, target, cfg)?))
}

pub fn ssim_loss_grad<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, cfg: &SsimConfig) -> Result<(T, Tensor<T>)> {
    let (s, g) = ssim_core(pred, target, cfg, true)?;
    let g = g.expect("gradient requested").map(|v| -v);
    Ok((T::of(1.0 - s), g))
}

/// Maps an image to a list of feature maps and back-propagates through them.
pub trait FeatureExtractor<T: Real>: Send + Sync {
    fn features(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>>;

    /// Gradient with respect to `img` of `sum_l <grads[l], features(img)[l]>`.
    fn backward(&self, img: &Tensor<T>, grads: &[Tensor<T>]) -> Result<Tensor<T>>;
}

/// Returns the image itself as the single feature map.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<T: Real> FeatureExtractor<T> for IdentityExtractor {
    fn features(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![img.clone()])
    }

    fn backward(&self, img: &Tensor<T>, grads: &[Tensor<T>]) -> Result<Tensor<T>> {
        match grads {
            [g] => {
                img.expect_same_shape(g)?;
                Ok(g.clone())
            }
            _ => Err(Error::Config(format!("identity extractor has 1 layer, got {} gradients", grads.len()))),
        }
    }
}

/// Frozen convolutional stack with seeded random weights: three stride-2 3x3
/// convolutions (16, 32, 64 channels), each followed by a leaky rectifier.
/// Features are taken after every stage.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor<T> {
    store: ParamStore<T>,
    layers: Vec<ConvLayer>,
}

pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed_fea7;

impl<T: Real> RandomConvExtractor<T> {
    pub fn new(seed: u64) -> Self {
        Self::with_channels(seed, &[16, 32, 64])
    }

    pub fn with_channels(seed: u64, widths: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &cout) in widths.iter().enumerate() {
            let spec = ConvSpec::conv(cin, cout, 3, 2, 1);
            let bound = (6.0 / spec.fan_in() as f64).sqrt();
            let w: Vec<T> = (0..spec.weight_len()).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
            let weight = store.push(format!("feat{i}.weight"), spec.weight_dims().to_vec(), w);
            let bias = store.push(format!("feat{i}.bias"), vec![cout], vec![T::zero(); cout]);
            layers.push(ConvLayer { spec, weight, bias });
            cin = cout;
        }
        Self { store, layers }
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn run<E: Exec<T>>(&self, e: &mut E, x: E::V) -> Result<Vec<E::V>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let c = e.conv(&h, layer)?;
            h = e.leaky_relu(&c);
            out.push(h.clone());
        }
        Ok(out)
    }
}

impl<T: Real> Default for RandomConvExtractor<T> {
    fn default() -> Self {
        Self::new(DEFAULT_EXTRACTOR_SEED)
    }
}

impl<T: Real> FeatureExtractor<T> for RandomConvExtractor<T> {
    fn features(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut e = crate::graph::Eager::new(&self.store);
        let outs = self.run(&mut e, std::rc::Rc::new(img.clone()))?;
        Ok(outs.into_iter().map(|v| (*v).clone()).collect())
    }

    fn backward(&self, img: &Tensor<T>, grads: &[Tensor<T>]) -> Result<Tensor<T>> {
        if grads.len() != self.layers.len() {
            return Err(Error::Config(format!("{} gradients for {} feature layers", grads.len(), self.layers.len())));
        }
        let mut tape = Tape::new(&self.store);
        let leaf = tape.leaf(img.clone());
        let outs = self.run(&mut tape, leaf)?;
        let seeds = outs.into_iter().zip(grads.iter().cloned()).collect();
        let g = tape.backward(seeds)?;
        Ok(g.leaf(leaf).cloned().unwrap_or_else(|| Tensor::zeros(img.shape())))
    }
}

/// Sum over extractor layers of the mean squared feature difference.
pub fn perceptual_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, features: &dyn FeatureExtractor<T>) -> Result<T> {
    same_shape(pred, target)?;
    let fp = features.features(pred)?;
    let ft = features.features(target)?;
    fp.iter().zip(&ft).try_fold(T::zero(), |acc, (a, b)| Ok(acc + l2_loss(a, b)?))
}

pub fn perceptual_loss_grad<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    features: &dyn FeatureExtractor<T>,
) -> Result<(T, Tensor<T>)> {
    same_shape(pred, target)?;
    let fp = features.features(pred)?;
    let ft = features.features(target)?;
    let mut value = T::zero();
    let mut grads = Vec::with_capacity(fp.len());
    for (a, b) in fp.iter().zip(&ft) {
        let (v, g) = l2_loss_grad(a, b)?;
        value += v;
        grads.push(g);
    }
    Ok((value, features.backward(pred, &grads)?))
}

fn tv_terms(shape: Shape) -> usize {
    shape.channels * (shape.height * shape.width.saturating_sub(1) + shape.height.saturating_sub(1) * shape.width)
}

/// Squared anisotropic total variation of the prediction: the sum of squared
/// horizontal and vertical forward differences divided by the number of
/// difference terms.
pub fn tv_loss<T: Real>(pred: &Tensor<T>) -> Result<T> {
    tv_loss_grad_inner(pred, false).map(|(v, _)| v)
}

pub fn tv_loss_grad<T: Real>(pred: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    tv_loss_grad_inner(pred, true).map(|(v, g)| (v, g.expect("gradient requested")))
}

fn tv_loss_grad_inner<T: Real>(pred: &Tensor<T>, want_grad: bool) -> Result<(T, Option<Tensor<T>>)> {
    let terms = tv_terms(pred.shape());
    if terms == 0 {
        return Err(Error::Dimension(format!("{} image has no neighbouring pixels", pred.shape())));
    }
    let (h, w) = (pred.height(), pred.width());
    let inv = T::of(1.0 / terms as f64);
    let two = T::of(2.0);
    let mut sum = T::zero();
    let mut grad = want_grad.then(|| Tensor::zeros(pred.shape()));
    for c in 0..pred.channels() {
        let p = pred.plane(c);
        let mut gp = grad.as_mut().map(|g| g.plane_mut(c));
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let d = p[i + 1] - p[i];
                    sum += d * d;
                    if let Some(g) = gp.as_deref_mut() {
                        g[i + 1] += two * d * inv;
                        g[i] -= two * d * inv;
                    }
                }
                if y + 1 < h {
                    let d = p[i + w] - p[i];
                    sum += d * d;
                    if let Some(g) = gp.as_deref_mut() {
                        g[i + w] += two * d * inv;
                        g[i] -= two * d * inv;
                    }
                }
            }
        }
    }
    Ok((sum * inv, grad))
}

/// Individual terms of the combined objective plus their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Mean squared error; only filled by the L2 objective.
    #[serde(default)]
    pub l2: f64,
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn l2_only(l2: f64) -> Self {
        Self { l2, total: l2, ..Self::default() }
    }

    pub fn weighted(w: &LossWeights, l1: f64, ssim: f64, perceptual: f64, tv: f64) -> Self {
        let total = w.l1 * l1 + w.ssim * ssim + w.perceptual * perceptual + w.tv * tv;
        Self { l2: 0.0, l1, ssim, perceptual, tv, total }
    }
}

/// Weighted sum of L1, SSIM, perceptual and total-variation losses.
pub fn combined_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    w: &LossWeights,
    features: &dyn FeatureExtractor<T>,
) -> Result<T> {
    combined_loss_with(pred, target, w, features, &SsimConfig::default()).map(|t| T::of(t.total))
}

pub fn combined_loss_with<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    w: &LossWeights,
    features: &dyn FeatureExtractor<T>,
    ssim: &SsimConfig,
) -> Result<LossTerms> {
    w.validate()?;
    Ok(LossTerms::weighted(
        w,
        l1_loss(pred, target)?.as_f64(),
        ssim_loss_with(pred, target, ssim)?.as_f64(),
        perceptual_loss(pred, target, features)?.as_f64(),
        tv_loss(pred)?.as_f64(),
    ))
}

pub fn combined_loss_grad<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    w: &LossWeights,
    features: &dyn FeatureExtractor<T>,
    ssim: &SsimConfig,
) -> Result<(LossTerms, Tensor<T>)> {
    w.validate()?;
    let (l1, g1) = l1_loss_grad(pred, target)?;
    let (ls, gs) = ssim_loss_grad(pred, target, ssim)?;
    let (lp, gp) = perceptual_loss_grad(pred, target, features)?;
    let (lt, gt) = tv_loss_grad(pred)?;
    let k = [w.l1, w.ssim, w.perceptual, w.tv].map(T::of);
    let mut grad = Tensor::zeros(pred.shape());
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        *g = k[0] * g1.data()[i] + k[1] * gs.data()[i] + k[2] * gp.data()[i] + k[3] * gt.data()[i];
    }
    Ok((LossTerms::weighted(w, l1.as_f64(), ls.as_f64(), lp.as_f64(), lt.as_f64()), grad))
}

/// Training objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    L2,
    Combined,
}
