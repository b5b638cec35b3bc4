//! Evaluation metrics: PSNR, SSIM and a feature-space perceptual distance.

use serde::{Deserialize, Serialize};

use crate::data::ScenePair;
use crate::error::{Error, Result};
use crate::losses::{self, FeatureExtractor, SsimConfig};
use crate::network::Relighter;
use crate::tensor::{Real, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio for unit-range images, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    psnr_with_cap(pred, target, PSNR_CAP_DB)
}

pub fn psnr_with_cap<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, cap_db: f64) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let mut acc = NeumaierSum::default();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p.as_f64() - t.as_f64();
        acc.add(d * d);
    }
    let mse = acc.total() / pred.len() as f64;
    if mse == 0.0 {
        return Ok(cap_db);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(cap_db))
}

/// Mean SSIM with the default 11x11 Gaussian window; equals `1 - ssim_loss`.
pub fn ssim_metric<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    Ok(1.0 - losses::ssim_loss(pred, target)?.as_f64())
}

const UNIT_NORM_EPS: f64 = 1e-10;

/// Normalised feature distance: per-pixel unit-normalised channel vectors,
/// squared difference summed over channels, averaged over space, summed over
/// layers.
pub fn perceptual_distance<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    extractor: Option<&dyn FeatureExtractor<T>>,
) -> Result<f64> {
    let extractor = extractor.ok_or_else(|| Error::Unsupported("perceptual distance needs a feature extractor".into()))?;
    pred.expect_same_shape(target)?;
    let fa = extractor.features(pred)?;
    let fb = extractor.features(target)?;
    let mut total = 0.0;
    for (a, b) in fa.iter().zip(&fb) {
        let (c, n) = (a.channels(), a.shape().plane());
        let mut layer = 0.0;
        for i in 0..n {
            let norm = |t: &Tensor<T>| {
                (0..c).map(|ch| t.plane(ch)[i].as_f64().powi(2)).sum::<f64>().sqrt() + UNIT_NORM_EPS
            };
            let (na, nb) = (norm(a), norm(b));
            layer += (0..c)
                .map(|ch| (a.plane(ch)[i].as_f64() / na - b.plane(ch)[i].as_f64() / nb).powi(2))
                .sum::<f64>();
        }
        total += layer / n as f64;
    }
    Ok(total)
}

/// Metric means over a set of image pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub perceptual_distance: Option<f64>,
    pub n_images: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "method,psnr,ssim,lpips,runtime_s";

    /// One row in the `method,psnr,ssim,lpips,runtime_s` table layout; absent
    /// values are left empty.
    pub fn csv_row(&self, method: &str, runtime_s: Option<f64>) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{},{}",
            method.replace(',', ";"),
            self.psnr_db,
            self.ssim,
            opt(self.perceptual_distance),
            opt(runtime_s)
        )
    }
}

/// Per-image metrics for one prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub perceptual_distance: Option<f64>,
}

pub fn image_metrics(
    pred: &Tensor<f32>,
    target: &Tensor<f32>,
    extractor: Option<&dyn FeatureExtractor<f32>>,
) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        psnr_db: psnr(pred, target)?,
        ssim: losses::ssim_with(pred, target, &SsimConfig::default())?,
        perceptual_distance: match extractor {
            Some(e) => Some(perceptual_distance(pred, target, Some(e))?),
            None => None,
        },
    })
}

/// Runs `model` on every pair and averages the per-image metrics.
pub fn evaluate_dataset(
    model: &dyn Relighter,
    pairs: &[ScenePair],
    extractor: Option<&dyn FeatureExtractor<f32>>,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Data("cannot evaluate an empty set of pairs".into()));
    }
    let per_image = pairs
        .iter()
        .map(|p| {
            let pred = model.relight(&p.input)?;
            image_metrics(pred.tensor(), p.target.tensor(), extractor)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&per_image))
}

/// Arithmetic means with compensated summation.
pub fn aggregate(per_image: &[ImageMetrics]) -> MetricReport {
    let n = per_image.len();
    let mean = |f: &dyn Fn(&ImageMetrics) -> f64| {
        let mut s = NeumaierSum::default();
        per_image.iter().for_each(|m| s.add(f(m)));
        s.total() / n as f64
    };
    let perceptual_distance = per_image
        .iter()
        .all(|m| m.perceptual_distance.is_some())
        .then(|| mean(&|m| m.perceptual_distance.unwrap_or(0.0)));
    MetricReport {
        psnr_db: mean(&|m| m.psnr_db),
        ssim: mean(&|m| m.ssim),
        perceptual_distance,
        n_images: n,
    }
}

/// Kahan-Babuska-Neumaier compensated sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}
