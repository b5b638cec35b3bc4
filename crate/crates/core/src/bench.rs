//! Inference latency benchmark.
//!
//! Only the forward pass is timed: the input image is generated before the
//! warm-up and no file I/O or model loading happens inside the timed region.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::network::{dsrn_forward, ModelParams};
use crate::tensor::{Shape, Tensor};

/// Reference mean latency at 1024x1024 on an 11 GB consumer GPU.
pub const REFERENCE_LATENCY_S: f64 = 0.0116;
pub const REFERENCE_DEVICE: &str = "11 GB consumer GPU";
pub const MIN_TIMED_ITERS: usize = 10;
const BENCH_IMAGE_SEED: u64 = 0xbe4c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub resolution: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
    pub stddev_s: f64,
    /// `stddev_s / mean_s`.
    pub cv: f64,
    pub params: usize,
    pub fp32_mb: f64,
    pub device_descr: String,
    pub includes_preprocessing: bool,
    pub reference_latency_s: f64,
    pub reference_device: String,
    pub samples_s: Vec<f64>,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "method,psnr,ssim,lpips,runtime_s";

    /// Row in the metrics-table layout with only the runtime filled in.
    pub fn csv_row(&self, method: &str) -> String {
        format!("{},,,,{:.6}", method.replace(',', ";"), self.mean_s)
    }

    /// Informational comparison with the reference figure.
    pub fn within_factor_of_reference(&self, factor: f64) -> bool {
        self.mean_s <= factor * self.reference_latency_s
    }
}

pub fn device_description() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let requested = std::env::var("DSRN_DEVICE").unwrap_or_else(|_| "cpu".into());
    format!("cpu ({} {}, {threads} hardware threads; requested device: {requested})", std::env::consts::OS, std::env::consts::ARCH)
}

/// Linear-interpolated percentile of sorted samples, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times `iters` forward passes on a fixed random image after `warmup` untimed ones.
pub fn time_inference(model: &ModelParams<f32>, resolution: usize, warmup: usize, iters: usize) -> Result<BenchReport> {
    if iters < MIN_TIMED_ITERS {
        return Err(Error::Config(format!("need at least {MIN_TIMED_ITERS} timed iterations, got {iters}")));
    }
    if resolution == 0 || resolution % 16 != 0 {
        return Err(Error::Dimension(format!("resolution {resolution} is not a positive multiple of 16")));
    }
    model.check_input_dims(resolution, resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(BENCH_IMAGE_SEED);
    let img = ImageTensor::new(Tensor::from_fn(Shape::new(3, resolution, resolution), |_, _, _| rng.gen_range(0.0..1.0)))?;
    for _ in 0..warmup {
        std::hint::black_box(dsrn_forward(&img, model)?);
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        // CPU execution is synchronous, so the clock brackets the full pass.
        let t0 = Instant::now();
        let out = dsrn_forward(std::hint::black_box(&img), model)?;
        samples.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let stats = model.stats();
    Ok(BenchReport {
        resolution,
        warmup_iters: warmup,
        timed_iters: iters,
        mean_s: mean,
        p50_s: percentile(&sorted, 0.5),
        p95_s: percentile(&sorted, 0.95),
        stddev_s: var.sqrt(),
        cv: var.sqrt() / mean,
        params: stats.count,
        fp32_mb: stats.fp32_bytes as f64 / 1e6,
        device_descr: device_description(),
        includes_preprocessing: false,
        reference_latency_s: REFERENCE_LATENCY_S,
        reference_device: REFERENCE_DEVICE.into(),
        samples_s: samples,
    })
}
