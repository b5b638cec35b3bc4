//! Two-stage optimisation: an L2 warm-up stage followed by the combined
//! objective, each with its own cosine learning-rate schedule.

use log::{error, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::ScenePair;
use crate::error::{Error, Result};
use crate::graph::{Exec, Gradients, Tape};
use crate::losses::{self, FeatureExtractor, LossTerms, LossWeights, Objective, RandomConvExtractor, SsimConfig};
use crate::metrics;
use crate::network::{dsrn_forward, ArchConfig, ModelParams};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub batch_size: usize,
    /// Side of the square training crop; larger images are randomly cropped.
    pub input_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Validate every this many steps (0: only at the end of a stage).
    pub val_interval: usize,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            batch_size: 2,
            input_size: 512,
            lr_init: 2e-3,
            lr_final: 5e-5,
            steps_stage1: 2000,
            steps_stage2: 2000,
            loss_weights: LossWeights::default(),
            seed: 0,
            val_interval: 100,
            clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss_weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_init > self.lr_final && self.lr_final > 0.0) {
            return Err(Error::Config(format!(
                "need lr_init > lr_final > 0, got {} and {}",
                self.lr_init, self.lr_final
            )));
        }
        let d = self.arch.input_divisor();
        if self.input_size == 0 || self.input_size % d != 0 {
            return Err(Error::Config(format!("input_size {} must be a multiple of {d}", self.input_size)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return Err(Error::Config("Adam moments must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Cosine decay from `lr_init` at step 0 to `lr_final` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Config(format!("step {step} is past the schedule end {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(cfg.lr_init);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + phase.cos()))
}

/// Adaptive moment estimation without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &ModelParams<f32>, cfg: &TrainConfig) -> Self {
        let z = model.store().zeros_like();
        Self { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps, t: 0, m: z.clone(), v: z }
    }

    pub fn step(&mut self, model: &mut ModelParams<f32>, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        for (i, p) in model.store_mut().iter_mut().enumerate() {
            for (j, w) in p.data.iter_mut().enumerate() {
                let g = grads[i][j];
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.params.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: u8,
    pub lr: f64,
    /// Terms of the final stack's output, averaged over the batch.
    pub loss_terms: LossTerms,
    pub val_psnr: Option<f64>,
}

/// Which stage to run and for how long.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: u8,
    pub objective: Objective,
    pub steps: usize,
}

pub struct StageOutcome {
    /// Parameters after the last step.
    pub last: Checkpoint,
    /// Parameters with the best validation PSNR seen (equals `last` without validation data).
    pub best: Checkpoint,
    pub final_val_psnr: Option<f64>,
    pub log: Vec<LogRecord>,
}

/// Loss configuration shared by every step.
pub struct Objectives {
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub features: Box<dyn FeatureExtractor<f32>>,
}

impl Objectives {
    pub fn new(weights: LossWeights) -> Self {
        Self { weights, ssim: SsimConfig::default(), features: Box::new(RandomConvExtractor::<f32>::default()) }
    }

    fn value_and_grad(&self, objective: Objective, pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<(LossTerms, Tensor<f32>)> {
        match objective {
            Objective::L2 => {
                let (l, g) = losses::l2_loss_grad(pred, target)?;
                Ok((LossTerms::l2_only(l as f64), g))
            }
            Objective::Combined => {
                losses::combined_loss_grad(pred, target, &self.weights, self.features.as_ref(), &self.ssim)
            }
        }
    }
}

/// Loss and parameter gradients for one sample; the objective is applied to
/// every stack's output and summed. Returned terms describe the last stack.
pub fn sample_gradients(
    model: &ModelParams<f32>,
    input: &Tensor<f32>,
    target: &Tensor<f32>,
    objective: Objective,
    obj: &Objectives,
) -> Result<(LossTerms, Gradients<f32>)> {
    let mut tape = Tape::new(model.store());
    let x = tape.leaf(input.clone());
    let outs = model.forward_stacks(&mut tape, x)?;
    let mut seeds = Vec::with_capacity(outs.len());
    let mut last = LossTerms::default();
    for o in outs {
        let (terms, g) = obj.value_and_grad(objective, tape.value(&o), target)?;
        seeds.push((o, g));
        last = terms;
    }
    Ok((last, tape.backward(seeds)?))
}

fn crop(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(t.channels(), size, size), |c, y, x| t.at(c, y0 + y, x0 + x))
}

fn sample_crop(pair: &ScenePair, size: usize, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>) {
    let (inp, tgt) = (pair.input.tensor(), pair.target.tensor());
    if inp.height() <= size && inp.width() <= size {
        return (inp.clone(), tgt.clone());
    }
    let s = size.min(inp.height()).min(inp.width());
    let y0 = rng.gen_range(0..=inp.height() - s);
    let x0 = rng.gen_range(0..=inp.width() - s);
    (crop(inp, y0, x0, s), crop(tgt, y0, x0, s))
}

/// Mean PSNR of the clamped prediction over `pairs`.
pub fn validation_psnr(model: &ModelParams<f32>, pairs: &[ScenePair]) -> Result<f64> {
    let mut acc = metrics::NeumaierSum::default();
    for p in pairs {
        let pred = dsrn_forward(&p.input, model)?;
        acc.add(metrics::psnr(pred.tensor(), p.target.tensor())?);
    }
    Ok(acc.total() / pairs.len() as f64)
}

fn check_pairs(model: &ModelParams<f32>, pairs: &[ScenePair], what: &str) -> Result<()> {
    for p in pairs {
        model.check_input_dims(p.input.height(), p.input.width())?;
        p.input.tensor().expect_same_shape(p.target.tensor())?;
    }
    if what == "training" && pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    Ok(())
}

/// Runs one training stage. `sink` receives every log record as it is produced.
pub fn train_stage(
    model: ModelParams<f32>,
    train: &[ScenePair],
    val: &[ScenePair],
    plan: StagePlan,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if model.arch() != &cfg.arch {
        return Err(Error::Config("model architecture differs from the training config".into()));
    }
    check_pairs(&model, train, "training")?;
    check_pairs(&model, val, "validation")?;
    let obj = Objectives::new(cfg.loss_weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (u64::from(plan.stage) << 56));
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(&model, cfg);
    let mut model = model;
    let mut log = Vec::new();
    let snapshot = |model: &ModelParams<f32>, step: usize, best: Option<f64>| Checkpoint {
        params: model.clone(),
        config: cfg.clone(),
        task: None,
        stage: plan.stage,
        step,
        best_val_psnr: best,
    };
    let mut best_psnr: Option<f64> = None;
    let mut best = snapshot(&model, 0, None);
    let mut final_val = None;

    for step in 0..plan.steps {
        let lr = lr_at(step, plan.steps, cfg)?;
        let mut total: Option<Gradients<f32>> = None;
        let mut terms = LossTerms::default();
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            let pair = &train[order.pop().expect("refilled")];
            let (x, y) = sample_crop(pair, cfg.input_size, &mut rng);
            let (t, g) = sample_gradients(&model, &x, &y, plan.objective, &obj)?;
            add_terms(&mut terms, &t, 1.0 / cfg.batch_size as f64);
            match &mut total {
                Some(acc) => acc.merge(&g)?,
                None => total = Some(g),
            }
        }
        let mut grads = total.expect("batch_size >= 1");
        let inv = 1.0 / cfg.batch_size as f32;
        grads.params.iter_mut().flatten().for_each(|g| *g *= inv);
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !terms.total.is_finite() || !norm.is_finite() {
            let msg = format!(
                "non-finite loss at stage {} step {step} (lr {lr:.3e}, grad norm {norm}): {terms:?}",
                plan.stage
            );
            error!("{msg}");
            return Err(Error::Numeric(msg));
        }
        adam.step(&mut model, &grads.params, lr);

        let done = step + 1;
        let validate = !val.is_empty() && (done == plan.steps || (cfg.val_interval > 0 && done % cfg.val_interval == 0));
        let val_psnr = if validate { Some(validation_psnr(&model, val)?) } else { None };
        if let Some(p) = val_psnr {
            final_val = Some(p);
            if best_psnr.is_none_or(|b| p > b) {
                best_psnr = Some(p);
                best = snapshot(&model, done, best_psnr);
            }
        }
        let rec = LogRecord { step: done, stage: plan.stage, lr, loss_terms: terms, val_psnr };
        if validate || done == plan.steps || done % 50 == 0 {
            info!("stage {} step {done}/{}: loss {:.5e} val_psnr {:?}", plan.stage, plan.steps, terms.total, val_psnr);
        }
        sink(&rec)?;
        log.push(rec);
    }

    let last = snapshot(&model, plan.steps, best_psnr);
    if best_psnr.is_none() {
        best = last.clone();
    } else {
        best.best_val_psnr = best_psnr;
    }
    Ok(StageOutcome { last, best, final_val_psnr: final_val, log })
}

fn add_terms(acc: &mut LossTerms, t: &LossTerms, w: f64) {
    acc.l2 += w * t.l2;
    acc.l1 += w * t.l1;
    acc.ssim += w * t.ssim;
    acc.perceptual += w * t.perceptual;
    acc.tv += w * t.tv;
    acc.total += w * t.total;
}

pub struct TwoStageOutcome {
    pub stage1: StageOutcome,
    /// `None` when `steps_stage2` is zero.
    pub stage2: Option<StageOutcome>,
}

impl TwoStageOutcome {
    /// Final parameters of the last stage that ran.
    pub fn last(&self) -> &Checkpoint {
        self.stage2.as_ref().map_or(&self.stage1.last, |s| &s.last)
    }

    pub fn best(&self) -> &Checkpoint {
        self.stage2.as_ref().map_or(&self.stage1.best, |s| &s.best)
    }
}

/// Stage 1 with L2, then stage 2 with the combined loss starting from the
/// stage-1 final weights. Each stage restarts the schedule and optimizer state.
pub fn train_two_stage(
    train: &[ScenePair],
    val: &[ScenePair],
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<TwoStageOutcome> {
    cfg.validate()?;
    let model = ModelParams::init(cfg.arch.clone(), cfg.seed)?;
    let stage1 = train_stage(
        model,
        train,
        val,
        StagePlan { stage: 1, objective: Objective::L2, steps: cfg.steps_stage1 },
        cfg,
        sink,
    )?;
    if cfg.steps_stage2 == 0 {
        return Ok(TwoStageOutcome { stage1, stage2: None });
    }
    let stage2 = train_stage(
        stage1.last.params.clone(),
        train,
        val,
        StagePlan { stage: 2, objective: Objective::Combined, steps: cfg.steps_stage2 },
        cfg,
        sink,
    )?;
    Ok(TwoStageOutcome { stage1, stage2: Some(stage2) })
}
