//! The pyramid relighting network and its stacked composition.
//!
//! A base network runs one encoder/decoder pair per pyramid level, coarsest
//! level first. With `I_i` the pyramid image at level `i`:
//!
//! ```text
//! in_i  = I_i + up(out_{i+1})
//! F_i   = Encoder_i(in_i)
//! G_i   = F_i + up(G_{i+1})
//! out_i = Decoder_i(G_i)
//! ```
//!
//! The `up(..)` terms are dropped at the coarsest level. The full model
//! cascades `stacks` base networks: each one consumes a fresh pyramid built
//! from the previous stack's full-resolution output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvLayer, Eager, Exec, ParamStore};
use crate::imaging::{ImageTensor, Pyramid};
use crate::kernels::ConvSpec;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub pyramid_levels: usize,
    /// Number of encoder (and mirrored decoder) stages per level.
    pub enc_hierarchy_depth: usize,
    pub res_blocks_per_stage: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub stacks: usize,
    /// Reuse one set of weights for every stack.
    pub share_stack_weights: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            enc_hierarchy_depth: 3,
            res_blocks_per_stage: 2,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            stacks: 2,
            share_stack_weights: false,
        }
    }
}

impl ArchConfig {
    pub fn with_base_channels(mut self, c: usize) -> Self {
        self.base_channels = c;
        self
    }

    pub fn with_stacks(mut self, s: usize) -> Self {
        self.stacks = s;
        self
    }

    pub fn with_levels(mut self, l: usize) -> Self {
        self.pyramid_levels = l;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stacks == 0 || self.pyramid_levels == 0 || self.enc_hierarchy_depth == 0 || self.base_channels == 0 {
            return Err(Error::Config(format!("stacks, levels, depth and base channels must be positive: {self:?}")));
        }
        if self.channel_multipliers.len() != self.enc_hierarchy_depth {
            return Err(Error::Config(format!(
                "{} channel multipliers for {} encoder stages",
                self.channel_multipliers.len(),
                self.enc_hierarchy_depth
            )));
        }
        if self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel multipliers must be positive".into()));
        }
        Ok(())
    }

    /// Spatial reduction inside one encoder.
    pub fn encoder_factor(&self) -> usize {
        1 << (self.enc_hierarchy_depth - 1)
    }

    /// Required divisor of input height and width.
    pub fn input_divisor(&self) -> usize {
        (1 << (self.pyramid_levels - 1)) * self.encoder_factor()
    }

    pub fn feature_channels(&self) -> usize {
        self.base_channels * self.channel_multipliers.last().copied().unwrap_or(1)
    }

    fn width(&self, stage: usize) -> usize {
        self.base_channels * self.channel_multipliers[stage]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderStage {
    /// 3x3 projection; stride 2 for every stage but the first.
    pub entry: ConvLayer,
    pub blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderStage {
    pub blocks: Vec<ResBlock>,
    /// 4x4 stride-2 transposed conv, or the final 3x3 projection to RGB.
    pub exit: ConvLayer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub stages: Vec<EncoderStage>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoder {
    pub stages: Vec<DecoderStage>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelNet {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// One base network; `levels[0]` serves full resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BaseNet {
    pub levels: Vec<LevelNet>,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, spec: ConvSpec) -> ConvLayer {
        let fan_in = if spec.transposed {
            spec.in_ch * (spec.kernel / spec.stride).pow(2)
        } else {
            spec.fan_in()
        };
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::of(self.rng.gen_range(-bound..bound))).collect() };
        let w = draw(spec.weight_len());
        let b = draw(spec.out_ch);
        let weight = self.store.push(format!("{name}.weight"), spec.weight_dims().to_vec(), w);
        let bias = self.store.push(format!("{name}.bias"), vec![spec.out_ch], b);
        ConvLayer { spec, weight, bias }
    }

    fn blocks(&mut self, prefix: &str, n: usize, ch: usize) -> Vec<ResBlock> {
        (0..n)
            .map(|b| ResBlock {
                conv1: self.conv(&format!("{prefix}.res{b}.conv1"), ConvSpec::conv(ch, ch, 3, 1, 1)),
                conv2: self.conv(&format!("{prefix}.res{b}.conv2"), ConvSpec::conv(ch, ch, 3, 1, 1)),
            })
            .collect()
    }

    fn level(&mut self, arch: &ArchConfig, prefix: &str) -> LevelNet {
        let depth = arch.enc_hierarchy_depth;
        let n = arch.res_blocks_per_stage;
        let mut enc = Vec::with_capacity(depth);
        for s in 0..depth {
            let (cin, stride) = if s == 0 { (3, 1) } else { (arch.width(s - 1), 2) };
            let p = format!("{prefix}.enc.stage{s}");
            enc.push(EncoderStage {
                entry: self.conv(&format!("{p}.entry"), ConvSpec::conv(cin, arch.width(s), 3, stride, 1)),
                blocks: self.blocks(&p, n, arch.width(s)),
            });
        }
        let mut dec = Vec::with_capacity(depth);
        for d in 0..depth {
            let s = depth - 1 - d;
            let p = format!("{prefix}.dec.stage{d}");
            let blocks = self.blocks(&p, n, arch.width(s));
            let exit = if s == 0 {
                ConvSpec::conv(arch.width(0), 3, 3, 1, 1)
            } else {
                ConvSpec::transposed(arch.width(s), arch.width(s - 1), 4, 2, 1)
            };
            dec.push(DecoderStage { blocks, exit: self.conv(&format!("{p}.exit"), exit) });
        }
        LevelNet { encoder: Encoder { stages: enc }, decoder: Decoder { stages: dec } }
    }

    fn base(&mut self, arch: &ArchConfig, prefix: &str) -> BaseNet {
        BaseNet {
            levels: (0..arch.pyramid_levels)
                .map(|l| self.level(arch, &format!("{prefix}.level{l}")))
                .collect(),
        }
    }
}

/// Layer wiring for a full model; parameter ids point into the owning store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub stacks: Vec<BaseNet>,
}

/// All learnable weights of one model plus the architecture they realise.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    arch: ArchConfig,
    topology: Topology,
    store: ParamStore<T>,
}

impl<T: Real> ModelParams<T> {
    /// Fan-in scaled uniform initialisation; identical seeds give identical weights.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let stacks = if arch.share_stack_weights {
            let shared = b.base(&arch, "shared");
            vec![shared; arch.stacks]
        } else {
            (0..arch.stacks).map(|s| b.base(&arch, &format!("stack{s}"))).collect()
        };
        Ok(Self { arch, topology: Topology { stacks }, store })
    }

    /// Rebuilds a model from an architecture and externally loaded tensors.
    ///
    /// Tensor names, order and dimensions must match what [`ModelParams::init`]
    /// produces for `arch`.
    pub fn from_store(arch: ArchConfig, store: ParamStore<T>) -> Result<Self> {
        let template = ModelParams::<T>::init(arch, 0)?;
        if template.store.len() != store.len() {
            return Err(Error::Config(format!(
                "architecture needs {} tensors, archive holds {}",
                template.store.len(),
                store.len()
            )));
        }
        for (want, got) in template.store.iter().zip(store.iter()) {
            if want.name != got.name || want.dims != got.dims || got.data.len() != want.data.len() {
                return Err(Error::Config(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    got.name, got.dims, want.name, want.dims
                )));
            }
        }
        Ok(Self { arch: template.arch, topology: template.topology, store })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { arch: self.arch.clone(), topology: self.topology.clone(), store: self.store.cast() }
    }

    pub fn stats(&self) -> ParamStats {
        param_stats(self)
    }

    /// Runs every stack and returns each stack's raw full-resolution output.
    pub fn forward_stacks<E: Exec<T>>(&self, e: &mut E, input: E::V) -> Result<Vec<E::V>> {
        let mut x = input;
        let mut outs = Vec::with_capacity(self.topology.stacks.len());
        for base in &self.topology.stacks {
            let pyr = pyramid_exec(e, &x, self.arch.pyramid_levels)?;
            let (out, _) = base_forward_exec(e, &pyr, base)?;
            outs.push(out.clone());
            x = out;
        }
        Ok(outs)
    }

    pub fn check_input_dims(&self, height: usize, width: usize) -> Result<()> {
        let d = self.arch.input_divisor();
        if height == 0 || width == 0 || height % d != 0 || width % d != 0 {
            return Err(Error::Dimension(format!("input {height}x{width} must be a non-zero multiple of {d}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamStats {
    pub count: usize,
    pub fp32_bytes: usize,
}

/// Counts unique learnable scalars (shared stacks count once).
pub fn param_stats<T: Real>(params: &ModelParams<T>) -> ParamStats {
    let count = params.store.scalar_count();
    ParamStats { count, fp32_bytes: count * 4 }
}

/// Per-level intermediates of one base-network pass; index 0 is full resolution.
#[derive(Clone, Debug)]
pub struct LevelTrace<V> {
    pub levels: Vec<LevelRecord<V>>,
}

#[derive(Clone, Debug)]
pub struct LevelRecord<V> {
    pub input: V,
    pub features: V,
    pub aggregated: V,
    pub output: V,
}

pub fn residual_block_exec<T: Real, E: Exec<T>>(e: &mut E, x: &E::V, block: &ResBlock) -> Result<E::V> {
    let h = e.conv(x, &block.conv1)?;
    let h = e.leaky_relu(&h);
    let h = e.conv(&h, &block.conv2)?;
    e.add(x, &h)
}

pub fn encoder_exec<T: Real, E: Exec<T>>(e: &mut E, x: &E::V, enc: &Encoder) -> Result<E::V> {
    let mut h = x.clone();
    for stage in &enc.stages {
        h = e.conv(&h, &stage.entry)?;
        for block in &stage.blocks {
            h = residual_block_exec(e, &h, block)?;
        }
    }
    Ok(h)
}

pub fn decoder_exec<T: Real, E: Exec<T>>(e: &mut E, g: &E::V, dec: &Decoder) -> Result<E::V> {
    let mut h = g.clone();
    for stage in &dec.stages {
        for block in &stage.blocks {
            h = residual_block_exec(e, &h, block)?;
        }
        h = e.conv(&h, &stage.exit)?;
    }
    Ok(h)
}

pub fn pyramid_exec<T: Real, E: Exec<T>>(e: &mut E, x: &E::V, levels: usize) -> Result<Vec<E::V>> {
    crate::imaging::check_pyramid_dims(e.value(x).shape(), levels)?;
    let mut pyr = vec![x.clone()];
    for _ in 1..levels {
        let next = e.downsample2x(pyr.last().expect("non-empty"))?;
        pyr.push(next);
    }
    Ok(pyr)
}

/// Coarse-to-fine pass of one base network over a prepared pyramid.
pub fn base_forward_exec<T: Real, E: Exec<T>>(
    e: &mut E,
    pyramid: &[E::V],
    base: &BaseNet,
) -> Result<(E::V, LevelTrace<E::V>)> {
    if pyramid.len() != base.levels.len() {
        return Err(Error::Config(format!(
            "pyramid has {} levels, network expects {}",
            pyramid.len(),
            base.levels.len()
        )));
    }
    let mut records: Vec<LevelRecord<E::V>> = Vec::with_capacity(pyramid.len());
    let mut coarser: Option<(E::V, E::V)> = None; // (out_{i+1}, G_{i+1})
    for (img, net) in pyramid.iter().zip(&base.levels).rev() {
        let input = match &coarser {
            None => img.clone(),
            Some((out, _)) => {
                let up = e.upsample2x(out);
                e.add(img, &up)?
            }
        };
        let features = encoder_exec(e, &input, &net.encoder)?;
        let aggregated = match &coarser {
            None => features.clone(),
            Some((_, g)) => {
                let up = e.upsample2x(g);
                e.add(&features, &up)?
            }
        };
        let output = decoder_exec(e, &aggregated, &net.decoder)?;
        coarser = Some((output.clone(), aggregated.clone()));
        records.push(LevelRecord { input, features, aggregated, output });
    }
    records.reverse();
    let out = records[0].output.clone();
    Ok((out, LevelTrace { levels: records }))
}

fn unwrap_rc<T: Clone>(v: std::rc::Rc<T>) -> T {
    std::rc::Rc::try_unwrap(v).unwrap_or_else(|rc| (*rc).clone())
}

fn stage_for<T: Real>(params: &ModelParams<T>, stack: usize, level: usize) -> Result<&LevelNet> {
    params
        .topology
        .stacks
        .get(stack)
        .and_then(|b| b.levels.get(level))
        .ok_or_else(|| Error::Config(format!("no level {level} in stack {stack}")))
}

/// `x + conv2(leaky(conv1(x)))` for the given block of the given model.
pub fn residual_block<T: Real>(params: &ModelParams<T>, block: &ResBlock, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut e = Eager::new(&params.store);
    residual_block_exec(&mut e, &std::rc::Rc::new(x.clone()), block).map(unwrap_rc)
}

/// Encoder of `stack`/`level` applied to `input`.
pub fn encoder_forward<T: Real>(params: &ModelParams<T>, stack: usize, level: usize, input: &Tensor<T>) -> Result<Tensor<T>> {
    let f = params.arch.encoder_factor();
    if input.height() % f != 0 || input.width() % f != 0 || input.height() == 0 || input.width() == 0 {
        return Err(Error::Dimension(format!(
            "encoder input {}x{} is not divisible by {f}",
            input.height(),
            input.width()
        )));
    }
    let net = stage_for(params, stack, level)?;
    let mut e = Eager::new(&params.store);
    encoder_exec(&mut e, &std::rc::Rc::new(input.clone()), &net.encoder).map(unwrap_rc)
}

/// Decoder of `stack`/`level` applied to aggregated features.
pub fn decoder_forward<T: Real>(params: &ModelParams<T>, stack: usize, level: usize, g: &Tensor<T>) -> Result<Tensor<T>> {
    if g.channels() != params.arch.feature_channels() {
        return Err(Error::Config(format!(
            "decoder expects {} feature channels, got {}",
            params.arch.feature_channels(),
            g.channels()
        )));
    }
    let net = stage_for(params, stack, level)?;
    let mut e = Eager::new(&params.store);
    decoder_exec(&mut e, &std::rc::Rc::new(g.clone()), &net.decoder).map(unwrap_rc)
}

/// One base network (`stack`) over an image pyramid; raw (unclamped) output.
pub fn base_forward(params: &ModelParams<f32>, stack: usize, pyramid: &Pyramid) -> Result<(Tensor<f32>, LevelTrace<Tensor<f32>>)> {
    let base = params
        .topology
        .stacks
        .get(stack)
        .ok_or_else(|| Error::Config(format!("no stack {stack}")))?;
    let top = pyramid.level(0);
    params.check_input_dims(top.height(), top.width())?;
    let levels: Vec<_> = pyramid.levels().iter().map(|l| std::rc::Rc::new(l.tensor().clone())).collect();
    let mut e = Eager::new(&params.store);
    let (out, trace) = base_forward_exec(&mut e, &levels, base)?;
    let trace = LevelTrace {
        levels: trace
            .levels
            .into_iter()
            .map(|r| LevelRecord {
                input: (*r.input).clone(),
                features: (*r.features).clone(),
                aggregated: (*r.aggregated).clone(),
                output: (*r.output).clone(),
            })
            .collect(),
    };
    Ok(((*out).clone(), trace))
}

/// Raw output of the last stack, before clamping.
pub fn dsrn_forward_raw<T: Real>(params: &ModelParams<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
    params.check_input_dims(img.height(), img.width())?;
    if img.channels() != 3 {
        return Err(Error::Format(format!("expected 3 channels, got {}", img.channels())));
    }
    let mut e = Eager::new(&params.store);
    let outs = params.forward_stacks(&mut e, std::rc::Rc::new(img.clone()))?;
    let last = outs.into_iter().last().expect("at least one stack");
    Ok(unwrap_rc(last))
}

/// Relights `img`; the prediction is clamped to `[0, 1]`.
pub fn dsrn_forward(img: &ImageTensor, params: &ModelParams<f32>) -> Result<ImageTensor> {
    let raw = dsrn_forward_raw(params, img.tensor())?;
    ImageTensor::from_clamped(&raw)
}

/// Anything that maps an input image to a relit prediction.
pub trait Relighter {
    fn relight(&self, input: &ImageTensor) -> Result<ImageTensor>;
}

impl Relighter for ModelParams<f32> {
    fn relight(&self, input: &ImageTensor) -> Result<ImageTensor> {
        dsrn_forward(input, self)
    }
}

/// Returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct Passthrough;

impl Relighter for Passthrough {
    fn relight(&self, input: &ImageTensor) -> Result<ImageTensor> {
        Ok(input.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tape;
    use crate::imaging::build_pyramid;
    use crate::tensor::Shape;

    fn small() -> ArchConfig {
        ArchConfig::default().with_base_channels(4)
    }

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Tensor::from_fn(Shape::new(3, h, w), |_, _, _| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn default_model_size_matches_hand_count() {
        let p = ModelParams::<f32>::init(ArchConfig::default(), 0).unwrap();
        let s = p.stats();
        // Per level: encoder 868_288 + decoder 939_843; 3 levels, 2 stacks.
        assert_eq!(s.count, 2 * 3 * (868_288 + 939_843));
        assert_eq!(s.fp32_bytes, s.count * 4);
    }

    #[test]
    fn unit_width_single_level_hand_count() {
        let arch = ArchConfig::default().with_base_channels(1).with_stacks(1).with_levels(1);
        let p = ModelParams::<f32>::init(arch, 0).unwrap();
        // encoder: 28 + 40 + 20 + 152 + 76 + 592; decoder: 592 + 130 + 152 + 33 + 40 + 30
        assert_eq!(p.stats().count, 908 + 977);
    }

    #[test]
    fn doubling_stacks_doubles_count_and_sharing_does_not() {
        let one = ModelParams::<f32>::init(small().with_stacks(1), 0).unwrap().stats().count;
        let two = ModelParams::<f32>::init(small().with_stacks(2), 0).unwrap().stats().count;
        assert_eq!(two, 2 * one);
        let shared = ArchConfig { share_stack_weights: true, ..small() };
        assert_eq!(ModelParams::<f32>::init(shared, 0).unwrap().stats().count, one);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::<f32>::init(small(), 9).unwrap();
        let b = ModelParams::<f32>::init(small(), 9).unwrap();
        let c = ModelParams::<f32>::init(small(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.store(), c.store());
    }

    #[test]
    fn encoder_decoder_shapes() {
        let p = ModelParams::<f32>::init(ArchConfig::default(), 1).unwrap();
        let x = image(128, 128, 1).into_tensor();
        let f = encoder_forward(&p, 0, 0, &x).unwrap();
        assert_eq!(f.shape(), Shape::new(128, 32, 32));
        let out = decoder_forward(&p, 0, 0, &f).unwrap();
        assert_eq!(out.shape(), Shape::new(3, 128, 128));
        assert!(matches!(encoder_forward(&p, 0, 0, &Tensor::zeros(Shape::new(3, 30, 32))), Err(Error::Dimension(_))));
        assert!(matches!(decoder_forward(&p, 0, 0, &Tensor::zeros(Shape::new(64, 8, 8))), Err(Error::Config(_))));
        assert_eq!(encoder_forward(&p, 0, 0, &x).unwrap(), f);
    }

    #[test]
    fn zeroed_residual_weights_give_identity() {
        let mut p = ModelParams::<f64>::init(small(), 2).unwrap();
        let block = p.topology().stacks[0].levels[0].encoder.stages[1].blocks[0].clone();
        for id in [block.conv1.weight, block.conv1.bias, block.conv2.weight, block.conv2.bias] {
            p.store_mut().get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::from_fn(Shape::new(8, 6, 6), |c, y, x| (c as f64 - y as f64 * 0.3 + x as f64).sin());
        assert_eq!(residual_block(&p, &block, &x).unwrap(), x);
        let wrong = Tensor::<f64>::zeros(Shape::new(5, 6, 6));
        assert!(matches!(residual_block(&p, &block, &wrong), Err(Error::Config(_))));
    }

    #[test]
    fn zero_final_projection_gives_zero_output() {
        let mut p = ModelParams::<f32>::init(small(), 3).unwrap();
        let exit = p.topology().stacks[0].levels[0].decoder.stages.last().unwrap().exit;
        for id in [exit.weight, exit.bias] {
            p.store_mut().get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Tensor::filled(Shape::new(16, 4, 4), 0.5f32);
        let out = decoder_forward(&p, 0, 0, &g).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_level_base_is_decoder_of_encoder() {
        let p = ModelParams::<f32>::init(small().with_levels(1).with_stacks(1), 4).unwrap();
        let img = image(32, 32, 2);
        let (out, trace) = base_forward(&p, 0, &build_pyramid(&img, 1).unwrap()).unwrap();
        let direct = decoder_forward(&p, 0, 0, &encoder_forward(&p, 0, 0, img.tensor()).unwrap()).unwrap();
        assert_eq!(out, direct);
        assert_eq!(trace.levels.len(), 1);
        assert_eq!(&trace.levels[0].input, img.tensor());
    }

    #[test]
    fn one_stack_dsrn_equals_base_forward() {
        let p = ModelParams::<f32>::init(small().with_stacks(1), 5).unwrap();
        let img = image(64, 64, 3);
        let (base, trace) = base_forward(&p, 0, &build_pyramid(&img, 3).unwrap()).unwrap();
        assert_eq!(dsrn_forward_raw(&p, img.tensor()).unwrap(), base);
        assert_eq!(trace.levels.len(), 3);
        assert_eq!(base.shape(), img.tensor().shape());
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let p = ModelParams::<f32>::init(ArchConfig::default().with_base_channels(2), 6).unwrap();
        for s in [64, 128, 256, 512] {
            let img = image(s, s, 7);
            let out = dsrn_forward(&img, &p).unwrap();
            assert_eq!((out.height(), out.width()), (img.height(), img.width()));
        }
        let bad = image(40, 48, 1);
        assert!(matches!(dsrn_forward(&bad, &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn network_gradient_matches_finite_difference() {
        let p = ModelParams::<f64>::init(small(), 8).unwrap();
        let x = image(16, 16, 8).into_tensor().cast::<f64>();
        let objective = |params: &ModelParams<f64>| dsrn_forward_raw(params, &x).unwrap().mean();
        let mut tape = Tape::new(p.store());
        let leaf = tape.leaf(x.clone());
        let outs = p.forward_stacks(&mut tape, leaf).unwrap();
        let last = *outs.last().unwrap();
        let n = x.len() as f64;
        let seed = Tensor::filled(x.shape(), 1.0 / n);
        let grads = tape.backward(vec![(last, seed)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        for _ in 0..40 {
            let pid = rng.gen_range(0..p.store().len());
            let idx = rng.gen_range(0..p.store().get(pid).data.len());
            let analytic = grads.params[pid][idx];
            let h = 1e-5;
            let mut plus = p.clone();
            plus.store_mut().get_mut(pid).data[idx] += h;
            let mut minus = p.clone();
            minus.store_mut().get_mut(pid).data[idx] -= h;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-8 {
                continue;
            }
            checked += 1;
            assert!((analytic - numeric).abs() / scale < 1e-3, "param {pid}[{idx}]: {analytic} vs {numeric}");
        }
        assert!(checked > 20);
    }
}
