use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DropoutPlacement, NetworkConfig, PerturbationKind};
use super::perturbation::{dropout_mask, perturbation_mask, PerturbationParams};
use crate::error::{Error, Result};
use crate::nn::{
    join, max_pool2x2, max_pool2x2_backward, BilinearResize, Conv2d, ConvBlock, ConvBlockCache,
    ConvCache, ConvTranspose2x2, ConvTransposeCache, Mode, Param, Parameterized, PoolCache,
};
use crate::rng::{self, streams, RngState};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Standard deviation of the classifier-head weights at initialization.
/// Small enough that an untrained network predicts near-uniform classes.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Transposed-convolution upsampling.
    Tr,
    /// 1x1 convolution followed by bilinear upsampling.
    Up,
}

/// Which parameters [`Network::count_parameters`] includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterScope {
    /// Everything that receives gradients during training.
    FullTraining,
    /// Encoder, UP decoder and the UP auxiliary heads.
    InferenceUpBranch,
    /// Encoder and UP decoder only: a plain U-Net with bilinear upsampling.
    BackboneUnetEquivalent,
}

/// Logits of both branches at the four scales, each `(B, C, H, W)` at input
/// resolution. Index 0..3 holds scales 1..4; scale 4 is the main output.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPyramids<T> {
    pub tr: Vec<Tensor4<T>>,
    pub up: Vec<Tensor4<T>>,
}

impl<T: Scalar> BranchPyramids<T> {
    pub const SCALES: usize = 4;

    /// Logits of `branch` at `scale` in 1..=4.
    pub fn scale(&self, branch: Branch, scale: usize) -> &Tensor4<T> {
        assert!((1..=Self::SCALES).contains(&scale), "scale out of range");
        match branch {
            Branch::Tr => &self.tr[scale - 1],
            Branch::Up => &self.up[scale - 1],
        }
    }

    pub fn main(&self, branch: Branch) -> &Tensor4<T> {
        self.scale(branch, Self::SCALES)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tr.len() != Self::SCALES || self.up.len() != Self::SCALES {
            return Err(Error::Shape(format!(
                "pyramids need {} scales per branch, got tr={} up={}",
                Self::SCALES,
                self.tr.len(),
                self.up.len()
            )));
        }
        let shape = self.tr[0].shape();
        for m in self.tr.iter().chain(&self.up) {
            m.ensure_shape(shape, "pyramid map")?;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tr: self.tr.iter().map(|m| Tensor4::zeros(m.shape())).collect(),
            up: self.up.iter().map(|m| Tensor4::zeros(m.shape())).collect(),
        }
    }

    pub fn map_mut(&mut self, branch: Branch, scale: usize) -> &mut Tensor4<T> {
        match branch {
            Branch::Tr => &mut self.tr[scale - 1],
            Branch::Up => &mut self.up[scale - 1],
        }
    }
}

/// Gradients of a scalar loss with respect to each pyramid map; `None`
/// means the loss does not depend on that map.
#[derive(Debug, Clone)]
pub struct PyramidGrads<T> {
    pub tr: [Option<Tensor4<T>>; 4],
    pub up: [Option<Tensor4<T>>; 4],
}

impl<T: Scalar> Default for PyramidGrads<T> {
    fn default() -> Self {
        Self {
            tr: Default::default(),
            up: Default::default(),
        }
    }
}

impl<T: Scalar> PyramidGrads<T> {
    pub fn slot(&mut self, branch: Branch, scale: usize) -> &mut Option<Tensor4<T>> {
        match branch {
            Branch::Tr => &mut self.tr[scale - 1],
            Branch::Up => &mut self.up[scale - 1],
        }
    }

    pub fn get(&self, branch: Branch, scale: usize) -> Option<&Tensor4<T>> {
        match branch {
            Branch::Tr => self.tr[scale - 1].as_ref(),
            Branch::Up => self.up[scale - 1].as_ref(),
        }
    }

    /// Adds `weight * g` into the slot.
    pub fn accumulate(&mut self, branch: Branch, scale: usize, g: &Tensor4<T>, weight: T) {
        let slot = self.slot(branch, scale);
        match slot {
            Some(acc) => {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += weight * v;
                }
            }
            None => {
                let mut t = g.clone();
                if weight != T::one() {
                    t.scale(weight);
                }
                *slot = Some(t);
            }
        }
    }

    pub fn merge(&mut self, other: &PyramidGrads<T>, weight: T) {
        for branch in [Branch::Tr, Branch::Up] {
            for s in 1..=4 {
                if let Some(g) = other.get(branch, s) {
                    self.accumulate(branch, s, g, weight);
                }
            }
        }
    }
}

/// Random streams consumed by a train-mode forward pass: one for the
/// decoder-body dropout and one for the auxiliary-head perturbations.
#[derive(Debug, Clone)]
pub struct ForwardRng {
    pub body: ChaCha8Rng,
    pub aux: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardRngState {
    pub body: RngState,
    pub aux: RngState,
}

impl ForwardRng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            body: rng::stream(seed, streams::DECODER_DROPOUT),
            aux: rng::stream(seed, streams::AUX_PERTURBATION),
        }
    }

    pub fn state(&self) -> ForwardRngState {
        ForwardRngState {
            body: RngState::capture(&self.body),
            aux: RngState::capture(&self.aux),
        }
    }

    pub fn restore(state: &ForwardRngState) -> Result<Self> {
        Ok(Self {
            body: state.body.restore()?,
            aux: state.aux.restore()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Perturb auxiliary-head inputs; defaults to on in train mode.
    pub aux_perturbation: bool,
    /// Train-mode batch norm normalizes the first `n` samples and the rest
    /// separately when set.
    pub bn_split: Option<usize>,
}

impl ForwardOptions {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            aux_perturbation: mode == Mode::Train,
            bn_split: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Encoder<T> {
    levels: Vec<ConvBlock<T>>,
}

#[derive(Debug, Clone)]
enum Upsampler<T> {
    Transpose(ConvTranspose2x2<T>),
    Bilinear(Conv2d<T>),
}

#[derive(Debug, Clone)]
struct DecoderStage<T> {
    up: Upsampler<T>,
    block: ConvBlock<T>,
}

#[derive(Debug, Clone)]
struct AuxHead<T> {
    kind: PerturbationKind,
    conv: Conv2d<T>,
}

#[derive(Debug, Clone)]
struct Decoder<T> {
    stages: Vec<DecoderStage<T>>,
    aux: Vec<AuxHead<T>>,
    head: Conv2d<T>,
}

/// Dual-branch pyramid network: one U-Net encoder shared by a TR decoder and
/// an UP decoder, each with three perturbed auxiliary heads.
#[derive(Debug, Clone)]
pub struct Network<T> {
    config: NetworkConfig,
    encoder: Encoder<T>,
    tr: Decoder<T>,
    up: Decoder<T>,
}

enum UpCache<T> {
    Transpose(ConvTransposeCache<T>),
    Bilinear(ConvCache<T>, BilinearResize),
}

struct StageTape<T> {
    up: UpCache<T>,
    skip_channels: usize,
    block: ConvBlockCache<T>,
    dropout: Option<Vec<T>>,
}

struct AuxTape<T> {
    mask: Option<Tensor4<T>>,
    conv: ConvCache<T>,
    resize: BilinearResize,
}

struct BranchTape<T> {
    stages: Vec<StageTape<T>>,
    aux: Vec<AuxTape<T>>,
    head: ConvCache<T>,
}

/// Everything a forward pass retains for the backward pass.
pub struct ForwardTape<T> {
    mode: Mode,
    encoder: Vec<(Option<PoolCache>, ConvBlockCache<T>)>,
    tr: BranchTape<T>,
    up: BranchTape<T>,
}

impl<T: Scalar> Decoder<T> {
    fn new(config: &NetworkConfig, branch: Branch, rng: &mut ChaCha8Rng) -> Self {
        let ch = &config.encoder_channels;
        let mut stages = Vec::with_capacity(4);
        for i in (0..4).rev() {
            let (deep, skip) = (ch[i + 1], ch[i]);
            let up = match branch {
                Branch::Tr => Upsampler::Transpose(ConvTranspose2x2::new(deep, skip, rng)),
                Branch::Up => Upsampler::Bilinear(Conv2d::new(deep, skip, 1, rng)),
            };
            stages.push(DecoderStage {
                up,
                block: ConvBlock::new(2 * skip, skip, rng),
            });
        }
        let aux = (1..=3)
            .map(|scale| AuxHead {
                kind: config.perturbation(scale),
                conv: Conv2d::with_std(ch[4 - scale], config.num_classes, 3, HEAD_INIT_STD, rng),
            })
            .collect();
        let head = Conv2d::with_std(ch[0], config.num_classes, 1, HEAD_INIT_STD, rng);
        Self { stages, aux, head }
    }

    fn forward(
        &self,
        skips: &[Tensor4<T>],
        bottom: Tensor4<T>,
        config: &NetworkConfig,
        opts: ForwardOptions,
        rng: &mut ForwardRng,
    ) -> (Vec<Tensor4<T>>, BranchTape<T>) {
        let [h, w] = config.input_size;
        let params = PerturbationParams {
            noise_range: config.feature_noise_range,
            threshold_range: config.feature_dropout_threshold_range,
            ..Default::default()
        };
        let mut x = bottom;
        let mut stage_tapes = Vec::with_capacity(4);
        let mut aux_tapes = Vec::with_capacity(3);
        let mut logits = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            let skip = &skips[3 - i];
            let (upsampled, up_cache) = match &stage.up {
                Upsampler::Transpose(t) => {
                    let (y, c) = t.forward(x);
                    (y, UpCache::Transpose(c))
                }
                Upsampler::Bilinear(conv) => {
                    let [_, _, hh, ww] = x.shape();
                    let (z, c) = conv.forward(x);
                    let resize = BilinearResize::new((hh, ww), (2 * hh, 2 * ww));
                    (resize.forward(&z), UpCache::Bilinear(c, resize))
                }
            };
            let cat =
                Tensor4::concat_outer(&[skip, &upsampled]).expect("skip and upsampled maps align");
            let (mut y, block) = stage.block.forward(cat, opts.mode, opts.bn_split);
            let drop_here = match config.dropout_placement {
                DropoutPlacement::EveryStage => true,
                DropoutPlacement::BeforeHead => i == 3,
            };
            let dropout =
                if opts.mode == Mode::Train && drop_here && config.branch_dropout_rate > 0.0 {
                    let mask =
                        dropout_mask::<T, _>(y.len(), config.branch_dropout_rate, &mut rng.body);
                    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    Some(mask)
                } else {
                    None
                };
            stage_tapes.push(StageTape {
                up: up_cache,
                skip_channels: skip.shape()[0],
                block,
                dropout,
            });
            if i < 3 {
                let head = &self.aux[i];
                let mut feats = y.clone();
                let mask = if opts.aux_perturbation {
                    let m = perturbation_mask(&feats, head.kind, &params, &mut rng.aux);
                    for (v, &mv) in feats.data_mut().iter_mut().zip(m.data()) {
                        *v *= mv;
                    }
                    Some(m)
                } else {
                    None
                };
                let [_, _, fh, fw] = feats.shape();
                let (z, conv) = head.conv.forward(feats);
                let resize = BilinearResize::new((fh, fw), (h, w));
                logits.push(resize.forward(&z).swap_outer());
                aux_tapes.push(AuxTape { mask, conv, resize });
            } else {
                let (z, head) = self.head.forward(y.clone());
                logits.push(z.swap_outer());
                return (
                    logits,
                    BranchTape {
                        stages: stage_tapes,
                        aux: aux_tapes,
                        head,
                    },
                );
            }
            x = y;
        }
        unreachable!("decoder has four stages")
    }

    /// Returns the gradients for the four skip maps (finest first) and the
    /// bottleneck.
    fn backward(
        &mut self,
        tape: BranchTape<T>,
        grads: &[Option<Tensor4<T>>; 4],
        shapes: &[[usize; 4]],
    ) -> (Vec<Tensor4<T>>, Tensor4<T>) {
        let BranchTape { stages, aux, head } = tape;
        let mut skip_grads: Vec<Tensor4<T>> =
            shapes[..4].iter().map(|&s| Tensor4::zeros(s)).collect();
        let head_in = head.input_shape();
        let mut dy = match &grads[3] {
            Some(g) => self
                .head
                .backward(head, &g.swap_outer(), true)
                .expect("input grad"),
            None => Tensor4::zeros(head_in),
        };
        let mut aux_tapes: Vec<Option<AuxTape<T>>> = aux.into_iter().map(Some).collect();
        for (i, st) in stages.into_iter().enumerate().rev() {
            if i < 3 {
                let tape = aux_tapes[i].take().expect("aux tape");
                if let Some(g) = &grads[i] {
                    let dz = tape.resize.backward(&g.swap_outer());
                    let mut df = self.aux[i]
                        .conv
                        .backward(tape.conv, &dz, true)
                        .expect("input grad");
                    if let Some(mask) = &tape.mask {
                        for (v, &m) in df.data_mut().iter_mut().zip(mask.data()) {
                            *v *= m;
                        }
                    }
                    dy.add_assign(&df);
                }
            }
            if let Some(mask) = &st.dropout {
                for (v, &m) in dy.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
            }
            let stage = &mut self.stages[i];
            let dcat = stage
                .block
                .backward(st.block, &dy, true)
                .expect("input grad");
            let total = dcat.shape()[0];
            let dskip = dcat.slice_outer(0, st.skip_channels);
            let dup = dcat.slice_outer(st.skip_channels, total);
            skip_grads[3 - i].add_assign(&dskip);
            dy = match (&mut stage.up, st.up) {
                (Upsampler::Transpose(t), UpCache::Transpose(c)) => t.backward(c, &dup),
                (Upsampler::Bilinear(conv), UpCache::Bilinear(c, resize)) => {
                    let dz = resize.backward(&dup);
                    conv.backward(c, &dz, true).expect("input grad")
                }
                _ => unreachable!("upsampler/tape mismatch"),
            };
        }
        (skip_grads, dy)
    }

    fn update_running_stats(&mut self, tape: &BranchTape<T>) {
        for (stage, st) in self.stages.iter_mut().zip(&tape.stages) {
            stage.block.update_running_stats(&st.block);
        }
    }
}

impl<T: Scalar> Parameterized<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            match &s.up {
                Upsampler::Transpose(t) => t.visit(&join(&p, "up"), f),
                Upsampler::Bilinear(c) => c.visit(&join(&p, "up"), f),
            }
            s.block.visit(&join(&p, "block"), f);
        }
        for (i, a) in self.aux.iter().enumerate() {
            a.conv.visit(&join(prefix, &format!("aux{}", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{i}"));
            match &mut s.up {
                Upsampler::Transpose(t) => t.visit_mut(&join(&p, "up"), f),
                Upsampler::Bilinear(c) => c.visit_mut(&join(&p, "up"), f),
            }
            s.block.visit_mut(&join(&p, "block"), f);
        }
        for (i, a) in self.aux.iter_mut().enumerate() {
            a.conv.visit_mut(&join(prefix, &format!("aux{}", i + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl<T: Scalar> Network<T> {
    /// Builds the network with deterministic initialization from `seed`.
    ///
    /// Convolutions use Kaiming-normal weights (fan-in, leaky-rectifier
    /// gain) and zero biases; batch norms start at unit scale and zero
    /// shift; classifier heads use N(0, 0.01^2) weights and zero bias.
    /// Parameters are drawn in the order encoder, TR decoder, UP decoder.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, streams::INIT);
        let ch = &config.encoder_channels;
        let mut levels = Vec::with_capacity(5);
        levels.push(ConvBlock::new(config.in_channels, ch[0], &mut rng));
        for i in 1..5 {
            levels.push(ConvBlock::new(ch[i - 1], ch[i], &mut rng));
        }
        let encoder = Encoder { levels };
        let tr = Decoder::new(&config, Branch::Tr, &mut rng);
        let up = Decoder::new(&config, Branch::Up, &mut rng);
        Ok(Self {
            config,
            encoder,
            tr,
            up,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn check_input(&self, images: &Tensor4<T>) -> Result<()> {
        let [b, c, h, w] = images.shape();
        if b == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {h}x{w} are not divisible by 16"
            )));
        }
        if [h, w] != self.config.input_size {
            return Err(Error::Shape(format!(
                "input {h}x{w} does not match configured size {:?}",
                self.config.input_size
            )));
        }
        Ok(())
    }

    /// Forward pass returning logits only.
    pub fn forward(
        &self,
        images: &Tensor4<T>,
        mode: Mode,
        rng: &mut ForwardRng,
    ) -> Result<BranchPyramids<T>> {
        Ok(self.forward_with(images, ForwardOptions::new(mode), rng)?.0)
    }

    /// Forward pass retaining the tape needed by [`Network::backward`].
    pub fn forward_with(
        &self,
        images: &Tensor4<T>,
        opts: ForwardOptions,
        rng: &mut ForwardRng,
    ) -> Result<(BranchPyramids<T>, ForwardTape<T>)> {
        self.check_input(images)?;
        let mut x = images.swap_outer();
        let mut skips = Vec::with_capacity(4);
        let mut enc_tape = Vec::with_capacity(5);
        for (i, level) in self.encoder.levels.iter().enumerate() {
            let pool = if i > 0 {
                let (p, c) = max_pool2x2(&x);
                x = p;
                Some(c)
            } else {
                None
            };
            let (y, c) = level.forward(x, opts.mode, opts.bn_split);
            enc_tape.push((pool, c));
            if i < 4 {
                skips.push(y.clone());
            }
            x = y;
        }
        let (tr_logits, tr_tape) = self.tr.forward(&skips, x.clone(), &self.config, opts, rng);
        let (up_logits, up_tape) = self.up.forward(&skips, x, &self.config, opts, rng);
        Ok((
            BranchPyramids {
                tr: tr_logits,
                up: up_logits,
            },
            ForwardTape {
                mode: opts.mode,
                encoder: enc_tape,
                tr: tr_tape,
                up: up_tape,
            },
        ))
    }

    /// Softmax of the UP-branch main logits, `(B, C, H, W)`.
    pub fn forward_inference(&self, images: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.forward_inference_branch(images, Branch::Up)
    }

    /// Same as [`Network::forward_inference`] but from either branch.
    pub fn forward_inference_branch(
        &self,
        images: &Tensor4<T>,
        branch: Branch,
    ) -> Result<Tensor4<T>> {
        let mut rng = ForwardRng::from_seed(0);
        let pyr = self.forward(images, Mode::Eval, &mut rng)?;
        crate::losses::t_softmax(pyr.main(branch), T::one())
    }

    /// Accumulates parameter gradients of a loss whose gradients with respect
    /// to the pyramid maps are `grads`. Gradients add to existing ones.
    pub fn backward(&mut self, tape: ForwardTape<T>, grads: &PyramidGrads<T>) {
        let ForwardTape {
            mode: _,
            encoder,
            tr,
            up,
        } = tape;
        let shapes: Vec<[usize; 4]> = encoder.iter().map(|(_, c)| c.output_shape()).collect();
        let (tr_skips, tr_bottom) = self.tr.backward(tr, &grads.tr, &shapes);
        let (up_skips, up_bottom) = self.up.backward(up, &grads.up, &shapes);
        let mut dy = tr_bottom;
        dy.add_assign(&up_bottom);
        for (i, (pool, cache)) in encoder.into_iter().enumerate().rev() {
            if i < 4 {
                dy.add_assign(&tr_skips[i]);
                dy.add_assign(&up_skips[i]);
            }
            let need = i > 0;
            let dx = self.encoder.levels[i].backward(cache, &dy, need);
            match (pool, dx) {
                (Some(p), Some(d)) => dy = max_pool2x2_backward(&p, &d),
                _ => break,
            }
        }
    }

    /// Folds the batch statistics recorded in a train-mode tape into the
    /// batch-norm running estimates.
    pub fn update_running_stats(&mut self, tape: &ForwardTape<T>) {
        if tape.mode != Mode::Train {
            return;
        }
        for (level, (_, c)) in self.encoder.levels.iter_mut().zip(&tape.encoder) {
            level.update_running_stats(c);
        }
        self.tr.update_running_stats(&tape.tr);
        self.up.update_running_stats(&tape.up);
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// Exact number of trainable scalars in `scope`.
    pub fn count_parameters(&self, scope: ParameterScope) -> usize {
        let mut total = 0;
        self.visit("", &mut |name, p| {
            if p.trainable && in_scope(name, scope) {
                total += p.len();
            }
        });
        total
    }

    /// Names of all tensors (parameters and buffers) in traversal order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut out = Network::<U>::new(self.config.clone(), 0).expect("config already validated");
        let mut values = Vec::new();
        self.visit("", &mut |_, p| values.push(p.value.clone()));
        let mut it = values.into_iter();
        out.visit_mut("", &mut |_, p| {
            let v = it.next().expect("same layout");
            p.value = v.iter().map(|x| U::from(*x).expect("finite")).collect();
        });
        out
    }
}

pub(crate) fn in_scope(name: &str, scope: ParameterScope) -> bool {
    match scope {
        ParameterScope::FullTraining => true,
        ParameterScope::InferenceUpBranch => {
            name.starts_with("encoder.") || name.starts_with("up.")
        }
        ParameterScope::BackboneUnetEquivalent => {
            name.starts_with("encoder.") || (name.starts_with("up.") && !name.starts_with("up.aux"))
        }
    }
}

impl<T: Scalar> Parameterized<T> for Network<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, l) in self.encoder.levels.iter().enumerate() {
            l.visit(&join(prefix, &format!("encoder.level{i}")), f);
        }
        self.tr.visit(&join(prefix, "tr"), f);
        self.up.visit(&join(prefix, "up"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.encoder.levels.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("encoder.level{i}")), f);
        }
        self.tr.visit_mut(&join(prefix, "tr"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
    }
}
