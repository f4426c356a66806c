//! Six-variant relative pose network: single-modality baselines, early /
//! middle / late fusion, and multi-layer channel exchange with shared
//! convolutions and modality-private batch norm.

use rand::Rng;

use super::{BatchNorm2d, Buffer, Conv2d, Linear, Parameter};
use crate::error::{Error, Result};
use crate::losses::GammaLayer;
use crate::tensor::{nn, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    RgbOnly,
    DepthOnly,
    Early,
    Late,
    Middle,
    MultiLayerCE,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 6] = [
        FusionStrategy::RgbOnly,
        FusionStrategy::DepthOnly,
        FusionStrategy::Early,
        FusionStrategy::Late,
        FusionStrategy::Middle,
        FusionStrategy::MultiLayerCE,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionStrategy::RgbOnly => "rgb_only",
            FusionStrategy::DepthOnly => "depth_only",
            FusionStrategy::Early => "early",
            FusionStrategy::Late => "late",
            FusionStrategy::Middle => "middle",
            FusionStrategy::MultiLayerCE => "multi_layer_ce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseNetConfig {
    pub strategy: FusionStrategy,
    pub widths: Vec<usize>,
    pub ce_threshold: f64,
    pub regressor_hidden: (usize, usize),
    pub output_scale: f64,
    pub normalize_depth_input: bool,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        PoseNetConfig {
            strategy: FusionStrategy::MultiLayerCE,
            widths: vec![8, 16, 32, 64],
            ce_threshold: 0.02,
            regressor_hidden: (32, 32),
            output_scale: 0.01,
            normalize_depth_input: false,
        }
    }
}

impl PoseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 || self.widths.iter().any(|&w| w == 0 || w % 2 != 0) {
            return Err(Error::InvalidArgument(format!(
                "pose encoder needs 4 even stage widths, got {:?}",
                self.widths
            )));
        }
        if self.ce_threshold <= 0.0 {
            return Err(Error::InvalidArgument("ce_threshold must be > 0".into()));
        }
        if self.output_scale <= 0.0 {
            return Err(Error::InvalidArgument("output_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-layer (rgb_replaced, depth_replaced) channel counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExchangeStats {
    pub per_layer: Vec<(usize, usize)>,
}

impl ExchangeStats {
    pub fn total(&self) -> usize {
        self.per_layer.iter().map(|&(a, b)| a + b).sum()
    }
}

/// Swap below-threshold channels between the two post-BN feature maps.
/// RGB may only be replaced in its top half [0, C/2), depth in its bottom
/// half [C/2, C); gradients flow through the replacements.
pub fn channel_exchange<S: Element>(
    feat_rgb: &Tensor<S>,
    feat_depth: &Tensor<S>,
    gamma_rgb: &Tensor<S>,
    gamma_depth: &Tensor<S>,
    threshold: f64,
) -> Result<(Tensor<S>, Tensor<S>, (usize, usize))> {
    if threshold <= 0.0 {
        return Err(Error::InvalidArgument("exchange threshold must be > 0".into()));
    }
    let shape = feat_rgb.shape();
    if shape.len() != 4 || feat_depth.shape() != shape {
        return Err(Error::Shape(format!(
            "channel_exchange on {:?} vs {:?}",
            shape,
            feat_depth.shape()
        )));
    }
    let c = shape[1];
    if c % 2 != 0 {
        return Err(Error::InvalidArgument(format!("channel count {c} must be even")));
    }
    if gamma_rgb.len() != c || gamma_depth.len() != c {
        return Err(Error::Shape("gamma length does not match channel count".into()));
    }
    let thr = S::fp(threshold);
    let half = c / 2;
    let mut swap_rgb = vec![false; c]; // rgb channel i replaced by depth's
    let mut swap_depth = vec![false; c];
    for i in 0..half {
        swap_rgb[i] = gamma_rgb.values()[i].abs() < thr;
    }
    for i in half..c {
        swap_depth[i] = gamma_depth.values()[i].abs() < thr;
    }
    let count_rgb = swap_rgb.iter().filter(|&&s| s).count();
    let count_depth = swap_depth.iter().filter(|&&s| s).count();
    let mix = |keep_from: &Tensor<S>, take_from: &Tensor<S>, swap: &[bool]| -> Result<Tensor<S>> {
        let keep: Vec<S> = swap.iter().map(|&s| if s { S::zero() } else { S::one() }).collect();
        let take: Vec<S> = swap.iter().map(|&s| if s { S::one() } else { S::zero() }).collect();
        keep_from.scale_channels(&keep)?.add(&take_from.scale_channels(&take)?)
    };
    let out_rgb = if count_rgb == 0 { feat_rgb.clone() } else { mix(feat_rgb, feat_depth, &swap_rgb)? };
    let out_depth =
        if count_depth == 0 { feat_depth.clone() } else { mix(feat_depth, feat_rgb, &swap_depth)? };
    Ok((out_rgb, out_depth, (count_rgb, count_depth)))
}

/// Sigmoid-gated concatenation of two pooled feature vectors.
pub fn soft_fusion<S: Element>(
    feat_rgb: &Tensor<S>,
    feat_depth: &Tensor<S>,
    gate: &Linear<S>,
) -> Result<Tensor<S>> {
    if feat_rgb.shape() != feat_depth.shape() {
        return Err(Error::Shape(format!(
            "soft_fusion on {:?} vs {:?}",
            feat_rgb.shape(),
            feat_depth.shape()
        )));
    }
    let cat = Tensor::concat(1, &[feat_rgb.clone(), feat_depth.clone()])?;
    let mask = gate.forward(&cat)?.sigmoid();
    mask.mul(&cat)
}

/// Softmax-weighted sum of the two per-stream pose estimates.
pub fn late_combine<S: Element>(
    pose_rgb: &Tensor<S>,
    pose_depth: &Tensor<S>,
    logits: &Tensor<S>,
) -> Result<Tensor<S>> {
    if logits.len() != 2 {
        return Err(Error::Shape("late_combine expects 2 logits".into()));
    }
    let w = logits.softmax(0)?;
    let w_rgb = w.narrow(0, 0, 1)?;
    let w_depth = w.narrow(0, 1, 1)?;
    pose_rgb
        .scale_by_scalar(&w_rgb)?
        .add(&pose_depth.scale_by_scalar(&w_depth)?)
}

/// FC-ReLU-FC-ReLU-FC head mapping a pooled feature vector to a scaled
/// 6-vector.
pub struct Regressor<S: Element> {
    fc1: Linear<S>,
    fc2: Linear<S>,
    fc3: Linear<S>,
    output_scale: f64,
}

impl<S: Element> Regressor<S> {
    pub fn new<R: Rng>(rng: &mut R, in_f: usize, hidden: (usize, usize), output_scale: f64) -> Self {
        Regressor {
            fc1: Linear::new(rng, in_f, hidden.0),
            fc2: Linear::new(rng, hidden.0, hidden.1),
            fc3: Linear::new(rng, hidden.1, 6),
            output_scale,
        }
    }

    /// (N, F) -> 6-vector (batch of one collapses to shape [6]).
    pub fn forward(&self, feat: &Tensor<S>) -> Result<Tensor<S>> {
        let y = self.fc1.forward(feat)?.relu();
        let y = self.fc2.forward(&y)?.relu();
        let y = self.fc3.forward(&y)?.mul_scalar(self.output_scale);
        if y.shape()[0] == 1 {
            y.reshape(&[6])
        } else {
            Ok(y)
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Parameter<S>)>) {
        self.fc1.collect(&format!("{prefix}.fc1"), out);
        self.fc2.collect(&format!("{prefix}.fc2"), out);
        self.fc3.collect(&format!("{prefix}.fc3"), out);
    }
}

struct BasicBlock<S: Element> {
    conv1: Conv2d<S>,
    bn1: BatchNorm2d<S>,
    conv2: Conv2d<S>,
    bn2: BatchNorm2d<S>,
    down: Option<(Conv2d<S>, BatchNorm2d<S>)>,
}

impl<S: Element> BasicBlock<S> {
    fn new<R: Rng>(rng: &mut R, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let down = (stride != 1 || in_ch != out_ch)
            .then(|| (Conv2d::new(rng, in_ch, out_ch, 1, stride, 0, false), BatchNorm2d::new(out_ch)));
        BasicBlock {
            conv1: Conv2d::new(rng, in_ch, out_ch, 3, stride, 1, false),
            bn1: BatchNorm2d::new(out_ch),
            conv2: Conv2d::new(rng, out_ch, out_ch, 3, 1, 1, false),
            bn2: BatchNorm2d::new(out_ch),
            down,
        }
    }

    /// Same convolutions, fresh private batch norms.
    fn share_convs(&self) -> Self {
        let out_ch = self.conv2.weight.get().shape()[0];
        BasicBlock {
            conv1: self.conv1.share(),
            bn1: BatchNorm2d::new(out_ch),
            conv2: self.conv2.share(),
            bn2: BatchNorm2d::new(out_ch),
            down: self
                .down
                .as_ref()
                .map(|(c, _)| (c.share(), BatchNorm2d::new(out_ch))),
        }
    }

    fn shortcut(&self, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        match &self.down {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, training),
            None => Ok(x.clone()),
        }
    }

    fn forward(&self, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, training)?.relu();
        let y = self.bn2.forward(&self.conv2.forward(&y)?, training)?;
        Ok(y.add(&self.shortcut(x, training)?)?.relu())
    }

    /// Lockstep forward of the rgb stream (self's BNs) and the depth stream
    /// (other's BNs) with channel exchange after each main-branch BN.
    #[allow(clippy::too_many_arguments)]
    fn forward_exchanged(
        &self,
        other: &BasicBlock<S>,
        x_rgb: &Tensor<S>,
        x_depth: &Tensor<S>,
        threshold: f64,
        training: bool,
        stats: &mut ExchangeStats,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let y_rgb = self.bn1.forward(&self.conv1.forward(x_rgb)?, training)?;
        let y_depth = other.bn1.forward(&other.conv1.forward(x_depth)?, training)?;
        let (y_rgb, y_depth, c1) =
            channel_exchange(&y_rgb, &y_depth, &self.bn1.gamma.get(), &other.bn1.gamma.get(), threshold)?;
        stats.per_layer.push(c1);
        let (y_rgb, y_depth) = (y_rgb.relu(), y_depth.relu());
        let y_rgb = self.bn2.forward(&self.conv2.forward(&y_rgb)?, training)?;
        let y_depth = other.bn2.forward(&other.conv2.forward(&y_depth)?, training)?;
        let (y_rgb, y_depth, c2) =
            channel_exchange(&y_rgb, &y_depth, &self.bn2.gamma.get(), &other.bn2.gamma.get(), threshold)?;
        stats.per_layer.push(c2);
        let out_rgb = y_rgb.add(&self.shortcut(x_rgb, training)?)?.relu();
        let out_depth = y_depth.add(&other.shortcut(x_depth, training)?)?.relu();
        Ok((out_rgb, out_depth))
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Parameter<S>)>) {
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.bn1.collect(&format!("{prefix}.bn1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        self.bn2.collect(&format!("{prefix}.bn2"), out);
        if let Some((c, b)) = &self.down {
            c.collect(&format!("{prefix}.down.conv"), out);
            b.collect(&format!("{prefix}.down.bn"), out);
        }
    }

    fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Buffer<S>)>) {
        self.bn1.collect_buffers(&format!("{prefix}.bn1"), out);
        self.bn2.collect_buffers(&format!("{prefix}.bn2"), out);
        if let Some((_, b)) = &self.down {
            b.collect_buffers(&format!("{prefix}.down.bn"), out);
        }
    }
}

/// Residual encoder: strided 3x3 stem, four stages of two basic blocks,
/// global average pooling.
pub struct ResEncoder<S: Element> {
    stem: Conv2d<S>,
    stem_bn: BatchNorm2d<S>,
    blocks: Vec<BasicBlock<S>>,
}

impl<S: Element> ResEncoder<S> {
    pub fn new<R: Rng>(rng: &mut R, in_ch: usize, widths: &[usize]) -> Self {
        let stem = Conv2d::new(rng, in_ch, widths[0], 3, 2, 1, false);
        let stem_bn = BatchNorm2d::new(widths[0]);
        let mut blocks = Vec::new();
        let mut prev = widths[0];
        for (stage, &w) in widths.iter().enumerate() {
            let stride = if stage == 0 { 1 } else { 2 };
            blocks.push(BasicBlock::new(rng, prev, w, stride));
            blocks.push(BasicBlock::new(rng, w, w, 1));
            prev = w;
        }
        ResEncoder { stem, stem_bn, blocks }
    }

    /// A second stream over the same convolution weights with its own batch
    /// norms.
    pub fn share_convs(&self) -> Self {
        let stem_ch = self.stem.weight.get().shape()[0];
        ResEncoder {
            stem: self.stem.share(),
            stem_bn: BatchNorm2d::new(stem_ch),
            blocks: self.blocks.iter().map(|b| b.share_convs()).collect(),
        }
    }

    pub fn out_features(&self) -> usize {
        self.blocks.last().unwrap().conv2.weight.get().shape()[0]
    }

    /// (N, C, H, W) -> pooled (N, F).
    pub fn forward(&self, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        let mut y = self.stem_bn.forward(&self.stem.forward(x)?, training)?.relu();
        for b in &self.blocks {
            y = b.forward(&y, training)?;
        }
        nn::global_avg_pool(&y)
    }

    /// Dual-stream forward with channel exchange; `self` provides the rgb
    /// batch norms, `other` the depth ones, convolutions are shared.
    pub fn forward_pair_exchanged(
        &self,
        other: &ResEncoder<S>,
        x_rgb: &Tensor<S>,
        x_depth: &Tensor<S>,
        threshold: f64,
        training: bool,
    ) -> Result<(Tensor<S>, Tensor<S>, ExchangeStats)> {
        let mut stats = ExchangeStats::default();
        let mut y_rgb = self.stem_bn.forward(&self.stem.forward(x_rgb)?, training)?.relu();
        let mut y_depth = other.stem_bn.forward(&other.stem.forward(x_depth)?, training)?.relu();
        for (b_rgb, b_depth) in self.blocks.iter().zip(&other.blocks) {
            let (r, d) = b_rgb.forward_exchanged(b_depth, &y_rgb, &y_depth, threshold, training, &mut stats)?;
            y_rgb = r;
            y_depth = d;
        }
        Ok((nn::global_avg_pool(&y_rgb)?, nn::global_avg_pool(&y_depth)?, stats))
    }

    /// Main-branch BN scaling factors with this modality's exchangeable
    /// channel half. The stem and downsampling shortcuts never exchange.
    pub fn gamma_layers(&self, rgb: bool) -> Vec<GammaLayer<S>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for bn in [&b.bn1, &b.bn2] {
                let gamma = bn.gamma.get();
                let c = gamma.len();
                let exchangeable: Vec<usize> =
                    if rgb { (0..c / 2).collect() } else { (c / 2..c).collect() };
                out.push(GammaLayer { gamma, exchangeable });
            }
        }
        out
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Parameter<S>)>) {
        self.stem.collect(&format!("{prefix}.stem.conv"), out);
        self.stem_bn.collect(&format!("{prefix}.stem.bn"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.block{i}"), out);
        }
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Buffer<S>)>) {
        self.stem_bn.collect_buffers(&format!("{prefix}.stem.bn"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_buffers(&format!("{prefix}.block{i}"), out);
        }
    }
}

/// Result of one pose forward: the fused estimate plus per-stream poses and
/// fusion diagnostics where the strategy produces them.
pub struct PoseOutputs<S: Element> {
    pub pose: Tensor<S>,
    pub pose_rgb: Option<Tensor<S>>,
    pub pose_depth: Option<Tensor<S>>,
    pub exchange: ExchangeStats,
    pub stream_weights: Option<(f64, f64)>,
}

pub struct PoseNet<S: Element> {
    pub cfg: PoseNetConfig,
    enc_a: ResEncoder<S>,
    enc_b: Option<ResEncoder<S>>,
    reg_a: Regressor<S>,
    reg_b: Option<Regressor<S>>,
    gate: Option<Linear<S>>,
    late_logits: Option<Parameter<S>>,
}

impl<S: Element> PoseNet<S> {
    pub fn new<R: Rng>(rng: &mut R, cfg: PoseNetConfig) -> Result<Self> {
        cfg.validate()?;
        use FusionStrategy::*;
        let f = cfg.widths[3];
        let mk_reg = |rng: &mut R, in_f: usize| Regressor::new(rng, in_f, cfg.regressor_hidden, cfg.output_scale);
        let (enc_a, enc_b, reg_a, reg_b, gate, late_logits) = match cfg.strategy {
            RgbOnly | DepthOnly => {
                let e = ResEncoder::new(rng, 6, &cfg.widths);
                let r = mk_reg(rng, f);
                (e, None, r, None, None, None)
            }
            Early => {
                let e = ResEncoder::new(rng, 8, &cfg.widths);
                let r = mk_reg(rng, f);
                (e, None, r, None, None, None)
            }
            Late => {
                let e1 = ResEncoder::new(rng, 6, &cfg.widths);
                let e2 = ResEncoder::new(rng, 6, &cfg.widths);
                let r1 = mk_reg(rng, f);
                let r2 = mk_reg(rng, f);
                let logits = Parameter::new(Tensor::param(&[2], vec![S::zero(); 2]).unwrap());
                (e1, Some(e2), r1, Some(r2), None, Some(logits))
            }
            Middle => {
                let e1 = ResEncoder::new(rng, 6, &cfg.widths);
                let e2 = ResEncoder::new(rng, 6, &cfg.widths);
                let gate = Linear::new(rng, 2 * f, 2 * f);
                let r = mk_reg(rng, 2 * f);
                (e1, Some(e2), r, None, Some(gate), None)
            }
            MultiLayerCE => {
                let e1 = ResEncoder::new(rng, 6, &cfg.widths);
                let e2 = e1.share_convs();
                let r1 = mk_reg(rng, f);
                let r2 = mk_reg(rng, f);
                let logits = Parameter::new(Tensor::param(&[2], vec![S::zero(); 2]).unwrap());
                (e1, Some(e2), r1, Some(r2), None, Some(logits))
            }
        };
        Ok(PoseNet { cfg, enc_a, enc_b, reg_a, reg_b, gate, late_logits })
    }

    /// Replicate each 1-channel inverse-depth map to 3 channels so the depth
    /// stream matches the rgb stream's layout.
    fn prep_depth(&self, depth_pair: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = depth_pair.shape();
        if shape.len() != 3 || shape[0] != 2 {
            return Err(Error::Shape(format!("expected (2, H, W) depth pair, got {shape:?}")));
        }
        let mut normed = depth_pair.clone();
        if self.cfg.normalize_depth_input {
            let vals = depth_pair.values();
            let mean = vals.iter().map(|v| v.as_f64()).sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            normed = depth_pair.add_scalar(-mean).mul_scalar(1.0 / (var.sqrt() + 1e-6));
        }
        let d0 = normed.narrow(0, 0, 1)?;
        let d1 = normed.narrow(0, 1, 1)?;
        Tensor::concat(0, &[d0.clone(), d0.clone(), d0, d1.clone(), d1.clone(), d1])
    }

    /// Relative pose from a temporally ordered frame pair. `rgb_pair` holds
    /// both frames' color channels (6, H, W); `depth_pair` both frames'
    /// inferred inverse depths (2, H, W), required by every strategy except
    /// RgbOnly.
    pub fn forward(
        &self,
        rgb_pair: &Tensor<S>,
        depth_pair: Option<&Tensor<S>>,
        training: bool,
    ) -> Result<PoseOutputs<S>> {
        let shape = rgb_pair.shape();
        if shape.len() != 3 || shape[0] != 6 {
            return Err(Error::Shape(format!("expected (6, H, W) rgb pair, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        let need_depth = self.cfg.strategy != FusionStrategy::RgbOnly;
        if need_depth && depth_pair.is_none() {
            return Err(Error::InvalidArgument(format!(
                "strategy {} requires a depth pair",
                self.cfg.strategy.name()
            )));
        }
        let rgb = rgb_pair.reshape(&[1, 6, h, w])?;
        let depth6 = match depth_pair {
            Some(d) if need_depth => Some(self.prep_depth(d)?.reshape(&[1, 6, h, w])?),
            _ => None,
        };
        use FusionStrategy::*;
        match self.cfg.strategy {
            RgbOnly => {
                let feat = self.enc_a.forward(&rgb, training)?;
                let pose = self.reg_a.forward(&feat)?;
                Ok(PoseOutputs { pose, pose_rgb: None, pose_depth: None, exchange: ExchangeStats::default(), stream_weights: None })
            }
            DepthOnly => {
                let feat = self.enc_a.forward(depth6.as_ref().unwrap(), training)?;
                let pose = self.reg_a.forward(&feat)?;
                Ok(PoseOutputs { pose, pose_rgb: None, pose_depth: None, exchange: ExchangeStats::default(), stream_weights: None })
            }
            Early => {
                let d = depth_pair.unwrap();
                let mut dn = d.clone();
                if self.cfg.normalize_depth_input {
                    dn = self.prep_depth(d)?.narrow(0, 0, 1)?; // normalized d0
                    let d1 = self.prep_depth(d)?.narrow(0, 3, 1)?;
                    dn = Tensor::concat(0, &[dn, d1])?;
                }
                let cat = Tensor::concat(0, &[rgb_pair.clone(), dn])?.reshape(&[1, 8, h, w])?;
                let feat = self.enc_a.forward(&cat, training)?;
                let pose = self.reg_a.forward(&feat)?;
                Ok(PoseOutputs { pose, pose_rgb: None, pose_depth: None, exchange: ExchangeStats::default(), stream_weights: None })
            }
            Late => {
                let f_rgb = self.enc_a.forward(&rgb, training)?;
                let f_depth = self.enc_b.as_ref().unwrap().forward(depth6.as_ref().unwrap(), training)?;
                let p_rgb = self.reg_a.forward(&f_rgb)?;
                let p_depth = self.reg_b.as_ref().unwrap().forward(&f_depth)?;
                let logits = self.late_logits.as_ref().unwrap().get();
                let pose = late_combine(&p_rgb, &p_depth, &logits)?;
                let wsoft = logits.softmax(0)?;
                let weights = (wsoft.values()[0].as_f64(), wsoft.values()[1].as_f64());
                Ok(PoseOutputs { pose, pose_rgb: Some(p_rgb), pose_depth: Some(p_depth), exchange: ExchangeStats::default(), stream_weights: Some(weights) })
            }
            Middle => {
                let f_rgb = self.enc_a.forward(&rgb, training)?;
                let f_depth = self.enc_b.as_ref().unwrap().forward(depth6.as_ref().unwrap(), training)?;
                let fused = soft_fusion(&f_rgb, &f_depth, self.gate.as_ref().unwrap())?;
                let pose = self.reg_a.forward(&fused)?;
                Ok(PoseOutputs { pose, pose_rgb: None, pose_depth: None, exchange: ExchangeStats::default(), stream_weights: None })
            }
            MultiLayerCE => {
                let enc_depth = self.enc_b.as_ref().unwrap();
                let (f_rgb, f_depth, exchange) = self.enc_a.forward_pair_exchanged(
                    enc_depth,
                    &rgb,
                    depth6.as_ref().unwrap(),
                    self.cfg.ce_threshold,
                    training,
                )?;
                let p_rgb = self.reg_a.forward(&f_rgb)?;
                let p_depth = self.reg_b.as_ref().unwrap().forward(&f_depth)?;
                let logits = self.late_logits.as_ref().unwrap().get();
                let pose = late_combine(&p_rgb, &p_depth, &logits)?;
                let wsoft = logits.softmax(0)?;
                let weights = (wsoft.values()[0].as_f64(), wsoft.values()[1].as_f64());
                Ok(PoseOutputs { pose, pose_rgb: Some(p_rgb), pose_depth: Some(p_depth), exchange, stream_weights: Some(weights) })
            }
        }
    }

    /// BN scaling factors feeding the polarization regularizer, rgb stream
    /// first; empty unless the strategy exchanges channels.
    pub fn gamma_layers(&self) -> Vec<Vec<GammaLayer<S>>> {
        if self.cfg.strategy != FusionStrategy::MultiLayerCE {
            return Vec::new();
        }
        vec![
            self.enc_a.gamma_layers(true),
            self.enc_b.as_ref().unwrap().gamma_layers(false),
        ]
    }

    /// True when every convolution is shared between the two streams while
    /// all BN parameters are private.
    pub fn verify_weight_sharing(&self) -> bool {
        if self.cfg.strategy != FusionStrategy::MultiLayerCE {
            return false;
        }
        let other = self.enc_b.as_ref().unwrap();
        let convs_shared = self
            .enc_a
            .blocks
            .iter()
            .zip(&other.blocks)
            .all(|(a, b)| {
                a.conv1.weight.shares_storage_with(&b.conv1.weight)
                    && a.conv2.weight.shares_storage_with(&b.conv2.weight)
            })
            && self.enc_a.stem.weight.shares_storage_with(&other.stem.weight);
        let bns_private = self
            .enc_a
            .blocks
            .iter()
            .zip(&other.blocks)
            .all(|(a, b)| {
                !a.bn1.gamma.shares_storage_with(&b.bn1.gamma)
                    && !a.bn2.gamma.shares_storage_with(&b.bn2.gamma)
            });
        convs_shared && bns_private
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Parameter<S>)>) {
        self.enc_a.collect(&format!("{prefix}.enc_rgb"), out);
        if let Some(e) = &self.enc_b {
            e.collect(&format!("{prefix}.enc_depth"), out);
        }
        self.reg_a.collect(&format!("{prefix}.reg_rgb"), out);
        if let Some(r) = &self.reg_b {
            r.collect(&format!("{prefix}.reg_depth"), out);
        }
        if let Some(g) = &self.gate {
            g.collect(&format!("{prefix}.gate"), out);
        }
        if let Some(l) = &self.late_logits {
            out.push((format!("{prefix}.late_logits"), l.clone()));
        }
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Buffer<S>)>) {
        self.enc_a.collect_buffers(&format!("{prefix}.enc_rgb"), out);
        if let Some(e) = &self.enc_b {
            e.collect_buffers(&format!("{prefix}.enc_depth"), out);
        }
    }

    /// Force the exchangeable half of every main-branch BN gamma in one
    /// stream to a fixed value (testing hook for exchange behavior).
    pub fn set_exchangeable_gammas(&self, rgb_stream: bool, value: f64) -> Result<()> {
        if self.cfg.strategy != FusionStrategy::MultiLayerCE {
            return Err(Error::InvalidArgument("no exchangeable gammas for this strategy".into()));
        }
        let enc = if rgb_stream { &self.enc_a } else { self.enc_b.as_ref().unwrap() };
        for b in &enc.blocks {
            for bn in [&b.bn1, &b.bn2] {
                let gamma = bn.gamma.get();
                let c = gamma.len();
                let range = if rgb_stream { 0..c / 2 } else { c / 2..c };
                let mut vals = gamma.values().to_vec();
                for i in range {
                    vals[i] = S::fp(value);
                }
                bn.gamma.set(Tensor::param(&[c], vals)?)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(strategy: FusionStrategy) -> PoseNetConfig {
        PoseNetConfig {
            strategy,
            widths: vec![4, 4, 8, 8],
            regressor_hidden: (16, 16),
            ..PoseNetConfig::default()
        }
    }

    fn rand_pair(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let v: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(0.1..1.0)).collect();
        Tensor::from_vec(&[c, h, w], v).unwrap()
    }

    #[test]
    fn channel_exchange_rule_application() {
        // mixed mask on 1x4x1x1: rgb half is channels {0,1}, depth half {2,3}
        let fr = Tensor::from_vec(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fd = Tensor::from_vec(&[1, 4, 1, 1], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let gr = Tensor::from_vec(&[4], vec![0.01, 0.5, 0.5, 0.5]).unwrap();
        let gd = Tensor::from_vec(&[4], vec![0.5, 0.5, 0.01, 0.5]).unwrap();
        let (or, od, counts) = channel_exchange(&fr, &fd, &gr, &gd, 0.02).unwrap();
        assert_eq!(or.values(), &[10.0, 2.0, 3.0, 4.0]);
        assert_eq!(od.values(), &[10.0, 20.0, 3.0, 40.0]);
        assert_eq!(counts, (1, 1));
    }

    #[test]
    fn channel_exchange_limits_and_errors() {
        let fr = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fd = Tensor::from_vec(&[1, 2, 1, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let high = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let (or, od, counts) = channel_exchange(&fr, &fd, &high, &high, 0.02).unwrap();
        assert_eq!(or.values(), fr.values());
        assert_eq!(od.values(), fd.values());
        assert_eq!(counts, (0, 0));

        let low = Tensor::from_vec(&[2], vec![0.001, 0.001]).unwrap();
        let (or, od, counts) = channel_exchange(&fr, &fd, &low, &low, 0.02).unwrap();
        // rgb top half (channel 0) from depth; depth bottom half (channel 1) from rgb
        assert_eq!(or.values(), &[5.0, 6.0, 3.0, 4.0]);
        assert_eq!(od.values(), &[5.0, 6.0, 3.0, 4.0]);
        assert_eq!(counts, (1, 1));

        let odd = Tensor::from_vec(&[1, 3, 1, 1], vec![1.0; 3]).unwrap();
        let g3 = Tensor::from_vec(&[3], vec![1.0; 3]).unwrap();
        assert!(channel_exchange(&odd, &odd, &g3, &g3, 0.02).is_err());
        assert!(channel_exchange(&fr, &fd, &high, &high, 0.0).is_err());
    }

    #[test]
    fn exchange_count_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 8;
        let f = rand_pair(&mut rng, 1, 1, 1).reshape(&[1, 1, 1, 1]).unwrap();
        let f = Tensor::concat(1, &vec![f; c]).unwrap();
        let gv: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..0.1)).collect();
        let g1 = Tensor::from_vec(&[c], gv.clone()).unwrap();
        let g2 = Tensor::from_vec(&[c], gv.iter().rev().cloned().collect()).unwrap();
        let mut prev = 0usize;
        for thr in [0.005, 0.02, 0.05, 0.11] {
            let (_, _, (a, b)) = channel_exchange(&f, &f, &g1, &g2, thr).unwrap();
            assert!(a + b >= prev, "exchange count dropped as threshold rose");
            prev = a + b;
        }
        assert_eq!(prev, c, "everything exchangeable above the max gamma");
    }

    #[test]
    fn soft_fusion_gate_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fr = Tensor::from_vec(&[1, 3], vec![0.5, -0.2, 0.8]).unwrap();
        let fd = Tensor::from_vec(&[1, 3], vec![0.1, 0.4, -0.6]).unwrap();
        let gate = Linear::<f64>::new(&mut rng, 6, 6);
        let cat = [0.5, -0.2, 0.8, 0.1, 0.4, -0.6];

        gate.weight.set(Tensor::param(&[6, 6], vec![0.0; 36]).unwrap()).unwrap();
        gate.bias.set(Tensor::param(&[6], vec![50.0; 6]).unwrap()).unwrap();
        let fused = soft_fusion(&fr, &fd, &gate).unwrap();
        for (g, e) in fused.values().iter().zip(&cat) {
            assert!((g - e).abs() < 1e-9, "open gate should pass the concatenation");
        }

        gate.bias.set(Tensor::param(&[6], vec![-50.0; 6]).unwrap()).unwrap();
        let fused = soft_fusion(&fr, &fd, &gate).unwrap();
        assert!(fused.values().iter().all(|v| v.abs() < 1e-9));

        // random case against direct sigmoid gating
        let wv: Vec<f64> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        gate.weight.set(Tensor::param(&[6, 6], wv.clone()).unwrap()).unwrap();
        gate.bias.set(Tensor::param(&[6], bv.clone()).unwrap()).unwrap();
        let fused = soft_fusion(&fr, &fd, &gate).unwrap();
        for i in 0..6 {
            let logit: f64 = (0..6).map(|j| wv[i * 6 + j] * cat[j]).sum::<f64>() + bv[i];
            let expect = cat[i] / (1.0 + (-logit).exp());
            assert!((fused.values()[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn late_combine_weighting() {
        let pr = Tensor::<f64>::from_vec(&[6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let pd = Tensor::from_vec(&[6], vec![-1.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();

        let even = Tensor::from_vec(&[2], vec![0.3, 0.3]).unwrap();
        let out = late_combine(&pr, &pd, &even).unwrap();
        for (o, (a, b)) in out.values().iter().zip(pr.values().iter().zip(pd.values())) {
            assert!((o - (a + b) / 2.0).abs() < 1e-12);
        }

        let gap = Tensor::from_vec(&[2], vec![60.0, 0.0]).unwrap();
        let out = late_combine(&pr, &pd, &gap).unwrap();
        for (o, a) in out.values().iter().zip(pr.values()) {
            assert!((o - a).abs() < 1e-9);
        }

        // logits chosen so softmax = (0.3, 0.7)
        let w37 = Tensor::from_vec(&[2], vec![0.3f64.ln(), 0.7f64.ln()]).unwrap();
        let out = late_combine(&pr, &pd, &w37).unwrap();
        for (o, (a, b)) in out.values().iter().zip(pr.values().iter().zip(pd.values())) {
            assert!((o - (0.3 * a + 0.7 * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn regressor_zero_weights_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reg = Regressor::<f64>::new(&mut rng, 8, (4, 4), 0.01);
        let feat = Tensor::from_vec(&[1, 8], (0..8).map(|i| i as f64 / 8.0).collect()).unwrap();
        let base = reg.forward(&feat).unwrap();
        assert_eq!(base.shape(), &[6]);

        // doubling the last layer doubles the output
        let w3 = reg.fc3.weight.get();
        reg.fc3.weight.set(w3.mul_scalar(2.0).detach_as_param().unwrap()).unwrap();
        let b3 = reg.fc3.bias.get();
        reg.fc3.bias.set(b3.mul_scalar(2.0).detach_as_param().unwrap()).unwrap();
        let doubled = reg.forward(&feat).unwrap();
        for (d, b) in doubled.values().iter().zip(base.values()) {
            assert!((d - 2.0 * b).abs() < 1e-12);
        }

        let zero = Regressor::<f64> {
            fc1: Linear { weight: Parameter::new(Tensor::param(&[4, 8], vec![0.0; 32]).unwrap()), bias: Parameter::new(Tensor::param(&[4], vec![0.0; 4]).unwrap()) },
            fc2: Linear { weight: Parameter::new(Tensor::param(&[4, 4], vec![0.0; 16]).unwrap()), bias: Parameter::new(Tensor::param(&[4], vec![0.0; 4]).unwrap()) },
            fc3: Linear { weight: Parameter::new(Tensor::param(&[6, 4], vec![0.0; 24]).unwrap()), bias: Parameter::new(Tensor::param(&[6], vec![0.0; 6]).unwrap()) },
            output_scale: 0.01,
        };
        assert!(zero.forward(&feat).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rgb_only_ignores_depth_and_depth_only_requires_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = PoseNet::<f64>::new(&mut rng, small_cfg(FusionStrategy::RgbOnly)).unwrap();
        let rgb = rand_pair(&mut rng, 6, 32, 32);
        let d1 = rand_pair(&mut rng, 2, 32, 32);
        let d2 = rand_pair(&mut rng, 2, 32, 32);
        let a = net.forward(&rgb, Some(&d1), false).unwrap();
        let b = net.forward(&rgb, Some(&d2), false).unwrap();
        let c = net.forward(&rgb, None, false).unwrap();
        assert_eq!(a.pose.values(), b.pose.values());
        assert_eq!(a.pose.values(), c.pose.values());

        let donly = PoseNet::<f64>::new(&mut rng, small_cfg(FusionStrategy::DepthOnly)).unwrap();
        assert!(donly.forward(&rgb, None, false).is_err());
        assert!(donly.forward(&rgb, Some(&d1), false).is_ok());
    }

    #[test]
    fn all_strategies_produce_finite_six_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rgb = rand_pair(&mut rng, 6, 32, 32);
        let d = rand_pair(&mut rng, 2, 32, 32);
        for strategy in FusionStrategy::ALL {
            let net = PoseNet::<f64>::new(&mut rng, small_cfg(strategy)).unwrap();
            let out = net.forward(&rgb, Some(&d), true).unwrap();
            assert_eq!(out.pose.shape(), &[6], "{}", strategy.name());
            assert!(out.pose.values().iter().all(|v| v.is_finite()));
            // output scaling keeps early poses near identity
            assert!(out.pose.values().iter().all(|v| v.abs() < 0.5));
        }
    }

    #[test]
    fn multi_layer_ce_shares_convs_with_private_bns() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = PoseNet::<f64>::new(&mut rng, small_cfg(FusionStrategy::MultiLayerCE)).unwrap();
        assert!(net.verify_weight_sharing());
        let single = PoseNet::<f64>::new(&mut rng, small_cfg(FusionStrategy::RgbOnly)).unwrap();
        assert!(!single.verify_weight_sharing());
    }

    #[test]
    fn gamma_init_means_no_exchange_and_forced_low_gamma_exchanges() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = PoseNet::<f64>::new(&mut rng, small_cfg(FusionStrategy::MultiLayerCE)).unwrap();
        let rgb = rand_pair(&mut rng, 6, 32, 32);
        let d = rand_pair(&mut rng, 2, 32, 32);
        let out = net.forward(&rgb, Some(&d), false).unwrap();
        assert_eq!(out.exchange.total(), 0, "gamma starts at 1, above threshold");

        net.set_exchangeable_gammas(true, 0.001).unwrap();
        let out = net.forward(&rgb, Some(&d), false).unwrap();
        assert!(out.exchange.total() > 0);
        // rgb-side replacements only
        assert!(out.exchange.per_layer.iter().all(|&(_, d)| d == 0));

        // cross-modal wiring: with rgb channels swapped in, perturbing the
        // depth input must change the rgb stream's pose
        let d2 = d.add_scalar(0.05);
        let out2 = net.forward(&rgb, Some(&d2), false).unwrap();
        assert_ne!(
            out.pose_rgb.as_ref().unwrap().values(),
            out2.pose_rgb.as_ref().unwrap().values()
        );
    }

    #[test]
    fn fixed_seed_reproduces_outputs_bit_exactly() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let net = PoseNet::<f64>::new(&mut rng, small_cfg(FusionStrategy::MultiLayerCE)).unwrap();
            let rgb = rand_pair(&mut rng, 6, 32, 32);
            let d = rand_pair(&mut rng, 2, 32, 32);
            net.forward(&rgb, Some(&d), true).unwrap().pose.values().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn gamma_layers_cover_disjoint_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = PoseNet::<f64>::new(&mut rng, small_cfg(FusionStrategy::MultiLayerCE)).unwrap();
        let layers = net.gamma_layers();
        assert_eq!(layers.len(), 2);
        assert_eq!(layers[0].len(), layers[1].len());
        for (r, d) in layers[0].iter().zip(&layers[1]) {
            let c = r.gamma.len();
            let mut union: Vec<usize> = r.exchangeable.iter().chain(&d.exchangeable).copied().collect();
            union.sort_unstable();
            assert_eq!(union, (0..c).collect::<Vec<_>>());
            assert!(r.exchangeable.iter().all(|i| !d.exchangeable.contains(i)));
        }
        assert!(PoseNet::<f64>::new(&mut rng, small_cfg(FusionStrategy::Late))
            .unwrap()
            .gamma_layers()
            .is_empty());
    }
}
