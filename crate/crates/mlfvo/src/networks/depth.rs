//! U-Net depth predictor emitting inverse depth at four scales.

use rand::Rng;

use super::{BatchNorm2d, Buffer, Conv2d, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{nn, Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DepthNetConfig {
    pub encoder_channels: Vec<usize>,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        DepthNetConfig {
            encoder_channels: vec![16, 32, 64, 128],
            min_depth: 0.1,
            max_depth: 100.0,
        }
    }
}

impl DepthNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "depth encoder needs 4 stage widths, got {:?}",
                self.encoder_channels
            )));
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < min_depth < max_depth, got {} / {}",
                self.min_depth, self.max_depth
            )));
        }
        Ok(())
    }
}

struct ConvBnRelu<S: Element> {
    conv: Conv2d<S>,
    bn: BatchNorm2d<S>,
}

impl<S: Element> ConvBnRelu<S> {
    fn new<R: Rng>(rng: &mut R, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(rng, in_ch, out_ch, 3, stride, 1, false),
            bn: BatchNorm2d::new(out_ch),
        }
    }

    fn forward(&self, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        Ok(self.bn.forward(&self.conv.forward(x)?, training)?.relu())
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Parameter<S>)>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.bn.collect(&format!("{prefix}.bn"), out);
    }

    fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Buffer<S>)>) {
        self.bn.collect_buffers(&format!("{prefix}.bn"), out);
    }
}

/// Encoder-decoder with skip connections; four sigmoid heads produce
/// inverse depth at resolutions 1, 1/2, 1/4, 1/8 of the input.
pub struct DepthNet<S: Element> {
    pub cfg: DepthNetConfig,
    enc: Vec<ConvBnRelu<S>>,       // full, 1/2, 1/4, 1/8 resolutions
    bottleneck: ConvBnRelu<S>,     // 1/16
    dec: Vec<ConvBnRelu<S>>,       // 1/8 .. full, in decode order
    heads: Vec<Conv2d<S>>,         // matching dec, coarse to fine
}

impl<S: Element> DepthNet<S> {
    pub fn new<R: Rng>(rng: &mut R, cfg: DepthNetConfig) -> Result<Self> {
        cfg.validate()?;
        let c = &cfg.encoder_channels;
        let enc = vec![
            ConvBnRelu::new(rng, 3, c[0], 1),
            ConvBnRelu::new(rng, c[0], c[1], 2),
            ConvBnRelu::new(rng, c[1], c[2], 2),
            ConvBnRelu::new(rng, c[2], c[3], 2),
        ];
        let bottleneck = ConvBnRelu::new(rng, c[3], c[3], 2);
        // decoder consumes upsampled features concatenated with the skip
        let dec = vec![
            ConvBnRelu::new(rng, c[3] + c[3], c[3], 1),
            ConvBnRelu::new(rng, c[3] + c[2], c[2], 1),
            ConvBnRelu::new(rng, c[2] + c[1], c[1], 1),
            ConvBnRelu::new(rng, c[1] + c[0], c[0], 1),
        ];
        let heads = vec![
            Conv2d::new(rng, c[3], 1, 3, 1, 1, true),
            Conv2d::new(rng, c[2], 1, 3, 1, 1, true),
            Conv2d::new(rng, c[1], 1, 3, 1, 1, true),
            Conv2d::new(rng, c[0], 1, 3, 1, 1, true),
        ];
        Ok(DepthNet { cfg, enc, bottleneck, dec, heads })
    }

    /// Inverse depth maps for a batch (N, 3, H, W), finest scale first:
    /// shapes (N, 1, H/2^k, W/2^k) for k = 0..3.
    pub fn forward(&self, image: &Tensor<S>, training: bool) -> Result<Vec<Tensor<S>>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("depth net expects (N, 3, H, W), got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input extents must be divisible by 16, got {h}x{w}"
            )));
        }
        let mut skips = Vec::with_capacity(4);
        let mut x = image.clone();
        for layer in &self.enc {
            x = layer.forward(&x, training)?;
            skips.push(x.clone());
        }
        x = self.bottleneck.forward(&x, training)?;
        let mut out_rev = Vec::with_capacity(4); // coarse to fine
        for (i, layer) in self.dec.iter().enumerate() {
            let skip = &skips[3 - i];
            let (sh, sw) = (skip.shape()[2], skip.shape()[3]);
            let up = nn::upsample_bilinear(&x, sh, sw)?;
            x = layer.forward(&Tensor::concat(1, &[up, skip.clone()])?, training)?;
            let sigma = self.heads[i].forward(&x)?.sigmoid();
            out_rev.push(self.sigma_to_inv_depth(&sigma));
        }
        out_rev.reverse();
        Ok(out_rev)
    }

    /// Map a sigmoid activation into [1/max_depth, 1/min_depth].
    pub fn sigma_to_inv_depth(&self, sigma: &Tensor<S>) -> Tensor<S> {
        let lo = 1.0 / self.cfg.max_depth;
        let hi = 1.0 / self.cfg.min_depth;
        sigma.mul_scalar(hi - lo).add_scalar(lo)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Parameter<S>)>) {
        for (i, l) in self.enc.iter().enumerate() {
            l.collect(&format!("{prefix}.enc{i}"), out);
        }
        self.bottleneck.collect(&format!("{prefix}.bottleneck"), out);
        for (i, l) in self.dec.iter().enumerate() {
            l.collect(&format!("{prefix}.dec{i}"), out);
            self.heads[i].collect(&format!("{prefix}.head{i}"), out);
        }
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Buffer<S>)>) {
        for (i, l) in self.enc.iter().enumerate() {
            l.collect_buffers(&format!("{prefix}.enc{i}"), out);
        }
        self.bottleneck.collect_buffers(&format!("{prefix}.bottleneck"), out);
        for (i, l) in self.dec.iter().enumerate() {
            l.collect_buffers(&format!("{prefix}.dec{i}"), out);
        }
    }
}
