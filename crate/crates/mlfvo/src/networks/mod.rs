//! Network building blocks and the two task networks: a U-Net depth
//! predictor and the six-variant relative pose network.
//!
//! Parameters are reference-counted cells so streams can share weights;
//! the optimizer deduplicates shared parameters by identity.

mod depth;
mod pose;

pub use depth::{DepthNet, DepthNetConfig};
pub use pose::{
    channel_exchange, late_combine, soft_fusion, ExchangeStats, FusionStrategy, PoseNet,
    PoseNetConfig, PoseOutputs, Regressor, ResEncoder,
};

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{nn, Element, Tensor};

/// Shared mutable handle to a trainable tensor. Cloning shares storage, so
/// two layers holding clones always see the same weights.
#[derive(Clone)]
pub struct Parameter<S: Element>(Rc<RefCell<Tensor<S>>>);

impl<S: Element> Parameter<S> {
    pub fn new(t: Tensor<S>) -> Self {
        assert!(t.requires_grad(), "parameters must require grad");
        Parameter(Rc::new(RefCell::new(t)))
    }

    pub fn get(&self) -> Tensor<S> {
        self.0.borrow().clone()
    }

    pub fn set(&self, t: Tensor<S>) -> Result<()> {
        if t.shape() != self.0.borrow().shape() {
            return Err(Error::Shape(format!(
                "parameter update {:?} does not match {:?}",
                t.shape(),
                self.0.borrow().shape()
            )));
        }
        *self.0.borrow_mut() = t;
        Ok(())
    }

    pub fn shares_storage_with(&self, other: &Parameter<S>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

/// Non-trainable per-channel state (BN running statistics).
#[derive(Clone)]
pub struct Buffer<S: Element>(Rc<RefCell<Vec<S>>>);

impl<S: Element> Buffer<S> {
    pub fn new(v: Vec<S>) -> Self {
        Buffer(Rc::new(RefCell::new(v)))
    }

    pub fn values(&self) -> Vec<S> {
        self.0.borrow().clone()
    }

    pub fn set(&self, v: Vec<S>) -> Result<()> {
        if v.len() != self.0.borrow().len() {
            return Err(Error::Shape("buffer length mismatch".into()));
        }
        *self.0.borrow_mut() = v;
        Ok(())
    }
}

/// Named parameters of a module subtree, shared entries deduplicated by
/// storage identity (first name wins).
pub fn dedup_params<S: Element>(named: Vec<(String, Parameter<S>)>) -> Vec<(String, Parameter<S>)> {
    let mut seen = std::collections::HashSet::new();
    named
        .into_iter()
        .filter(|(_, p)| seen.insert(p.key()))
        .collect()
}

/// Fan-in-scaled normal draws, always sampled in f64 so f32 and f64 models
/// built from the same seed hold identical values.
pub fn init_normal<S: Element, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Parameter<S> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let vals: Vec<S> = (0..n).map(|_| S::fp(dist.sample(rng))).collect();
    Parameter::new(Tensor::param(shape, vals).expect("finite init"))
}

pub struct Conv2d<S: Element> {
    pub weight: Parameter<S>,
    pub bias: Option<Parameter<S>>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Element> Conv2d<S> {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = init_normal(rng, &[out_ch, in_ch, kernel, kernel], std);
        let bias = bias.then(|| Parameter::new(Tensor::param(&[out_ch], vec![S::zero(); out_ch]).unwrap()));
        Conv2d { weight, bias, stride, padding }
    }

    /// Same convolution weights, independent handle to bias too (shared).
    pub fn share(&self) -> Self {
        Conv2d {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let bias = self.bias.as_ref().map(|b| b.get());
        nn::conv2d(x, &self.weight.get(), bias.as_ref(), self.stride, self.padding)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Parameter<S>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

pub struct BatchNorm2d<S: Element> {
    pub gamma: Parameter<S>,
    pub beta: Parameter<S>,
    pub running_mean: Buffer<S>,
    pub running_var: Buffer<S>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Element> BatchNorm2d<S> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Parameter::new(Tensor::param(&[channels], vec![S::one(); channels]).unwrap()),
            beta: Parameter::new(Tensor::param(&[channels], vec![S::zero(); channels]).unwrap()),
            running_mean: Buffer::new(vec![S::zero(); channels]),
            running_var: Buffer::new(vec![S::one(); channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        if training {
            let (y, stats) =
                nn::batch_norm2d(x, &self.gamma.get(), &self.beta.get(), self.eps, nn::BnMode::Train)?;
            let (mean, var) = stats.expect("train mode yields batch stats");
            let m = S::fp(self.momentum);
            let one_m = S::fp(1.0 - self.momentum);
            let rm: Vec<S> = self
                .running_mean
                .values()
                .iter()
                .zip(mean.iter())
                .map(|(&r, &b)| r * one_m + b * m)
                .collect();
            let rv: Vec<S> = self
                .running_var
                .values()
                .iter()
                .zip(var.iter())
                .map(|(&r, &b)| r * one_m + b * m)
                .collect();
            self.running_mean.set(rm)?;
            self.running_var.set(rv)?;
            Ok(y)
        } else {
            let mean = self.running_mean.values();
            let var = self.running_var.values();
            let (y, _) = nn::batch_norm2d(
                x,
                &self.gamma.get(),
                &self.beta.get(),
                self.eps,
                nn::BnMode::Eval { mean: &mean, var: &var },
            )?;
            Ok(y)
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Parameter<S>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    pub fn collect_buffers(&self, prefix: &str, out: &mut Vec<(String, Buffer<S>)>) {
        out.push((format!("{prefix}.running_mean"), self.running_mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }
}

pub struct Linear<S: Element> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
}

impl<S: Element> Linear<S> {
    pub fn new<R: Rng>(rng: &mut R, in_f: usize, out_f: usize) -> Self {
        let std = (2.0 / in_f as f64).sqrt();
        Linear {
            weight: init_normal(rng, &[out_f, in_f], std),
            bias: Parameter::new(Tensor::param(&[out_f], vec![S::zero(); out_f]).unwrap()),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        nn::linear(x, &self.weight.get(), Some(&self.bias.get()))
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Parameter<S>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// The full trainable model: depth network plus pose network.
pub struct Model<S: Element> {
    pub depth_net: DepthNet<S>,
    pub pose_net: PoseNet<S>,
}

impl<S: Element> Model<S> {
    pub fn new<R: Rng>(
        rng: &mut R,
        depth_cfg: DepthNetConfig,
        pose_cfg: PoseNetConfig,
    ) -> Result<Self> {
        Ok(Model {
            depth_net: DepthNet::new(rng, depth_cfg)?,
            pose_net: PoseNet::new(rng, pose_cfg)?,
        })
    }

    pub fn named_parameters(&self) -> Vec<(String, Parameter<S>)> {
        let mut out = Vec::new();
        self.depth_net.collect("depth", &mut out);
        self.pose_net.collect("pose", &mut out);
        dedup_params(out)
    }

    pub fn named_buffers(&self) -> Vec<(String, Buffer<S>)> {
        let mut out = Vec::new();
        self.depth_net.collect_buffers("depth", &mut out);
        self.pose_net.collect_buffers("pose", &mut out);
        out
    }
}
