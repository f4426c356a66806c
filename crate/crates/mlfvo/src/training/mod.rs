//! Joint optimization of the depth and pose networks with Adam, plus
//! checkpointing and per-epoch metrics.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Sequence, Snippet};
use crate::error::{Error, Result};
use crate::geometry::pose6d_invert;
use crate::losses::{total_loss, GammaMeanMode, LossBreakdown, LossWeights, SnippetOutputs};
use crate::networks::{Model, Parameter};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_after: f64,
    pub lr_switch_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            epochs: 40,
            lr_initial: 1e-4,
            lr_after: 5e-5,
            lr_switch_epoch: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            deterministic: true,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr_switch_epoch > self.epochs {
            return Err(Error::Config(format!(
                "lr_switch_epoch {} exceeds epochs {}",
                self.lr_switch_epoch, self.epochs
            )));
        }
        if !(self.lr_initial > 0.0 && self.lr_after > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        self.weights.validate()
    }

    /// Step schedule: initial rate, then `lr_after` from the switch epoch on
    /// (epochs are 0-based).
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.lr_switch_epoch {
            self.lr_initial
        } else {
            self.lr_after
        }
    }
}

/// Adam over a fixed parameter list. Moments are kept in the model's element
/// type so checkpoints round-trip bit-exactly.
pub struct Adam<S: Element> {
    pub params: Vec<(String, Parameter<S>)>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    pub step_count: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<S: Element> Adam<S> {
    pub fn new(params: Vec<(String, Parameter<S>)>, cfg: &TrainConfig) -> Self {
        let m = params.iter().map(|(_, p)| vec![S::zero(); p.get().len()]).collect();
        let v = params.iter().map(|(_, p)| vec![S::zero(); p.get().len()]).collect();
        Adam { params, m, v, step_count: 0, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps }
    }

    /// One bias-corrected update from the gradients accumulated on the
    /// parameters' current nodes. Replacing each parameter tensor also
    /// clears its gradient for the next step.
    pub fn step(&mut self, lr: f64) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let tensor = p.get();
            let grad = tensor.grad().unwrap_or_else(|| vec![S::zero(); tensor.len()]);
            if grad.len() != tensor.len() {
                return Err(Error::Shape("gradient length mismatch".into()));
            }
            let mut vals: Vec<S> = tensor.values().to_vec();
            for j in 0..vals.len() {
                let g = grad[j].as_f64();
                let m = self.beta1 * self.m[i][j].as_f64() + (1.0 - self.beta1) * g;
                let v = self.beta2 * self.v[i][j].as_f64() + (1.0 - self.beta2) * g * g;
                self.m[i][j] = S::fp(m);
                self.v[i][j] = S::fp(v);
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                vals[j] = S::fp(vals[j].as_f64() - update);
            }
            p.set(Tensor::param(tensor.shape(), vals)?)?;
        }
        Ok(())
    }
}

/// Exchange and scaling-factor diagnostics averaged over an epoch.
#[derive(Debug, Clone, Default)]
pub struct GammaDiagnostics {
    pub exchanged_rgb: f64,
    pub exchanged_depth: f64,
    /// fraction of exchangeable scaling factors with |gamma| below threshold
    pub below_threshold: f64,
    /// histogram of |gamma| over exchangeable channels, bin width 0.02,
    /// last bin catches everything >= 0.18
    pub histogram: [usize; 10],
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: LossBreakdown,
    pub gamma: GammaDiagnostics,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,lr,total,photometric,geometric,smoothness,polarization,exchanged_rgb,exchanged_depth,gamma_below_threshold";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss.total,
            self.loss.photometric,
            self.loss.geometric,
            self.loss.smoothness,
            self.loss.polarization,
            self.gamma.exchanged_rgb,
            self.gamma.exchanged_depth,
            self.gamma.below_threshold
        )
    }
}

fn image_tensor<S: Element>(seq: &Sequence, idx: usize) -> Tensor<S> {
    seq.frames[idx].image.to_tensor()
}

/// Forward a whole snippet: three depth passes and two pose passes, returning
/// the loss inputs plus per-forward exchange counts (rgb, depth).
pub fn snippet_forward<S: Element>(
    model: &Model<S>,
    seq: &Sequence,
    snip: &Snippet,
    training: bool,
) -> Result<(SnippetOutputs<S>, Vec<(usize, usize)>)> {
    let img_t = image_tensor::<S>(seq, snip.target);
    let img_prev = image_tensor::<S>(seq, snip.sources[0]);
    let img_next = image_tensor::<S>(seq, snip.sources[1]);
    let (c, h, w) = (img_t.shape()[0], img_t.shape()[1], img_t.shape()[2]);

    let depth_fwd = |img: &Tensor<S>| -> Result<Vec<Tensor<S>>> {
        model.depth_net.forward(&img.reshape(&[1, c, h, w])?, training)
    };
    let inv_t = depth_fwd(&img_t)?;
    let inv_prev = depth_fwd(&img_prev)?;
    let inv_next = depth_fwd(&img_next)?;

    let depth_pair = |a: &Tensor<S>, b: &Tensor<S>| -> Result<Tensor<S>> {
        Tensor::concat(0, &[a.reshape(&[1, h, w])?, b.reshape(&[1, h, w])?])
    };
    // the pose net always sees frames in temporal order and predicts the
    // forward transform; the warp onto the earlier source inverts it
    let pair_prev = Tensor::concat(0, &[img_prev.clone(), img_t.clone()])?;
    let out_prev = model.pose_net.forward(
        &pair_prev,
        Some(&depth_pair(&inv_prev[0], &inv_t[0])?),
        training,
    )?;
    let pose_t_to_prev = pose6d_invert(&out_prev.pose)?;
    let pair_next = Tensor::concat(0, &[img_t.clone(), img_next.clone()])?;
    let out_next = model.pose_net.forward(
        &pair_next,
        Some(&depth_pair(&inv_t[0], &inv_next[0])?),
        training,
    )?;

    let exchange = vec![
        out_prev.exchange.per_layer.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1)),
        out_next.exchange.per_layer.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1)),
    ];
    let outputs = SnippetOutputs {
        target_image: img_t,
        source_images: vec![img_prev, img_next],
        target_inv_depths: inv_t,
        source_inv_depths: vec![inv_prev, inv_next],
        poses_t_to_s: vec![pose_t_to_prev, out_next.pose],
        intrinsics: seq.intrinsics.clone(),
        gammas: model.pose_net.gamma_layers(),
        gamma_mean_mode: GammaMeanMode::PerModality,
    };
    Ok((outputs, exchange))
}

fn gamma_diagnostics<S: Element>(model: &Model<S>, threshold: f64) -> (f64, [usize; 10]) {
    let mut below = 0usize;
    let mut total = 0usize;
    let mut hist = [0usize; 10];
    for stream in model.pose_net.gamma_layers() {
        for layer in stream {
            let vals = layer.gamma.values();
            for &ch in &layer.exchangeable {
                let g = vals[ch].as_f64().abs();
                total += 1;
                if g < threshold {
                    below += 1;
                }
                hist[((g / 0.02) as usize).min(9)] += 1;
            }
        }
    }
    let frac = if total == 0 { 0.0 } else { below as f64 / total as f64 };
    (frac, hist)
}

/// One pass over the snippets in seeded-shuffled batches. Gradients are
/// averaged within a batch; one Adam step per batch.
pub fn train_epoch<S: Element>(
    model: &Model<S>,
    adam: &mut Adam<S>,
    seq: &Sequence,
    snippets: &[Snippet],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if snippets.is_empty() {
        return Err(Error::Data("no snippets to train on".into()));
    }
    let lr = cfg.lr_for_epoch(epoch);
    let mut order: Vec<usize> = (0..snippets.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
    order.shuffle(&mut rng);

    let mut sum = LossBreakdown {
        total: 0.0,
        photometric: 0.0,
        geometric: 0.0,
        smoothness: 0.0,
        polarization: 0.0,
    };
    let mut ex_rgb = 0usize;
    let mut ex_depth = 0usize;
    let mut forwards = 0usize;
    let mut steps = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        let inv_batch = 1.0 / batch.len() as f64;
        for &si in batch {
            let (outputs, exchange) = snippet_forward(model, seq, &snippets[si], true)?;
            let (loss, breakdown) = total_loss(&outputs, &cfg.weights)?;
            loss.mul_scalar(inv_batch).backward()?;
            sum.total += breakdown.total;
            sum.photometric += breakdown.photometric;
            sum.geometric += breakdown.geometric;
            sum.smoothness += breakdown.smoothness;
            sum.polarization += breakdown.polarization;
            for (r, d) in exchange {
                ex_rgb += r;
                ex_depth += d;
                forwards += 1;
            }
        }
        adam.step(lr)?;
        steps += 1;
    }
    let n = snippets.len() as f64;
    let (below, histogram) = gamma_diagnostics(model, model.pose_net.cfg.ce_threshold);
    Ok(EpochMetrics {
        epoch,
        lr,
        steps,
        loss: LossBreakdown {
            total: sum.total / n,
            photometric: sum.photometric / n,
            geometric: sum.geometric / n,
            smoothness: sum.smoothness / n,
            polarization: sum.polarization / n,
        },
        gamma: GammaDiagnostics {
            exchanged_rgb: ex_rgb as f64 / forwards.max(1) as f64,
            exchanged_depth: ex_depth as f64 / forwards.max(1) as f64,
            below_threshold: below,
            histogram,
        },
    })
}

const CKPT_MAGIC: &[u8; 4] = b"MFVO";
const CKPT_VERSION: u32 = 1;

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_all(b).map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    write_bytes(w, &v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u64(w, s.len() as u64)?;
    write_bytes(w, s.as_bytes())
}

fn write_f64s(w: &mut impl Write, vals: impl Iterator<Item = f64>) -> Result<()> {
    for v in vals {
        write_bytes(w, &v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u64(r)? as usize;
    if n > 1 << 24 {
        return Err(Error::Checkpoint(format!("implausible string length {n}")));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("invalid utf-8 in checkpoint".into()))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        read_exact(r, &mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// Single string identifying the model and training configuration; stored in
/// checkpoints and compared verbatim on load.
pub fn config_echo<S: Element>(model: &Model<S>, cfg: &TrainConfig) -> String {
    format!(
        "dtype={} depth={:?} pose={:?} train={:?}",
        std::mem::size_of::<S>() * 8,
        model.depth_net.cfg,
        model.pose_net.cfg,
        cfg
    )
}

/// Serialize every parameter, BN running buffer, and Adam moment. Values are
/// stored as f64 bits, which is exact for both element types.
pub fn save_checkpoint<S: Element>(
    path: &Path,
    model: &Model<S>,
    adam: &Adam<S>,
    cfg: &TrainConfig,
    epochs_done: usize,
) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Checkpoint(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    write_bytes(&mut w, CKPT_MAGIC)?;
    write_bytes(&mut w, &CKPT_VERSION.to_le_bytes())?;
    write_str(&mut w, &config_echo(model, cfg))?;
    write_u64(&mut w, epochs_done as u64)?;

    let params = model.named_parameters();
    write_u64(&mut w, params.len() as u64)?;
    for (name, p) in &params {
        let t = p.get();
        write_str(&mut w, name)?;
        write_u64(&mut w, t.shape().len() as u64)?;
        for &d in t.shape() {
            write_u64(&mut w, d as u64)?;
        }
        write_f64s(&mut w, t.values().iter().map(|v| v.as_f64()))?;
    }
    let buffers = model.named_buffers();
    write_u64(&mut w, buffers.len() as u64)?;
    for (name, b) in &buffers {
        let vals = b.values();
        write_str(&mut w, name)?;
        write_u64(&mut w, vals.len() as u64)?;
        write_f64s(&mut w, vals.iter().map(|v| v.as_f64()))?;
    }
    write_u64(&mut w, adam.step_count)?;
    write_u64(&mut w, adam.params.len() as u64)?;
    for (i, (name, _)) in adam.params.iter().enumerate() {
        write_str(&mut w, name)?;
        write_u64(&mut w, adam.m[i].len() as u64)?;
        write_f64s(&mut w, adam.m[i].iter().map(|v| v.as_f64()))?;
        write_f64s(&mut w, adam.v[i].iter().map(|v| v.as_f64()))?;
    }
    w.flush().map_err(|e| Error::Checkpoint(format!("flush failed: {e}")))
}

/// Restore parameters, buffers, and optimizer state in place. Returns the
/// number of completed epochs. The stored configuration must match the
/// current one exactly.
pub fn load_checkpoint<S: Element>(
    path: &Path,
    model: &Model<S>,
    adam: &mut Adam<S>,
    cfg: &TrainConfig,
) -> Result<usize> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut ver = [0u8; 4];
    read_exact(&mut r, &mut ver)?;
    let ver = u32::from_le_bytes(ver);
    if ver != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {ver}, expected {CKPT_VERSION}"
        )));
    }
    let stored_echo = read_str(&mut r)?;
    let expected = config_echo(model, cfg);
    if stored_echo != expected {
        return Err(Error::Checkpoint(format!(
            "configuration mismatch\n  stored:  {stored_echo}\n  current: {expected}"
        )));
    }
    let epochs_done = read_u64(&mut r)? as usize;

    let mut stored_params = std::collections::HashMap::new();
    let n = read_u64(&mut r)? as usize;
    for _ in 0..n {
        let name = read_str(&mut r)?;
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let vals = read_f64s(&mut r, len)?;
        stored_params.insert(name, (shape, vals));
    }
    for (name, p) in model.named_parameters() {
        let (shape, vals) = stored_params
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if shape != p.get().shape() {
            return Err(Error::Checkpoint(format!("parameter {name} shape mismatch")));
        }
        p.set(Tensor::param(&shape, vals.iter().map(|&v| S::fp(v)).collect())?)?;
    }
    if let Some(name) = stored_params.keys().next() {
        return Err(Error::Checkpoint(format!("unknown parameter {name} in checkpoint")));
    }

    let mut stored_bufs = std::collections::HashMap::new();
    let n = read_u64(&mut r)? as usize;
    for _ in 0..n {
        let name = read_str(&mut r)?;
        let len = read_u64(&mut r)? as usize;
        stored_bufs.insert(name, read_f64s(&mut r, len)?);
    }
    for (name, b) in model.named_buffers() {
        let vals = stored_bufs
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))?;
        b.set(vals.iter().map(|&v| S::fp(v)).collect())?;
    }

    adam.step_count = read_u64(&mut r)?;
    let n = read_u64(&mut r)? as usize;
    if n != adam.params.len() {
        return Err(Error::Checkpoint("optimizer parameter count mismatch".into()));
    }
    for i in 0..n {
        let name = read_str(&mut r)?;
        if name != adam.params[i].0 {
            return Err(Error::Checkpoint(format!(
                "optimizer state order mismatch at {name}"
            )));
        }
        let len = read_u64(&mut r)? as usize;
        if len != adam.m[i].len() {
            return Err(Error::Checkpoint(format!("moment length mismatch for {name}")));
        }
        adam.m[i] = read_f64s(&mut r, len)?.iter().map(|&v| S::fp(v)).collect();
        adam.v[i] = read_f64s(&mut r, len)?.iter().map(|&v| S::fp(v)).collect();
    }
    Ok(epochs_done)
}

/// Multi-epoch driver: appends one CSV row per epoch and keeps a rolling
/// checkpoint in `run_dir` when one is given.
pub fn train_loop<S: Element>(
    model: &Model<S>,
    adam: &mut Adam<S>,
    seq: &Sequence,
    snippets: &[Snippet],
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    start_epoch: usize,
) -> Result<Vec<EpochMetrics>> {
    let mut all = Vec::new();
    let csv_path = run_dir.map(|d| d.join("metrics.csv"));
    if let (Some(p), true) = (&csv_path, start_epoch == 0) {
        std::fs::write(p, format!("{}\n", EpochMetrics::CSV_HEADER))?;
    }
    for epoch in start_epoch..cfg.epochs {
        let metrics = train_epoch(model, adam, seq, snippets, cfg, epoch)?;
        if let Some(p) = &csv_path {
            use std::fs::OpenOptions;
            let mut f = OpenOptions::new().append(true).create(true).open(p)?;
            writeln!(f, "{}", metrics.csv_row())?;
        }
        if let Some(dir) = run_dir {
            save_checkpoint(&dir.join("checkpoint.ckpt"), model, adam, cfg, epoch + 1)?;
        }
        all.push(metrics);
    }
    Ok(all)
}
