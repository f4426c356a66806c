//! The self-supervised training objective: min-reprojection photometric
//! loss, geometric depth consistency, edge-aware smoothness, and the
//! scaling-factor polarization regularizer, combined over four depth scales.

use crate::error::{Error, Result};
use crate::geometry::{self, Intrinsics};
use crate::tensor::{nn, Element, Tensor};

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Substituted into masked-out pixels before the per-pixel minimum so they
/// can never win the argmin.
const MASK_FILL: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// geometric consistency weight
    pub lambda1: f64,
    /// smoothness weight
    pub lambda2: f64,
    /// polarization regularizer weight
    pub lambda3: f64,
    /// polarization pull-to-mean strength
    pub alpha: f64,
    pub ssim_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1e-2,
            lambda2: 1e-3,
            lambda3: 2e-5,
            alpha: 1e-1,
            ssim_weight: 0.85,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.alpha, self.ssim_weight];
        if all.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss weights must be >= 0: {self:?}")));
        }
        if self.ssim_weight > 1.0 {
            return Err(Error::InvalidArgument("ssim_weight must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-pixel structural similarity of two (C, H, W) unit-range images using
/// 3x3 mean pooling with reflect padding.
pub fn ssim<S: Element>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("ssim on {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mu_a = nn::mean_filter3x3(a)?;
    let mu_b = nn::mean_filter3x3(b)?;
    let var_a = nn::mean_filter3x3(&a.mul(a)?)?.sub(&mu_a.mul(&mu_a)?)?;
    let var_b = nn::mean_filter3x3(&b.mul(b)?)?.sub(&mu_b.mul(&mu_b)?)?;
    let cov = nn::mean_filter3x3(&a.mul(b)?)?.sub(&mu_a.mul(&mu_b)?)?;
    let num = mu_a
        .mul(&mu_b)?
        .mul_scalar(2.0)
        .add_scalar(SSIM_C1)
        .mul(&cov.mul_scalar(2.0).add_scalar(SSIM_C2))?;
    let den = mu_a
        .mul(&mu_a)?
        .add(&mu_b.mul(&mu_b)?)?
        .add_scalar(SSIM_C1)
        .mul(&var_a.add(&var_b)?.add_scalar(SSIM_C2))?;
    num.div(&den)
}

/// Per-pixel photometric error between a target and a synthesized view,
/// averaged over channels: w * (1 - SSIM)/2 + (1 - w) * |diff|.
pub fn photometric_error<S: Element>(
    target: &Tensor<S>,
    synth: &Tensor<S>,
    ssim_weight: f64,
) -> Result<Tensor<S>> {
    if target.ndim() != 3 {
        return Err(Error::Shape(format!(
            "photometric_error expects (C, H, W), got {:?}",
            target.shape()
        )));
    }
    let s = ssim(target, synth)?;
    let dssim = s.neg().add_scalar(1.0).mul_scalar(0.5 * ssim_weight);
    let l1 = target.sub(synth)?.abs().mul_scalar(1.0 - ssim_weight);
    dssim.add(&l1)?.mean_axis(0)
}

/// Mean over the union of masks of the per-pixel minimum across sources.
/// Pixels invalid in a source are excluded from its map before the min;
/// pixels invalid everywhere are dropped.
pub fn masked_min_mean<S: Element>(maps: &[Tensor<S>], masks: &[Vec<bool>]) -> Result<Tensor<S>> {
    if maps.is_empty() || maps.len() != masks.len() {
        return Err(Error::InvalidArgument(format!(
            "masked_min_mean needs matching non-empty maps/masks, got {}/{}",
            maps.len(),
            masks.len()
        )));
    }
    let n = maps[0].len();
    let mut any = vec![false; n];
    for m in masks {
        if m.len() != n {
            return Err(Error::Shape("mask length does not match map".into()));
        }
        for (a, &v) in any.iter_mut().zip(m) {
            *a |= v;
        }
    }
    let count = any.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::Degenerate("no valid pixels in any source".into()));
    }
    let shape = maps[0].shape().to_vec();
    let mut adjusted = Vec::with_capacity(maps.len());
    for (map, mask) in maps.iter().zip(masks) {
        let keep = geometry::mask_to_tensor::<S>(mask, &shape);
        let fill: Vec<S> = mask
            .iter()
            .map(|&m| if m { S::zero() } else { S::fp(MASK_FILL) })
            .collect();
        let fill = Tensor::from_vec(&shape, fill)?;
        adjusted.push(map.mul(&keep)?.add(&fill)?);
    }
    let min_map = Tensor::per_pixel_min(&adjusted)?;
    let keep_any = geometry::mask_to_tensor::<S>(&any, &shape);
    Ok(min_map.mul(&keep_any)?.sum_all().mul_scalar(1.0 / count as f64))
}

/// Min-over-sources photometric loss.
pub fn min_reprojection_loss<S: Element>(
    target: &Tensor<S>,
    synths: &[Tensor<S>],
    masks: &[Vec<bool>],
    ssim_weight: f64,
) -> Result<Tensor<S>> {
    if synths.is_empty() {
        return Err(Error::InvalidArgument("min_reprojection_loss with no sources".into()));
    }
    let maps: Vec<Tensor<S>> = synths
        .iter()
        .map(|s| photometric_error(target, s, ssim_weight))
        .collect::<Result<_>>()?;
    masked_min_mean(&maps, masks)
}

/// Per-pixel normalized depth discrepancy |d_proj - d_interp| / (d_proj + d_interp).
pub fn geometric_consistency_map<S: Element>(
    d_proj: &Tensor<S>,
    d_interp: &Tensor<S>,
) -> Result<Tensor<S>> {
    d_proj.sub(d_interp)?.abs().div(&d_proj.add(d_interp)?)
}

/// Mean normalized depth discrepancy over the mask.
pub fn geometric_consistency_loss<S: Element>(
    d_proj: &Tensor<S>,
    d_interp: &Tensor<S>,
    mask: &[bool],
) -> Result<Tensor<S>> {
    let map = geometric_consistency_map(d_proj, d_interp)?;
    masked_min_mean(&[map], &[mask.to_vec()])
}

/// Edge-aware smoothness of mean-normalized inverse depth: image gradients
/// (channel-averaged) down-weight depth gradients at intensity edges.
pub fn smoothness_loss<S: Element>(image: &Tensor<S>, inv_depth: &Tensor<S>) -> Result<Tensor<S>> {
    if image.ndim() != 3 {
        return Err(Error::Shape(format!(
            "smoothness_loss expects (C, H, W) image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if inv_depth.len() != h * w {
        return Err(Error::Shape(format!(
            "inv_depth {:?} does not match image {:?}",
            inv_depth.shape(),
            image.shape()
        )));
    }
    let d = inv_depth.reshape(&[h, w])?;
    let norm = d.mean_all().add_scalar(1e-7).reciprocal();
    let dstar = d.scale_by_scalar(&norm)?;
    let wx = nn::diff_x(image)?.abs().mean_axis(0)?.neg().exp();
    let wy = nn::diff_y(image)?.abs().mean_axis(0)?.neg().exp();
    let tx = nn::diff_x(&dstar)?.abs().mul(&wx)?.mean_all();
    let ty = nn::diff_y(&dstar)?.abs().mul(&wy)?.mean_all();
    tx.add(&ty)
}

/// How the per-layer reference mean of exchangeable scaling factors is
/// taken: over one modality's exchangeable set, or over both jointly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaMeanMode {
    PerModality,
    Joint,
}

/// One BN layer's scaling factors plus the channel indices eligible for
/// exchange in the owning modality.
#[derive(Debug, Clone)]
pub struct GammaLayer<S: Element> {
    pub gamma: Tensor<S>,
    pub exchangeable: Vec<usize>,
}

/// Polarization regularizer over all modalities and layers:
/// sum |gamma| - alpha * |gamma - mean(gamma)| over each exchangeable set.
pub fn polarization_reg<S: Element>(
    modalities: &[Vec<GammaLayer<S>>],
    alpha: f64,
    mode: GammaMeanMode,
) -> Result<Tensor<S>> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    if modalities.is_empty() || modalities.iter().any(|m| m.is_empty()) {
        return Err(Error::InvalidArgument("polarization_reg with no layers".into()));
    }
    let mut sels: Vec<Vec<Tensor<S>>> = Vec::with_capacity(modalities.len());
    for layers in modalities {
        let mut row = Vec::with_capacity(layers.len());
        for layer in layers {
            if layer.exchangeable.is_empty() {
                return Err(Error::InvalidArgument("empty exchangeable set for a layer".into()));
            }
            row.push(layer.gamma.index_select(&layer.exchangeable)?);
        }
        sels.push(row);
    }
    if mode == GammaMeanMode::Joint {
        let depth = sels[0].len();
        if sels.iter().any(|r| r.len() != depth) {
            return Err(Error::InvalidArgument(
                "joint gamma mean requires equal layer counts per modality".into(),
            ));
        }
    }
    let mut total = Tensor::scalar(S::zero());
    for (mi, row) in sels.iter().enumerate() {
        for (li, sel) in row.iter().enumerate() {
            let mean = match mode {
                GammaMeanMode::PerModality => sel.mean_all(),
                GammaMeanMode::Joint => {
                    let all: Vec<Tensor<S>> =
                        sels.iter().map(|r| r[li].clone()).collect();
                    Tensor::concat(0, &all)?.mean_all()
                }
            };
            let _ = mi;
            let mean_full = Tensor::<S>::full(&[sel.len()], S::one()).scale_by_scalar(&mean)?;
            let l1 = sel.abs().sum_all();
            let dev = sel.sub(&mean_full)?.abs().sum_all();
            total = total.add(&l1.sub(&dev.mul_scalar(alpha))?)?;
        }
    }
    Ok(total)
}

/// Everything the objective needs for one training snippet: the target
/// frame, its source frames, four-scale inverse depths for all frames,
/// relative poses target -> source, and the BN scaling factors feeding the
/// polarization term (empty when the strategy has no exchange).
pub struct SnippetOutputs<S: Element> {
    pub target_image: Tensor<S>,
    pub source_images: Vec<Tensor<S>>,
    /// four scales, full to 1/8 resolution
    pub target_inv_depths: Vec<Tensor<S>>,
    /// per source, four scales
    pub source_inv_depths: Vec<Vec<Tensor<S>>>,
    /// per source, 6-vector transform from target camera to source camera
    pub poses_t_to_s: Vec<Tensor<S>>,
    pub intrinsics: Intrinsics,
    pub gammas: Vec<Vec<GammaLayer<S>>>,
    pub gamma_mean_mode: GammaMeanMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub photometric: f64,
    pub geometric: f64,
    pub smoothness: f64,
    pub polarization: f64,
}

/// Full objective for one snippet, averaged over the four depth scales,
/// plus the per-term breakdown.
pub fn total_loss<S: Element>(
    out: &SnippetOutputs<S>,
    weights: &LossWeights,
) -> Result<(Tensor<S>, LossBreakdown)> {
    weights.validate()?;
    let num_scales = out.target_inv_depths.len();
    if num_scales != 4 {
        return Err(Error::InvalidArgument(format!(
            "expected 4 depth scales, got {num_scales}"
        )));
    }
    let ns = out.source_images.len();
    if ns == 0 || out.source_inv_depths.len() != ns || out.poses_t_to_s.len() != ns {
        return Err(Error::InvalidArgument("source images/depths/poses count mismatch".into()));
    }
    if out.source_inv_depths.iter().any(|d| d.len() != num_scales) {
        return Err(Error::InvalidArgument("every source needs 4 depth scales".into()));
    }
    let tshape = out.target_image.shape();
    if tshape.len() != 3 {
        return Err(Error::Shape(format!("target image must be (C, H, W), got {tshape:?}")));
    }
    let (h, w) = (tshape[1], tshape[2]);

    let mut lp_sum = Tensor::scalar(S::zero());
    let mut lgc_sum = Tensor::scalar(S::zero());
    let mut ls_sum = Tensor::scalar(S::zero());
    for scale in 0..num_scales {
        let inv_t = nn::upsample_bilinear(&out.target_inv_depths[scale], h, w)?.reshape(&[h, w])?;
        let depth_t = inv_t.reciprocal();
        let mut pmaps = Vec::with_capacity(ns);
        let mut pmasks = Vec::with_capacity(ns);
        let mut gmaps = Vec::with_capacity(ns);
        let mut gmasks = Vec::with_capacity(ns);
        for src in 0..ns {
            let pose = &out.poses_t_to_s[src];
            let (grid, validity) = geometry::reprojection_grid(&depth_t, pose, &out.intrinsics)?;
            let (synth, mask) = geometry::synthesize_view(&out.source_images[src], &grid, &validity)?;
            pmaps.push(photometric_error(&out.target_image, &synth, weights.ssim_weight)?);
            pmasks.push(mask);

            let inv_s =
                nn::upsample_bilinear(&out.source_inv_depths[src][scale], h, w)?.reshape(&[h, w])?;
            let depth_s = inv_s.reciprocal();
            let (d_proj, d_interp, gmask) =
                geometry::project_depth_for_gc(&depth_t, &depth_s, pose, &out.intrinsics)?;
            gmaps.push(geometric_consistency_map(&d_proj, &d_interp)?);
            gmasks.push(gmask);
        }
        lp_sum = lp_sum.add(&masked_min_mean(&pmaps, &pmasks)?)?;
        lgc_sum = lgc_sum.add(&masked_min_mean(&gmaps, &gmasks)?)?;
        ls_sum = ls_sum.add(&smoothness_loss(&out.target_image, &inv_t)?)?;
    }
    let inv_n = 1.0 / num_scales as f64;
    let lp = lp_sum.mul_scalar(inv_n);
    let lgc = lgc_sum.mul_scalar(inv_n);
    let ls = ls_sum.mul_scalar(inv_n);
    let lr = if out.gammas.is_empty() {
        Tensor::scalar(S::zero())
    } else {
        polarization_reg(&out.gammas, weights.alpha, out.gamma_mean_mode)?
    };
    let total = lp
        .add(&lgc.mul_scalar(weights.lambda1))?
        .add(&ls.mul_scalar(weights.lambda2))?
        .add(&lr.mul_scalar(weights.lambda3))?;
    total.check_finite("total loss")?;
    let breakdown = LossBreakdown {
        total: total.item().as_f64(),
        photometric: lp.item().as_f64(),
        geometric: lgc.item().as_f64(),
        smoothness: ls.item().as_f64(),
        polarization: lr.item().as_f64(),
    };
    Ok((total, breakdown))
}
