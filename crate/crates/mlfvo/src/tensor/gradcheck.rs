//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Relative error with an absolute floor of 1, so near-zero gradients are
/// compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check the reverse-mode gradient of a scalar-valued composite `f` against
/// central finite differences, probing up to `max_coords` coordinates per
/// parameter (all coordinates when the parameter is small enough).
///
/// `params` must be the exact leaf tensors `f` consumes, in order; the
/// closure is re-invoked with perturbed copies for each probe.
pub fn grad_check<S: Element>(
    f: &dyn Fn(&[Tensor<S>]) -> Result<Tensor<S>>,
    params: &[(String, Tensor<S>)],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let tensors: Vec<Tensor<S>> = params.iter().map(|(_, t)| t.clone()).collect();
    for t in &tensors {
        t.clear_grad();
    }
    let out = f(&tensors)?;
    if out.len() != 1 {
        return Err(Error::InvalidArgument("grad_check target must be scalar".into()));
    }
    if !out.item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    out.backward()?;
    let analytic: Vec<Vec<S>> = tensors
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![S::zero(); t.len()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_param = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut worst: f64 = 0.0;
        for &ci in &coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut vals = tensor.values().to_vec();
                vals[ci] = vals[ci] + S::fp(delta);
                let mut probe = tensors.clone();
                probe[pi] = Tensor::param(tensor.shape(), vals)?;
                let y = f(&probe)?;
                let v = y.item().as_f64();
                if !v.is_finite() {
                    return Err(Error::NonFinite("grad_check probe".into()));
                }
                Ok(v)
            };
            let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic[pi][ci].as_f64();
            worst = worst.max(rel_err(a, fd));
        }
        overall = overall.max(worst);
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst,
            coords_checked: coords.len(),
        });
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: overall,
    })
}
