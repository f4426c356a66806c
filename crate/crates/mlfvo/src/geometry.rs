//! Camera model, SE(3) algebra, and the differentiable reprojection
//! machinery behind view synthesis.
//!
//! Pixel convention: pixel centers sit at integer coordinates, so the
//! homogeneous pixel is (u, v, 1). Geometry consumes depth; the networks
//! emit inverse depth and the conversion lives at the module boundary.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::tensor::{nn, Element, Tensor};

/// Angle below which Rodrigues / log maps switch to series expansions.
const SMALL_ANGLE: f64 = 1e-8;

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidArgument(format!("focal lengths must be positive: {fx}, {fy}")));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(Error::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Intrinsics { fx, fy, cx, cy, width, height })
    }

    /// Intrinsics after resizing the image to `width` x `height`.
    pub fn scaled(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics::new(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)
    }
}

/// Compact rigid transform: axis-angle rotation (radians * unit axis) plus
/// translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6D {
    pub axis_angle: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose6D {
    pub fn identity() -> Self {
        Pose6D { axis_angle: Vector3::zeros(), translation: Vector3::zeros() }
    }

    pub fn new(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Pose6D { axis_angle, translation }
    }

    pub fn to_tensor<S: Element>(&self) -> Tensor<S> {
        let v: Vec<S> = self
            .axis_angle
            .iter()
            .chain(self.translation.iter())
            .map(|&x| S::fp(x))
            .collect();
        Tensor::from_vec(&[6], v).expect("finite pose")
    }

    pub fn from_tensor<S: Element>(t: &Tensor<S>) -> Result<Self> {
        if t.len() != 6 {
            return Err(Error::Shape(format!("pose tensor has shape {:?}", t.shape())));
        }
        let v: Vec<f64> = t.values().iter().map(|&x| x.as_f64()).collect();
        Ok(Pose6D {
            axis_angle: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        })
    }
}

/// Rigid transform as rotation matrix plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Orthogonality and determinant check at 1e-6.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).norm();
        if err > 1e-6 {
            return Err(Error::InvalidArgument(format!("rotation not orthogonal: drift {err:.2e}")));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "rotation determinant {} != 1",
                r.determinant()
            )));
        }
        Ok(())
    }
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues' rotation from an axis-angle vector, with a 2nd-order series
/// below the small-angle threshold.
pub fn rotation_from_axis_angle(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let wx = skew(w);
    if theta < SMALL_ANGLE {
        Matrix3::identity() + wx + wx * wx * 0.5
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Matrix3::identity() + wx * a + wx * wx * b
    }
}

/// Axis-angle from a rotation matrix, stable in the small-angle and near-pi
/// branches.
pub fn axis_angle_from_rotation(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let tr = r.trace();
    let cos_theta = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta < SMALL_ANGLE {
        // R ~ I + [w]x
        return Ok(Vector3::new(
            (r[(2, 1)] - r[(1, 2)]) / 2.0,
            (r[(0, 2)] - r[(2, 0)]) / 2.0,
            (r[(1, 0)] - r[(0, 1)]) / 2.0,
        ));
    }
    if (std::f64::consts::PI - theta).abs() < 1e-6 {
        // near pi: axis from the dominant column of R + I
        let m = r + Matrix3::identity();
        let cols = [m.column(0), m.column(1), m.column(2)];
        let (best, _) = cols
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.norm()))
            .fold((0, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        let axis_unnorm = cols[best].into_owned();
        let n = axis_unnorm.norm();
        if n < 1e-12 {
            return Err(Error::Degenerate("rotation log map near pi".into()));
        }
        let mut axis = axis_unnorm / n;
        // fix the sign using the skew-symmetric part
        let v = Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
        if axis.dot(&v) < 0.0 {
            axis = -axis;
        }
        return Ok(axis * theta);
    }
    let factor = theta / (2.0 * theta.sin());
    Ok(Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) * factor)
}

pub fn pose6d_to_se3(p: &Pose6D) -> PoseSE3 {
    PoseSE3 {
        rotation: rotation_from_axis_angle(&p.axis_angle),
        translation: p.translation,
    }
}

pub fn se3_to_pose6d(t: &PoseSE3) -> Result<Pose6D> {
    t.validate()?;
    Ok(Pose6D {
        axis_angle: axis_angle_from_rotation(&t.rotation)?,
        translation: t.translation,
    })
}

/// Group composition A then... result maps x -> A.R (B.R x + B.t) + A.t.
pub fn se3_compose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    PoseSE3 {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn se3_invert(t: &PoseSE3) -> PoseSE3 {
    let rt = t.rotation.transpose();
    PoseSE3 { rotation: rt, translation: -(rt * t.translation) }
}

/// Rotation matrix plus its three partial derivatives w.r.t. the axis-angle
/// coordinates (exact, with the small-angle limit dR/dw_i = [e_i]x).
fn rotation_and_jacobians(w: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let r = rotation_from_axis_angle(w);
    let theta2 = w.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if theta2.sqrt() < SMALL_ANGLE {
        return (r, [skew(&basis[0]), skew(&basis[1]), skew(&basis[2])]);
    }
    let mut jac = [Matrix3::zeros(); 3];
    for i in 0..3 {
        let ei = basis[i];
        let v = w.cross(&((Matrix3::identity() - r) * ei));
        jac[i] = (skew(w) * w[i] + skew(&v)) * (1.0 / theta2) * r;
    }
    (r, jac)
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("expected at least 2-D map, got {shape:?}")));
    }
    let lead: usize = shape[..shape.len() - 2].iter().product();
    if lead != 1 {
        return Err(Error::Shape(format!("expected singleton leading dims, got {shape:?}")));
    }
    Ok((shape[shape.len() - 2], shape[shape.len() - 1]))
}

/// Reproject every target pixel through `depth` and the relative pose
/// `T_t->s` (axis-angle + translation as a 6-tensor) into the source view.
///
/// Returns a (3, H, W) tensor holding source-pixel x, y and projected depth
/// per target pixel, plus a validity mask (positive projected depth and
/// in-bounds coordinates). Differentiable w.r.t. depth and pose; invalid
/// pixels carry coordinates -1 and zero gradient.
pub fn reprojection_grid<S: Element>(
    depth: &Tensor<S>,
    pose_t_to_s: &Tensor<S>,
    k: &Intrinsics,
) -> Result<(Tensor<S>, Vec<bool>)> {
    let (h, w) = spatial_dims(depth.shape())?;
    if pose_t_to_s.len() != 6 {
        return Err(Error::Shape(format!(
            "pose tensor has shape {:?}, expected 6 values",
            pose_t_to_s.shape()
        )));
    }
    pose_t_to_s.check_finite("reprojection pose")?;
    if depth.values().iter().any(|&d| d <= S::zero()) {
        return Err(Error::InvalidArgument("reprojection_grid requires strictly positive depth".into()));
    }
    let pv: Vec<f64> = pose_t_to_s.values().iter().map(|&x| x.as_f64()).collect();
    let omega = Vector3::new(pv[0], pv[1], pv[2]);
    let t = Vector3::new(pv[3], pv[4], pv[5]);
    let (rot, drot) = rotation_and_jacobians(&omega);

    let np = h * w;
    let mut out = vec![S::zero(); 3 * np];
    let mut mask = vec![false; np];
    let mut pts = vec![[0.0f64; 3]; np]; // camera-frame points in the source view
    let mut rays = vec![[0.0f64; 3]; np];
    let z_eps = 1e-9;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let ray = Vector3::new(
                (x as f64 - k.cx) / k.fx,
                (y as f64 - k.cy) / k.fy,
                1.0,
            );
            let d = depth.values()[p].as_f64();
            let xp = rot * (ray * d) + t;
            rays[p] = [ray.x, ray.y, ray.z];
            pts[p] = [xp.x, xp.y, xp.z];
            if xp.z <= z_eps {
                out[p] = S::fp(-1.0);
                out[np + p] = S::fp(-1.0);
                out[2 * np + p] = S::fp(xp.z);
                continue;
            }
            // snap sub-1e-6 float noise at the borders so an exact identity
            // warp keeps boundary pixels valid
            let snap = |c: f64, max: f64| -> f64 {
                if c < 0.0 && c >= -1e-6 {
                    0.0
                } else if c > max && c <= max + 1e-6 {
                    max
                } else {
                    c
                }
            };
            let u = snap(k.fx * xp.x / xp.z + k.cx, (k.width - 1) as f64);
            let v = snap(k.fy * xp.y / xp.z + k.cy, (k.height - 1) as f64);
            out[p] = S::fp(u);
            out[np + p] = S::fp(v);
            out[2 * np + p] = S::fp(xp.z);
            mask[p] = u >= 0.0 && u <= (k.width - 1) as f64 && v >= 0.0 && v <= (k.height - 1) as f64;
        }
    }

    let depth_t = depth.clone();
    let pose_t = pose_t_to_s.clone();
    let (fx, fy) = (k.fx, k.fy);
    let grid = Tensor::from_op(
        vec![3, h, w],
        out,
        vec![depth.clone(), pose_t_to_s.clone()],
        move |g| {
            let want_depth = depth_t.requires_grad();
            let want_pose = pose_t.requires_grad();
            let mut dd = vec![0.0f64; np];
            let mut dp = [0.0f64; 6];
            for p in 0..np {
                let [xx, yy, zz] = pts[p];
                if zz <= z_eps {
                    continue;
                }
                let gu = g[p].as_f64();
                let gv = g[np + p].as_f64();
                let gz = g[2 * np + p].as_f64();
                // d(out)/d(X') rows for u, v, z
                let du = Vector3::new(fx / zz, 0.0, -fx * xx / (zz * zz));
                let dv = Vector3::new(0.0, fy / zz, -fy * yy / (zz * zz));
                let gx = du * gu + dv * gv + Vector3::new(0.0, 0.0, gz);
                let ray = Vector3::new(rays[p][0], rays[p][1], rays[p][2]);
                if want_depth {
                    dd[p] = gx.dot(&(rot * ray));
                }
                if want_pose {
                    let d = depth_t.values()[p].as_f64();
                    let x0 = ray * d;
                    for i in 0..3 {
                        dp[i] += gx.dot(&(drot[i] * x0));
                        dp[3 + i] += gx[i];
                    }
                }
            }
            if want_depth {
                let delta: Vec<S> = dd.iter().map(|&x| S::fp(x)).collect();
                crate::tensor::accum(&depth_t, &delta);
            }
            if want_pose {
                let delta: Vec<S> = dp.iter().map(|&x| S::fp(x)).collect();
                crate::tensor::accum(&pose_t, &delta);
            }
        },
    );
    Ok((grid, mask))
}

/// Inverse of a 6-D pose (axis-angle + translation), differentiable.
pub fn pose6d_invert<S: Element>(pose: &Tensor<S>) -> Result<Tensor<S>> {
    if pose.len() != 6 {
        return Err(Error::Shape(format!("pose tensor has shape {:?}", pose.shape())));
    }
    let pv: Vec<f64> = pose.values().iter().map(|&x| x.as_f64()).collect();
    let omega = Vector3::new(pv[0], pv[1], pv[2]);
    let t = Vector3::new(pv[3], pv[4], pv[5]);
    let (rot, drot) = rotation_and_jacobians(&omega);
    let t_inv = -(rot.transpose() * t);
    let vals: Vec<S> = [-pv[0], -pv[1], -pv[2], t_inv.x, t_inv.y, t_inv.z]
        .iter()
        .map(|&x| S::fp(x))
        .collect();
    let p = pose.clone();
    Ok(Tensor::from_op(vec![6], vals, vec![pose.clone()], move |g| {
        let gt = Vector3::new(g[3].as_f64(), g[4].as_f64(), g[5].as_f64());
        let mut dp = [0.0f64; 6];
        for i in 0..3 {
            dp[i] = -g[i].as_f64() - gt.dot(&(drot[i].transpose() * t));
            // d t_inv / d t = -R^T, so grad_t = -R * g_t
        }
        let dt = -(rot * gt);
        dp[3] = dt.x;
        dp[4] = dt.y;
        dp[5] = dt.z;
        let delta: Vec<S> = dp.iter().map(|&x| S::fp(x)).collect();
        crate::tensor::accum(&p, &delta);
    }))
}

/// Sample the source image at a reprojection grid, producing the synthetic
/// target view and the combined validity mask.
pub fn synthesize_view<S: Element>(
    source_img: &Tensor<S>,
    grid: &Tensor<S>,
    validity: &[bool],
) -> Result<(Tensor<S>, Vec<bool>)> {
    let coords = grid.narrow(0, 0, 2)?;
    let (img, sample_mask) = nn::bilinear_sample(source_img, &coords)?;
    if sample_mask.len() != validity.len() {
        return Err(Error::Shape("validity mask size mismatch".into()));
    }
    let mask: Vec<bool> = sample_mask.iter().zip(validity).map(|(&a, &b)| a && b).collect();
    Ok((img, mask))
}

/// Projected target depth and interpolated source depth for the geometric
/// consistency loss.
pub fn project_depth_for_gc<S: Element>(
    depth_t: &Tensor<S>,
    depth_s: &Tensor<S>,
    pose_t_to_s: &Tensor<S>,
    k: &Intrinsics,
) -> Result<(Tensor<S>, Tensor<S>, Vec<bool>)> {
    let (h, w) = spatial_dims(depth_t.shape())?;
    if depth_s.values().iter().any(|&d| d <= S::zero()) {
        return Err(Error::InvalidArgument("project_depth_for_gc requires positive source depth".into()));
    }
    let (grid, validity) = reprojection_grid(depth_t, pose_t_to_s, k)?;
    let d_proj = grid.narrow(0, 2, 1)?.reshape(&[h, w])?;
    let coords = grid.narrow(0, 0, 2)?;
    let source = depth_s.reshape(&[1, h, w])?;
    let (d_interp, sample_mask) = nn::bilinear_sample(&source, &coords)?;
    let d_interp = d_interp.reshape(&[h, w])?;
    let mask: Vec<bool> = sample_mask.iter().zip(&validity).map(|(&a, &b)| a && b).collect();
    Ok((d_proj, d_interp, mask))
}

/// 0/1 constant tensor from a boolean mask.
pub fn mask_to_tensor<S: Element>(mask: &[bool], shape: &[usize]) -> Tensor<S> {
    let vals: Vec<S> = mask.iter().map(|&m| if m { S::one() } else { S::zero() }).collect();
    Tensor::from_vec(shape, vals).expect("mask tensor")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64) -> Pose6D {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.gen_range(0.0..max_angle);
        let t = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        Pose6D::new(axis * angle, t)
    }

    #[test]
    fn rodrigues_identity_and_quarter_turn() {
        let p = Pose6D::new(Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0));
        let se3 = pose6d_to_se3(&p);
        assert!((se3.rotation - Matrix3::identity()).norm() < 1e-12);
        assert_eq!(se3.translation, p.translation);

        let q = Pose6D::new(Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2), Vector3::zeros());
        let r = pose6d_to_se3(&q).rotation;
        // quarter turn about z maps x-axis to y-axis
        let mapped = r * Vector3::x();
        assert!((mapped - Vector3::y()).norm() < 1e-9);
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_pose(&mut rng, 3.0);
            let back = se3_to_pose6d(&pose6d_to_se3(&p)).unwrap();
            assert!((back.axis_angle - p.axis_angle).norm() < 1e-6, "{p:?} vs {back:?}");
            assert!((back.translation - p.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn log_near_pi() {
        let p = Pose6D::new(Vector3::new(0.0, 0.0, std::f64::consts::PI - 1e-9), Vector3::zeros());
        let back = se3_to_pose6d(&pose6d_to_se3(&p)).unwrap();
        assert!((back.axis_angle.norm() - (std::f64::consts::PI - 1e-9)).abs() < 1e-6);
        assert!(back.axis_angle.z > 0.0);
    }

    #[test]
    fn compose_invert_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let t = pose6d_to_se3(&random_pose(&mut rng, 3.0));
            let id = se3_compose(&t, &se3_invert(&t));
            assert!((id.rotation - Matrix3::identity()).norm() < 1e-9);
            assert!(id.translation.norm() < 1e-9);

            let i = PoseSE3::identity();
            let same = se3_compose(&i, &t);
            assert!((same.rotation - t.rotation).norm() < 1e-12);
        }
    }

    #[test]
    fn compose_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = pose6d_to_se3(&random_pose(&mut rng, 2.0));
            let b = pose6d_to_se3(&random_pose(&mut rng, 2.0));
            let c = pose6d_to_se3(&random_pose(&mut rng, 2.0));
            let l = se3_compose(&se3_compose(&a, &b), &c);
            let r = se3_compose(&a, &se3_compose(&b, &c));
            assert!((l.rotation - r.rotation).norm() < 1e-9);
            assert!((l.translation - r.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn long_composition_chain_stays_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut acc = PoseSE3::identity();
        for _ in 0..100 {
            acc = se3_compose(&acc, &pose6d_to_se3(&random_pose(&mut rng, 0.5)));
        }
        let drift = (acc.rotation.transpose() * acc.rotation - Matrix3::identity()).norm();
        assert!(drift < 1e-6, "orthogonality drift {drift}");
    }

    fn test_intrinsics(w: usize, h: usize) -> Intrinsics {
        Intrinsics::new(0.8 * w as f64, 0.8 * w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)
            .unwrap()
    }

    #[test]
    fn identity_pose_gives_identity_grid() {
        let (h, w) = (6, 8);
        let k = test_intrinsics(w, h);
        let depth = Tensor::<f64>::full(&[1, 1, h, w], 2.5);
        let pose = Pose6D::identity().to_tensor();
        let (grid, mask) = reprojection_grid(&depth, &pose, &k).unwrap();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                assert_eq!(grid.values()[p], x as f64);
                assert_eq!(grid.values()[h * w + p], y as f64);
                assert_eq!(grid.values()[2 * h * w + p], 2.5);
                assert!(mask[p]);
            }
        }
    }

    #[test]
    fn z_translation_against_plane() {
        let (h, w) = (5, 7);
        let k = test_intrinsics(w, h);
        let d = 4.0;
        let delta = 0.5;
        let depth = Tensor::<f64>::full(&[1, 1, h, w], d);
        // moving the camera toward the plane by delta puts the plane at d - delta
        let pose = Pose6D::new(Vector3::zeros(), Vector3::new(0.0, 0.0, -delta)).to_tensor();
        let (grid, _) = reprojection_grid(&depth, &pose, &k).unwrap();
        for p in 0..h * w {
            assert!((grid.values()[2 * h * w + p] - (d - delta)).abs() < 1e-12);
        }
    }

    #[test]
    fn reprojection_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (6, 9);
        let k = test_intrinsics(w, h);
        let dvals: Vec<f64> = (0..h * w).map(|_| rng.gen_range(2.0..5.0)).collect();
        let depth = Tensor::from_vec(&[1, 1, h, w], dvals.clone()).unwrap();
        let pose = random_pose(&mut rng, 0.2);
        let (grid, _) = reprojection_grid(&depth, &pose.to_tensor(), &k).unwrap();
        // independent plain-scalar projection
        let r = rotation_from_axis_angle(&pose.axis_angle);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let px = (x as f64 - k.cx) / k.fx * dvals[p];
                let py = (y as f64 - k.cy) / k.fy * dvals[p];
                let pz = dvals[p];
                let q = r * Vector3::new(px, py, pz) + pose.translation;
                if q.z <= 1e-9 {
                    continue;
                }
                let u = k.fx * q.x / q.z + k.cx;
                let v = k.fy * q.y / q.z + k.cy;
                assert!((grid.values()[p] - u).abs() < 1e-5);
                assert!((grid.values()[h * w + p] - v).abs() < 1e-5);
                assert!((grid.values()[2 * h * w + p] - q.z).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gc_projection_identity_pose() {
        let (h, w) = (4, 6);
        let k = test_intrinsics(w, h);
        let depth = Tensor::<f64>::full(&[1, 1, h, w], 3.0);
        let pose = Pose6D::identity().to_tensor();
        let (d_proj, d_interp, mask) =
            project_depth_for_gc(&depth, &depth.reshape(&[h, w]).unwrap(), &pose, &k).unwrap();
        for p in 0..h * w {
            assert!(mask[p]);
            assert!((d_proj.values()[p] - d_interp.values()[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn reprojection_pose_gradients_match_fd() {
        use crate::tensor::gradcheck::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w) = (5, 7);
        let k = test_intrinsics(w, h);
        let dvals: Vec<f64> = (0..h * w).map(|_| rng.gen_range(3.0..4.0)).collect();
        let depth = Tensor::param(&[1, 1, h, w], dvals).unwrap();
        let pose = random_pose(&mut rng, 0.05);
        let pose_t = Tensor::param(&[6], pose.to_tensor::<f64>().values().to_vec()).unwrap();
        // weighted sum of the grid keeps the objective scalar and generic in
        // all three output channels
        let wvals: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights = Tensor::from_vec(&[3, h, w], wvals).unwrap();
        let k2 = k;
        let g = move |p: &[Tensor<f64>]| {
            let (grid, _) = reprojection_grid(&p[0], &p[1], &k2)?;
            grid.mul(&weights).map(|t| t.sum_all())
        };
        let params = vec![("depth".to_string(), depth), ("pose".to_string(), pose_t)];
        let report = grad_check(&g, &params, 1e-6, 20, 7).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn pose_invert_gradients_match_fd() {
        use crate::tensor::gradcheck::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pose = random_pose(&mut rng, 0.8);
        let pose_t = Tensor::param(&[6], pose.to_tensor::<f64>().values().to_vec()).unwrap();
        let wvals: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights = Tensor::from_vec(&[6], wvals).unwrap();
        let g = move |p: &[Tensor<f64>]| pose6d_invert(&p[0])?.mul(&weights).map(|t| t.sum_all());
        let report = grad_check(&g, &[("pose".to_string(), pose_t.clone())], 1e-6, 6, 9).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");

        // inversion consistency against the SE(3) route
        let inv = pose6d_invert(&pose_t).unwrap();
        let se3_inv = se3_invert(&pose6d_to_se3(&pose));
        let expect = se3_to_pose6d(&se3_inv).unwrap();
        let got = Pose6D::from_tensor(&inv).unwrap();
        assert!((got.axis_angle - expect.axis_angle).norm() < 1e-9);
        assert!((got.translation - expect.translation).norm() < 1e-9);
    }

    #[test]
    fn warp_consistency_on_plane() {
        // synthesize t from s with T, then s from t with T^-1; a smooth
        // texture on a fronto-parallel plane round-trips
        let (h, w) = (16, 20);
        let k = test_intrinsics(w, h);
        let tex = |x: f64, y: f64| 0.5 + 0.3 * (0.25 * x).sin() * (0.3 * y).cos();
        let img_t: Vec<f64> = (0..h * w)
            .map(|p| tex((p % w) as f64, (p / w) as f64))
            .collect();
        let img_t = Tensor::from_vec(&[1, h, w], img_t).unwrap();
        let d = 5.0;
        let depth_t = Tensor::<f64>::full(&[1, 1, h, w], d);
        let shift = Pose6D::new(Vector3::zeros(), Vector3::new(0.15, 0.0, 0.0));
        // render the source view exactly: the plane shifts by t_x in camera space
        let img_s: Vec<f64> = (0..h * w)
            .map(|p| {
                let x = (p % w) as f64;
                let y = (p / w) as f64;
                // source pixel (x, y) sees world point at x' where
                // u_s = fx*(X + tx)/d + cx
                let wx = (x - k.cx) / k.fx * d - shift.translation.x;
                let wy = (y - k.cy) / k.fy * d;
                tex(wx / d * k.fx + k.cx, wy / d * k.fy + k.cy)
            })
            .collect();
        let img_s = Tensor::from_vec(&[1, h, w], img_s).unwrap();

        let (grid, validity) = reprojection_grid(&depth_t, &shift.to_tensor(), &k).unwrap();
        let (synth, mask) = synthesize_view(&img_s, &grid, &validity).unwrap();
        let mut worst = 0.0f64;
        for p in 0..h * w {
            if mask[p] {
                worst = worst.max((synth.values()[p] - img_t.values()[p]).abs());
            }
        }
        assert!(worst < 1e-2, "round-trip error {worst}");
        assert!(mask.iter().filter(|&&m| m).count() > h * w / 2);
    }

    #[test]
    fn all_invalid_coords_give_zero_image() {
        let (h, w) = (4, 4);
        let src = Tensor::<f64>::full(&[1, h, w], 1.0);
        let grid = Tensor::from_vec(
            &[3, h, w],
            (0..3 * h * w)
                .map(|i| if i < 2 * h * w { -5.0 } else { 1.0 })
                .collect(),
        )
        .unwrap();
        let validity = vec![false; h * w];
        let (img, mask) = synthesize_view(&src, &grid, &validity).unwrap();
        assert!(img.values().iter().all(|&v| v == 0.0));
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn nonpositive_depth_rejected() {
        let k = test_intrinsics(4, 4);
        let depth = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -0.5, 2.0, 3.0]).unwrap();
        let pose = Pose6D::identity().to_tensor::<f64>();
        assert!(reprojection_grid(&depth, &pose, &k).is_err());
    }

    #[test]
    fn intrinsics_validation_and_scaling() {
        assert!(Intrinsics::new(-1.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(10.0, 10.0, 5.0, 1.0, 4, 4).is_err());
        let k = Intrinsics::new(100.0, 120.0, 31.5, 15.5, 64, 32).unwrap();
        let half = k.scaled(32, 16).unwrap();
        assert_eq!(half.fx, 50.0);
        assert_eq!(half.fy, 60.0);
        assert_eq!(half.cx, 15.75);
        assert_eq!(half.cy, 7.75);
    }
}
