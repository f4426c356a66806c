//! Trajectory I/O, alignment, and odometry error metrics.
//!
//! Poses are camera-to-world. Relative metrics follow the standard odometry
//! benchmark: sub-sequences of 100..800 m starting every 10 frames.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{se3_compose, se3_invert, PoseSE3};

pub const SUBSEQ_LENGTHS_M: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
pub const SUBSEQ_START_STEP: usize = 10;

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub poses: Vec<PoseSE3>,
    pub indices: Vec<usize>,
}

impl Trajectory {
    pub fn from_poses(poses: Vec<PoseSE3>) -> Self {
        let indices = (0..poses.len()).collect();
        Trajectory { poses, indices }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }
}

/// Similarity transform mapping predicted positions onto ground truth:
/// p' = scale * rotation * p + translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Alignment {
    pub fn identity() -> Self {
        Alignment { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Transform a full pose: rotations get the alignment rotation only.
    pub fn apply_pose(&self, p: &PoseSE3) -> PoseSE3 {
        PoseSE3 { rotation: self.rotation * p.rotation, translation: self.apply(&p.translation) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthError {
    pub length_m: f64,
    pub t_rel_percent: f64,
    pub r_rel_deg_per_100m: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub t_rel_percent: f64,
    pub r_rel_deg_per_100m: f64,
    pub ate_rmse_m: f64,
    pub per_length: Vec<LengthError>,
    pub alignment: Alignment,
}

impl MetricsReport {
    /// Per-length and aggregate rows as CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("length_m,t_rel_percent,r_rel_deg_per_100m,count\n");
        for row in &self.per_length {
            writeln!(
                s,
                "{},{},{},{}",
                row.length_m, row.t_rel_percent, row.r_rel_deg_per_100m, row.count
            )
            .unwrap();
        }
        writeln!(s, "overall,{},{},", self.t_rel_percent, self.r_rel_deg_per_100m).unwrap();
        writeln!(s, "ate_rmse_m,{},,", self.ate_rmse_m).unwrap();
        s
    }
}

/// Parse benchmark pose text: one pose per nonempty line, 12 reals forming
/// a row-major 3x4 [R|t]. Rotations off-orthogonal beyond 1e-3 are replaced
/// by the nearest rotation (with a warning on stderr).
pub fn parse_kitti_poses_str(text: &str, origin: &str) -> Result<Trajectory> {
    let mut poses = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 12 {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: ln + 1,
                msg: format!("expected 12 values, found {}", toks.len()),
            });
        }
        let mut v = [0.0f64; 12];
        for (i, t) in toks.iter().enumerate() {
            v[i] = t.parse::<f64>().map_err(|_| Error::Parse {
                path: origin.to_string(),
                line: ln + 1,
                msg: format!("not a number: {t:?}"),
            })?;
        }
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        let drift = (r.transpose() * r - Matrix3::identity()).norm();
        let r = if drift > 1e-3 {
            eprintln!("warning: {origin}:{} rotation off-orthogonal by {drift:.2e}, re-orthogonalizing", ln + 1);
            nearest_rotation(&r)?
        } else {
            r
        };
        poses.push(PoseSE3 { rotation: r, translation: t });
    }
    Ok(Trajectory::from_poses(poses))
}

pub fn parse_kitti_poses(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read poses {}: {e}", path.display())))?;
    parse_kitti_poses_str(&text, &path.display().to_string())
}

/// Shortest-round-trip float formatting keeps write -> parse lossless.
pub fn format_kitti_poses(traj: &Trajectory) -> String {
    let mut s = String::new();
    for p in &traj.poses {
        let r = &p.rotation;
        let t = &p.translation;
        writeln!(
            s,
            "{} {} {} {} {} {} {} {} {} {} {} {}",
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z
        )
        .unwrap();
    }
    s
}

pub fn write_kitti_poses(traj: &Trajectory, path: &Path) -> Result<()> {
    std::fs::write(path, format_kitti_poses(traj))
        .map_err(|e| Error::Data(format!("cannot write poses {}: {e}", path.display())))
}

/// Closest rotation matrix in Frobenius norm, via SVD with sign fix.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numerical("svd failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Numerical("svd failed".into()))?;
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    Ok(u * s * vt)
}

/// Chain per-step relative poses T_t->t+1 into camera-to-world poses:
/// P_0 = I, P_{t+1} = P_t * T_{t->t+1}^-1.
pub fn integrate_trajectory(relatives: &[PoseSE3]) -> Trajectory {
    let mut poses = Vec::with_capacity(relatives.len() + 1);
    poses.push(PoseSE3::identity());
    for rel in relatives {
        let next = se3_compose(poses.last().unwrap(), &se3_invert(rel));
        poses.push(next);
    }
    Trajectory::from_poses(poses)
}

/// Least-squares similarity (or rigid when `with_scale` is off) mapping
/// `pred` onto `gt`.
pub fn umeyama_align(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Alignment> {
    let n = pred.len();
    if n != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "point count mismatch: {n} vs {}",
            gt.len()
        )));
    }
    if n < 3 {
        return Err(Error::Degenerate(format!("alignment needs >= 3 points, got {n}")));
    }
    let mean_p: Vector3<f64> = pred.iter().sum::<Vector3<f64>>() / n as f64;
    let mean_g: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let pc = p - mean_p;
        let gc = g - mean_g;
        cov += gc * pc.transpose();
        var_p += pc.norm_squared();
    }
    cov /= n as f64;
    var_p /= n as f64;
    if var_p < 1e-12 {
        return Err(Error::Degenerate("coincident points, alignment undefined".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numerical("svd failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Numerical("svd failed".into()))?;
    let d = svd.singular_values;
    // collinear points leave the rotation about the line unconstrained
    if d[1] <= 1e-9 * d[0].max(1e-300) {
        return Err(Error::Degenerate("collinear points, alignment underdetermined".into()));
    }
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * vt;
    let scale = if with_scale {
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_p
    } else {
        1.0
    };
    if scale <= 0.0 {
        return Err(Error::Degenerate(format!("non-positive alignment scale {scale}")));
    }
    let translation = mean_g - scale * (rotation * mean_p);
    Ok(Alignment { scale, rotation, translation })
}

fn rotation_angle_deg(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Accumulated path length of the ground truth at each frame.
fn cumulative_distances(traj: &Trajectory) -> Vec<f64> {
    let mut out = Vec::with_capacity(traj.len());
    let mut acc = 0.0;
    for i in 0..traj.len() {
        if i > 0 {
            acc += (traj.poses[i].translation - traj.poses[i - 1].translation).norm();
        }
        out.push(acc);
    }
    out
}

/// Average relative translational (%) and rotational (deg/100m) errors over
/// all sub-sequences, plus the per-length table.
pub fn kitti_relative_errors(
    gt: &Trajectory,
    pred: &Trajectory,
) -> Result<(f64, f64, Vec<LengthError>)> {
    if gt.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory length mismatch: {} vs {}",
            gt.len(),
            pred.len()
        )));
    }
    let dist = cumulative_distances(gt);
    let mut per_length: Vec<(f64, f64, f64, usize)> =
        SUBSEQ_LENGTHS_M.iter().map(|&l| (l, 0.0, 0.0, 0)).collect();
    let mut sum_t = 0.0;
    let mut sum_r = 0.0;
    let mut count = 0usize;
    for start in (0..gt.len()).step_by(SUBSEQ_START_STEP) {
        for (li, &length) in SUBSEQ_LENGTHS_M.iter().enumerate() {
            // first frame whose accumulated distance reaches the target
            let target = dist[start] + length;
            let end = match dist[start..].iter().position(|&d| d >= target) {
                Some(off) => start + off,
                None => break,
            };
            let gt_rel = se3_compose(&se3_invert(&gt.poses[start]), &gt.poses[end]);
            let pred_rel = se3_compose(&se3_invert(&pred.poses[start]), &pred.poses[end]);
            let e = se3_compose(&se3_invert(&gt_rel), &pred_rel);
            let t_err = e.translation.norm() / length * 100.0;
            let r_err = rotation_angle_deg(&e.rotation) / length * 100.0;
            per_length[li].1 += t_err;
            per_length[li].2 += r_err;
            per_length[li].3 += 1;
            sum_t += t_err;
            sum_r += r_err;
            count += 1;
        }
    }
    let table: Vec<LengthError> = per_length
        .into_iter()
        .filter(|&(_, _, _, c)| c > 0)
        .map(|(l, t, r, c)| LengthError {
            length_m: l,
            t_rel_percent: t / c as f64,
            r_rel_deg_per_100m: r / c as f64,
            count: c,
        })
        .collect();
    if count == 0 {
        return Ok((0.0, 0.0, table));
    }
    Ok((sum_t / count as f64, sum_r / count as f64, table))
}

/// RMSE of aligned positions.
pub fn ate_rmse(gt: &Trajectory, pred: &Trajectory, align: &Alignment) -> Result<f64> {
    if gt.len() != pred.len() || gt.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need matching trajectories of >= 3 frames, got {} vs {}",
            gt.len(),
            pred.len()
        )));
    }
    let mut sum = 0.0;
    for (g, p) in gt.poses.iter().zip(&pred.poses) {
        sum += (g.translation - align.apply(&p.translation)).norm_squared();
    }
    Ok((sum / gt.len() as f64).sqrt())
}

/// Full report: Sim(3)-align, then absolute RMSE and relative errors.
pub fn evaluate(gt: &Trajectory, pred: &Trajectory) -> Result<MetricsReport> {
    evaluate_with(gt, pred, true)
}

/// As `evaluate`, with the alignment scale optionally pinned to 1.
pub fn evaluate_with(gt: &Trajectory, pred: &Trajectory, with_scale: bool) -> Result<MetricsReport> {
    let alignment = umeyama_align(&pred.positions(), &gt.positions(), with_scale)?;
    let aligned = Trajectory::from_poses(pred.poses.iter().map(|p| alignment.apply_pose(p)).collect());
    let ate = ate_rmse(gt, pred, &alignment)?;
    let (t_rel, r_rel, per_length) = kitti_relative_errors(gt, &aligned)?;
    Ok(MetricsReport {
        t_rel_percent: t_rel,
        r_rel_deg_per_100m: r_rel,
        ate_rmse_m: ate,
        per_length,
        alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose6d_to_se3, Pose6D};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_se3(rng: &mut ChaCha8Rng, max_angle: f64, max_t: f64) -> PoseSE3 {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let t = Vector3::new(
            rng.gen_range(-max_t..=max_t),
            rng.gen_range(-max_t..=max_t),
            rng.gen_range(-max_t..=max_t),
        );
        pose6d_to_se3(&Pose6D::new(axis * rng.gen_range(0.0..max_angle), t))
    }

    #[test]
    fn parse_identity_line() {
        let traj = parse_kitti_poses_str("1 0 0 0 0 1 0 0 0 0 1 0", "test").unwrap();
        assert_eq!(traj.len(), 1);
        assert!((traj.poses[0].rotation - Matrix3::identity()).norm() < 1e-15);
        assert_eq!(traj.poses[0].translation, Vector3::zeros());
    }

    #[test]
    fn write_parse_roundtrip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let poses: Vec<PoseSE3> = (0..20).map(|_| random_se3(&mut rng, 3.0, 50.0)).collect();
        let traj = Trajectory::from_poses(poses);
        let text = format_kitti_poses(&traj);
        let back = parse_kitti_poses_str(&text, "roundtrip").unwrap();
        for (a, b) in traj.poses.iter().zip(&back.poses) {
            assert!((a.rotation - b.rotation).norm() < 1e-15);
            assert!((a.translation - b.translation).norm() < 1e-15);
        }
    }

    #[test]
    fn malformed_lines_are_rejected_with_line_numbers() {
        let err = parse_kitti_poses_str("1 0 0 0 0 1 0 0 0 0 1 0\n1 2 3", "bad").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("bad:2"), "{msg}");
        let err = parse_kitti_poses_str("1 0 0 x 0 1 0 0 0 0 1 0", "bad").unwrap_err();
        assert!(format!("{err}").contains("bad:1"));
    }

    #[test]
    fn off_orthogonal_rotation_is_repaired() {
        // rotation scaled by 1.01 is off-orthogonal beyond the 1e-3 gate
        let text = "1.01 0 0 5 0 1.01 0 6 0 0 1.01 7";
        let traj = parse_kitti_poses_str(text, "test").unwrap();
        let r = traj.poses[0].rotation;
        assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn integrate_identity_and_z_steps() {
        let ident = vec![PoseSE3::identity(); 5];
        let traj = integrate_trajectory(&ident);
        assert_eq!(traj.len(), 6);
        assert!(traj.poses.iter().all(|p| p.translation.norm() < 1e-15));

        // forward motion: each relative T_t->t+1 moves scene points by -delta z
        let step = PoseSE3 { rotation: Matrix3::identity(), translation: Vector3::new(0.0, 0.0, -2.0) };
        let traj = integrate_trajectory(&vec![step; 4]);
        for (k, p) in traj.poses.iter().enumerate() {
            assert!((p.translation - Vector3::new(0.0, 0.0, 2.0 * k as f64)).norm() < 1e-12);
        }
    }

    #[test]
    fn integrate_matches_matrix_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rels: Vec<PoseSE3> = (0..30).map(|_| random_se3(&mut rng, 0.5, 2.0)).collect();
        let traj = integrate_trajectory(&rels);
        let mut acc = PoseSE3::identity();
        for (k, rel) in rels.iter().enumerate() {
            acc = se3_compose(&acc, &se3_invert(rel));
            assert!((traj.poses[k + 1].rotation - acc.rotation).norm() < 1e-9);
            assert!((traj.poses[k + 1].translation - acc.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn umeyama_identity_and_apply_recover() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vector3<f64>> = (0..12)
            .map(|_| Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
            .collect();
        let a = umeyama_align(&pts, &pts, true).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-12);
        assert!((a.rotation - Matrix3::identity()).norm() < 1e-9);
        assert!(a.translation.norm() < 1e-9);

        // known similarity: s=2, quarter turn about z, t=(1,2,3)
        let r = pose6d_to_se3(&Pose6D::new(
            Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            Vector3::zeros(),
        ))
        .rotation;
        let t = Vector3::new(1.0, 2.0, 3.0);
        let moved: Vec<Vector3<f64>> = pts.iter().map(|p| 2.0 * (r * p) + t).collect();
        let a = umeyama_align(&pts, &moved, true).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-9);
        assert!((a.rotation - r).norm() < 1e-9);
        assert!((a.translation - t).norm() < 1e-9);
        for p in &pts {
            assert!((a.apply(p) - (2.0 * (r * p) + t)).norm() < 1e-9);
        }

        // rigid mode pins the scale
        let a = umeyama_align(&pts, &moved, false).unwrap();
        assert_eq!(a.scale, 1.0);
    }

    #[test]
    fn umeyama_rejects_degenerate_configurations() {
        let line: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(umeyama_align(&line, &line, true).is_err());
        let two = vec![Vector3::zeros(), Vector3::x()];
        assert!(umeyama_align(&two, &two, true).is_err());
        let same = vec![Vector3::x(); 5];
        assert!(umeyama_align(&same, &same, true).is_err());
    }

    fn straight_gt(n: usize) -> Trajectory {
        Trajectory::from_poses(
            (0..n)
                .map(|k| PoseSE3 {
                    rotation: Matrix3::identity(),
                    translation: Vector3::new(0.0, 0.0, k as f64),
                })
                .collect(),
        )
    }

    #[test]
    fn gt_vs_gt_gives_zero_errors() {
        let gt = straight_gt(900);
        let (t, r, table) = kitti_relative_errors(&gt, &gt).unwrap();
        assert_eq!(t, 0.0);
        assert_eq!(r, 0.0);
        assert_eq!(table.len(), 8);
        assert!(table.iter().all(|row| row.count > 0));
    }

    #[test]
    fn yaw_drift_fixture_gives_one_degree_per_100m() {
        let gt = straight_gt(900);
        let pred = Trajectory::from_poses(
            (0..900)
                .map(|k| {
                    let yaw = (k as f64 * 0.01f64).to_radians();
                    let r = pose6d_to_se3(&Pose6D::new(Vector3::new(0.0, yaw, 0.0), Vector3::zeros()))
                        .rotation;
                    PoseSE3 { rotation: r, translation: Vector3::new(0.0, 0.0, k as f64) }
                })
                .collect(),
        );
        let (_, r, table) = kitti_relative_errors(&gt, &pred).unwrap();
        assert!((r - 1.0).abs() < 1e-3, "r_rel {r}");
        for row in table {
            assert!((row.r_rel_deg_per_100m - 1.0).abs() < 1e-3, "{row:?}");
        }
    }

    /// Straightforward double-loop reference: no cumulative-distance reuse,
    /// fresh scan per (start, length).
    fn brute_force_relative_errors(gt: &Trajectory, pred: &Trajectory) -> (f64, f64) {
        let mut sum_t = 0.0;
        let mut sum_r = 0.0;
        let mut n = 0usize;
        for start in (0..gt.len()).step_by(10) {
            for &length in &[100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0] {
                let mut acc = 0.0;
                let mut end = None;
                for i in start..gt.len() {
                    if i > start {
                        acc += (gt.poses[i].translation - gt.poses[i - 1].translation).norm();
                    }
                    if acc >= length {
                        end = Some(i);
                        break;
                    }
                }
                let Some(end) = end else { break };
                let ge = se3_compose(&se3_invert(&gt.poses[start]), &gt.poses[end]);
                let pe = se3_compose(&se3_invert(&pred.poses[start]), &pred.poses[end]);
                let e = se3_compose(&se3_invert(&ge), &pe);
                sum_t += e.translation.norm() / length * 100.0;
                let c = ((e.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
                sum_r += c.acos().to_degrees() / length * 100.0;
                n += 1;
            }
        }
        if n == 0 {
            (0.0, 0.0)
        } else {
            (sum_t / n as f64, sum_r / n as f64)
        }
    }

    fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        let rels: Vec<PoseSE3> = (0..n).map(|_| random_se3(rng, 0.05, 6.0)).collect();
        integrate_trajectory(&rels)
    }

    #[test]
    fn matches_brute_force_reference_on_100_random_trajectories() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..100 {
            let gt = random_trajectory(&mut rng, 60);
            let mut pred = gt.clone();
            for p in &mut pred.poses {
                p.translation += Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                );
                p.rotation *= random_se3(&mut rng, 0.02, 0.0).rotation;
            }
            let (t, r, _) = kitti_relative_errors(&gt, &pred).unwrap();
            let (bt, br) = brute_force_relative_errors(&gt, &pred);
            assert!((t - bt).abs() < 1e-9, "trial {trial}: {t} vs {bt}");
            assert!((r - br).abs() < 1e-9, "trial {trial}: {r} vs {br}");
        }
    }

    #[test]
    fn relative_errors_invariant_to_global_transforms_of_pred() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_trajectory(&mut rng, 80);
        let mut pred = gt.clone();
        // rotation noise keeps relative angles away from acos's branch point,
        // where round-off would otherwise be amplified unboundedly
        for p in &mut pred.poses {
            p.translation += Vector3::new(rng.gen_range(-0.3..0.3), 0.0, rng.gen_range(-0.3..0.3));
            p.rotation *= random_se3(&mut rng, 0.05, 0.0).rotation;
        }
        let (t0, r0, _) = kitti_relative_errors(&gt, &pred).unwrap();

        for _ in 0..5 {
            let g = random_se3(&mut rng, 2.0, 100.0);
            let scale = rng.gen_range(0.5..2.0);
            let moved = Trajectory::from_poses(
                pred.poses
                    .iter()
                    .map(|p| PoseSE3 {
                        rotation: g.rotation * p.rotation,
                        translation: scale * (g.rotation * p.translation) + g.translation,
                    })
                    .collect(),
            );
            let (_, r1, _) = kitti_relative_errors(&gt, &moved).unwrap();
            // rotational error ignores even the scale
            assert!((r0 - r1).abs() < 1e-9);
            let rigid = Trajectory::from_poses(
                pred.poses
                    .iter()
                    .map(|p| PoseSE3 {
                        rotation: g.rotation * p.rotation,
                        translation: g.rotation * p.translation + g.translation,
                    })
                    .collect(),
            );
            let (t2, r2, _) = kitti_relative_errors(&gt, &rigid).unwrap();
            assert!((t0 - t2).abs() < 1e-9);
            assert!((r0 - r2).abs() < 1e-9);
        }
    }

    #[test]
    fn short_trajectory_yields_empty_table() {
        let gt = straight_gt(50); // 49 m of travel
        let (t, r, table) = kitti_relative_errors(&gt, &gt).unwrap();
        assert_eq!((t, r), (0.0, 0.0));
        assert!(table.is_empty());
    }

    #[test]
    fn ate_zero_for_identical_and_scaled_trajectories() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_trajectory(&mut rng, 40);
        let report = evaluate(&gt, &gt).unwrap();
        assert!(report.ate_rmse_m < 1e-9);
        assert!(report.t_rel_percent < 1e-9);

        let scaled = Trajectory::from_poses(
            gt.poses
                .iter()
                .map(|p| PoseSE3 { rotation: p.rotation, translation: 2.0 * p.translation })
                .collect(),
        );
        let report = evaluate(&gt, &scaled).unwrap();
        assert!(report.ate_rmse_m < 1e-9, "scale removed by alignment: {}", report.ate_rmse_m);
        assert!((report.alignment.scale - 0.5).abs() < 1e-9);
    }

    #[test]
    fn ate_matches_direct_residual_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = random_trajectory(&mut rng, 30);
        let mut pred = gt.clone();
        pred.poses[10].translation += Vector3::new(0.0, 3.0, 0.0);
        let align = umeyama_align(&pred.positions(), &gt.positions(), true).unwrap();
        let rmse = ate_rmse(&gt, &pred, &align).unwrap();
        let mut sum = 0.0;
        for (g, p) in gt.poses.iter().zip(&pred.poses) {
            sum += (g.translation - align.apply(&p.translation)).norm_squared();
        }
        assert!((rmse - (sum / gt.len() as f64).sqrt()).abs() < 1e-12);
        assert!(rmse > 0.1);
    }
}
