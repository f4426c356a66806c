//! Sequence ingestion in the odometry benchmark layout, snippet
//! construction, and an exactly ray-cast synthetic scene generator.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::{parse_kitti_poses, write_kitti_poses, Trajectory};
use crate::geometry::{pose6d_to_se3, Intrinsics, Pose6D, PoseSE3};
use crate::tensor::{Element, Tensor};

/// Depth PNG unit: stored u16 value = depth in meters * 256.
pub const DEPTH_PNG_SCALE: f64 = 256.0;

/// Channel-major (C, H, W) float image, values normalized to [0, 1] for
/// color and meters for depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageBuf { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor<S: Element>(&self) -> Tensor<S> {
        let vals: Vec<S> = self.data.iter().map(|&v| S::fp(v)).collect();
        Tensor::from_vec(&[self.channels, self.height, self.width], vals)
            .expect("image extents are consistent")
    }

    /// Bilinear resize, align-corners-false (pixel centers at k + 1/2).
    pub fn resize(&self, new_h: usize, new_w: usize) -> ImageBuf {
        if new_h == self.height && new_w == self.width {
            return self.clone();
        }
        let mut out = ImageBuf::new(self.channels, new_h, new_w);
        let sy = self.height as f64 / new_h as f64;
        let sx = self.width as f64 / new_w as f64;
        for c in 0..self.channels {
            for oy in 0..new_h {
                let src_y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let y0 = src_y.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let wy = src_y - y0 as f64;
                for ox in 0..new_w {
                    let src_x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                    let x0 = src_x.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let wx = src_x - x0 as f64;
                    let v = self.at(c, y0, x0) * (1.0 - wy) * (1.0 - wx)
                        + self.at(c, y0, x1) * (1.0 - wy) * wx
                        + self.at(c, y1, x0) * wy * (1.0 - wx)
                        + self.at(c, y1, x1) * wy * wx;
                    out.set(c, oy, ox, v);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub index: usize,
    pub image: ImageBuf,
    /// Ground-truth depth in meters, when the sequence ships one.
    pub depth: Option<ImageBuf>,
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub intrinsics: Intrinsics,
    pub gt_cam_to_world: Option<Trajectory>,
}

/// One training sample: a target frame with its two temporal neighbors.
#[derive(Debug, Clone)]
pub struct Snippet {
    pub target: usize,
    pub sources: [usize; 2], // [t-1, t+1]
}

pub fn build_snippets(sequence: &Sequence) -> Result<Vec<Snippet>> {
    let n = sequence.frames.len();
    if n < 3 {
        return Err(Error::Data(format!("need at least 3 frames for snippets, got {n}")));
    }
    Ok((1..n - 1)
        .map(|t| Snippet { target: t, sources: [t - 1, t + 1] })
        .collect())
}

fn decode_color_png(path: &Path) -> Result<ImageBuf> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageBuf::new(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, px.0[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

fn decode_depth_png(path: &Path) -> Result<ImageBuf> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageBuf::new(1, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        out.set(0, y as usize, x as usize, px.0[0] as f64 / DEPTH_PNG_SCALE);
    }
    Ok(out)
}

fn encode_color_png(img: &ImageBuf, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = (img.at(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0);
            px.0[c] = v as u8;
        }
    }
    buf.save(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn encode_depth_png(depth: &ImageBuf, path: &Path) -> Result<()> {
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        depth.width as u32,
        depth.height as u32,
    );
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let v = (depth.at(0, y as usize, x as usize) * DEPTH_PNG_SCALE).round();
        if !(0.0..=u16::MAX as f64).contains(&v) {
            return Err(Error::Data(format!("depth {v} out of 16-bit PNG range")));
        }
        px.0[0] = v as u16;
    }
    buf.save(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Parse the P2 projection row of a calib file into pinhole intrinsics.
pub fn parse_calib(text: &str, origin: &str, width: usize, height: usize) -> Result<Intrinsics> {
    for (ln, line) in text.lines().enumerate() {
        let Some(rest) = line.strip_prefix("P2:") else { continue };
        let vals: Vec<f64> = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    path: origin.to_string(),
                    line: ln + 1,
                    msg: format!("not a number: {t:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 12 {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: ln + 1,
                msg: format!("P2 row needs 12 values, found {}", vals.len()),
            });
        }
        return Intrinsics::new(vals[0], vals[5], vals[2], vals[6], width, height);
    }
    Err(Error::Parse { path: origin.to_string(), line: 0, msg: "no P2 row found".into() })
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    Ok(files)
}

/// Load a sequence directory (`image_2/NNNNNN.png`, `calib.txt`, optional
/// `poses.txt` and `depth/NNNNNN.png`). A target size resizes every image
/// and rescales the intrinsics proportionally.
pub fn load_kitti_sequence(
    root: &Path,
    sequence: &str,
    target_size: Option<(usize, usize)>,
) -> Result<Sequence> {
    let dir = root.join(sequence);
    let image_dir = dir.join("image_2");
    let paths = sorted_pngs(&image_dir)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no images in {}", image_dir.display())));
    }
    let depth_dir = dir.join("depth");
    let mut frames = Vec::with_capacity(paths.len());
    let mut native = None; // stored extent before any resize
    for (index, path) in paths.iter().enumerate() {
        let mut image = decode_color_png(path)?;
        let stored = (image.height, image.width);
        if *native.get_or_insert(stored) != stored {
            return Err(Error::Data(format!(
                "frame {index} extent {}x{} differs from {}x{}",
                stored.0,
                stored.1,
                native.unwrap().0,
                native.unwrap().1
            )));
        }
        let mut depth = None;
        let dpath = depth_dir.join(path.file_name().unwrap());
        if dpath.exists() {
            depth = Some(decode_depth_png(&dpath)?);
        }
        if let Some((h, w)) = target_size {
            image = image.resize(h, w);
            depth = depth.map(|d| d.resize(h, w));
        }
        frames.push(Frame { index, image, depth });
    }
    let (native_h, native_w) = native.unwrap();
    let calib_path = dir.join("calib.txt");
    let calib = std::fs::read_to_string(&calib_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", calib_path.display())))?;
    // calib describes the stored resolution; resize rescales proportionally
    let mut intrinsics = parse_calib(&calib, &calib_path.display().to_string(), native_w, native_h)?;
    if let Some((h, w)) = target_size {
        intrinsics = intrinsics.scaled(w, h)?;
    }
    let poses_path = dir.join("poses.txt");
    let gt = if poses_path.exists() {
        let traj = parse_kitti_poses(&poses_path)?;
        if traj.len() != frames.len() {
            return Err(Error::Data(format!(
                "{} poses for {} frames",
                traj.len(),
                frames.len()
            )));
        }
        Some(traj)
    } else {
        None
    };
    Ok(Sequence { frames, intrinsics, gt_cam_to_world: gt })
}

/// Axis-aligned fronto-parallel rectangle at a fixed world depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub z: f64,
    /// World-space extent; None means infinite (a backplane).
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
}

impl Surface {
    pub fn backplane(z: f64) -> Self {
        Surface { z, x_range: None, y_range: None }
    }

    pub fn rect(z: f64, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        Surface { z, x_range: Some(x_range), y_range: Some(y_range) }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.x_range.is_none_or(|(lo, hi)| (lo..=hi).contains(&x))
            && self.y_range.is_none_or(|(lo, hi)| (lo..=hi).contains(&y))
    }
}

/// Procedural scene: textured fronto-parallel surfaces observed by a scripted
/// camera. Everything (texture, depth, poses) is exact and seed-deterministic.
#[derive(Debug, Clone)]
pub struct SyntheticSceneSpec {
    pub intrinsics: Intrinsics,
    /// Sorted near-to-far at render time; must include a backplane so every
    /// ray hits something.
    pub surfaces: Vec<Surface>,
    /// Camera-to-world pose per frame.
    pub camera_script: Vec<Pose6D>,
    pub texture_seed: u64,
    /// Spatial frequency of the procedural texture, cycles per meter.
    pub texture_frequency: f64,
    /// All rendered depths must fall inside this range.
    pub depth_range: (f64, f64),
    /// Optional world-space region rendered saturated white.
    pub saturation_region: Option<(f64, f64, f64, f64)>, // (x0, x1, y0, y1)
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.surfaces.is_empty() || self.camera_script.is_empty() {
            return Err(Error::InvalidArgument(
                "synthetic scene needs at least one surface and one frame".into(),
            ));
        }
        if !self.surfaces.iter().any(|s| s.x_range.is_none() && s.y_range.is_none()) {
            return Err(Error::InvalidArgument("synthetic scene needs a backplane".into()));
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < depth_range.0 < depth_range.1, got {lo} / {hi}"
            )));
        }
        if self.texture_frequency <= 0.0 {
            return Err(Error::InvalidArgument("texture frequency must be positive".into()));
        }
        Ok(())
    }
}

/// Smooth world-space texture: a sum of low-frequency sinusoids per channel
/// with seeded random phases, mapped into [0.1, 0.9].
struct Texture {
    // per channel: (phase_x, phase_y, phase_diag)
    phases: Vec<(f64, f64, f64)>,
    frequency: f64,
}

impl Texture {
    fn new(seed: u64, frequency: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Texture { phases, frequency }
    }

    fn sample(&self, c: usize, x: f64, y: f64, surface_id: usize) -> f64 {
        let f = self.frequency * std::f64::consts::TAU;
        let (px, py, pd) = self.phases[c];
        // surface id shifts the pattern so occluders stand out from the backdrop
        let shift = surface_id as f64 * 1.7;
        let v = (f * x + px + shift).sin() + (f * y + py + shift).sin()
            + (f * 0.6 * (x + y) + pd + shift).sin();
        0.5 + v / 3.0 * 0.4
    }
}

/// Render every frame of the scripted camera path. Returns frames carrying
/// exact depth plus the camera-to-world trajectory.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<Sequence> {
    spec.validate()?;
    let k = &spec.intrinsics;
    let texture = Texture::new(spec.texture_seed, spec.texture_frequency);
    let mut surfaces: Vec<(usize, &Surface)> = spec.surfaces.iter().enumerate().collect();
    surfaces.sort_by(|a, b| a.1.z.total_cmp(&b.1.z));
    let mut frames = Vec::with_capacity(spec.camera_script.len());
    let mut poses = Vec::with_capacity(spec.camera_script.len());
    for (fi, cam) in spec.camera_script.iter().enumerate() {
        let cw = pose6d_to_se3(cam);
        let mut image = ImageBuf::new(3, k.height, k.width);
        let mut depth = ImageBuf::new(1, k.height, k.width);
        for v in 0..k.height {
            for u in 0..k.width {
                let dir_cam = Vector3::new(
                    (u as f64 - k.cx) / k.fx,
                    (v as f64 - k.cy) / k.fy,
                    1.0,
                );
                let o = cw.translation;
                let d = cw.rotation * dir_cam;
                let mut hit: Option<(f64, usize, f64, f64)> = None;
                for &(sid, surf) in &surfaces {
                    if d.z.abs() < 1e-12 {
                        continue;
                    }
                    // ray parameter equals camera-frame depth because the
                    // camera-frame direction has unit z
                    let s = (surf.z - o.z) / d.z;
                    if s <= 0.0 {
                        continue;
                    }
                    let x = o.x + s * d.x;
                    let y = o.y + s * d.y;
                    if surf.contains(x, y) {
                        hit = Some((s, sid, x, y));
                        break; // surfaces are near-to-far sorted
                    }
                }
                let Some((s, sid, x, y)) = hit else {
                    return Err(Error::Data(format!(
                        "frame {fi}: pixel ({u}, {v}) escapes the scene, camera left the frustum"
                    )));
                };
                let (lo, hi) = spec.depth_range;
                if !(lo..=hi).contains(&s) {
                    return Err(Error::Data(format!(
                        "frame {fi}: depth {s:.3} at ({u}, {v}) outside [{lo}, {hi}]"
                    )));
                }
                depth.set(0, v, u, s);
                let saturated = spec
                    .saturation_region
                    .is_some_and(|(x0, x1, y0, y1)| (x0..=x1).contains(&x) && (y0..=y1).contains(&y));
                for c in 0..3 {
                    let val = if saturated { 1.0 } else { texture.sample(c, x, y, sid) };
                    image.set(c, v, u, val);
                }
            }
        }
        frames.push(Frame { index: fi, image, depth: Some(depth) });
        poses.push(PoseSE3 { rotation: cw.rotation, translation: cw.translation });
    }
    Ok(Sequence {
        frames,
        intrinsics: k.clone(),
        gt_cam_to_world: Some(Trajectory::from_poses(poses)),
    })
}

/// Relative pose T_a->b (points in frame a to frame b) from camera-to-world
/// poses: T = P_b^-1 * P_a.
pub fn relative_pose(traj: &Trajectory, a: usize, b: usize) -> PoseSE3 {
    crate::geometry::se3_compose(&crate::geometry::se3_invert(&traj.poses[b]), &traj.poses[a])
}

/// Write a sequence to disk in the benchmark layout: `image_2/NNNNNN.png`
/// (8-bit color), `calib.txt` with a P2 row, `poses.txt`, and exact depth as
/// 16-bit PNGs under `depth/` at 1/256 m per unit.
pub fn write_kitti_layout(seq: &Sequence, dir: &Path) -> Result<()> {
    let image_dir = dir.join("image_2");
    let depth_dir = dir.join("depth");
    std::fs::create_dir_all(&image_dir)?;
    std::fs::create_dir_all(&depth_dir)?;
    for frame in &seq.frames {
        let name = format!("{:06}.png", frame.index);
        encode_color_png(&frame.image, &image_dir.join(&name))?;
        if let Some(d) = &frame.depth {
            encode_depth_png(d, &depth_dir.join(&name))?;
        }
    }
    let k = &seq.intrinsics;
    let p2 = format!(
        "P2: {} 0 {} 0 0 {} {} 0 0 0 1 0\n",
        k.fx, k.cx, k.fy, k.cy
    );
    std::fs::write(dir.join("calib.txt"), p2)?;
    if let Some(traj) = &seq.gt_cam_to_world {
        write_kitti_poses(traj, &dir.join("poses.txt"))?;
    }
    Ok(())
}
