//! Command line front end: train, infer, eval, synth, plot.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlfvo::config::RunConfig;
use mlfvo::data::{
    build_snippets, generate_synthetic, load_kitti_sequence, write_kitti_layout, Sequence,
    Surface, SyntheticSceneSpec,
};
use mlfvo::error::{Error, Result};
use mlfvo::evaluation::{
    evaluate_with, integrate_trajectory, parse_kitti_poses, write_kitti_poses, Trajectory,
};
use mlfvo::geometry::{pose6d_to_se3, Pose6D};
use mlfvo::networks::Model;
use mlfvo::plot::plot_trajectories;
use mlfvo::tensor::{Element, Tensor};
use mlfvo::training::{load_checkpoint, train_loop, Adam};

#[derive(Parser)]
#[command(name = "mlfvo", version, about = "Self-supervised ego-motion estimation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train depth and pose networks on a sequence
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and metrics
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from the run directory's checkpoint
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        overwrite: bool,
        /// Force the deterministic flag regardless of the config
        #[arg(long)]
        deterministic: bool,
        /// Use 64-bit floats instead of 32-bit
        #[arg(long)]
        fp64: bool,
    },
    /// Predict a trajectory from a trained checkpoint
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output pose file
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
        #[arg(long)]
        fp64: bool,
    },
    /// Compare a predicted trajectory against ground truth
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Optional CSV report path
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
        /// Rigid alignment instead of similarity (scale pinned to 1)
        #[arg(long)]
        rigid: bool,
    },
    /// Generate a synthetic dataset in the benchmark layout
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output sequence directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Render trajectories as a top-down SVG
    Plot {
        /// Pose files, optionally prefixed `name=path`
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, run_dir, resume, overwrite, deterministic, fp64 } => {
            let mut cfg = RunConfig::load(&config)?;
            if deterministic {
                cfg.train.deterministic = true;
            }
            prepare_dir(&run_dir, overwrite || resume)?;
            std::fs::copy(&config, run_dir.join("config.txt"))?;
            if fp64 {
                cmd_train::<f64>(&cfg, &run_dir, resume)
            } else {
                cmd_train::<f32>(&cfg, &run_dir, resume)
            }
        }
        Cmd::Infer { config, checkpoint, out, overwrite, fp64 } => {
            let cfg = RunConfig::load(&config)?;
            ensure_writable(&out, overwrite)?;
            if fp64 {
                cmd_infer::<f64>(&cfg, &checkpoint, &out)
            } else {
                cmd_infer::<f32>(&cfg, &checkpoint, &out)
            }
        }
        Cmd::Eval { gt, pred, out, overwrite, rigid } => cmd_eval(&gt, &pred, out.as_deref(), overwrite, rigid),
        Cmd::Synth { config, out, overwrite } => {
            let cfg = RunConfig::load(&config)?;
            prepare_dir(&out, overwrite)?;
            cmd_synth(&cfg, &out)
        }
        Cmd::Plot { inputs, out, overwrite } => {
            ensure_writable(&out, overwrite)?;
            cmd_plot(&inputs, &out)
        }
    }
}

fn ensure_writable(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::InvalidArgument(format!(
            "{} exists, pass --overwrite to replace it",
            path.display()
        )));
    }
    Ok(())
}

fn prepare_dir(dir: &Path, allow_existing: bool) -> Result<()> {
    if dir.exists() && !allow_existing && std::fs::read_dir(dir)?.next().is_some() {
        return Err(Error::InvalidArgument(format!(
            "{} is not empty, pass --overwrite (or --resume for training) to reuse it",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn load_sequence(cfg: &RunConfig) -> Result<Sequence> {
    load_kitti_sequence(&cfg.data_root, &cfg.sequence, Some((cfg.height, cfg.width)))
}

fn build_model<S: Element>(cfg: &RunConfig) -> Result<Model<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    Model::new(&mut rng, cfg.depth.clone(), cfg.pose.clone())
}

fn cmd_train<S: Element>(cfg: &RunConfig, run_dir: &Path, resume: bool) -> Result<()> {
    let seq = load_sequence(cfg)?;
    let snippets = build_snippets(&seq)?;
    let model = build_model::<S>(cfg)?;
    let mut adam = Adam::new(model.named_parameters(), &cfg.train);
    let mut start_epoch = 0;
    let ckpt = run_dir.join("checkpoint.ckpt");
    if resume {
        start_epoch = load_checkpoint(&ckpt, &model, &mut adam, &cfg.train)?;
        println!("resumed from {} at epoch {start_epoch}", ckpt.display());
    }
    let metrics = train_loop(&model, &mut adam, &seq, &snippets, &cfg.train, Some(run_dir), start_epoch)?;
    if let Some(last) = metrics.last() {
        println!(
            "trained {} epochs on {} snippets, final loss {:.6}",
            metrics.len(),
            snippets.len(),
            last.loss.total
        );
    } else {
        println!("nothing to do, {start_epoch} epochs already complete");
    }
    Ok(())
}

fn cmd_infer<S: Element>(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let seq = load_sequence(cfg)?;
    if seq.frames.len() < 2 {
        return Err(Error::Data("inference needs at least 2 frames".into()));
    }
    let model = build_model::<S>(cfg)?;
    let mut adam = Adam::new(model.named_parameters(), &cfg.train);
    load_checkpoint(checkpoint, &model, &mut adam, &cfg.train)?;

    let (h, w) = (cfg.height, cfg.width);
    let mut relatives = Vec::with_capacity(seq.frames.len() - 1);
    let mut times_ms = Vec::with_capacity(seq.frames.len() - 1);
    for i in 0..seq.frames.len() - 1 {
        let start = Instant::now();
        let img_a: Tensor<S> = seq.frames[i].image.to_tensor();
        let img_b: Tensor<S> = seq.frames[i + 1].image.to_tensor();
        let inv_a = model.depth_net.forward(&img_a.reshape(&[1, 3, h, w])?, false)?;
        let inv_b = model.depth_net.forward(&img_b.reshape(&[1, 3, h, w])?, false)?;
        let rgb_pair = Tensor::concat(0, &[img_a, img_b])?;
        let depth_pair = Tensor::concat(
            0,
            &[inv_a[0].reshape(&[1, h, w])?, inv_b[0].reshape(&[1, h, w])?],
        )?;
        let out_pose = model.pose_net.forward(&rgb_pair, Some(&depth_pair), false)?;
        relatives.push(pose6d_to_se3(&Pose6D::from_tensor(&out_pose.pose)?));
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let traj = integrate_trajectory(&relatives);
    write_kitti_poses(&traj, out)?;
    times_ms.sort_by(f64::total_cmp);
    let mean = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
    let median = times_ms[times_ms.len() / 2];
    println!(
        "wrote {} poses to {} ({mean:.1} ms mean, {median:.1} ms median per pair)",
        traj.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    gt_path: &Path,
    pred_path: &Path,
    out: Option<&Path>,
    overwrite: bool,
    rigid: bool,
) -> Result<()> {
    let gt = parse_kitti_poses(gt_path)?;
    let pred = parse_kitti_poses(pred_path)?;
    if gt.len() != pred.len() {
        return Err(Error::Data(format!(
            "trajectory length mismatch: {} ground-truth vs {} predicted poses",
            gt.len(),
            pred.len()
        )));
    }
    let report = evaluate_with(&gt, &pred, !rigid)?;
    println!("ate_rmse_m: {:.6}", report.ate_rmse_m);
    println!("t_rel_percent: {:.6}", report.t_rel_percent);
    println!("r_rel_deg_per_100m: {:.6}", report.r_rel_deg_per_100m);
    println!("alignment_scale: {:.6}", report.alignment.scale);
    for row in &report.per_length {
        println!(
            "length {:>5} m: t_rel {:.6} %, r_rel {:.6} deg/100m ({} subsequences)",
            row.length_m, row.t_rel_percent, row.r_rel_deg_per_100m, row.count
        );
    }
    if let Some(path) = out {
        ensure_writable(path, overwrite)?;
        std::fs::write(path, report.to_csv())?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seq = generate_synthetic(&synth_spec(cfg)?)?;
    write_kitti_layout(&seq, out)?;
    println!("wrote {} synthetic frames to {}", seq.frames.len(), out.display());
    Ok(())
}

/// Scene construction from the config: a textured backplane, seeded occluder
/// rectangles at intermediate depths, and a straight dolly along +z.
fn synth_spec(cfg: &RunConfig) -> Result<SyntheticSceneSpec> {
    use rand::Rng;
    let s = &cfg.synth;
    let mut surfaces = vec![Surface::backplane(s.plane_z)];
    let mut rng = ChaCha8Rng::seed_from_u64(s.texture_seed);
    // keep occluders inside the view at the far end of the camera path
    let travel = s.step_z * (s.frames.saturating_sub(1)) as f64;
    let half_w = (s.plane_z - travel) * 0.5 * cfg.width as f64 / (cfg.width as f64 * 0.9);
    let half_h = half_w * cfg.height as f64 / cfg.width as f64;
    for _ in 0..s.occluders {
        let z = s.plane_z * rng.gen_range(0.55..0.8);
        let cx = rng.gen_range(-0.4..0.4) * half_w;
        let cy = rng.gen_range(-0.4..0.4) * half_h;
        let ex = rng.gen_range(0.15..0.35) * half_w;
        let ey = rng.gen_range(0.15..0.35) * half_h;
        surfaces.push(Surface::rect(z, (cx - ex, cx + ex), (cy - ey, cy + ey)));
    }
    Ok(SyntheticSceneSpec {
        intrinsics: cfg.synth_intrinsics()?,
        surfaces,
        camera_script: (0..s.frames)
            .map(|i| {
                // slight lateral weave keeps the path non-collinear so
                // similarity alignment in evaluation stays well-posed
                let k = i as f64;
                Pose6D::new(
                    nalgebra::Vector3::zeros(),
                    nalgebra::Vector3::new(
                        0.3 * s.step_z * (0.7 * k).sin(),
                        0.2 * s.step_z * (0.45 * k + 1.0).sin(),
                        s.step_z * k,
                    ),
                )
            })
            .collect(),
        texture_seed: s.texture_seed,
        texture_frequency: s.texture_frequency,
        depth_range: (cfg.depth.min_depth, cfg.depth.max_depth),
        saturation_region: None,
    })
}

fn cmd_plot(inputs: &[String], out: &Path) -> Result<()> {
    let mut trajectories: Vec<(String, Trajectory)> = Vec::new();
    for input in inputs {
        let (name, path) = match input.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(input);
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| input.clone());
                (name, p)
            }
        };
        trajectories.push((name, parse_kitti_poses(&path)?));
    }
    let svg = plot_trajectories(&trajectories)?;
    std::fs::write(out, svg)?;
    println!("plot written to {}", out.display());
    Ok(())
}
