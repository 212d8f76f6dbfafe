//! Command-line surface: sparsify clouds, project them to depth images,
//! generate synthetic triplets, optimize depth, estimate poses, and
//! evaluate predictions. Every run is bit-reproducible given `--seed`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use sparsedepth::eval::{
    cdr_report, eigen_metrics, rescale_to_gt, RescaleMode, DEFAULT_DEPTH_CAP,
};
use sparsedepth::geometry::{DepthMap, ImageBuffer, PoseSE3};
use sparsedepth::io;
use sparsedepth::lidar::{segment_beams, subsample_beams};
use sparsedepth::losses::{LidarVariant, LossConfig, SceneInputs};
use sparsedepth::optimizer::{
    apply_pose_scaling, co_moving_scene, optimize_depth, DepthField, OptimizeConfig,
};
use sparsedepth::pose::{attach_depth, detect_and_match, pnp_ransac};
use sparsedepth::synthetic::{make_triplet, sensor_to_camera, LidarSpec, Scene};

#[derive(Parser)]
#[command(name = "sparsedepth", version, about = "Sparse-LiDAR self-supervised depth toolkit")]
struct Cli {
    /// Seed for every randomized stage; identical seeds give byte-identical
    /// outputs.
    #[arg(long, global = true, env = "SPARSEDEPTH_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Supervision {
    PhotometricOnly,
    Naive,
    Masked,
    Hinted,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PoseSource {
    Given,
    Pnp,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RescaleArg {
    Median,
    Mean,
}

#[derive(Subcommand)]
enum Command {
    /// Keep one beam every N of a velodyne-style cloud.
    Sparsify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 16)]
        keep_every: u32,
    },
    /// Project a cloud into a camera and write the sparse depth PNG.
    Project {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Sensor-to-camera pose text; defaults to the standard mounting.
        #[arg(long)]
        extrinsics: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Render a synthetic frame triplet directory from a scene config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Optimize a per-pixel depth field against a triplet directory.
    Optimize {
        #[arg(long)]
        triplet_dir: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Loss trace CSV path.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Supervision::Masked)]
        supervision: Supervision,
        #[arg(long, value_enum, default_value_t = PoseSource::Given)]
        pose_source: PoseSource,
        #[arg(long, default_value_t = 4)]
        multiscale_levels: usize,
        #[arg(long, default_value_t = 0.01)]
        learning_rate: f64,
        #[arg(long, default_value_t = 400)]
        steps: usize,
        /// Divide pose translations by this factor during optimization and
        /// multiply the recovered depth back.
        #[arg(long, default_value_t = 1.0)]
        pose_scale_divisor: f64,
        #[arg(long, default_value_t = 20.0)]
        init_depth: f64,
    },
    /// Estimate the relative pose of an image pair from sparse depth.
    Pnp {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        sparse_depth: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value_t = 2.0)]
        threshold: f64,
    },
    /// Depth metrics of predictions against ground truth (files or dirs).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        rescale: Option<RescaleArg>,
        #[arg(long, default_value_t = DEFAULT_DEPTH_CAP)]
        cap: f64,
    },
    /// Catastrophic distance rate over filtered instance masks.
    Cdr {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Grayscale PNG id map; each nonzero value is one instance.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Additional two-column CSV of the CDR curve.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Comma-separated τ values.
        #[arg(long, default_value = "0.25,0.5,0.75,1.0")]
        tau_grid: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Sparsify { input, output, keep_every } => {
            if keep_every == 0 {
                bail!("--keep-every must be at least 1");
            }
            let cloud = io::read_velodyne_bin(&input)?;
            let segmented = segment_beams(&cloud);
            let sparse = subsample_beams(&segmented, keep_every);
            io::write_velodyne_bin(&output, &sparse)?;
            println!(
                "kept {} of {} points ({} of {} rings)",
                sparse.len(),
                cloud.len(),
                segment_beams(&sparse).ring_count(),
                segmented.ring_count()
            );
            Ok(())
        }
        Command::Project { cloud, intrinsics, extrinsics, output } => {
            let cloud = io::read_velodyne_bin(&cloud)?;
            let k = io::read_intrinsics(&intrinsics)?;
            let pose = match extrinsics {
                Some(p) => io::read_pose_text(&p)?,
                None => sensor_to_camera(),
            };
            let depth = sparsedepth::geometry::project_pointcloud_to_image(&cloud, &pose, &k);
            io::write_depth_png16(&output, &depth)?;
            println!("projected {} pixels", depth.valid_count());
            Ok(())
        }
        Command::Synth { config, output_dir } => synth(&config, &output_dir, cli.seed),
        Command::Optimize {
            triplet_dir,
            output,
            trace,
            supervision,
            pose_source,
            multiscale_levels,
            learning_rate,
            steps,
            pose_scale_divisor,
            init_depth,
        } => optimize(
            &triplet_dir,
            &output,
            trace.as_deref(),
            supervision,
            pose_source,
            multiscale_levels,
            learning_rate,
            steps,
            pose_scale_divisor,
            init_depth,
            cli.seed,
        ),
        Command::Pnp { target, source, sparse_depth, intrinsics, output, iterations, threshold } => {
            let target = io::read_image_png(&target)?;
            let source = io::read_image_png(&source)?;
            let lidar = io::read_depth_png16(&sparse_depth)?;
            let k = io::read_intrinsics(&intrinsics)?;
            let matches = detect_and_match(&target, &source)?;
            let corr = attach_depth(&matches, &lidar);
            let result = pnp_ransac(&corr, &k, iterations, threshold, cli.seed)?;
            io::write_pose_text(&output, &result.pose)?;
            println!(
                "{} matches, {} with depth, {} inliers, mean error {:.4} px",
                matches.len(),
                corr.len(),
                result.inliers.iter().filter(|&&b| b).count(),
                result.mean_reprojection_error
            );
            Ok(())
        }
        Command::Eval { pred, gt, output, rescale, cap } => {
            let pairs = collect_pairs(&pred, &gt)?;
            let mode = rescale.map(|r| match r {
                RescaleArg::Median => RescaleMode::Median,
                RescaleArg::Mean => RescaleMode::Mean,
            });
            let mut pred_all = Vec::new();
            let mut gt_all = Vec::new();
            for (p_path, g_path) in &pairs {
                let mut p = io::read_depth_png16(p_path)?;
                let g = io::read_depth_png16(g_path)?;
                if let Some(mode) = mode {
                    p = rescale_to_gt(&p, &g, mode)?;
                }
                pred_all.extend_from_slice(&p.data);
                gt_all.extend_from_slice(&g.data);
            }
            let n = pred_all.len();
            let pred_map = DepthMap { height: 1, width: n, data: pred_all };
            let gt_map = DepthMap { height: 1, width: n, data: gt_all };
            let report = eigen_metrics(&pred_map, &gt_map, cap)?;
            io::write_json_report(&output, &report)?;
            println!(
                "{} frame(s), {} valid pixels, abs_rel {:.4}, rmse {:.3} m",
                pairs.len(),
                report.valid_pixels,
                report.abs_rel,
                report.rmse
            );
            Ok(())
        }
        Command::Cdr { pred, gt, masks, output, curve, tau_grid } => {
            let pred = io::read_depth_png16(&pred)?;
            let gt = io::read_depth_png16(&gt)?;
            let masks = io::read_instance_masks_png(&masks)?;
            let taus: Vec<f64> = tau_grid
                .split(',')
                .map(|s| s.trim().parse::<f64>().context("invalid --tau-grid entry"))
                .collect::<anyhow::Result<_>>()?;
            let report = cdr_report(&pred, &gt, &masks, &taus)?;
            io::write_json_report(&output, &report)?;
            if let Some(curve_path) = curve {
                let mut text = String::from("tau,cdr\n");
                for (tau, value) in &report.curve {
                    text.push_str(&format!("{tau},{value}\n"));
                }
                std::fs::write(curve_path, text)?;
            }
            println!(
                "{} instance(s) after filtering ({} input)",
                report.instance_errors.len(),
                report.filter_stages.input
            );
            Ok(())
        }
    }
}

const SYNTH_CONFIG_KEYS: &[&str] = &[
    "scene", "seed", "fx", "fy", "cx", "cy", "width", "height", //
    "ego_x", "ego_y", "ego_z", "keep_every",
];

fn synth(config_path: &Path, output_dir: &Path, cli_seed: u64) -> anyhow::Result<()> {
    let config = io::RunConfig::load(config_path, SYNTH_CONFIG_KEYS)?;
    let seed = config.get_parsed::<u64>("seed")?.unwrap_or(cli_seed);
    let fx = config.get_parsed::<f64>("fx")?.unwrap_or(80.0);
    let fy = config.get_parsed::<f64>("fy")?.unwrap_or(80.0);
    let width = config.get_parsed::<usize>("width")?.unwrap_or(96);
    let height = config.get_parsed::<usize>("height")?.unwrap_or(64);
    let cx = config.get_parsed::<f64>("cx")?.unwrap_or(width as f64 / 2.0);
    let cy = config.get_parsed::<f64>("cy")?.unwrap_or(height as f64 / 2.0);
    let ego = Vector3::new(
        config.get_parsed::<f64>("ego_x")?.unwrap_or(0.0),
        config.get_parsed::<f64>("ego_y")?.unwrap_or(0.0),
        config.get_parsed::<f64>("ego_z")?.unwrap_or(0.4),
    );
    let keep_every = config.get_parsed::<u32>("keep_every")?.unwrap_or(16);
    if keep_every == 0 {
        bail!("keep_every must be at least 1");
    }
    let scene = match config.get("scene").unwrap_or("ground_wall") {
        "ground_wall" => Scene::ground_and_wall(seed),
        "co_moving_box" => co_moving_scene(seed, &ego),
        other => bail!("unknown scene '{other}' (expected ground_wall or co_moving_box)"),
    };

    let k = sparsedepth::geometry::CameraIntrinsics::new(fx, fy, cx, cy, width, height)?;
    let ego_pose = PoseSE3::from_translation(ego.x, ego.y, ego.z);
    let triplet = make_triplet(&scene, &k, &ego_pose, &LidarSpec::kitti_64());

    // Emulate a few-beam sensor before projecting.
    let segmented = segment_beams(&triplet.cloud);
    let sparse_cloud = subsample_beams(&segmented, keep_every);
    let lidar_depth = sparsedepth::geometry::project_pointcloud_to_image(
        &sparse_cloud,
        &sensor_to_camera(),
        &k,
    );

    std::fs::create_dir_all(output_dir)?;
    io::write_intrinsics(&output_dir.join("intrinsics.txt"), &k)?;
    io::write_image_png(&output_dir.join("target.png"), &triplet.target.image)?;
    io::write_depth_png16(&output_dir.join("gt_depth.png"), &triplet.target.depth)?;
    io::write_depth_png16(&output_dir.join("lidar.png"), &lidar_depth)?;
    for (i, (source, pose)) in triplet.sources.iter().zip(&triplet.poses_t_to_s).enumerate() {
        io::write_image_png(&output_dir.join(format!("source_{i}.png")), &source.image)?;
        io::write_pose_text(&output_dir.join(format!("pose_{i}.txt")), pose)?;
    }
    println!(
        "wrote triplet to {} ({} LiDAR pixels)",
        output_dir.display(),
        lidar_depth.valid_count()
    );
    Ok(())
}

struct TripletOnDisk {
    intrinsics: sparsedepth::geometry::CameraIntrinsics,
    target: ImageBuffer,
    sources: Vec<ImageBuffer>,
    poses: Vec<PoseSE3>,
    lidar: DepthMap,
}

fn load_triplet(dir: &Path) -> anyhow::Result<TripletOnDisk> {
    let intrinsics = io::read_intrinsics(&dir.join("intrinsics.txt"))?;
    let target = io::read_image_png(&dir.join("target.png"))?;
    let lidar = io::read_depth_png16(&dir.join("lidar.png"))?;
    let mut sources = Vec::new();
    let mut poses = Vec::new();
    for i in 0.. {
        let source_path = dir.join(format!("source_{i}.png"));
        if !source_path.exists() {
            break;
        }
        sources.push(io::read_image_png(&source_path)?);
        poses.push(io::read_pose_text(&dir.join(format!("pose_{i}.txt")))?);
    }
    if sources.is_empty() {
        bail!("no source_*.png frames in {}", dir.display());
    }
    Ok(TripletOnDisk { intrinsics, target, sources, poses, lidar })
}

#[allow(clippy::too_many_arguments)]
fn optimize(
    triplet_dir: &Path,
    output: &Path,
    trace_path: Option<&Path>,
    supervision: Supervision,
    pose_source: PoseSource,
    multiscale_levels: usize,
    learning_rate: f64,
    steps: usize,
    pose_scale_divisor: f64,
    init_depth: f64,
    seed: u64,
) -> anyhow::Result<()> {
    let triplet = load_triplet(triplet_dir)?;
    let k = &triplet.intrinsics;

    let mut poses = match pose_source {
        PoseSource::Given => triplet.poses.clone(),
        PoseSource::Pnp => {
            let mut estimated = Vec::new();
            for (i, source) in triplet.sources.iter().enumerate() {
                let matches = detect_and_match(&triplet.target, source)?;
                let corr = attach_depth(&matches, &triplet.lidar);
                let result = pnp_ransac(&corr, k, 100, 2.0, seed.wrapping_add(i as u64))?;
                estimated.push(result.pose);
            }
            estimated
        }
    };
    let depth_multiplier = if pose_scale_divisor != 1.0 {
        let (scaled, mult) = apply_pose_scaling(&poses, pose_scale_divisor)?;
        poses = scaled;
        mult
    } else {
        1.0
    };

    let (lidar, lambda_lidar, variant) = match supervision {
        Supervision::PhotometricOnly => (None, 0.0, LidarVariant::Masked),
        Supervision::Naive => (Some(&triplet.lidar), 1.0, LidarVariant::Naive),
        Supervision::Masked => (Some(&triplet.lidar), 1.0, LidarVariant::Masked),
        Supervision::Hinted => (Some(&triplet.lidar), 1.0, LidarVariant::Hinted),
    };
    let inputs = SceneInputs {
        target: &triplet.target,
        sources: &triplet.sources,
        poses: &poses,
        intrinsics: k,
        lidar,
    };
    let config = OptimizeConfig {
        learning_rate,
        steps,
        loss: LossConfig {
            lambda_lidar,
            lidar_variant: variant,
            multiscale_levels,
            ..LossConfig::default()
        },
    };
    let init = DepthField::constant(k.height, k.width, init_depth);
    let (mut depth, trace) = optimize_depth(&init, &inputs, &config)?;
    if depth_multiplier != 1.0 {
        for d in &mut depth.data {
            *d *= depth_multiplier;
        }
    }
    io::write_depth_png16(output, &depth)?;
    if let Some(trace_path) = trace_path {
        io::write_trace_csv(trace_path, &trace)?;
    }
    let final_loss = trace.records.last().map_or(f64::NAN, |r| r.total);
    println!("{} steps, final loss {final_loss:.6}", trace.records.len());
    Ok(())
}

/// Pairs prediction and ground-truth depth files: two files directly, or
/// two directories matched by file name.
fn collect_pairs(pred: &Path, gt: &Path) -> anyhow::Result<Vec<(PathBuf, PathBuf)>> {
    if pred.is_dir() != gt.is_dir() {
        bail!("--pred and --gt must both be files or both be directories");
    }
    if !pred.is_dir() {
        return Ok(vec![(pred.to_path_buf(), gt.to_path_buf())]);
    }
    let mut names: Vec<String> = std::fs::read_dir(pred)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no .png files in {}", pred.display());
    }
    let mut pairs = Vec::new();
    for name in names {
        let gt_path = gt.join(&name);
        if !gt_path.exists() {
            bail!("ground truth {} missing", gt_path.display());
        }
        pairs.push((pred.join(&name), gt_path));
    }
    Ok(pairs)
}
