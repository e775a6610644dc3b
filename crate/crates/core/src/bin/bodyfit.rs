//! Command-line front end: model generation, synthetic data, training,
//! fitting, evaluation and rendering. Every subcommand accepts a flat
//! `key = value` config file via `--config`; explicit flags override file
//! values, and the fully materialized configuration is printed before the
//! run so results are auditable. Exit codes: 0 success, 2 usage, 3 data
//! or I/O error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::Vector3;

use bodyfit::camera::{perspective_project, weak_perspective_project, PerspectiveCamera};
use bodyfit::config::{parse_kv_file, KvReader};
use bodyfit::error::{Error, Result};
use bodyfit::fitter::{fit_multiframe, load_fit_problem, FitConfig};
use bodyfit::gmm::{fit_pose_prior, EmConfig};
use bodyfit::metrics::{mpjpe_pa, pve_t_sc, silhouette_miou, MetricsReport};
use bodyfit::model::{
    generate_toy_model, lbs_forward, neutral_mesh, BodyModel, ShapeParams,
};
use bodyfit::pr::{joint_heatmaps, write_pgm};
use bodyfit::raster::{rasterize_hard, rasterize_soft};
use bodyfit::regressor::{
    load_checkpoint, save_checkpoint, Regressor, RegressorConfig, TrainConfig, TrainProgress,
};
use bodyfit::rng::seeded;
use bodyfit::rot::PoseParams;
use bodyfit::synth::{generate_dataset, Dataset, SynthConfig};

#[derive(Parser)]
#[command(name = "bodyfit", version, about = "Body model fitting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic toy body model file.
    ModelGen(ModelGenArgs),
    /// Generate a synthetic training dataset from a model.
    Synth(SynthArgs),
    /// Train the iterative regressor on a dataset.
    Train(TrainArgs),
    /// Fit shape and per-frame poses to a problem directory.
    Fit(FitArgs),
    /// Evaluate a checkpoint against a dataset's targets.
    Eval(EvalArgs),
    /// Render a posed model to a silhouette image.
    Render(RenderArgs),
}

#[derive(clap::Args)]
struct ModelGenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vertices: Option<usize>,
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    shape_coeffs: Option<usize>,
    #[arg(long)]
    keypoints: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reload the written file and audit every structural invariant.
    #[arg(long)]
    verify: bool,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    heatmap_sigma: Option<f64>,
    #[arg(long)]
    bank_size: Option<usize>,
    #[arg(long)]
    bank_shape_sigma: Option<f64>,
    /// Disable shape augmentation (targets use pose-bank shapes).
    #[arg(long)]
    no_shape_aug: bool,
    /// Disable input corruption.
    #[arg(long)]
    no_pr_aug: bool,
    /// Also write each pair's silhouette channel as a PGM image.
    #[arg(long)]
    dump_pgm: bool,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Continue training from an existing checkpoint (architecture and
    /// step counter come from the file).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(clap::Args)]
struct FitArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Problem directory: camera.cfg, per-frame silhouettes, keypoints and
    /// initializations.
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use only the first N frames of the problem.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    prior_seed: Option<u64>,
    #[arg(long)]
    prior_poses: Option<usize>,
    #[arg(long)]
    prior_components: Option<usize>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RenderArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    /// Comma-separated shape coefficients; zeros when omitted.
    #[arg(long)]
    beta: Option<String>,
    /// Sample the pose from a synthetic bank with this seed; rest pose
    /// when omitted.
    #[arg(long)]
    pose_seed: Option<u64>,
    #[arg(long)]
    depth: Option<f64>,
    /// Soft silhouette instead of a binary one.
    #[arg(long)]
    soft: bool,
    #[arg(long)]
    tau: Option<f64>,
    /// Also write the keypoint heatmaps (max over channels) as a PGM.
    #[arg(long)]
    heatmaps: Option<PathBuf>,
}

/// Merges defaults, config-file values and flags (flags win), recording
/// every materialized value so it can be printed.
struct Resolver {
    kv: KvReader,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    fn new(config: Option<&Path>) -> Result<Self> {
        let map = match config {
            Some(path) => parse_kv_file(path)?,
            None => Default::default(),
        };
        Ok(Resolver {
            kv: KvReader::new(map),
            resolved: Vec::new(),
        })
    }

    fn record(&mut self, key: &str, value: impl ToString) {
        self.resolved.push((key.to_string(), value.to_string()));
    }

    fn u64(&mut self, key: &str, flag: Option<u64>, default: u64) -> Result<u64> {
        let file = self.kv.take_u64(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.record(key, v);
        Ok(v)
    }

    fn usize(&mut self, key: &str, flag: Option<usize>, default: usize) -> Result<usize> {
        let file = self.kv.take_usize(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.record(key, v);
        Ok(v)
    }

    fn f64(&mut self, key: &str, flag: Option<f64>, default: f64) -> Result<f64> {
        let file = self.kv.take_f64(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.record(key, v);
        Ok(v)
    }

    fn f64_opt(&mut self, key: &str, flag: Option<f64>) -> Result<Option<f64>> {
        let file = self.kv.take_f64(key)?;
        let v = flag.or(file);
        if let Some(v) = v {
            self.record(key, v);
        } else {
            self.record(key, "auto");
        }
        Ok(v)
    }

    /// Boolean that defaults to `default` and can be forced off by a
    /// `--no-…` flag.
    fn bool_negated(&mut self, key: &str, no_flag: bool, default: bool) -> Result<bool> {
        let file = self.kv.take_bool(key)?;
        let v = if no_flag { false } else { file.unwrap_or(default) };
        self.record(key, v);
        Ok(v)
    }

    fn flag(&mut self, key: &str, flag: bool) -> Result<bool> {
        let file = self.kv.take_bool(key)?;
        let v = flag || file.unwrap_or(false);
        self.record(key, v);
        Ok(v)
    }

    fn string_opt(&mut self, key: &str, flag: Option<String>) -> Result<Option<String>> {
        let file = self.kv.take_string(key);
        let v = flag.or(file);
        self.record(key, v.as_deref().unwrap_or("none"));
        Ok(v)
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        let file = self.kv.take_string(key).map(PathBuf::from);
        let v = flag
            .or(file)
            .ok_or_else(|| Error::parameter(format!("missing required --{}", key.replace('_', "-"))))?;
        self.record(key, v.display());
        Ok(v)
    }

    fn path_opt(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let file = self.kv.take_string(key).map(PathBuf::from);
        let v = flag.or(file);
        self.record(key, v.as_ref().map(|p| p.display().to_string()).unwrap_or("none".to_string()));
        Ok(v)
    }

    /// Rejects unconsumed config keys and prints the materialized values.
    fn print(mut self, subcommand: &str) -> Result<()> {
        self.kv.finish()?;
        self.resolved.sort();
        println!("# {subcommand} resolved config");
        for (k, v) in &self.resolved {
            println!("{k} = {v}");
        }
        Ok(())
    }
}

fn ensure_parent_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn cmd_model_gen(args: ModelGenArgs) -> Result<()> {
    let mut r = Resolver::new(args.config.as_deref())?;
    let seed = r.u64("seed", args.seed, 7)?;
    let vertices = r.usize("vertices", args.vertices, 900)?;
    let joints = r.usize("joints", args.joints, 24)?;
    let shape_coeffs = r.usize("shape_coeffs", args.shape_coeffs, 10)?;
    let keypoints = r.usize("keypoints", args.keypoints, 17)?;
    let out = r.path("out", args.out)?;
    let verify = r.flag("verify", args.verify)?;
    r.print("model-gen")?;

    let model = generate_toy_model(seed, vertices, joints, shape_coeffs, keypoints)?;
    ensure_parent_dir(&out)?;
    model.save(&out)?;
    println!(
        "wrote model: {} vertices, {} joints, {} faces, {} shape coefficients, {} keypoints -> {}",
        model.n_vertices(),
        model.n_joints(),
        model.n_faces(),
        model.n_shape_coeffs(),
        model.n_keypoints(),
        out.display()
    );
    if verify {
        // Loading audits every structural invariant.
        BodyModel::load(&out)?;
        println!("verify: reload and audit passed");
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut r = Resolver::new(args.config.as_deref())?;
    let model_path = r.path("model", args.model)?;
    let out = r.path("out", args.out)?;
    let count = r.usize("count", args.count, 16)?;
    let seed = r.u64("seed", args.seed, 7)?;
    let size = r.usize("size", args.size, 256)?;
    let heatmap_sigma = r.f64_opt("heatmap_sigma", args.heatmap_sigma)?;
    let bank_size = r.usize("bank_size", args.bank_size, 50)?;
    let bank_shape_sigma = r.f64("bank_shape_sigma", args.bank_shape_sigma, 0.3)?;
    let shape_aug = r.bool_negated("shape_aug", args.no_shape_aug, true)?;
    let pr_aug = r.bool_negated("pr_aug", args.no_pr_aug, true)?;
    let dump_pgm = r.flag("dump_pgm", args.dump_pgm)?;
    r.print("synth")?;

    let model = BodyModel::load(&model_path)?;
    let bank = bodyfit::bank::synthetic_pose_bank_with_shapes(
        seed ^ 0xB4_5E,
        bank_size,
        model.n_joints(),
        model.n_shape_coeffs(),
        bank_shape_sigma,
    )?;
    let mut cfg = SynthConfig::default_for_size(size, model.n_shape_coeffs());
    if let Some(sigma) = heatmap_sigma {
        cfg.heatmap_sigma = sigma;
    }
    if !shape_aug {
        cfg.shape_aug = None;
    }
    if !pr_aug {
        cfg.pr_aug = None;
    }
    let dataset = generate_dataset(&model, &bank, &cfg, count, seed)?;
    ensure_parent_dir(&out)?;
    dataset.save(&out)?;
    println!(
        "wrote dataset: {} pairs at {}×{} -> {}",
        dataset.pairs.len(),
        dataset.width,
        dataset.height,
        out.display()
    );
    if dump_pgm {
        let stem = out.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let dir = out.parent().unwrap_or(Path::new("."));
        for (i, pair) in dataset.pairs.iter().enumerate() {
            let path = dir.join(format!("{stem}_sil_{i:03}.pgm"));
            write_pgm(&path, pair.input.channel(0), dataset.height, dataset.width)?;
        }
        println!("wrote {} silhouette images", dataset.pairs.len());
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut r = Resolver::new(args.config.as_deref())?;
    let model_path = r.path("model", args.model)?;
    let dataset_path = r.path("dataset", args.dataset)?;
    let out = r.path("out", args.out)?;
    let epochs = r.usize("epochs", args.epochs, 30)?;
    let batch_size = r.usize("batch_size", args.batch_size, 8)?;
    let learning_rate = r.f64("learning_rate", args.learning_rate, 1e-4)?;
    let seed = r.u64("seed", args.seed, 7)?;
    let iterations = r.usize("iterations", args.iterations, 3)?;
    let loss_csv = r.path_opt("loss_csv", args.loss_csv)?;
    let resume = r.path_opt("resume", args.resume)?;
    r.print("train")?;

    let model = BodyModel::load(&model_path)?;
    let dataset = Dataset::load(&dataset_path)?;
    if dataset.height != dataset.width {
        return Err(Error::data(format!(
            "dataset images are {}×{}; the encoder expects square inputs",
            dataset.width, dataset.height
        )));
    }

    let (cfg, mut params, mut progress) = match &resume {
        Some(path) => {
            let (cfg, params, progress) = load_checkpoint(path)?;
            println!(
                "resuming from {} at step {}, epoch {}",
                path.display(),
                progress.steps,
                progress.epochs
            );
            (cfg, params, progress)
        }
        None => {
            let mut cfg = RegressorConfig::default_for(&model, dataset.width);
            cfg.n_iterations = iterations;
            let reg = Regressor::new(cfg.clone())?;
            let params = reg.init_params(&mut seeded(seed))?;
            (cfg, params, TrainProgress::default())
        }
    };
    println!(
        "# architecture: encoder_channels = {:?}, mlp_hidden = {:?}, iterations = {}",
        cfg.encoder_channels, cfg.mlp_hidden, cfg.n_iterations
    );

    let reg = Regressor::new(cfg.clone())?;
    if epochs == 0 {
        println!("zero epochs requested: writing the untrained checkpoint");
    } else {
        let mut tc = TrainConfig::new(epochs, batch_size, seed);
        tc.learning_rate = learning_rate;
        tc.loss_csv = loss_csv;
        tc.epoch_offset = progress.epochs as usize;
        let report = reg.train(&model, &dataset, &tc, &mut params)?;
        progress.steps += report.steps;
        progress.epochs += epochs as u64;
        println!(
            "trained {} epochs ({} steps); final loss {:.6}",
            epochs,
            report.steps,
            report.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    ensure_parent_dir(&out)?;
    save_checkpoint(&out, &cfg, &params, progress)?;
    println!(
        "checkpoint at step {}, epoch {} -> {}",
        progress.steps,
        progress.epochs,
        out.display()
    );
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let mut r = Resolver::new(args.config.as_deref())?;
    let model_path = r.path("model", args.model)?;
    let problem_dir = r.path("problem", args.problem)?;
    let out = r.path("out", args.out)?;
    let frames = {
        let file = r.kv.take_usize("frames")?;
        let v = args.frames.or(file);
        r.record("frames", v.map(|n| n.to_string()).unwrap_or("all".to_string()));
        v
    };
    let max_iters = r.usize("max_iters", args.max_iters, 500)?;
    let learning_rate = r.f64("learning_rate", args.learning_rate, 0.01)?;
    let prior_seed = r.u64("prior_seed", args.prior_seed, 7)?;
    let prior_poses = r.usize("prior_poses", args.prior_poses, 40)?;
    let prior_components = r.usize("prior_components", args.prior_components, 2)?;
    r.print("fit")?;

    let model = BodyModel::load(&model_path)?;
    let mut problem = load_fit_problem(&problem_dir)?;
    if let Some(n) = frames {
        if n == 0 || n > problem.frames.len() {
            return Err(Error::parameter(format!(
                "--frames {n} is outside the problem's 1..={} frames",
                problem.frames.len()
            )));
        }
        problem.frames.truncate(n);
    }

    let bank = bodyfit::bank::synthetic_pose_bank(prior_seed, prior_poses, model.n_joints())?;
    let (prior, _) = fit_pose_prior(&bank, &EmConfig::new(prior_components, prior_seed))?;

    let mut cfg = FitConfig::default_for(&model);
    cfg.max_iters = max_iters;
    cfg.learning_rate = learning_rate;
    let result = fit_multiframe(&model, &problem, &cfg, &prior)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let beta_path = out.join("beta.txt");
    let beta_text: String = result.shape.beta.iter().map(|b| format!("{b}\n")).collect();
    std::fs::write(&beta_path, beta_text).map_err(|e| Error::io(&beta_path, e))?;
    for (n, (pose, t)) in result.poses.iter().zip(&result.translations).enumerate() {
        let mut text = String::new();
        for aa in pose {
            text.push_str(&format!("{} {} {}\n", aa.x, aa.y, aa.z));
        }
        text.push_str(&format!("{} {} {}\n", t.x, t.y, t.z));
        let path = out.join(format!("frame_{n:03}_fit.txt"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let summary = serde_json::json!({
        "energy": result.energy,
        "iterations": result.iterations,
        "converged": result.converged,
        "frames": result.poses.len(),
    });
    let summary_path = out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("plain values"))
        .map_err(|e| Error::io(&summary_path, e))?;
    println!(
        "fit {} frames: energy {:.6}, {} iterations, converged {} -> {}",
        result.poses.len(),
        result.energy,
        result.iterations,
        result.converged,
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut r = Resolver::new(args.config.as_deref())?;
    let model_path = r.path("model", args.model)?;
    let checkpoint = r.path("checkpoint", args.checkpoint)?;
    let dataset_path = r.path("dataset", args.dataset)?;
    let out_json = r.path("out_json", args.out_json)?;
    let out_csv = r.path_opt("out_csv", args.out_csv)?;
    r.print("eval")?;

    let model = BodyModel::load(&model_path)?;
    let dataset = Dataset::load(&dataset_path)?;
    let (cfg, params, progress) = load_checkpoint(&checkpoint)?;
    if cfg.input_size != dataset.width || cfg.input_size != dataset.height {
        return Err(Error::data(format!(
            "checkpoint expects {0}×{0} inputs but the dataset is {1}×{2}",
            cfg.input_size, dataset.width, dataset.height
        )));
    }
    if dataset.pairs.is_empty() {
        return Err(Error::data("dataset has no pairs".to_string()));
    }
    let reg = Regressor::new(cfg)?;
    println!("# checkpoint trained for {} steps", progress.steps);

    let base_cam = PerspectiveCamera::default_for_size(dataset.width);
    let (mut sum_mpjpe, mut sum_pve, mut sum_miou) = (0.0, 0.0, 0.0);
    for pair in &dataset.pairs {
        let (output, _) = reg.forward(&pair.input.as_input(), &params)?;
        let pred_pose = PoseParams::Rot6d(output.rot6d.clone());
        let pred = lbs_forward(&model, &output.shape, &pred_pose)?;
        sum_mpjpe += mpjpe_pa(&pred.joints3d, &pair.target_joints3d)?;
        sum_pve += pve_t_sc(
            &neutral_mesh(&model, &output.shape)?,
            &neutral_mesh(&model, &pair.target_shape)?,
        )?;

        let pred2d =
            weak_perspective_project(&pred.vertices, &output.camera, dataset.width, dataset.height);
        let pred_sil = rasterize_hard(&pred2d, &model.faces, dataset.height, dataset.width)?;
        // Ground truth is the clean re-render of the target parameters, not
        // the (possibly corrupted) network input.
        let target_cam = PerspectiveCamera {
            translation: pair.camera_translation,
            ..base_cam.clone()
        };
        let target2d = perspective_project(&pair.target_vertices, &target_cam)?;
        let target_sil = rasterize_hard(&target2d, &model.faces, dataset.height, dataset.width)?;
        sum_miou += silhouette_miou(&pred_sil, &target_sil)?;
    }
    let n = dataset.pairs.len();
    let report = MetricsReport {
        n_samples: n,
        mpjpe_pa_mm: sum_mpjpe / n as f64,
        pve_t_sc_mm: sum_pve / n as f64,
        miou: sum_miou / n as f64,
    };
    report.save_json(&out_json)?;
    if let Some(csv) = &out_csv {
        ensure_parent_dir(csv)?;
        let text = format!("{}\n{}\n", MetricsReport::csv_header(), report.to_csv_row());
        std::fs::write(csv, text).map_err(|e| Error::io(csv, e))?;
    }
    println!("{:>9} {:>12} {:>12} {:>8}", "n_samples", "mpjpe_pa_mm", "pve_t_sc_mm", "miou");
    println!(
        "{:>9} {:>12.3} {:>12.3} {:>8.4}",
        report.n_samples, report.mpjpe_pa_mm, report.pve_t_sc_mm, report.miou
    );
    println!("report -> {}", out_json.display());
    Ok(())
}

fn parse_beta(text: Option<&str>, b: usize) -> Result<ShapeParams> {
    let beta = match text {
        None => vec![0.0; b],
        Some(text) => {
            let values: Vec<f64> = text
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::parameter(format!("beta entry '{v}' is not a number")))
                })
                .collect::<Result<_>>()?;
            if values.len() != b {
                return Err(Error::parameter(format!(
                    "beta has {} entries but the model has {} shape coefficients",
                    values.len(),
                    b
                )));
            }
            values
        }
    };
    Ok(ShapeParams { beta })
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let mut r = Resolver::new(args.config.as_deref())?;
    let model_path = r.path("model", args.model)?;
    let out = r.path("out", args.out)?;
    let size = r.usize("size", args.size, 256)?;
    let beta_text = r.string_opt("beta", args.beta)?;
    let pose_seed = {
        let file = r.kv.take_u64("pose_seed")?;
        let v = args.pose_seed.or(file);
        r.record("pose_seed", v.map(|s| s.to_string()).unwrap_or("rest".to_string()));
        v
    };
    let depth = r.f64("depth", args.depth, 3.0)?;
    let soft = r.flag("soft", args.soft)?;
    let tau = r.f64("tau", args.tau, 0.1)?;
    let heatmaps_out = r.path_opt("heatmaps", args.heatmaps)?;
    r.print("render")?;

    let model = BodyModel::load(&model_path)?;
    let shape = parse_beta(beta_text.as_deref(), model.n_shape_coeffs())?;
    let pose = match pose_seed {
        Some(seed) => bodyfit::bank::synthetic_pose_bank(seed, 1, model.n_joints())?.pose_params(0),
        None => PoseParams::identity(model.n_joints()),
    };
    let lbs = lbs_forward(&model, &shape, &pose)?;
    let camera = PerspectiveCamera {
        translation: Vector3::new(0.0, -0.1, depth),
        ..PerspectiveCamera::default_for_size(size)
    };
    let verts2d = perspective_project(&lbs.vertices, &camera)?;
    let silhouette = if soft {
        rasterize_soft(&verts2d, &model.faces, size, size, tau)?
    } else {
        rasterize_hard(&verts2d, &model.faces, size, size)?
    };
    ensure_parent_dir(&out)?;
    write_pgm(&out, &silhouette, size, size)?;
    println!(
        "rendered {} silhouette ({}×{}) -> {}",
        if soft { "soft" } else { "binary" },
        size,
        size,
        out.display()
    );

    if let Some(path) = heatmaps_out {
        let kp3d: Vec<Vector3<f64>> = model
            .keypoint_map
            .iter()
            .map(|&j| lbs.joints3d[j])
            .collect();
        let joints2d = perspective_project(&kp3d, &camera)?;
        let sigma = (size as f64 / 32.0).max(2.0);
        let maps = joint_heatmaps(&joints2d, size, size, sigma)?;
        let mut max_map = vec![0.0f64; size * size];
        for channel in maps.chunks(size * size) {
            for (m, &v) in max_map.iter_mut().zip(channel) {
                *m = m.max(v);
            }
        }
        ensure_parent_dir(&path)?;
        write_pgm(&path, &max_map, size, size)?;
        println!("rendered keypoint heatmaps -> {}", path.display());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) => 2,
        Error::Data(_) | Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ModelGen(args) => cmd_model_gen(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Render(args) => cmd_render(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
