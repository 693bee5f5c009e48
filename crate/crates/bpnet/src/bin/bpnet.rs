//! Command-line entry point for depth completion: inference, training,
//! evaluation, the sparsity sweep, the ablation grid, gradient checking and
//! synthetic data generation.
//!
//! Exit codes: 0 success, 1 usage/configuration, 2 data, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bpnet::harness::{ablation_run, default_ablation_grid, model_predictor, sparsity_sweep};
use bpnet::io;
use bpnet::metrics::{compute_metrics, DEFAULT_DELTAS};
use bpnet::pipeline::{crop, gradcheck, pad_to_multiple, BpNet, InitMode, PipelineConfig};
use bpnet::sparse::{sample_sparse, SparseDepthMap};
use bpnet::synthetic::generate_scene;
use bpnet::{BpError, Result};

#[derive(Parser)]
#[command(name = "bpnet", version, about = "Sparse-to-dense depth completion")]
struct Cli {
    /// TOML configuration; falls back to $BPDEPTH_CONFIG, then defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Densify a sparse depth map guided by an image.
    Complete(CompleteArgs),
    /// Train on a synthetic scene and write a checkpoint.
    Train(TrainArgs),
    /// Compare a predicted depth PFM against ground truth.
    Eval(EvalArgs),
    /// Evaluate robustness across sparsity levels.
    Sweep(SweepArgs),
    /// Train and compare stage/input ablation variants.
    Ablate(AblateArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a deterministic synthetic scene to disk.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Args)]
struct CompleteArgs {
    /// Guide image (PFM, grayscale or color).
    #[arg(long)]
    image: PathBuf,
    /// Sparse depth CSV (x,y,depth_m).
    #[arg(long)]
    sparse: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output dense depth PFM.
    #[arg(long)]
    output: PathBuf,
    /// Optional 8-bit PGM preview.
    #[arg(long)]
    preview: Option<PathBuf>,
    /// fx,fy,cx,cy; defaults to a generic pinhole for the image size.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    intrinsics: Option<Vec<f64>>,
}

#[derive(Args)]
struct TrainArgs {
    /// Seed of the synthetic training scene.
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long)]
    checkpoint_out: PathBuf,
    /// Per-step loss CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted depth PFM.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth depth PFM; zero pixels are ignored.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "25,50,75")]
    counts: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of synthetic evaluation scenes.
    #[arg(long, default_value_t = 3)]
    scenes: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Sparse points for the held-out evaluation sample.
    #[arg(long, default_value_t = 50)]
    eval_points: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    checks_per_param: usize,
    #[arg(long, default_value_t = 1e-5)]
    fd_step: f64,
    #[arg(long, default_value_t = 1e-4)]
    rtol: f64,
}

#[derive(Args)]
struct GenSyntheticArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Output ground-truth depth PFM.
    #[arg(long)]
    depth_out: PathBuf,
    /// Output color image PFM.
    #[arg(long)]
    image_out: Option<PathBuf>,
    /// Output sparse-point CSV sampled from the ground truth.
    #[arg(long)]
    sparse_out: Option<PathBuf>,
    /// Points to sample for --sparse-out.
    #[arg(long, default_value_t = 50)]
    sparse_points: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match io::load_config(cli.config.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command, cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                BpError::NonFinite { .. } => 3,
                BpError::InvalidArgument { .. } | BpError::Indivisible { .. } => 1,
                _ => 2,
            })
        }
    }
}

fn run(cmd: Command, cfg: PipelineConfig) -> Result<ExitCode> {
    match cmd {
        Command::Complete(a) => complete(a, cfg),
        Command::Train(a) => train(a, cfg),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a, cfg),
        Command::Ablate(a) => ablate(a, cfg),
        Command::Gradcheck(a) => run_gradcheck(a, cfg),
        Command::GenSynthetic(a) => gen_synthetic(a),
    }
}

fn complete(a: CompleteArgs, cfg: PipelineConfig) -> Result<ExitCode> {
    let (image, h, w) = io::read_pfm_image(&a.image)?;
    let map = io::read_sparse_csv(&a.sparse, h, w)?;
    let intr = match &a.intrinsics {
        Some(v) => bpnet::geometry::CameraIntrinsics {
            fx: v[0],
            fy: v[1],
            cx: v[2],
            cy: v[3],
        },
        None => bpnet::geometry::CameraIntrinsics {
            fx: 0.8 * w as f64,
            fy: 0.8 * w as f64,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        },
    };
    let mut model = BpNet::new(cfg, InitMode::Identity)?;
    model.params.load(&a.checkpoint)?;
    let m = model.cfg.required_multiple();
    let (pimg, ph, pw) = pad_to_multiple(&image, 3, h, w, m);
    let (pdepth, _, _) = pad_to_multiple(&map.depth, 1, h, w, m);
    let pmap = SparseDepthMap::from_depth(pdepth, ph, pw)?;
    let pred_padded = model.infer(&pimg, &pmap, &intr)?;
    let pred = crop(&pred_padded, ph, pw, h, w);
    io::write_pfm(&a.output, &pred, h, w)?;
    if let Some(p) = &a.preview {
        io::write_pgm_preview(p, &pred, h, w)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs, cfg: PipelineConfig) -> Result<ExitCode> {
    let m = cfg.required_multiple();
    if a.height % m != 0 || a.width % m != 0 {
        return Err(BpError::Indivisible {
            h: a.height,
            w: a.width,
            m,
        });
    }
    let scene = generate_scene(a.height, a.width, a.scene_seed);
    let mut model = BpNet::new(cfg, InitMode::Identity)?;
    let history = model.train(&scene)?;
    model.params.save(&a.checkpoint_out)?;
    if let Some(p) = &a.loss_csv {
        io::write_loss_csv(p, &history)?;
    }
    if let Some((step, loss)) = history.last() {
        println!("trained {} steps, final loss {loss:.6e} (step {step})", history.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let (pred, ph, pw) = io::read_pfm(&a.pred)?;
    let (gt, gh, gw) = io::read_pfm(&a.gt)?;
    if (ph, pw) != (gh, gw) {
        return Err(BpError::ShapeMismatch {
            op: "eval",
            lhs: vec![ph, pw],
            rhs: vec![gh, gw],
        });
    }
    let report = compute_metrics(&pred, &gt, &DEFAULT_DELTAS)?;
    io::write_metrics_csv(&a.output, &report)?;
    println!(
        "rmse {:.6} mae {:.6} rel {:.6} over {} pixels",
        report.rmse, report.mae, report.rel, report.n_valid
    );
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: SweepArgs, cfg: PipelineConfig) -> Result<ExitCode> {
    let mut model = BpNet::new(cfg, InitMode::Identity)?;
    model.params.load(&a.checkpoint)?;
    let scenes: Vec<_> = (0..a.scenes)
        .map(|i| generate_scene(a.height, a.width, a.seed.wrapping_add(1000 + i as u64)))
        .collect();
    let rows = sparsity_sweep(model_predictor(&model), &scenes, &a.counts, a.repeats, a.seed)?;
    for row in &rows {
        if row.mean.is_none() {
            eprintln!(
                "warning: skipped count {} (exceeds valid-pixel supply)",
                row.count
            );
        }
    }
    io::write_sweep_csv(&a.output, &rows)?;
    Ok(ExitCode::SUCCESS)
}

fn ablate(a: AblateArgs, cfg: PipelineConfig) -> Result<ExitCode> {
    let scene = generate_scene(a.height, a.width, a.scene_seed);
    let grid = default_ablation_grid(&cfg);
    let rows = ablation_run(&grid, &scene, a.eval_points, a.scene_seed ^ 0xE7A1)?;
    io::write_ablation_csv(&a.output, &rows)?;
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(a: GradcheckArgs, cfg: PipelineConfig) -> Result<ExitCode> {
    let cfg = PipelineConfig {
        scales: 1,
        widths: vec![cfg.widths.first().copied().unwrap_or(8).min(8)],
        mlp_hidden: cfg.mlp_hidden.min(8),
        unet_depth: 1,
        kernels: vec![3],
        n_points: 12,
        ..cfg
    };
    let outcome = gradcheck(&cfg, a.height, a.width, a.checks_per_param, a.fd_step, a.rtol)?;
    if outcome.failures.is_empty() {
        println!("gradcheck passed: {} entries checked", outcome.checked);
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &outcome.failures {
            eprintln!(
                "gradcheck failure: {}[{}] analytic {:.8e} numeric {:.8e}",
                f.param, f.index, f.analytic, f.numeric
            );
        }
        eprintln!(
            "gradcheck failed: {}/{} entries",
            outcome.failures.len(),
            outcome.checked
        );
        Ok(ExitCode::from(3))
    }
}

fn gen_synthetic(a: GenSyntheticArgs) -> Result<ExitCode> {
    let scene = generate_scene(a.height, a.width, a.seed);
    io::write_pfm(&a.depth_out, &scene.depth, scene.height, scene.width)?;
    if let Some(p) = &a.image_out {
        io::write_pfm_color(p, &scene.image, scene.height, scene.width)?;
    }
    if let Some(p) = &a.sparse_out {
        let map = sample_sparse(
            &scene.depth,
            scene.height,
            scene.width,
            a.sparse_points,
            a.seed ^ 0x5A,
        )?;
        io::write_sparse_csv(p, &map)?;
    }
    Ok(ExitCode::SUCCESS)
}
