//! `voxfuse` — LiDAR-camera voxel fusion pipeline.
//!
//! Subcommands: `synth` (generate a scene), `project` (voxelize and
//! project), `fuse` (run both fusion stages), `stats` (occupancy and box
//! statistics), `gradcheck` (finite-difference validation of the attention
//! block), `sweep` (hyperparameter ablations as CSV), `bench` (timed run).
//!
//! Exit codes: 0 success, 2 argument error, 3 IO error, 4 numeric or
//! validation failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use voxfuse::config::FusionConfig;
use voxfuse::error::Error;
use voxfuse::p2fusion::gradient_check;
use voxfuse::pipeline::{
    bench_fuse, load_scene_dir, run_fuse, run_project, run_stats, run_stats_csv, run_sweep,
    write_scene, SweepParam,
};
use voxfuse::scenegen::{generate_feature_map, generate_scene, SceneSpec};
use voxfuse::tensor::{write_npy, Tensor};

const EXIT_ARGUMENT: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "voxfuse", version, about = "LiDAR-camera voxel fusion pipeline")]
struct Cli {
    /// Configuration file (key = value lines; flags override it).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for commands that write files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (points, calibration, features, boxes).
    Synth(SynthArgs),
    /// Voxelize a scene and project voxel positions onto the image.
    Project(SceneArgs),
    /// Run patch-point fusion and foreground-background fusion.
    Fuse(FuseArgs),
    /// Report pixel occupancy and per-box point counts.
    Stats(StatsArgs),
    /// Check attention-block gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the fuse pipeline over a grid of one hyperparameter.
    Sweep(SweepArgs),
    /// Time the fuse pipeline on a synthetic voxel set.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of objects to place.
    #[arg(long, default_value_t = 8)]
    objects: usize,
    /// Vertical beam count of the scanner model.
    #[arg(long, default_value_t = 64)]
    beams: usize,
}

#[derive(Args)]
struct SceneArgs {
    /// Scene directory (from `synth` or assembled by hand).
    #[arg(long)]
    scene: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Also dump importance scores, the foreground mask, and expansion
    /// targets as NPY files.
    #[arg(long)]
    dump_intermediate: bool,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Write per-box counts as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    c: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Test hook: corrupt one analytic gradient so the check must fail.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Parameter to vary: T, k_off, or stage.
    #[arg(long)]
    param: String,
    /// Comma-separated values; defaults to the stock grid of the parameter.
    #[arg(long)]
    values: Option<String>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    c: usize,
    #[arg(long, default_value_t = 1024)]
    chunk: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Numeric { .. } => EXIT_NUMERIC,
        Error::Argument(_) | Error::Parse(_) | Error::Format(_) | Error::Unsupported(_) => {
            EXIT_ARGUMENT
        }
    }
}

fn load_config(cli: &Cli) -> Result<FusionConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => FusionConfig::from_file(path)?,
        None => FusionConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Synth(args) => cmd_synth(&cli, &config, args),
        Command::Project(args) => cmd_project(&cli, &config, args),
        Command::Fuse(args) => cmd_fuse(&cli, &config, args),
        Command::Stats(args) => cmd_stats(args),
        Command::Gradcheck(args) => cmd_gradcheck(&config, args),
        Command::Sweep(args) => cmd_sweep(&config, args),
        Command::Bench(args) => cmd_bench(&config, args),
    }
}

fn cmd_synth(cli: &Cli, config: &FusionConfig, args: &SynthArgs) -> Result<ExitCode, Error> {
    let spec = SceneSpec {
        seed: config.seed,
        object_count: args.objects,
        beams: voxfuse::scenegen::BeamModel {
            vertical_beams: args.beams,
            ..SceneSpec::default().beams
        },
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec)?;
    let features = generate_feature_map(&spec, config.channels)?;
    write_scene(&scene, &features, &cli.out)?;
    println!("scene_dir: {}", cli.out.display());
    println!("n_points: {}", scene.points.len());
    println!("n_boxes: {}", scene.boxes.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_project(cli: &Cli, config: &FusionConfig, args: &SceneArgs) -> Result<ExitCode, Error> {
    let inputs = load_scene_dir(&args.scene)?;
    let out = run_project(&inputs, config)?;
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    out.voxels.save(cli.out.join("voxels"))?;
    let n = out.pixels.len();
    if n > 0 {
        let pix: Vec<f64> = out.pixels.iter().flatten().copied().collect();
        write_npy(&Tensor::from_f64(vec![n, 2], pix)?, cli.out.join("pixels.npy"))?;
        write_npy(
            &Tensor::from_f64(vec![n], out.depths.clone())?,
            cli.out.join("depths.npy"),
        )?;
        let valid: Vec<f64> = out.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        write_npy(&Tensor::from_f64(vec![n], valid)?, cli.out.join("valid.npy"))?;
    }
    println!("n_points: {}", inputs.points.len());
    println!("n_voxels: {n}");
    println!("n_valid: {}", out.valid.iter().filter(|&&v| v).count());
    Ok(ExitCode::SUCCESS)
}

fn cmd_fuse(cli: &Cli, config: &FusionConfig, args: &FuseArgs) -> Result<ExitCode, Error> {
    let inputs = load_scene_dir(&args.scene)?;
    let out = run_fuse(&inputs, config, args.dump_intermediate)?;
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    out.fused.save(cli.out.join("p2_fusion"))?;
    out.fb.save(cli.out.join("fb_fusion"))?;
    if !out.fused.is_empty() {
        let t = Tensor::from_f64(
            vec![out.fused.len(), out.fused.channels()],
            out.fused.features().to_vec(),
        )?;
        write_npy(&t, cli.out.join("f_fusion.npy"))?;
    }
    if let Some(inter) = &out.intermediates {
        write_npy(&inter.scores, cli.out.join("scores.npy"))?;
        if !inter.fore_mask.is_empty() {
            write_npy(
                &Tensor::from_f64(vec![inter.fore_mask.len()], inter.fore_mask.clone())?,
                cli.out.join("fore_mask.npy"),
            )?;
        }
        if !inter.expanded_targets.is_empty() {
            let flat: Vec<f64> = inter
                .expanded_targets
                .iter()
                .flat_map(|t| t.iter().map(|&x| x as f64))
                .collect();
            write_npy(
                &Tensor::from_f64(vec![inter.expanded_targets.len(), 3], flat)?,
                cli.out.join("expanded_targets.npy"),
            )?;
        }
    }
    print!("{}", out.report.to_kv_lines());
    Ok(ExitCode::SUCCESS)
}

fn cmd_stats(args: &StatsArgs) -> Result<ExitCode, Error> {
    let inputs = load_scene_dir(&args.scene)?;
    print!("{}", run_stats(&inputs)?);
    if let Some(csv_path) = &args.csv {
        write_text(csv_path, &run_stats_csv(&inputs)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(config: &FusionConfig, args: &GradcheckArgs) -> Result<ExitCode, Error> {
    let report = gradient_check(
        args.n,
        args.k,
        args.c,
        config.seed,
        args.step,
        args.tol,
        args.corrupt,
    )?;
    print!("{}", report.to_text());
    if report.pass() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_NUMERIC))
    }
}

fn cmd_sweep(config: &FusionConfig, args: &SweepArgs) -> Result<ExitCode, Error> {
    let param = SweepParam::parse(&args.param)?;
    let values = match &args.values {
        None => param.default_values(),
        Some(list) => {
            let mut out = Vec::new();
            for tok in list.split(',') {
                let tok = tok.trim();
                out.push(
                    tok.parse::<f64>()
                        .map_err(|_| Error::Argument(format!("bad sweep value '{tok}'")))?,
                );
            }
            out
        }
    };
    let inputs = load_scene_dir(&args.scene)?;
    let csv = run_sweep(&inputs, config, param, &values)?;
    match &args.csv {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(config: &FusionConfig, args: &BenchArgs) -> Result<ExitCode, Error> {
    let report = bench_fuse(args.n, args.k, args.c, args.chunk, config.seed)?;
    print!("{}", report.to_kv_lines());
    if report.deterministic {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_NUMERIC))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
