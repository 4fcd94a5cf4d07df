use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dego_cli::commands::{self, DebugPrediction, EvalOptions};
use dego_cli::CliError;

#[derive(Parser)]
#[command(name = "dego", version, about = "Deformable Gaussian occupancy from rendered supervision")]
struct Cli {
    /// Overrides the seed of the scene recipe, config or teacher.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). 1 gives the reference path.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Debug {
    Gt,
    Free,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory.
    GenScene {
        /// Scene recipe (JSON); the built-in recipe when omitted.
        #[arg(long)]
        recipe: Option<PathBuf>,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score the prediction at frame 0 against ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        visible_only: bool,
        #[arg(long)]
        rayiou: bool,
        /// Replace the prediction (metric plumbing checks).
        #[arg(long, value_enum, hide = true)]
        debug_prediction: Option<Debug>,
    },
    /// Render semantic, depth and alpha maps for one frame and camera.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Frame offset relative to the reference frame.
        #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
        frame: i32,
        #[arg(long, default_value_t = 0)]
        camera: usize,
    },
    /// Write teacher features for a scene.
    DumpTeacher {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "synthetic")]
        mode: String,
        #[arg(long, default_value_t = 8)]
        patch_size: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
    },
    /// Export the frame-0 occupancy prediction as a voxel file.
    ExportVoxels {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::GenScene { recipe } => {
            let digest = commands::gen_scene(recipe.as_deref(), cli.seed, &out("scene"))?;
            println!("{digest}");
        }
        Command::Train { config } => {
            let s = commands::train(&config, cli.seed, cli.out.as_deref())?;
            println!("initial parameter digest {}", s.init_digest);
            println!("parameter digest {}", s.param_digest);
            println!("final loss {:.12e}", s.final_loss);
        }
        Command::Eval {
            checkpoint,
            scene,
            visible_only,
            rayiou,
            debug_prediction,
        } => {
            let opts = EvalOptions {
                visible_only,
                rayiou,
                debug_prediction: debug_prediction.map(|d| match d {
                    Debug::Gt => DebugPrediction::GroundTruth,
                    Debug::Free => DebugPrediction::AllFree,
                }),
            };
            let report = commands::eval(&checkpoint, &scene, &opts, &out("out"))?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Render {
            checkpoint,
            scene,
            frame,
            camera,
        } => {
            let files = commands::render(&checkpoint, &scene, frame, camera, &out("out"))?;
            for p in [files.semantic, files.depth, files.alpha] {
                println!("{}", p.display());
            }
        }
        Command::DumpTeacher {
            scene,
            mode,
            patch_size,
            channels,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let path = commands::dump_teacher(&scene, &mode, patch_size, channels, seed, &out("out"))?;
            println!("{}", path.display());
        }
        Command::ExportVoxels { checkpoint } => {
            let path = commands::export_voxels(&checkpoint, &out("out"))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEGO_LOG", "error")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
