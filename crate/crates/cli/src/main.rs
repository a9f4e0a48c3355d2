use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radiosynth_cli::pipeline::ToyKind;
use radiosynth_cli::{diffusion, eval, pipeline, prepare, sr, study, CliResult, PipelineConfig};

#[derive(Parser)]
#[command(name = "radiosynth", version, about = "Synthetic panoramic radiograph pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration.
    Config,
    /// Crop, grayscale and resize raw images into hr/ and lr/ with a manifest.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Lines of `name x y w h` crop rectangles.
        #[arg(long)]
        rects: Option<PathBuf>,
    },
    /// Forward-noising pixel statistics of one image across timesteps.
    Diagnostics {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 50)]
        stride: usize,
    },
    /// Train the noise-prediction network on an LR corpus.
    TrainDiffusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Draw LR samples from a trained denoiser.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Degrade an HR corpus into LR images with recipes from a pair pool.
    Degrade {
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Train the super-resolution generator on degraded pairs.
    TrainSr {
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Upscale a directory of LR images.
    Upscale {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Distribution and detection metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Observer study service and scoring.
    #[command(subcommand)]
    Study(StudyCommand),
    /// Write a synthetic corpus at the HR size.
    ToyCorpus {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// radiograph, noise or mixture.
        #[arg(long, default_value = "radiograph")]
        kind: String,
    },
    /// Whole toy pipeline in one go, ending in a FID comparison.
    /// Starts from the toy preset instead of the full-size defaults.
    Pipeline {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 64)]
        corpus_size: usize,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    Fid {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    Is {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    Tsne {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// ROC/PR from a `score,label` CSV.
    Roc {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum StudyCommand {
    Serve {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        #[arg(long)]
        sessions: PathBuf,
        /// Observer UI bundle served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    Score {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// `observer,group` CSV for per-group ROC averages.
        #[arg(long)]
        groups: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn run(cli: Cli) -> CliResult<()> {
    let Global { config, overrides } = cli.global;
    let base = match cli.command {
        Command::Pipeline { .. } => PipelineConfig::toy(),
        _ => PipelineConfig::default(),
    };
    let cfg = PipelineConfig::load_onto(base, config.as_deref(), &overrides)?;
    match cli.command {
        Command::Config => print!("{}", cfg.to_kv()),
        Command::Prepare { input, output, rects } => {
            let s = prepare::cmd_prepare(&cfg, &input, &output, rects.as_deref())?;
            println!("prepared {} images, skipped {}", s.processed, s.skipped);
        }
        Command::Diagnostics { image, output, stride } => {
            print!("{}", diffusion::cmd_diagnostics(&cfg, &image, &output, stride)?);
        }
        Command::TrainDiffusion { data, output } => {
            let rows = diffusion::cmd_train_diffusion(&cfg, &data, &output)?;
            if let Some(r) = rows.last() {
                println!("trained {} steps, final loss {:.5}", r.step, r.loss);
            }
        }
        Command::Sample { checkpoint, output, count } => {
            let n = diffusion::cmd_sample(&cfg, &checkpoint, &output, count)?.len();
            println!("wrote {n} samples to {}", output.display());
        }
        Command::Degrade { hr, output, pool } => {
            let n = sr::cmd_degrade(&cfg, &hr, &output, pool.as_deref())?;
            println!("degraded {n} images");
        }
        Command::TrainSr { hr, output, pool } => {
            let rows = sr::cmd_train_sr(&cfg, &hr, &output, pool.as_deref())?;
            if let Some(r) = rows.last() {
                println!("trained {} steps, final total loss {:.5}", r.step, r.total);
            }
        }
        Command::Upscale { checkpoint, input, output } => {
            let n = sr::cmd_upscale(&cfg, &checkpoint, &input, &output)?.len();
            println!("upscaled {n} images");
        }
        Command::Eval(e) => {
            let report = match e {
                EvalCommand::Fid { a, b, output } => eval::cmd_eval_fid(&cfg, &a, &b, &output)?,
                EvalCommand::Is { images, output } => eval::cmd_eval_is(&cfg, &images, &output)?,
                EvalCommand::Tsne { a, b, output } => eval::cmd_eval_tsne(&cfg, &a, &b, &output)?,
                EvalCommand::Roc { scores, output } => eval::cmd_eval_roc(&cfg, &scores, &output)?,
            };
            println!("{}", report.to_json());
        }
        Command::Study(StudyCommand::Serve { real, fake, sessions, static_dir }) => {
            let sc = study::server_config(&cfg, &real, &fake, &sessions, static_dir.as_deref())?;
            study::cmd_study_serve(&cfg, sc)?;
        }
        Command::Study(StudyCommand::Score { sessions, output, groups }) => {
            for s in study::cmd_study_score(&cfg, &sessions, &output, groups.as_deref())? {
                println!(
                    "{} {} [{}] P={:.2} R={:.2} A={:.2} AUC={:.3}",
                    s.id, s.observer, s.group, s.report.precision, s.report.recall, s.report.accuracy, s.auc
                );
            }
        }
        Command::ToyCorpus { output, count, kind } => {
            pipeline::cmd_toy_corpus(&cfg, kind.parse::<ToyKind>()?, count, &output)?;
        }
        Command::Pipeline { output, corpus_size } => {
            print_json(&pipeline::cmd_pipeline(&cfg, corpus_size, &output)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("radiosynth: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
