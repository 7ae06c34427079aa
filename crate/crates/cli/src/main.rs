use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fitvid_core::augment::{self, AugmentationPolicy};
use fitvid_core::checkpoint::Checkpoint;
use fitvid_core::data;
use fitvid_core::planner::CemConfig;
use fitvid_core::rollout::{predict_sequence, RolloutRequest};
use fitvid_core::runner::{self, PlanPolicy, RunLog, TrainOptions};
use fitvid_core::tensor::Tensor;
use fitvid_core::{count_parameters, Error, ModelConfig, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "fitvid", version, about = "Stochastic video prediction: train, evaluate, predict and plan")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with periodic held-out evaluation and checkpoints.
    Train(TrainArgs),
    /// Best-of-K evaluation of a checkpoint, written as a JSON report.
    Eval(EvalArgs),
    /// Predict one video and save context, prediction and truth as a PNG grid.
    Predict(PredictArgs),
    /// Run the pushing task suite and print a success table.
    Plan(PlanArgs),
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Augmentation utilities.
    Augment {
        #[command(subcommand)]
        command: AugmentCommand,
    },
    /// Redraw curves from a run log.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the learnable parameter count and fingerprint of a configuration.
    Params {
        #[arg(long, default_value = "reference")]
        config: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct TrainArgs {
    /// Preset name (reference, scaled-500m, tiny) or configuration file.
    #[arg(long, default_value = "tiny")]
    config: String,
    /// Dataset file or generator spec such as pusher:64:12:0.
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "off")]
    augment: Switch,
    #[arg(long, default_value_t = runner::DEFAULT_EVAL_INTERVAL)]
    eval_interval: u64,
    /// Defaults to the evaluation interval.
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[arg(long, default_value_t = 4)]
    test_count: usize,
    /// Continue from latest.ckpt in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Preset or file the checkpoint must match.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    video: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Cem,
    Random,
}

#[derive(Args)]
struct PlanArgs {
    /// Plan with learned dynamics from this checkpoint.
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Plan with the environment itself as the dynamics model.
    #[arg(long)]
    oracle: bool,
    #[arg(long, value_enum, default_value = "cem")]
    policy: PolicyArg,
    #[arg(long, default_value_t = 50)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = data::DEFAULT_RESOLUTION)]
    resolution: usize,
    /// Directory for the table and per-task JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save executed trajectories in the dataset container.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Pusher,
    Sprites,
}

#[derive(Subcommand)]
enum DataCommand {
    Generate {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 12)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = data::DEFAULT_RESOLUTION)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum AugmentCommand {
    /// Original frames above, augmented frames below.
    Preview {
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 0)]
        video: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5.0)]
        magnitude: f64,
        #[arg(long, default_value_t = 1)]
        transforms: usize,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(spec: &str) -> Result<ModelConfig> {
    let p = Path::new(spec);
    if p.exists() {
        ModelConfig::load(p)
    } else {
        ModelConfig::preset(spec)
    }
}

fn video_of(ds: &data::Dataset, i: usize) -> Result<Tensor<f32>> {
    if i >= ds.len() {
        return Err(Error::Parameter(format!("video {i} out of range for {} videos", ds.len())));
    }
    Ok(ds.gather(&[i]).0)
}

fn frames_of(v: &Tensor<f32>) -> Vec<&[f32]> {
    let s = v.shape();
    let per = s[s.len() - 3] * s[s.len() - 2] * s[s.len() - 1];
    v.data().chunks(per).collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let ds = runner::resolve_dataset(&a.dataset)?;
    let mut o = TrainOptions::new(cfg, a.out.clone());
    o.steps = a.steps;
    o.seed = a.seed;
    o.augment = matches!(a.augment, Switch::On).then(AugmentationPolicy::default);
    o.eval_interval = a.eval_interval;
    o.checkpoint_interval = a.checkpoint_interval.unwrap_or(a.eval_interval);
    o.test_count = a.test_count;
    o.resume = a.resume;
    o.verbose = a.verbose;
    let s = runner::run_train(&o, &ds)?;
    println!(
        "trained steps {}..{}; {} checkpoints; log {}",
        s.start_step,
        s.final_step,
        s.checkpoints.len(),
        a.out.join(runner::LOG_FILE).display()
    );
    if let Some(step) = s.overfit_step {
        println!("overfit advisory raised at step {step}");
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let expected = a.config.as_deref().map(load_config).transpose()?;
    let (model, ck) = Checkpoint::<f32>::load(&a.checkpoint, expected.as_ref())?;
    let ds = runner::resolve_dataset(&a.dataset)?;
    let report = runner::run_eval(&model, &ck.params, &ds, a.k, a.seed)?;
    runner::write_atomic(&a.out, report.to_json().as_bytes())?;
    println!(
        "{} videos, K={}: mean best PSNR {:.3}, mean best SSIM {:.4}, FVD {}",
        report.videos.len(),
        a.k,
        report.aggregate.mean_best_psnr,
        report.aggregate.mean_best_ssim,
        report.aggregate.fvd.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let (model, ck) = Checkpoint::<f32>::load(&a.checkpoint, None)?;
    let cfg = &model.cfg;
    let ds = runner::resolve_dataset(&a.dataset)?;
    if ds.manifest.frames_per_video < cfg.total_frames {
        return Err(Error::Config("dataset videos are shorter than the model's clips".into()));
    }
    let video = runner::resize_videos(&video_of(&ds, a.video)?, cfg.input_size)?;
    let c = cfg.context_frames;
    let horizon = cfg.total_frames - c;
    let clip = fitvid_core::train::slice_frames(&video, 0, cfg.total_frames);
    let context = fitvid_core::train::slice_frames(&clip, 0, c);
    let actions = if cfg.action_dim > 0 {
        ds.gather(&[a.video]).1.map(|x| fitvid_core::train::slice_frames(&x, 0, cfg.total_frames))
    } else {
        None
    };
    let req = RolloutRequest::new(context.clone(), actions, horizon, 1, a.seed);
    let pred = predict_sequence(&model, &ck.params, &req, None)?;
    let s = cfg.input_size;
    let truth = frames_of(&clip);
    let mut top = frames_of(&context);
    top.extend(frames_of(&pred));
    runner::save_grid_png(&a.out, &[top, truth], s, s, cfg.channels)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn plan(a: PlanArgs) -> Result<()> {
    let policy = match a.policy {
        PolicyArg::Cem => PlanPolicy::Cem,
        PolicyArg::Random => PlanPolicy::Random,
    };
    if policy == PlanPolicy::Cem && a.checkpoint.is_none() && !a.oracle {
        return Err(Error::Config("cem planning needs --oracle or --checkpoint".into()));
    }
    let loaded = a.checkpoint.as_deref().map(|p| Checkpoint::<f32>::load(p, None)).transpose()?;
    let model = loaded.as_ref().map(|(m, ck)| (m, &ck.params));
    let summary = runner::run_plan(a.tasks, a.seed, policy, model, &CemConfig::default(), a.resolution)?;
    let table = summary.table();
    print!("{table}");
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        runner::write_atomic(&dir.join("plan_table.txt"), table.as_bytes())?;
        let json = serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n";
        runner::write_atomic(&dir.join("plan_summary.json"), json.as_bytes())?;
    }
    if let Some(path) = &a.export {
        let res = model.map_or(a.resolution, |(m, _)| m.cfg.input_size);
        data::dataset_write(path, &summary.to_dataset(res, a.seed)?)?;
    }
    Ok(())
}

fn generate(kind: Kind, n: usize, frames: usize, seed: u64, res: usize, out: &Path) -> Result<()> {
    let ds = match kind {
        Kind::Pusher => data::generate_pusher_dataset_at(n, frames, seed, res)?,
        Kind::Sprites => data::generate_sprites_dataset_at(n, frames, seed, res)?,
    };
    data::dataset_write(out, &ds)?;
    println!("wrote {} videos of {} frames to {}", ds.len(), frames, out.display());
    Ok(())
}

fn preview(dataset: &str, video: usize, seed: u64, magnitude: f64, transforms: usize, size: Option<usize>, out: &Path) -> Result<()> {
    let ds = runner::resolve_dataset(dataset)?;
    let v = video_of(&ds, video)?;
    let res = ds.manifest.resolution;
    let target = size.unwrap_or(res);
    let policy = AugmentationPolicy {
        num_transforms: transforms,
        magnitude,
        ..AugmentationPolicy::default()
    };
    let aug = augment::augment_video(&v, &policy, target, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let orig = runner::resize_videos(&v, target)?;
    runner::save_grid_png(out, &[frames_of(&orig), frames_of(&aug)], target, target, ds.manifest.channels)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Plan(a) => plan(a),
        Command::Data {
            command: DataCommand::Generate {
                kind,
                n,
                frames,
                seed,
                resolution,
                out,
            },
        } => generate(kind, n, frames, seed, resolution, &out),
        Command::Augment {
            command: AugmentCommand::Preview {
                dataset,
                video,
                seed,
                magnitude,
                transforms,
                size,
                out,
            },
        } => preview(&dataset, video, seed, magnitude, transforms, size, &out),
        Command::Plot { log, out } => {
            std::fs::create_dir_all(&out)?;
            for p in runner::write_plots(&RunLog::read(&log)?, &out)? {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Params { config } => {
            let cfg = load_config(&config)?;
            println!("parameters {}", count_parameters(&cfg)?);
            println!("fingerprint {}", cfg.fingerprint());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
