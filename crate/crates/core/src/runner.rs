//! Orchestration: training runs with held-out evaluation, checkpoints and
//! curves, best-of-K evaluation campaigns, planning benchmarks and image
//! export.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use fitvid_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{self, AugmentationPolicy, Clip, CropWindow};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::ModelConfig;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::{evaluate_best_of_k, MetricReport, ToyExtractor, ToyPerceptual};
use crate::model::FitVid;
use crate::params::{NormMode, ParamStore};
use crate::planner::{self, CemConfig, EpisodeOutcome, ModelDynamics, OracleDynamics};
use crate::pusher;
use crate::rollout::{sample_future_batch, stream_rng, RolloutRequest};
use crate::train::{draw_noise, teacher_forced_loss, train_step, AdamState};

pub const SMOOTHING_WINDOW: usize = 10;
pub const DEFAULT_EVAL_INTERVAL: u64 = 1000;
pub const LOG_FILE: &str = "runlog.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
const DATA_STREAM_SALT: u64 = 0x6461_7461;
const EVAL_STREAM_SALT: u64 = 0x6576_616c;

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunRecord {
    Train {
        step: u64,
        loss: LossBreakdown,
        wall_secs: f64,
    },
    /// Teacher-forced bound on the held-out split, evaluation-mode
    /// normalisation and fixed latent noise; `metric` is its total.
    Eval {
        step: u64,
        loss: LossBreakdown,
        metric: f64,
    },
}

impl RunRecord {
    pub fn step(&self) -> u64 {
        match self {
            RunRecord::Train { step, .. } | RunRecord::Eval { step, .. } => *step,
        }
    }
}

/// Append-only JSON-lines log.
pub struct RunLog {
    path: PathBuf,
}

impl RunLog {
    pub fn open(path: &Path) -> Self {
        Self { path: path.to_path_buf() }
    }

    pub fn append(&self, rec: &RunRecord) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let line = serde_json::to_string(rec).map_err(|e| Error::Inconsistent(e.to_string()))?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<RunRecord>> {
        let f = fs::File::open(path)?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Inconsistent(format!("run log line {}: {e}", i + 1)))?,
            );
        }
        Ok(out)
    }

    /// Keeps only records up to `step`, rewriting the file atomically.
    pub fn truncate_after(&self, step: u64) -> Result<Vec<RunRecord>> {
        let kept: Vec<RunRecord> = if self.path.exists() {
            Self::read(&self.path)?.into_iter().filter(|r| r.step() <= step).collect()
        } else {
            Vec::new()
        };
        let mut text = String::new();
        for r in &kept {
            text.push_str(&serde_json::to_string(r).map_err(|e| Error::Inconsistent(e.to_string()))?);
            text.push('\n');
        }
        write_atomic(&self.path, text.as_bytes())?;
        Ok(kept)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Trailing mean over at most `window` values ending at each position.
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let n = (i + 1).min(w);
            values[i + 1 - n..=i].iter().sum::<f64>() / n as f64
        })
        .collect()
}

/// Index of the first evaluation at which the smoothed eval metric has
/// risen three times in a row while the smoothed training loss fell over
/// the same span.
pub fn overfit_point(eval_smoothed: &[f64], train_smoothed: &[f64]) -> Option<usize> {
    (3..eval_smoothed.len().min(train_smoothed.len())).find(|&i| {
        (i - 2..=i).all(|j| eval_smoothed[j] > eval_smoothed[j - 1]) && train_smoothed[i] < train_smoothed[i - 3]
    })
}

/// Training-loss curves and the evaluation curve derived from a run log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Curves {
    pub train_steps: Vec<f64>,
    pub train_recon: Vec<f64>,
    pub train_recon_smoothed: Vec<f64>,
    pub eval_steps: Vec<f64>,
    pub eval_metric: Vec<f64>,
    pub eval_smoothed: Vec<f64>,
    /// Smoothed training reconstruction at each evaluation.
    pub train_at_eval: Vec<f64>,
}

impl Curves {
    pub fn from_records(records: &[RunRecord]) -> Self {
        let mut c = Curves::default();
        for r in records {
            match r {
                RunRecord::Train { step, loss, .. } => {
                    c.train_steps.push(*step as f64);
                    c.train_recon.push(loss.recon);
                }
                RunRecord::Eval { step, metric, .. } => {
                    c.eval_steps.push(*step as f64);
                    c.eval_metric.push(*metric);
                }
            }
        }
        c.train_recon_smoothed = rolling_mean(&c.train_recon, SMOOTHING_WINDOW);
        c.eval_smoothed = rolling_mean(&c.eval_metric, SMOOTHING_WINDOW);
        c.train_at_eval = c
            .eval_steps
            .iter()
            .map(|&s| {
                let i = c.train_steps.partition_point(|&t| t <= s);
                if i == 0 {
                    f64::NAN
                } else {
                    c.train_recon_smoothed[i - 1]
                }
            })
            .collect();
        c
    }

    pub fn overfit_step(&self) -> Option<u64> {
        overfit_point(&self.eval_smoothed, &self.train_at_eval).map(|i| self.eval_steps[i] as u64)
    }
}

fn svg_polyline(xs: &[f64], ys: &[f64], bounds: (f64, f64, f64, f64), color: &str, width: f64, opacity: f64) -> String {
    let (x0, x1, y0, y1) = bounds;
    let sx = |x: f64| 60.0 + 560.0 * (x - x0) / (x1 - x0).max(1e-12);
    let sy = |y: f64| 20.0 + 340.0 * (1.0 - (y - y0) / (y1 - y0).max(1e-12));
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .filter(|(_, y)| y.is_finite())
        .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" stroke-opacity=\"{opacity}\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

/// A line chart of a raw series (faint) and its smoothed version.
pub fn curve_svg(title: &str, xs: &[f64], raw: &[f64], smoothed: &[f64]) -> String {
    let finite = raw.iter().chain(smoothed).copied().filter(|v| v.is_finite());
    let (mut y0, mut y1) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    let x0 = xs.first().copied().unwrap_or(0.0);
    let x1 = xs.last().copied().unwrap_or(1.0);
    let b = (x0, x1.max(x0 + 1.0), y0, if y1 > y0 { y1 } else { y0 + 1.0 });
    let mut s = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"640\" height=\"400\" fill=\"white\"/>\n\
         <rect x=\"60\" y=\"20\" width=\"560\" height=\"340\" fill=\"none\" stroke=\"#888\"/>\n",
    );
    s.push_str(&format!("<text x=\"340\" y=\"14\" text-anchor=\"middle\">{title}</text>\n"));
    s.push_str(&format!("<text x=\"56\" y=\"24\" text-anchor=\"end\">{:.4}</text>\n", b.3));
    s.push_str(&format!("<text x=\"56\" y=\"360\" text-anchor=\"end\">{:.4}</text>\n", b.2));
    s.push_str(&format!("<text x=\"60\" y=\"376\">{}</text>\n", b.0));
    s.push_str(&format!("<text x=\"620\" y=\"376\" text-anchor=\"end\">{}</text>\n", b.1));
    s.push_str(&svg_polyline(xs, raw, b, "#1f77b4", 1.0, 0.35));
    s.push_str(&svg_polyline(xs, smoothed, b, "#1f77b4", 2.0, 1.0));
    s.push_str("</svg>\n");
    s
}

/// Writes `train_curve.svg` and `eval_curve.svg` for a run log.
pub fn write_plots(records: &[RunRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    let c = Curves::from_records(records);
    let train = dir.join("train_curve.svg");
    let eval = dir.join("eval_curve.svg");
    write_atomic(
        &train,
        curve_svg("train reconstruction", &c.train_steps, &c.train_recon, &c.train_recon_smoothed).as_bytes(),
    )?;
    write_atomic(
        &eval,
        curve_svg("held-out bound", &c.eval_steps, &c.eval_metric, &c.eval_smoothed).as_bytes(),
    )?;
    Ok(vec![train, eval])
}

/// Resizes every video of `[N, T, R, R, C]` to `size x size`.
pub fn resize_videos(videos: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = videos.shape();
    if s[2] == size && s[3] == size {
        return Ok(videos.clone());
    }
    let per = s[1] * s[2] * s[3] * s[4];
    let mut out = Vec::with_capacity(s[0] * s[1] * size * size * s[4]);
    for i in 0..s[0] {
        let clip = Clip {
            t: s[1],
            h: s[2],
            w: s[3],
            c: s[4],
            data: videos.data()[i * per..(i + 1) * per].to_vec(),
        };
        let win = CropWindow {
            y: 0,
            x: 0,
            h: s[2],
            w: s[3],
        };
        out.extend(augment::crop_resize(&clip, win, size)?.data);
    }
    Ok(Tensor::from_vec(&[s[0], s[1], size, size, s[4]], out))
}

fn window(x: &Tensor<f32>, start: usize, len: usize) -> Tensor<f32> {
    crate::train::slice_frames(x, start, start + len)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub config: ModelConfig,
    pub out_dir: PathBuf,
    /// Step count to reach, including steps restored on resume.
    pub steps: u64,
    pub seed: u64,
    pub augment: Option<AugmentationPolicy>,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    /// Videos held out for evaluation.
    pub test_count: usize,
    pub resume: bool,
    pub verbose: bool,
}

impl TrainOptions {
    pub fn new(config: ModelConfig, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            out_dir: out_dir.into(),
            steps: 1000,
            seed: 0,
            augment: None,
            eval_interval: DEFAULT_EVAL_INTERVAL,
            checkpoint_interval: DEFAULT_EVAL_INTERVAL,
            test_count: 4,
            resume: false,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub start_step: u64,
    pub final_step: u64,
    /// Breakdown of every step run in this invocation.
    pub losses: Vec<LossBreakdown>,
    pub records: Vec<RunRecord>,
    pub overfit_step: Option<u64>,
    pub checkpoints: Vec<PathBuf>,
}

struct Batch {
    step: u64,
    frames: Tensor<f32>,
    actions: Option<Tensor<f32>>,
}

/// Batch for `step`, a pure function of the seed and the step so that it
/// can be prepared ahead of time and reproduced after a resume.
fn make_batch(ds: &Dataset, train_idx: &[usize], opts: &TrainOptions, step: u64) -> Result<Batch> {
    let cfg = &opts.config;
    let mut rng = stream_rng(opts.seed ^ DATA_STREAM_SALT, step);
    let tv = ds.manifest.frames_per_video;
    let mut picks = Vec::with_capacity(cfg.batch_size);
    let mut starts = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        picks.push(train_idx[rng.gen_range(0..train_idx.len())]);
        starts.push(rng.gen_range(0..=tv - cfg.total_frames));
    }
    let (videos, actions) = ds.gather(&picks);
    let cut = |x: &Tensor<f32>| -> Tensor<f32> {
        let clips: Vec<Tensor<f32>> = (0..picks.len())
            .map(|i| {
                let one = x.index_axis0(i);
                let mut shape = vec![1];
                shape.extend_from_slice(one.shape());
                window(&one.reshape(&shape), starts[i], cfg.total_frames).index_axis0(0)
            })
            .collect();
        Tensor::stack(&clips)
    };
    let clip = cut(&videos);
    let frames = match &opts.augment {
        Some(policy) => augment::augment_video(&clip, policy, cfg.input_size, &mut rng)?,
        None => resize_videos(&clip, cfg.input_size)?,
    };
    let actions = if cfg.action_dim > 0 { actions.as_ref().map(cut) } else { None };
    Ok(Batch { step, frames, actions })
}

fn check_compatible(cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    let m = &ds.manifest;
    if m.channels != cfg.channels {
        return Err(Error::Config(format!(
            "dataset has {} channels, model expects {}",
            m.channels, cfg.channels
        )));
    }
    if cfg.action_dim > 0 && m.action_dim != cfg.action_dim {
        return Err(Error::Config(format!(
            "dataset actions are {}-d, model expects {}",
            m.action_dim, cfg.action_dim
        )));
    }
    if m.frames_per_video < cfg.total_frames {
        return Err(Error::Config(format!(
            "dataset videos have {} frames, model trains on {}",
            m.frames_per_video, cfg.total_frames
        )));
    }
    Ok(())
}

/// Held-out clips: the first `total_frames` of each test video.
fn eval_set(ds: &Dataset, test_idx: &[usize], cfg: &ModelConfig) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let (v, a) = ds.gather(test_idx);
    let frames = resize_videos(&window(&v, 0, cfg.total_frames), cfg.input_size)?;
    let actions = if cfg.action_dim > 0 { a.map(|a| window(&a, 0, cfg.total_frames)) } else { None };
    Ok((frames, actions))
}

fn evaluate(
    model: &FitVid,
    params: &ParamStore<f32>,
    frames: &Tensor<f32>,
    actions: Option<&Tensor<f32>>,
    seed: u64,
) -> Result<LossBreakdown> {
    let cfg = &model.cfg;
    let n = frames.dim(0);
    let mut acc = LossBreakdown {
        total: 0.0,
        recon: 0.0,
        kl: 0.0,
        grad_norm_pre_clip: 0.0,
    };
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + cfg.batch_size).min(n)).collect();
        let pick = |x: &Tensor<f32>| Tensor::stack(&idx.iter().map(|&i| x.index_axis0(i)).collect::<Vec<_>>());
        let f = pick(frames);
        let a = actions.map(pick);
        let noise = draw_noise(&mut stream_rng(seed ^ EVAL_STREAM_SALT, start as u64), cfg.total_frames - 1, idx.len(), cfg.z_dim);
        let lb = teacher_forced_loss(model, params, &f, a.as_ref(), &noise, NormMode::Eval)?;
        let w = idx.len() as f64 / n as f64;
        acc.total += w * lb.total;
        acc.recon += w * lb.recon;
        acc.kl += w * lb.kl;
        start += idx.len();
    }
    Ok(acc)
}

/// Trains with teacher forcing, evaluating on a held-out split every
/// `eval_interval` steps and checkpointing atomically. With `resume` the
/// run continues from `latest.ckpt` in the output directory.
pub fn run_train(opts: &TrainOptions, ds: &Dataset) -> Result<TrainSummary> {
    let cfg = &opts.config;
    cfg.validate()?;
    check_compatible(cfg, ds)?;
    if let Some(p) = &opts.augment {
        p.validate()?;
    }
    if opts.eval_interval == 0 || opts.checkpoint_interval == 0 {
        return Err(Error::Config("intervals must be positive".into()));
    }
    if opts.test_count == 0 || opts.test_count >= ds.len() {
        return Err(Error::Config(format!(
            "held-out count {} must lie between 1 and {}",
            opts.test_count,
            ds.len() - 1
        )));
    }
    fs::create_dir_all(&opts.out_dir)?;
    let (train_idx, test_idx) = data::train_test_split(ds.len(), opts.test_count, &format!("fitvid-{}", opts.seed));
    let (eval_frames, eval_actions) = eval_set(ds, &test_idx, cfg)?;
    let log = RunLog::open(&opts.out_dir.join(LOG_FILE));
    let latest = opts.out_dir.join(LATEST_CHECKPOINT);

    let (model, mut params, mut opt, mut rng, start_step, mut records) = if opts.resume && latest.exists() {
        let (model, ck) = Checkpoint::<f32>::load(&latest, Some(cfg))?;
        let records = log.truncate_after(ck.step)?;
        (model, ck.params, ck.opt, ck.rng.restore(), ck.step, records)
    } else {
        let (model, params) = FitVid::init::<f32>(cfg, opts.seed)?;
        let opt = AdamState::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(1);
        log.truncate_after(0)?;
        let _ = fs::remove_file(&latest);
        (model, params, opt, rng, 0, Vec::new())
    };

    let clock = Instant::now();
    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    let mut advised = Curves::from_records(&records).overfit_step();
    let save = |step: u64, params: &ParamStore<f32>, opt: &AdamState<f32>, rng: &ChaCha8Rng| -> Result<PathBuf> {
        let ck = Checkpoint {
            step,
            config: cfg.clone(),
            params: params.clone(),
            opt: opt.clone(),
            rng: RngState::capture(rng),
        };
        let path = opts.out_dir.join(format!("step-{step:08}.ckpt"));
        ck.save(&path)?;
        ck.save(&latest)?;
        Ok(path)
    };

    let steps: Vec<u64> = (start_step + 1..=opts.steps).collect();
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(2);
        let producer_steps = steps.clone();
        let train_idx = &train_idx;
        scope.spawn(move || {
            for s in producer_steps {
                if tx.send(make_batch(ds, train_idx, opts, s)).is_err() {
                    break;
                }
            }
        });
        for &step in &steps {
            let batch = rx
                .recv()
                .map_err(|_| Error::Inconsistent("batch producer stopped".into()))??;
            debug_assert_eq!(batch.step, step);
            let lb = train_step(&model, &mut params, &mut opt, &batch.frames, batch.actions.as_ref(), &mut rng)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                    other => other,
                })?;
            let rec = RunRecord::Train {
                step,
                loss: lb.clone(),
                wall_secs: clock.elapsed().as_secs_f64(),
            };
            log.append(&rec)?;
            records.push(rec);
            losses.push(lb);
            if step % opts.eval_interval == 0 || step == opts.steps {
                let ev = evaluate(&model, &params, &eval_frames, eval_actions.as_ref(), opts.seed)?;
                let rec = RunRecord::Eval {
                    step,
                    metric: ev.total,
                    loss: ev,
                };
                log.append(&rec)?;
                records.push(rec);
                if opts.verbose {
                    let last = losses.last().unwrap();
                    eprintln!("step {step}: train recon {:.5} kl {:.4}, held-out {:.5}", last.recon, last.kl, records.last().map(|r| match r { RunRecord::Eval { metric, .. } => *metric, _ => f64::NAN }).unwrap());
                }
                if advised.is_none() {
                    advised = Curves::from_records(&records).overfit_step();
                    if let Some(s) = advised {
                        eprintln!(
                            "advisory: held-out bound has worsened for 3 consecutive evaluations while training loss improved (step {s}); consider augmentation or early stopping"
                        );
                    }
                }
            }
            if step % opts.checkpoint_interval == 0 || step == opts.steps {
                checkpoints.push(save(step, &params, &opt, &rng)?);
            }
        }
        Ok(())
    })?;
    write_plots(&records, &opts.out_dir)?;
    Ok(TrainSummary {
        start_step,
        final_step: opts.steps.max(start_step),
        losses,
        records,
        overfit_step: advised,
        checkpoints,
    })
}

/// Best-of-K evaluation of every video in `ds`: the first `context_frames`
/// frames condition `K` sampled futures of the remaining training length.
pub fn run_eval(
    model: &FitVid,
    params: &ParamStore<f32>,
    ds: &Dataset,
    k: usize,
    seed: u64,
) -> Result<MetricReport> {
    let cfg = &model.cfg;
    check_compatible(cfg, ds)?;
    let c = cfg.context_frames;
    let horizon = cfg.total_frames - c;
    let all: Vec<usize> = (0..ds.len()).collect();
    let (frames, actions) = eval_set(ds, &all, cfg)?;
    let context = window(&frames, 0, c);
    let truth = window(&frames, c, horizon);
    let req = RolloutRequest::new(context, actions, horizon, k, seed);
    let rollouts = sample_future_batch(model, params, &req)?;
    let mut report = evaluate_best_of_k(&rollouts, &truth, &ToyExtractor, &ToyPerceptual)?;
    report.protocol.seed = Some(seed);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanPolicy {
    Cem,
    Random,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskOutcome {
    pub task: usize,
    pub success: bool,
    pub success_step: Option<usize>,
    pub final_distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanSummary {
    pub policy: String,
    pub dynamics: String,
    pub tasks: Vec<TaskOutcome>,
    pub successes: usize,
    /// `None` when no tasks were run.
    pub success_rate: Option<f64>,
    #[serde(skip)]
    pub episodes: Vec<EpisodeOutcome>,
}

impl PlanSummary {
    pub fn table(&self) -> String {
        let mut s = format!("policy {} / dynamics {}\ntask  success  step  final_distance\n", self.policy, self.dynamics);
        for t in &self.tasks {
            s.push_str(&format!(
                "{:>4}  {:>7}  {:>4}  {:.4}\n",
                t.task,
                if t.success { "yes" } else { "no" },
                t.success_step.map_or("-".to_string(), |v| v.to_string()),
                t.final_distance
            ));
        }
        match self.success_rate {
            Some(r) => s.push_str(&format!("success {}/{} = {:.1}%\n", self.successes, self.tasks.len(), 100.0 * r)),
            None => s.push_str("success n/a (no tasks)\n"),
        }
        s
    }

    /// Executed trajectories as a dataset, rendered at `res`.
    pub fn to_dataset(&self, res: usize, seed: u64) -> Result<Dataset> {
        if self.episodes.is_empty() {
            return Err(Error::Parameter("no trajectories to export".into()));
        }
        let items = self.episodes.iter().map(|e| {
            let t = e.states.len();
            let frames: Vec<f32> = e.states.iter().flat_map(|s| pusher::render(s, res)).collect();
            let mut acts: Vec<f32> = e.actions.iter().flat_map(|a| [pusher::action_to_f32(a[0]), pusher::action_to_f32(a[1])]).collect();
            acts.extend([0.0, 0.0]);
            (Tensor::from_vec(&[t, res, res, 3], frames), Some(Tensor::from_vec(&[t, 2], acts)))
        });
        let mut ds = data::dataset_from_source("plan-trajectories", items)?;
        ds.manifest.seed = seed;
        Ok(ds)
    }
}

/// Runs the scripted task suite. `model` selects learned dynamics (planning
/// at the model's resolution); otherwise the environment itself is used at
/// `oracle_resolution`.
pub fn run_plan(
    num_tasks: usize,
    seed: u64,
    policy: PlanPolicy,
    model: Option<(&FitVid, &ParamStore<f32>)>,
    cfg: &CemConfig,
    oracle_resolution: usize,
) -> Result<PlanSummary> {
    cfg.validate()?;
    let tasks = planner::scripted_tasks(num_tasks, seed);
    let res = model.map_or(oracle_resolution, |(m, _)| m.cfg.input_size);
    let mut episodes = Vec::with_capacity(num_tasks);
    for (i, task) in tasks.iter().enumerate() {
        let mut rng = stream_rng(seed, i as u64 + 1);
        let ep = match (policy, model) {
            (PlanPolicy::Random, _) => planner::run_random_episode(task, cfg, &mut rng),
            (PlanPolicy::Cem, None) => {
                planner::run_episode(task, &pusher::goal_image(task, res), cfg, &OracleDynamics, res, &mut rng)?
            }
            (PlanPolicy::Cem, Some((m, p))) => {
                let dyn_ = ModelDynamics {
                    model: m,
                    params: p,
                    seed: seed ^ (i as u64),
                    batch: 50,
                };
                planner::run_episode(task, &pusher::goal_image(task, res), cfg, &dyn_, res, &mut rng)?
            }
        };
        episodes.push(ep);
    }
    let outcomes: Vec<TaskOutcome> = episodes
        .iter()
        .enumerate()
        .map(|(i, e)| TaskOutcome {
            task: i,
            success: e.success,
            success_step: e.success_step,
            final_distance: e.states.last().unwrap().object_to_goal(),
        })
        .collect();
    let successes = outcomes.iter().filter(|o| o.success).count();
    Ok(PlanSummary {
        policy: match policy {
            PlanPolicy::Cem => "cem".into(),
            PlanPolicy::Random => "random".into(),
        },
        dynamics: if policy == PlanPolicy::Random {
            "none".into()
        } else if model.is_some() {
            "model".into()
        } else {
            "oracle".into()
        },
        success_rate: (!outcomes.is_empty()).then(|| successes as f64 / outcomes.len() as f64),
        tasks: outcomes,
        successes,
        episodes,
    })
}

/// Frames `[H, W, C]` laid side by side into one PNG.
pub fn save_strip_png(path: &Path, frames: &[&[f32]], h: usize, w: usize, c: usize) -> Result<()> {
    save_grid_png(path, &[frames.to_vec()], h, w, c)
}

/// Rows of frames as a grid PNG.
pub fn save_grid_png(path: &Path, rows: &[Vec<&[f32]>], h: usize, w: usize, c: usize) -> Result<()> {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    if cols == 0 || !(c == 1 || c == 3) {
        return Err(Error::Parameter("need at least one 1- or 3-channel frame".into()));
    }
    let (gw, gh) = ((cols * w) as u32, (rows.len() * h) as u32);
    let mut img = image::RgbImage::new(gw, gh);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, frame) in row.iter().enumerate() {
            if frame.len() != h * w * c {
                return Err(Error::Shape(format!("frame has {} values, expected {}", frame.len(), h * w * c)));
            }
            for y in 0..h {
                for x in 0..w {
                    let px = |k: usize| pusher::unit_to_level(frame[(y * w + x) * c + if c == 1 { 0 } else { k }]);
                    img.put_pixel((ci * w + x) as u32, (ri * h + y) as u32, image::Rgb([px(0), px(1), px(2)]));
                }
            }
        }
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::new(std::io::ErrorKind::Other, other.to_string())),
    })
}

/// Where generated datasets are cached: `FITVID_CACHE_DIR`, else a
/// directory under the system temp dir.
pub fn cache_dir() -> PathBuf {
    std::env::var_os("FITVID_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("fitvid-cache"))
}

/// Opens a dataset given either a container path or a generator spec
/// `pusher:N:T:SEED[:RES]` / `sprites:N:T:SEED[:RES]`. Generated sets are
/// cached by spec.
pub fn resolve_dataset(spec: &str) -> Result<Dataset> {
    let p = Path::new(spec);
    if p.exists() {
        return data::dataset_read(p);
    }
    let parts: Vec<&str> = spec.split(':').collect();
    if !(4..=5).contains(&parts.len()) || !matches!(parts[0], "pusher" | "sprites") {
        return Err(Error::Config(format!(
            "{spec:?} is neither a dataset file nor a generator spec kind:N:T:SEED[:RES]"
        )));
    }
    let num = |s: &str| -> Result<u64> { s.parse().map_err(|_| Error::Config(format!("bad number {s:?} in {spec:?}"))) };
    let (n, t, seed) = (num(parts[1])? as usize, num(parts[2])? as usize, num(parts[3])?);
    let res = parts.get(4).map(|r| num(r)).transpose()?.unwrap_or(data::DEFAULT_RESOLUTION as u64) as usize;
    let digest = hex(&Sha256::digest(spec.as_bytes())[..8]);
    let dir = cache_dir();
    let cached = dir.join(format!("{}-{digest}.fvdata", parts[0]));
    if cached.exists() {
        if let Ok(ds) = data::dataset_read(&cached) {
            return Ok(ds);
        }
    }
    let ds = match parts[0] {
        "pusher" => data::generate_pusher_dataset_at(n, t, seed, res)?,
        _ => data::generate_sprites_dataset_at(n, t, seed, res)?,
    };
    if fs::create_dir_all(&dir).is_ok() {
        let _ = data::dataset_write(&cached, &ds);
    }
    Ok(ds)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rolling_mean_matches_direct_window() {
        let v: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64).collect();
        let r = rolling_mean(&v, 10);
        for i in 0..v.len() {
            let lo = i.saturating_sub(9);
            let direct = v[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64;
            assert!((r[i] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn overfit_needs_three_rises_and_falling_train() {
        let eval = [5.0, 4.0, 3.0, 3.1, 3.2, 3.3];
        let train = [5.0, 4.0, 3.0, 2.0, 1.0, 0.5];
        assert_eq!(overfit_point(&eval, &train), Some(5));
        assert_eq!(overfit_point(&eval, &[1.0; 6]), None);
        assert_eq!(overfit_point(&[5.0, 4.0, 3.0, 3.1, 3.0, 3.3], &train), None);
    }

    #[test]
    fn generator_specs_are_validated() {
        assert!(resolve_dataset("nonsense").is_err());
        assert!(resolve_dataset("pusher:x:2:0").is_err());
    }
}
