//! Autoregressive prediction with latents drawn from the standard-normal
//! prior, and batches of independent sampled futures.

use fitvid_tensor::{par, Element, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dynamics::RecurrentState;
use crate::error::{Error, Result};
use crate::model::FitVid;
use crate::params::{Forward, NormMode, ParamStore};

#[derive(Debug, Clone)]
pub struct RolloutRequest<T> {
    /// Context frames `[B, c, H, W, C]`.
    pub context: Tensor<T>,
    /// Actions `[B, >= c + horizon - 1, A]` for action-conditioned models.
    pub actions: Option<Tensor<T>>,
    pub horizon: usize,
    pub num_samples: usize,
    pub seed: u64,
    /// Samples evaluated together per chunk in [`sample_future_batch`].
    pub chunk_size: usize,
}

impl<T: Element> RolloutRequest<T> {
    pub fn new(context: Tensor<T>, actions: Option<Tensor<T>>, horizon: usize, num_samples: usize, seed: u64) -> Self {
        Self {
            context,
            actions,
            horizon,
            num_samples,
            seed,
            chunk_size: 16,
        }
    }

    fn validate(&self, model: &FitVid) -> Result<()> {
        let s = self.context.shape();
        if s.len() != 5 || s[1] < 1 {
            return Err(Error::Request(format!("context must be [B, c>=1, H, W, C], got {s:?}")));
        }
        if self.horizon < 1 || self.num_samples < 1 || self.chunk_size < 1 {
            return Err(Error::Request("horizon, num_samples and chunk_size must be at least 1".into()));
        }
        if model.cfg.action_dim > 0 {
            let a = self
                .actions
                .as_ref()
                .ok_or_else(|| Error::Request("model is action-conditioned but no actions were given".into()))?;
            let need = s[1] + self.horizon - 1;
            if a.rank() != 3 || a.dim(0) != s[0] || a.dim(1) < need || a.dim(2) != model.cfg.action_dim {
                return Err(Error::Request(format!(
                    "actions must be [{}, >={need}, {}], got {:?}",
                    s[0],
                    model.cfg.action_dim,
                    a.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Independent stream `k` of a seed.
pub fn stream_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Instrumentation hooks called during a rollout.
pub trait RolloutObserver<T: Element> {
    /// Frame fed to the encoder at `step`, `[B, H, W, C]`.
    fn encoder_input(&mut self, _step: usize, _frame: &Tensor<T>) {}
    /// Skips handed to the decoder when predicting at `step`.
    fn decoder_skips(&mut self, _step: usize, _skips: &[Var<T>]) {}
}

struct NoObserver;
impl<T: Element> RolloutObserver<T> for NoObserver {}

/// Single rollout with stream 0 of `req.seed`, or with `noise_override`
/// (`[c + horizon - 1, B, z_dim]`) when given. Returns `[B, horizon, H, W, C]`.
pub fn predict_sequence<T: Element>(
    model: &FitVid,
    params: &ParamStore<T>,
    req: &RolloutRequest<T>,
    noise_override: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    predict_sequence_observed(model, params, req, noise_override, &mut NoObserver)
}

pub fn predict_sequence_observed<T: Element>(
    model: &FitVid,
    params: &ParamStore<T>,
    req: &RolloutRequest<T>,
    noise_override: Option<&Tensor<T>>,
    observer: &mut dyn RolloutObserver<T>,
) -> Result<Tensor<T>> {
    req.validate(model)?;
    let steps = req.context.dim(1) + req.horizon - 1;
    let noise = match noise_override {
        Some(n) => {
            let want = [steps, req.context.dim(0), model.cfg.z_dim];
            if n.shape() != want {
                return Err(Error::Request(format!("noise override must be {want:?}, got {:?}", n.shape())));
            }
            n.clone()
        }
        None => prior_noise(&mut stream_rng(req.seed, 0), steps, req.context.dim(0), model.cfg.z_dim),
    };
    rollout_with_noise(model, params, req, &noise, observer)
}

fn prior_noise<T: Element, R: Rng>(rng: &mut R, steps: usize, b: usize, z: usize) -> Tensor<T> {
    Tensor::from_fn(&[steps, b, z], |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

fn frame_at<T: Element>(x: &Tensor<T>, t: usize) -> Tensor<T> {
    let s = x.shape();
    let (b, steps) = (s[0], s[1]);
    let row: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(b * row);
    for bi in 0..b {
        data.extend_from_slice(&x.data()[(bi * steps + t) * row..(bi * steps + t + 1) * row]);
    }
    Tensor::from_vec(&[b, 1, s[2], s[3], s[4]], data)
}

fn rollout_with_noise<T: Element>(
    model: &FitVid,
    params: &ParamStore<T>,
    req: &RolloutRequest<T>,
    noise: &Tensor<T>,
    observer: &mut dyn RolloutObserver<T>,
) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let f = Forward::new(&g, params, NormMode::Eval);
    let s = req.context.shape().to_vec();
    let (b, c) = (s[0], s[1]);
    let steps = c + req.horizon - 1;
    let mut state = RecurrentState::zeros(&g, b, model.cfg.rnn_size);
    let mut skips: Vec<Var<T>> = Vec::new();
    let mut previous: Option<Tensor<T>> = None;
    let mut outputs = Vec::with_capacity(req.horizon);
    for t in 0..steps {
        let input = if t < c {
            frame_at(&req.context, t)
        } else {
            previous.take().expect("prediction from the previous step")
        };
        let frame = input.clone().reshape(&[b, s[2], s[3], s[4]]);
        observer.encoder_input(t, &frame);
        let want_skips = t == c - 1;
        let enc = model.encoder.encode(&f, &g.constant(input), want_skips.then_some(0))?;
        if want_skips {
            skips = enc.skips;
        }
        let h = g.select_step(&enc.h, 0);
        let z = g.constant(noise.index_axis0(t));
        let a = model.action_at(&f, req.actions.as_ref(), b, t)?;
        let (h_hat, st) = model.dynamics.step(&f, &h, &a, &z, &state)?;
        state = st;
        if t + 1 >= c {
            observer.decoder_skips(t, &skips);
            let hs = h_hat.shape().to_vec();
            let h5 = g.reshape(&h_hat, &[b, 1, hs[1], hs[2], hs[3]]);
            let frame = model.decoder.decode(&f, &h5, &skips)?.into_tensor();
            if !frame.all_finite() {
                return Err(Error::Numeric(format!("rollout produced non-finite frame at step {t}")));
            }
            outputs.push(frame.clone());
            previous = Some(frame);
        }
    }
    let frames: Vec<Tensor<T>> = outputs.into_iter().map(|o| o.reshape(&[b, s[2], s[3], s[4]])).collect();
    let stacked = Tensor::stack(&frames);
    Ok(swap_leading(&stacked))
}

/// `[T, B, ...]` to `[B, T, ...]`.
fn swap_leading<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (t, b) = (s[0], s[1]);
    let row: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for ti in 0..t {
            out.extend_from_slice(&x.data()[(ti * b + bi) * row..(ti * b + bi + 1) * row]);
        }
    }
    let mut shape = vec![b, t];
    shape.extend_from_slice(&s[2..]);
    Tensor::from_vec(&shape, out)
}

/// `K` independent rollouts, sample `k` drawing prior noise from stream `k`
/// of the seed. Returns `[K, B, horizon, H, W, C]`.
pub fn sample_future_batch<T: Element>(
    model: &FitVid,
    params: &ParamStore<T>,
    req: &RolloutRequest<T>,
) -> Result<Tensor<T>> {
    req.validate(model)?;
    let (b, c) = (req.context.dim(0), req.context.dim(1));
    let steps = c + req.horizon - 1;
    let mut samples = Vec::with_capacity(req.num_samples);
    let mut start = 0;
    while start < req.num_samples {
        let n = req.chunk_size.min(req.num_samples - start);
        let chunk = par::map_range(n, |i| {
            let k = (start + i) as u64;
            let noise = prior_noise(&mut stream_rng(req.seed, k), steps, b, model.cfg.z_dim);
            rollout_with_noise(model, params, req, &noise, &mut NoObserver)
        });
        for r in chunk {
            samples.push(r?);
        }
        start += n;
    }
    Ok(Tensor::stack(&samples))
}
