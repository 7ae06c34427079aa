//! The full video model: encoder, posterior, dynamics and decoder.

use fitvid_tensor::{Element, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{Decoder, Encoder};
use crate::config::ModelConfig;
use crate::dynamics::{reparameterize, Dynamics, LatentGaussian, Posterior, RecurrentState};
use crate::error::{Error, Result};
use crate::layers::Init;
use crate::params::{Forward, ParamStore};

#[derive(Debug, Clone)]
pub struct FitVid {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub posterior: Posterior,
    pub dynamics: Dynamics,
}

/// Output of a teacher-forced pass over a clip of `T` frames.
#[derive(Debug, Clone)]
pub struct TeacherForced<T: Element> {
    /// Predictions of frames `1..T`, shape `[B, T-1, H, W, C]`.
    pub x_hat: Var<T>,
    /// Posterior at each of the `T-1` steps.
    pub posteriors: Vec<LatentGaussian<T>>,
}

impl FitVid {
    /// Builds the model, registering freshly initialised parameters in `init`.
    pub fn new<T: Element, R: rand::Rng>(cfg: &ModelConfig, init: &mut Init<T, R>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::new(init, cfg),
            decoder: Decoder::new(init, cfg),
            posterior: Posterior::new(init, cfg),
            dynamics: Dynamics::new(init, cfg),
        })
    }

    /// Model plus a parameter store initialised from `seed`.
    pub fn init<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(cfg, &mut Init::new(&mut store, &mut rng))?;
        Ok((model, store))
    }

    /// Action for step `t` as a graph constant, or the empty `[B, 0]` matrix.
    pub fn action_at<T: Element>(
        &self,
        f: &Forward<T>,
        actions: Option<&Tensor<T>>,
        batch: usize,
        t: usize,
    ) -> Result<Var<T>> {
        let ad = self.cfg.action_dim;
        if ad == 0 {
            return Ok(f.graph.constant(Tensor::zeros(&[batch, 0])));
        }
        let a = actions.ok_or_else(|| Error::Request("model is action-conditioned but no actions were given".into()))?;
        let s = a.shape();
        if s.len() != 3 || s[0] != batch || s[2] != ad {
            return Err(Error::Shape(format!("actions should be [{batch}, T, {ad}], got {s:?}")));
        }
        if t >= s[1] {
            return Err(Error::Request(format!("actions cover {} steps, step {t} requested", s[1])));
        }
        let mut out = Tensor::zeros(&[batch, ad]);
        for b in 0..batch {
            for k in 0..ad {
                out.set(&[b, k], a.at(&[b, t, k]));
            }
        }
        Ok(f.graph.constant(out))
    }

    /// Teacher-forced pass: every frame is encoded from ground truth, the
    /// posterior at step `t` reads `h_{t+1}`, and the decoder reuses skips
    /// from frame `c-1` for all steps. `noise` is `[T-1, B, z_dim]`.
    pub fn teacher_forced<T: Element>(
        &self,
        f: &Forward<T>,
        frames: &Tensor<T>,
        actions: Option<&Tensor<T>>,
        noise: &Tensor<T>,
    ) -> Result<TeacherForced<T>> {
        let s = frames.shape();
        if s.len() != 5 || s[1] < 2 {
            return Err(Error::Shape(format!("training clip must be [B, T>=2, H, W, C], got {s:?}")));
        }
        let (b, t) = (s[0], s[1]);
        let c = self.cfg.context_frames.min(t);
        if noise.shape() != [t - 1, b, self.cfg.z_dim] {
            return Err(Error::Shape(format!(
                "noise should be {:?}, got {:?}",
                [t - 1, b, self.cfg.z_dim],
                noise.shape()
            )));
        }
        let g = f.graph;
        let x = g.constant(frames.clone());
        let enc = self.encoder.encode(f, &x, Some(c - 1))?;
        let mut state = RecurrentState::zeros(g, b, self.cfg.rnn_size);
        let mut preds = Vec::with_capacity(t - 1);
        let mut posteriors = Vec::with_capacity(t - 1);
        for step in 0..t - 1 {
            let h = g.select_step(&enc.h, step);
            let h_next = g.select_step(&enc.h, step + 1);
            let (q, st) = self.posterior.step(f, &h_next, &state)?;
            let eps = g.constant(noise.index_axis0(step));
            let z = reparameterize(g, &q, &eps);
            let a = self.action_at(f, actions, b, step)?;
            let (h_hat, st) = self.dynamics.step(f, &h, &a, &z, &st)?;
            state = st;
            preds.push(h_hat);
            posteriors.push(q);
        }
        let refs: Vec<&Var<T>> = preds.iter().collect();
        let h_hat = g.stack_steps(&refs);
        let x_hat = self.decoder.decode(f, &h_hat, &enc.skips)?;
        Ok(TeacherForced { x_hat, posteriors })
    }
}
