//! Posterior inference over the per-step latent and the recurrent frame
//! dynamics.

use fitvid_tensor::{Element, Graph, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{Dense, Init, Lstm, LstmState};
use crate::params::Forward;

/// Diagonal Gaussian over `z`, each field `[B, z_dim]`. `log_var` is the raw
/// head output and `sigma = exp(0.5 * log_var)`.
#[derive(Debug, Clone)]
pub struct LatentGaussian<T: Element> {
    pub mu: Var<T>,
    pub sigma: Var<T>,
    pub log_var: Var<T>,
}

/// LSTM states carried across timesteps.
#[derive(Debug, Clone)]
pub struct RecurrentState<T: Element> {
    pub dynamics: Vec<LstmState<T>>,
    pub posterior: LstmState<T>,
}

impl<T: Element> RecurrentState<T> {
    pub fn zeros(graph: &Graph<T>, batch: usize, rnn_size: usize) -> Self {
        let z = || LstmState {
            h: graph.constant(Tensor::zeros(&[batch, rnn_size])),
            c: graph.constant(Tensor::zeros(&[batch, rnn_size])),
        };
        Self {
            dynamics: vec![z(), z()],
            posterior: z(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.dynamics
            .iter()
            .chain(std::iter::once(&self.posterior))
            .all(|s| s.h.value().all_finite() && s.c.value().all_finite())
    }
}

fn check_input<T: Element>(what: &str, x: &Var<T>, batch: Option<usize>, width: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 2 || s[1] != width || batch.is_some_and(|b| b != s[0]) {
        return Err(Error::Shape(format!("{what}: expected [B, {width}], got {s:?}")));
    }
    Ok(())
}

/// Single LSTM layer over `h_{t+1}` followed by a Gaussian head.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub lstm: Lstm,
    pub head: Dense,
    pub z_dim: usize,
    pub g_dim: usize,
}

impl Posterior {
    pub fn new<T: Element, R: Rng>(init: &mut Init<T, R>, cfg: &ModelConfig) -> Self {
        Self {
            lstm: Lstm::new(init, "posterior.lstm", cfg.g_dim, cfg.rnn_size),
            head: Dense::new(init, "posterior.head", cfg.rnn_size, 2 * cfg.z_dim),
            z_dim: cfg.z_dim,
            g_dim: cfg.g_dim,
        }
    }

    pub fn step<T: Element>(
        &self,
        f: &Forward<T>,
        h_next: &Var<T>,
        state: &RecurrentState<T>,
    ) -> Result<(LatentGaussian<T>, RecurrentState<T>)> {
        check_input("posterior input", h_next, None, self.g_dim)?;
        if !h_next.value().all_finite() {
            return Err(Error::Numeric("posterior input contains non-finite values".into()));
        }
        let g = f.graph;
        let next = self.lstm.step(f, h_next, &state.posterior);
        let raw = self.head.forward(f, &next.h);
        let mu = g.slice_cols(&raw, 0, self.z_dim);
        let log_var = g.slice_cols(&raw, self.z_dim, self.z_dim);
        let sigma = g.exp(&g.scale(&log_var, 0.5));
        let state = RecurrentState {
            dynamics: state.dynamics.clone(),
            posterior: next,
        };
        Ok((LatentGaussian { mu, sigma, log_var }, state))
    }
}

/// `z = mu + sigma * noise`.
pub fn reparameterize<T: Element>(graph: &Graph<T>, q: &LatentGaussian<T>, noise: &Var<T>) -> Var<T> {
    graph.add(&q.mu, &graph.mul(&q.sigma, noise))
}

/// Two stacked LSTMs over `[h, a, z]` and a sigmoid head shaped like the
/// deepest encoder map.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub layers: Vec<Lstm>,
    pub head: Dense,
    pub g_dim: usize,
    pub action_dim: usize,
    pub z_dim: usize,
    pub latent: [usize; 3],
}

impl Dynamics {
    pub fn new<T: Element, R: Rng>(init: &mut Init<T, R>, cfg: &ModelConfig) -> Self {
        let input = cfg.g_dim + cfg.action_dim + cfg.z_dim;
        Self {
            layers: vec![
                Lstm::new(init, "dynamics.lstm0", input, cfg.rnn_size),
                Lstm::new(init, "dynamics.lstm1", cfg.rnn_size, cfg.rnn_size),
            ],
            head: Dense::new(init, "dynamics.head", cfg.rnn_size, cfg.dynamics_output_len()),
            g_dim: cfg.g_dim,
            action_dim: cfg.action_dim,
            z_dim: cfg.z_dim,
            latent: [cfg.latent_size(), cfg.latent_size(), cfg.max_filters()],
        }
    }

    /// Returns `h_hat [B, S, S, F_max]` in (0, 1) and the advanced state.
    pub fn step<T: Element>(
        &self,
        f: &Forward<T>,
        h: &Var<T>,
        a: &Var<T>,
        z: &Var<T>,
        state: &RecurrentState<T>,
    ) -> Result<(Var<T>, RecurrentState<T>)> {
        check_input("dynamics frame code", h, None, self.g_dim)?;
        let b = Some(h.shape()[0]);
        check_input("dynamics action", a, b, self.action_dim)?;
        check_input("dynamics latent", z, b, self.z_dim)?;
        let g = f.graph;
        let mut x = if self.action_dim > 0 {
            g.concat_cols(&[h, a, z])
        } else {
            g.concat_cols(&[h, z])
        };
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, s) in self.layers.iter().zip(&state.dynamics) {
            let out = layer.step(f, &x, s);
            x = out.h.clone();
            next.push(out);
        }
        let out = g.sigmoid(&self.head.forward(f, &x));
        let [s1, s2, c] = self.latent;
        let h_hat = g.reshape(&out, &[h.shape()[0], s1, s2, c]);
        Ok((
            h_hat,
            RecurrentState {
                dynamics: next,
                posterior: state.posterior.clone(),
            },
        ))
    }
}
