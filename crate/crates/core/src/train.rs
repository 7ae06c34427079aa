//! One optimisation step: teacher-forced ELBO, global-norm clipping, Adam.

use fitvid_tensor::{Element, Graph, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{ModelConfig, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::losses::{elbo_loss, LossBreakdown};
use crate::model::FitVid;
use crate::params::{Forward, NormMode, ParamStore};

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Global l2 norm accumulated in `f64`.
pub fn global_norm<T: Element>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt()
}

/// Scales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// Bias-corrected Adam update.
pub fn adam_update<T: Element>(params: &mut ParamStore<T>, state: &mut AdamState<T>, grads: &[Tensor<T>], cfg: &ModelConfig) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (tb1, tb2, lr, eps) = (T::of(b1), T::of(b2), T::of(cfg.learning_rate), T::of(cfg.adam_eps));
    let (one, ic1, ic2) = (T::one(), T::of(1.0 / c1), T::of(1.0 / c2));
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id);
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = tb1 * *m + (one - tb1) * g;
            *v = tb2 * *v + (one - tb2) * g * g;
            let mh = *m * ic1;
            let vh = *v * ic2;
            *p = *p - lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Standard-normal posterior noise `[T-1, B, z_dim]`.
pub fn draw_noise<T: Element, R: Rng>(rng: &mut R, steps: usize, batch: usize, z_dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[steps, batch, z_dim], |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Teacher-forced loss and per-parameter gradients without updating
/// anything. Batch statistics of the pass are returned alongside.
pub fn loss_and_grads<T: Element>(
    model: &FitVid,
    params: &ParamStore<T>,
    frames: &Tensor<T>,
    actions: Option<&Tensor<T>>,
    noise: &Tensor<T>,
    mode: NormMode,
) -> Result<(LossBreakdown, Vec<Tensor<T>>, Vec<crate::params::BatchStat>)> {
    let graph = Graph::new();
    let f = Forward::new(&graph, params, mode);
    let out = model.teacher_forced(&f, frames, actions, noise)?;
    let t = frames.dim(1);
    let target = slice_frames(frames, 1, t);
    let (loss, lb) = elbo_loss(&graph, &target, &out.x_hat, &out.posteriors, model.cfg.beta)?;
    if !out.x_hat.value().all_finite() {
        return Err(Error::Numeric("non-finite value in predicted frames".into()));
    }
    for (name, v) in [("reconstruction loss", lb.recon), ("kl loss", lb.kl)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite value in {name}")));
        }
    }
    let stats = f.take_stats();
    let mut grads = graph.backward(&loss)?;
    let pg = f.param_grads(&mut grads);
    for (id, g) in params.ids().zip(&pg) {
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {}", params.name(id))));
        }
    }
    Ok((lb, pg, stats))
}

/// Teacher-forced loss without gradients.
pub fn teacher_forced_loss<T: Element>(
    model: &FitVid,
    params: &ParamStore<T>,
    frames: &Tensor<T>,
    actions: Option<&Tensor<T>>,
    noise: &Tensor<T>,
    mode: NormMode,
) -> Result<LossBreakdown> {
    let graph = Graph::new();
    let f = Forward::new(&graph, params, mode);
    let out = model.teacher_forced(&f, frames, actions, noise)?;
    let target = slice_frames(frames, 1, frames.dim(1));
    let (_, lb) = elbo_loss(&graph, &target, &out.x_hat, &out.posteriors, model.cfg.beta)?;
    if !lb.total.is_finite() {
        return Err(Error::Numeric("non-finite evaluation loss".into()));
    }
    Ok(lb)
}

/// Frames `start..end` of a `[B, T, ...]` tensor.
pub fn slice_frames<T: Element>(x: &Tensor<T>, start: usize, end: usize) -> Tensor<T> {
    let s = x.shape();
    let (b, t) = (s[0], s[1]);
    let row: usize = s[2..].iter().product();
    let n = end - start;
    let mut data = Vec::with_capacity(b * n * row);
    for bi in 0..b {
        data.extend_from_slice(&x.data()[(bi * t + start) * row..(bi * t + end) * row]);
    }
    let mut shape = s.to_vec();
    shape[1] = n;
    Tensor::from_vec(&shape, data)
}

/// One training step on `frames [B, T, H, W, C]` (and `actions [B, T, A]`
/// when the model is action-conditioned). Updates parameters, optimiser
/// state and batch-norm running statistics in place.
pub fn train_step<T: Element, R: Rng>(
    model: &FitVid,
    params: &mut ParamStore<T>,
    opt: &mut AdamState<T>,
    frames: &Tensor<T>,
    actions: Option<&Tensor<T>>,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let cfg = &model.cfg;
    let (b, t) = (frames.dim(0), frames.dim(1));
    if t < 2 {
        return Err(Error::Shape("a training clip needs at least two frames".into()));
    }
    let noise = draw_noise(rng, t - 1, b, cfg.z_dim);
    let (mut lb, mut grads, stats) = loss_and_grads(model, params, frames, actions, &noise, NormMode::Train)?;
    lb.grad_norm_pre_clip = clip_global_norm(&mut grads, cfg.grad_clip_l2);
    adam_update(params, opt, &grads, cfg);
    params.apply_batch_stats(&stats, BN_MOMENTUM);
    Ok(lb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::<f64>::from_vec(&[2], vec![300.0, 400.0])];
        let pre = clip_global_norm(&mut g, 100.0);
        assert_eq!(pre, 500.0);
        assert!((global_norm(&g) - 100.0).abs() < 1e-9);

        let mut small = vec![Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0])];
        let before = small.clone();
        clip_global_norm(&mut small, 100.0);
        assert_eq!(small, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut st = AdamState::new(&store);
        let cfg = ModelConfig::tiny();
        adam_update(&mut store, &mut st, &[Tensor::from_vec(&[2], vec![0.5, -2.0])], &cfg);
        let p = store.get(id).data().to_vec();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }
}
