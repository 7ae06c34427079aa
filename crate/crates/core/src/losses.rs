//! Evidence lower bound: squared reconstruction error plus a KL term against
//! the fixed standard-normal prior.

use fitvid_tensor::{Element, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dynamics::LatentGaussian;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub grad_norm_pre_clip: f64,
}

/// KL of `N(mu, sigma)` from `N(0, I)` for `[B, z]` tensors: summed over
/// latent dimensions, averaged over rows.
pub fn gaussian_kl_values<T: Element>(mu: &Tensor<T>, sigma: &Tensor<T>) -> Result<f64> {
    if mu.shape() != sigma.shape() || mu.rank() != 2 {
        return Err(Error::Shape(format!(
            "mu {:?} and sigma {:?} must be matching [B, z] arrays",
            mu.shape(),
            sigma.shape()
        )));
    }
    let mut total = 0.0;
    for (&m, &s) in mu.data().iter().zip(sigma.data()) {
        let (m, s) = (m.f64(), s.f64());
        if !(s > 0.0) {
            return Err(Error::Domain(format!("sigma must be positive, got {s}")));
        }
        let var = s * s;
        total += 0.5 * (m * m + var - 1.0 - var.ln());
    }
    Ok(total / mu.dim(0) as f64)
}

/// KL of one posterior against the prior, averaged over the batch.
pub fn gaussian_kl<T: Element>(q: &LatentGaussian<T>) -> Result<f64> {
    gaussian_kl_values(q.mu.value(), q.sigma.value())
}

fn kl_f64<T: Element>(q: &LatentGaussian<T>) -> f64 {
    q.mu.value()
        .data()
        .iter()
        .zip(q.log_var.value().data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m.f64(), lv.f64());
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum()
}

/// The scalar objective as a graph node plus its exact `f64` breakdown.
/// `x` and `x_hat` are aligned `[B, T', H, W, C]` clips; `posteriors` holds
/// one entry per predicted frame. `grad_norm_pre_clip` is left at zero.
pub fn elbo_loss<T: Element>(
    graph: &Graph<T>,
    x: &Tensor<T>,
    x_hat: &Var<T>,
    posteriors: &[LatentGaussian<T>],
    beta: f64,
) -> Result<(Var<T>, LossBreakdown)> {
    if x.shape() != x_hat.shape() || x.rank() != 5 {
        return Err(Error::Shape(format!(
            "target {:?} and prediction {:?} must be matching [B, T, H, W, C] clips",
            x.shape(),
            x_hat.shape()
        )));
    }
    let (b, frames) = (x.dim(0), x.dim(1));
    if posteriors.len() != frames {
        return Err(Error::Shape(format!(
            "{} posteriors for {frames} predicted frames",
            posteriors.len()
        )));
    }
    let norm = 1.0 / (b * frames) as f64;

    let diff = graph.sub(x_hat, &graph.constant(x.clone()));
    let recon_var = graph.scale(&graph.sum(&graph.square(&diff)), norm);
    let mut kl_terms = Vec::with_capacity(frames);
    for q in posteriors {
        let m2 = graph.square(&q.mu);
        let e = graph.exp(&q.log_var);
        let inner = graph.sub(&graph.add(&m2, &e), &q.log_var);
        kl_terms.push(graph.scale(&graph.add_scalar(&graph.sum(&inner), -(q.mu.value().numel() as f64)), 0.5));
    }
    let mut kl_var = kl_terms[0].clone();
    for k in &kl_terms[1..] {
        kl_var = graph.add(&kl_var, k);
    }
    let kl_var = graph.scale(&kl_var, norm);
    let total_var = graph.add(&recon_var, &graph.scale(&kl_var, beta));

    let recon = x_hat
        .value()
        .data()
        .iter()
        .zip(x.data())
        .map(|(&p, &t)| {
            let d = p.f64() - t.f64();
            d * d
        })
        .sum::<f64>()
        * norm;
    let kl = posteriors.iter().map(kl_f64).sum::<f64>() * norm;
    Ok((
        total_var,
        LossBreakdown {
            total: recon + beta * kl,
            recon,
            kl,
            grad_norm_pre_clip: 0.0,
        },
    ))
}
