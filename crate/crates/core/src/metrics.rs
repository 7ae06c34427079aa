//! Frame metrics (PSNR, SSIM), the Fréchet feature distance, pluggable
//! feature extractors and the best-of-K evaluation protocol.

use fitvid_tensor::{par, Element, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const FRECHET_JITTER: f64 = 1e-6;
/// Videos per feature-extraction call.
pub const FEATURE_BATCH: usize = 256;

fn check_pair<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 5 {
        return Err(Error::Shape(format!(
            "expected matching [B, T, H, W, C] videos, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn video_slices<'a, T: Element>(x: &'a Tensor<T>) -> impl Iterator<Item = &'a [T]> {
    let per: usize = x.shape()[1..].iter().product();
    x.data().chunks(per)
}

/// PSNR of one video pair given as flat slices.
pub fn psnr_slice<T: Element>(a: &[T], b: &[T]) -> f64 {
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Per-video PSNR in dB for data in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    Ok(video_slices(a).zip(video_slices(b)).map(|(x, y)| psnr_slice(x, y)).collect())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM of one `[T, H, W, C]` video pair.
pub fn ssim_video<T: Element>(a: &[T], b: &[T], t: usize, h: usize, w: usize, c: usize) -> f64 {
    let k = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ti in 0..t {
        for ch in 0..c {
            let base = ti * plane * c;
            let pa: Vec<f64> = (0..plane).map(|p| a[base + p * c + ch].f64()).collect();
            let pb: Vec<f64> = (0..plane).map(|p| b[base + p * c + ch].f64()).collect();
            let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
            let mu_a = filter_valid(&pa, h, w, &k);
            let mu_b = filter_valid(&pb, h, w, &k);
            let saa = filter_valid(&prod(&pa, &pa), h, w, &k);
            let sbb = filter_valid(&prod(&pb, &pb), h, w, &k);
            let sab = filter_valid(&prod(&pa, &pb), h, w, &k);
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = saa[i] - ma * ma;
                let vb = sbb[i] - mb * mb;
                let cov = sab[i] - ma * mb;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
                total += num / den;
            }
            count += mu_a.len();
        }
    }
    total / count as f64
}

/// Per-video SSIM with an 11x11 Gaussian window (sigma 1.5) over the valid
/// region, averaged over windows, channels and frames.
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let s = a.shape();
    if s[2] < SSIM_WINDOW || s[3] < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "frames of {}x{} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            s[2], s[3]
        )));
    }
    let pairs: Vec<(&[T], &[T])> = video_slices(a).zip(video_slices(b)).collect();
    Ok(par::map_slice(&pairs, |(x, y)| ssim_video(x, y, s[1], s[2], s[3], s[4])))
}

fn mean_cov(f: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (f.len(), f[0].len());
    let x = DMatrix::from_fn(n, d, |i, j| f[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..d {
        let m = mu[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= m);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets
/// (`n x d` and `m x d`, rows are samples).
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Parameter("each feature set needs at least two rows".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::Shape("feature rows have differing widths".into()));
    }
    let (mu_a, mut ca) = mean_cov(a);
    let (mu_b, mut cb) = mean_cov(b);
    for i in 0..d {
        ca[(i, i)] += FRECHET_JITTER;
        cb[(i, i)] += FRECHET_JITTER;
    }
    let sa = sym_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    Ok((diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Maps a batch of videos `[n, T, H, W, C]` to `n` feature rows of fixed width.
pub trait FeatureExtractor: Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, videos: &Tensor<f32>) -> Result<Vec<Vec<f64>>>;
}

/// Distance between two single videos `[T, H, W, C]`; lower is closer.
pub trait FeatureDistance: Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64>;
}

/// Cheap hand-made video statistics: per-channel mean and standard
/// deviation, per-channel mean absolute frame difference, and the mean
/// luminance of a 4x4 grid of cells.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyExtractor;

pub const TOY_GRID: usize = 4;

impl ToyExtractor {
    pub fn features(video: &[f32], t: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
        let px = h * w;
        let n = (t * px) as f64;
        let mut out = Vec::with_capacity(3 * c + TOY_GRID * TOY_GRID);
        let mut means = vec![0.0; c];
        for (i, &v) in video.iter().enumerate() {
            means[i % c] += v as f64;
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for (i, &v) in video.iter().enumerate() {
            let d = v as f64 - means[i % c];
            var[i % c] += d * d;
        }
        out.extend_from_slice(&means);
        out.extend(var.iter().map(|v| (v / n).sqrt()));
        let mut motion = vec![0.0; c];
        if t > 1 {
            let frame = px * c;
            for ti in 1..t {
                for i in 0..frame {
                    motion[i % c] += (video[ti * frame + i] - video[(ti - 1) * frame + i]).abs() as f64;
                }
            }
            motion.iter_mut().for_each(|m| *m /= ((t - 1) * px) as f64);
        }
        out.extend_from_slice(&motion);
        let mut grid = vec![0.0; TOY_GRID * TOY_GRID];
        let mut counts = vec![0usize; TOY_GRID * TOY_GRID];
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let cell = (y * TOY_GRID / h) * TOY_GRID + x * TOY_GRID / w;
                    let base = ((ti * h + y) * w + x) * c;
                    let lum: f64 = (0..c).map(|k| video[base + k] as f64).sum::<f64>() / c as f64;
                    grid[cell] += lum;
                    counts[cell] += 1;
                }
            }
        }
        out.extend(grid.iter().zip(&counts).map(|(g, &n)| g / n.max(1) as f64));
        out
    }
}

impl FeatureExtractor for ToyExtractor {
    fn name(&self) -> &str {
        "toy-statistics"
    }

    fn dim(&self) -> usize {
        3 * 3 + TOY_GRID * TOY_GRID
    }

    fn extract(&self, videos: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let s = videos.shape();
        if s.len() != 5 {
            return Err(Error::Shape(format!("expected [n, T, H, W, C] videos, got {s:?}")));
        }
        let per: usize = s[1..].iter().product();
        let chunks: Vec<&[f32]> = videos.data().chunks(per).collect();
        Ok(par::map_slice(&chunks, |v| Self::features(v, s[1], s[2], s[3], s[4])))
    }
}

/// Euclidean distance between toy features. Not comparable to published
/// learned-perceptual scores.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyPerceptual;

impl FeatureDistance for ToyPerceptual {
    fn name(&self) -> &str {
        "l2-toy-features (not comparable to LPIPS)"
    }

    fn distance(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
        if a.shape() != b.shape() || a.rank() != 4 {
            return Err(Error::Shape("perceptual distance needs matching [T, H, W, C] videos".into()));
        }
        let s = a.shape();
        let fa = ToyExtractor::features(a.data(), s[0], s[1], s[2], s[3]);
        let fb = ToyExtractor::features(b.data(), s[0], s[1], s[2], s[3]);
        Ok(fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
    }
}

/// Extracts features in batches of [`FEATURE_BATCH`] videos.
pub fn extract_batched(extractor: &dyn FeatureExtractor, videos: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    let n = videos.dim(0);
    let per: usize = videos.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let m = FEATURE_BATCH.min(n - start);
        let mut shape = videos.shape().to_vec();
        shape[0] = m;
        let batch = Tensor::from_vec(&shape, videos.data()[start * per..(start + m) * per].to_vec());
        let feats = extractor.extract(&batch)?;
        if feats.len() != m || feats.iter().any(|f| f.len() != extractor.dim()) {
            return Err(Error::MetricUnavailable(format!(
                "{} returned malformed features",
                extractor.name()
            )));
        }
        out.extend(feats);
        start += m;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoScores {
    pub video: usize,
    pub best_psnr: f64,
    pub psnr_index: usize,
    pub best_ssim: f64,
    pub ssim_index: usize,
    pub best_perceptual: Option<f64>,
    pub perceptual_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean_best_psnr: f64,
    pub mean_best_ssim: f64,
    pub mean_best_perceptual: Option<f64>,
    pub fvd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Protocol {
    pub k: usize,
    pub num_videos: usize,
    pub seed: Option<u64>,
    pub selection: String,
    pub feature_batch: usize,
    pub extractor: String,
    pub perceptual: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub protocol: Protocol,
    pub videos: Vec<VideoScores>,
    pub aggregate: Aggregate,
    /// Metrics that could not be computed, with the reason.
    pub unavailable: Vec<String>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

fn argbest(values: &[f64], better: impl Fn(f64, f64) -> bool) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if better(v, best.1) {
            best = (i, v);
        }
    }
    best
}

/// Best-of-K scoring of `rollouts [K, B, T, H, W, C]` against
/// `truth [B, T, H, W, C]`. Each metric picks its own best sample; FVD uses
/// every sample. Failures of the extractor or distance are reported as
/// unavailable metrics rather than errors.
pub fn evaluate_best_of_k(
    rollouts: &Tensor<f32>,
    truth: &Tensor<f32>,
    extractor: &dyn FeatureExtractor,
    perceptual: &dyn FeatureDistance,
) -> Result<MetricReport> {
    let rs = rollouts.shape();
    let ts = truth.shape();
    if rs.len() != 6 || ts.len() != 5 || rs[1..] != *ts {
        return Err(Error::Shape(format!(
            "rollouts {rs:?} do not match ground truth {ts:?} as [K, B, T, H, W, C]"
        )));
    }
    let (k, b) = (rs[0], rs[1]);
    if k < 1 || b < 1 {
        return Err(Error::Parameter("need at least one sample and one video".into()));
    }
    if ts[2] < SSIM_WINDOW || ts[3] < SSIM_WINDOW {
        return Err(Error::Parameter("frames are smaller than the SSIM window".into()));
    }
    let per: usize = ts[1..].iter().product();
    let sample = |ki: usize, bi: usize| &rollouts.data()[(ki * b + bi) * per..(ki * b + bi + 1) * per];
    let video = |bi: usize| &truth.data()[bi * per..(bi + 1) * per];
    let as_tensor = |d: &[f32]| Tensor::from_vec(&ts[1..], d.to_vec());

    let mut unavailable = Vec::new();
    let scored: Vec<(f64, f64, Result<f64>)> = par::map_range(k * b, |i| {
        let (ki, bi) = (i / b, i % b);
        let (x, y) = (sample(ki, bi), video(bi));
        let p = psnr_slice(x, y);
        let s = ssim_video(x, y, ts[1], ts[2], ts[3], ts[4]);
        let d = perceptual.distance(&as_tensor(x), &as_tensor(y));
        (p, s, d)
    });
    let perceptual_ok = scored.iter().all(|s| s.2.is_ok());
    if !perceptual_ok {
        let msg = scored.iter().find_map(|s| s.2.as_ref().err()).unwrap().to_string();
        unavailable.push(format!("perceptual: {msg}"));
    }
    let mut videos = Vec::with_capacity(b);
    for bi in 0..b {
        let ps: Vec<f64> = (0..k).map(|ki| scored[ki * b + bi].0).collect();
        let ss: Vec<f64> = (0..k).map(|ki| scored[ki * b + bi].1).collect();
        let (pi, pv) = argbest(&ps, |a, c| a > c);
        let (si, sv) = argbest(&ss, |a, c| a > c);
        let (di, dv) = if perceptual_ok {
            let ds: Vec<f64> = (0..k).map(|ki| *scored[ki * b + bi].2.as_ref().unwrap()).collect();
            let (i, v) = argbest(&ds, |a, c| a < c);
            (Some(i), Some(v))
        } else {
            (None, None)
        };
        videos.push(VideoScores {
            video: bi,
            best_psnr: pv,
            psnr_index: pi,
            best_ssim: sv,
            ssim_index: si,
            best_perceptual: dv,
            perceptual_index: di,
        });
    }

    let flat = Tensor::from_vec(&[k * b, ts[1], ts[2], ts[3], ts[4]], rollouts.data().to_vec());
    let fvd = extract_batched(extractor, &flat)
        .and_then(|fa| Ok((fa, extract_batched(extractor, truth)?)))
        .and_then(|(fa, fb)| frechet_distance(&fa, &fb));
    let fvd = match fvd {
        Ok(v) => Some(v),
        Err(e) => {
            unavailable.push(format!("fvd: {e}"));
            None
        }
    };
    let mean = |f: &dyn Fn(&VideoScores) -> f64| videos.iter().map(f).sum::<f64>() / b as f64;
    let aggregate = Aggregate {
        mean_best_psnr: mean(&|v| v.best_psnr),
        mean_best_ssim: mean(&|v| v.best_ssim),
        mean_best_perceptual: perceptual_ok.then(|| mean(&|v| v.best_perceptual.unwrap())),
        fvd,
    };
    Ok(MetricReport {
        protocol: Protocol {
            k,
            num_videos: b,
            seed: None,
            selection: "per-metric independent best of K".into(),
            feature_batch: FEATURE_BATCH,
            extractor: extractor.name().into(),
            perceptual: perceptual.name().into(),
        },
        videos,
        aggregate,
        unavailable,
    })
}
