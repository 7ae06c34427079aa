//! Video-consistent augmentation: one random crop-and-resize per video
//! followed by randomly chosen photometric or geometric transforms whose
//! parameters are shared by every frame of the video.

use std::fmt;
use std::str::FromStr;

use fitvid_tensor::{par, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Upper end of the magnitude scale.
pub const MAX_MAGNITUDE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transform {
    Identity,
    AutoContrast,
    Equalize,
    Rotate,
    Solarize,
    Color,
    Posterize,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

impl Transform {
    pub const ALL: [Transform; 14] = [
        Transform::Identity,
        Transform::AutoContrast,
        Transform::Equalize,
        Transform::Rotate,
        Transform::Solarize,
        Transform::Color,
        Transform::Posterize,
        Transform::Contrast,
        Transform::Brightness,
        Transform::Sharpness,
        Transform::ShearX,
        Transform::ShearY,
        Transform::TranslateX,
        Transform::TranslateY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::AutoContrast => "auto_contrast",
            Transform::Equalize => "equalize",
            Transform::Rotate => "rotate",
            Transform::Solarize => "solarize",
            Transform::Color => "color",
            Transform::Posterize => "posterize",
            Transform::Contrast => "contrast",
            Transform::Brightness => "brightness",
            Transform::Sharpness => "sharpness",
            Transform::ShearX => "shear_x",
            Transform::ShearY => "shear_y",
            Transform::TranslateX => "translate_x",
            Transform::TranslateY => "translate_y",
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Transform::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown transformation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub num_transforms: usize,
    pub magnitude: f64,
    pub crop_min_ratio: f64,
    pub transform_set: Vec<Transform>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            num_transforms: 1,
            magnitude: 5.0,
            crop_min_ratio: 0.8,
            transform_set: Transform::ALL.to_vec(),
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.crop_min_ratio > 0.0 && self.crop_min_ratio <= 1.0) {
            return Err(Error::Parameter(format!(
                "crop_min_ratio must lie in (0, 1], got {}",
                self.crop_min_ratio
            )));
        }
        if !(0.0..=MAX_MAGNITUDE).contains(&self.magnitude) {
            return Err(Error::Parameter(format!("magnitude must lie in [0, 30], got {}", self.magnitude)));
        }
        if self.transform_set.is_empty() && self.num_transforms > 0 {
            return Err(Error::Parameter("empty transform set".into()));
        }
        Ok(())
    }
}

/// A single video `[T, H, W, C]` as a flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Clip {
    fn at(&self, t: usize, y: usize, x: usize, ch: usize) -> f64 {
        self.data[((t * self.h + y) * self.w + x) * self.c + ch] as f64
    }

    fn with_data(&self, data: Vec<f32>) -> Self {
        Self { data, ..*self }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v as f64).clamp(0.0, 1.0) as f32).collect())
    }
}

fn split_videos(video: &Tensor<f32>) -> Result<Vec<Clip>> {
    let s = video.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!("expected [B, T, H, W, C] video, got {s:?}")));
    }
    let per: usize = s[1..].iter().product();
    Ok(video
        .data()
        .chunks(per)
        .map(|d| Clip {
            t: s[1],
            h: s[2],
            w: s[3],
            c: s[4],
            data: d.to_vec(),
        })
        .collect())
}

fn join_videos(clips: Vec<Clip>) -> Tensor<f32> {
    let first = &clips[0];
    let shape = [clips.len(), first.t, first.h, first.w, first.c];
    let data = clips.into_iter().flat_map(|c| c.data).collect();
    Tensor::from_vec(&shape, data)
}

/// One RNG per video, derived in order from `rng`.
fn child_rngs<R: Rng>(rng: &mut R, n: usize) -> Vec<ChaCha8Rng> {
    (0..n).map(|_| ChaCha8Rng::seed_from_u64(rng.gen())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Crop height uniform over the integers in `[ceil(C*H), H]`, width keeping
/// the aspect ratio, position uniform.
pub fn sample_crop_window<R: Rng>(h: usize, w: usize, min_ratio: f64, rng: &mut R) -> Result<CropWindow> {
    if !(min_ratio > 0.0 && min_ratio <= 1.0) {
        return Err(Error::Parameter(format!("crop ratio must lie in (0, 1], got {min_ratio}")));
    }
    let lo = ((min_ratio * h as f64).ceil() as usize).clamp(1, h);
    let ch = rng.gen_range(lo..=h);
    let cw = ((ch as f64 * w as f64 / h as f64).round() as usize).clamp(1, w);
    let y = rng.gen_range(0..=h - ch);
    let x = rng.gen_range(0..=w - cw);
    Ok(CropWindow { y, x, h: ch, w: cw })
}

/// Bilinear resize of a window with half-pixel centres; a full-frame window
/// at the source size reproduces the input exactly.
pub fn crop_resize(clip: &Clip, win: CropWindow, target: usize) -> Result<Clip> {
    if win.y + win.h > clip.h || win.x + win.w > clip.w || win.h == 0 || win.w == 0 {
        return Err(Error::Parameter(format!(
            "crop window {win:?} exceeds a {}x{} frame",
            clip.h, clip.w
        )));
    }
    let sy = win.h as f64 / target as f64;
    let sx = win.w as f64 / target as f64;
    let coord = |d: usize, scale: f64, off: usize, len: usize| {
        let u = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (off + i0, off + i1, u - i0 as f64)
    };
    let ys: Vec<_> = (0..target).map(|d| coord(d, sy, win.y, win.h)).collect();
    let xs: Vec<_> = (0..target).map(|d| coord(d, sx, win.x, win.w)).collect();
    let mut out = Vec::with_capacity(clip.t * target * target * clip.c);
    for t in 0..clip.t {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for ch in 0..clip.c {
                    let top = clip.at(t, y0, x0, ch) * (1.0 - fx) + clip.at(t, y0, x1, ch) * fx;
                    let bot = clip.at(t, y1, x0, ch) * (1.0 - fx) + clip.at(t, y1, x1, ch) * fx;
                    out.push((top * (1.0 - fy) + bot * fy) as f32);
                }
            }
        }
    }
    Ok(Clip {
        t: clip.t,
        h: target,
        w: target,
        c: clip.c,
        data: out,
    })
}

/// Random crop of every video in `[B, T, H, W, C]`, resized to
/// `target x target`; one window per video shared by all its frames.
pub fn rand_crop<R: Rng>(video: &Tensor<f32>, min_ratio: f64, target: usize, rng: &mut R) -> Result<Tensor<f32>> {
    let clips = split_videos(video)?;
    let mut rngs = child_rngs(rng, clips.len());
    let mut out = Vec::with_capacity(clips.len());
    for (clip, r) in clips.iter().zip(&mut rngs) {
        let win = sample_crop_window(clip.h, clip.w, min_ratio, r)?;
        out.push(crop_resize(clip, win, target)?);
    }
    Ok(join_videos(out))
}

/// Parameters drawn once per video for a transformation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformParams {
    None,
    /// Rotation in degrees.
    Angle(f64),
    /// Enhancement blend factor.
    Factor(f64),
    Threshold(f64),
    Bits(u32),
    Shear(f64),
    /// Translation in pixels.
    Shift(f64),
}

fn symmetric<R: Rng>(rng: &mut R, r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        rng.gen_range(-r..=r)
    }
}

/// Draws the per-video parameters of `t` at magnitude `m` (0..30).
pub fn sample_params<R: Rng>(t: Transform, magnitude: f64, size: usize, rng: &mut R) -> TransformParams {
    let m = magnitude / MAX_MAGNITUDE;
    match t {
        Transform::Identity | Transform::AutoContrast | Transform::Equalize => TransformParams::None,
        Transform::Rotate => TransformParams::Angle(symmetric(rng, 30.0 * m)),
        Transform::Solarize => TransformParams::Threshold(1.0 - m),
        Transform::Posterize => TransformParams::Bits(8 - (4.0 * m).round() as u32),
        Transform::Color | Transform::Contrast | Transform::Brightness | Transform::Sharpness => {
            TransformParams::Factor(1.0 + symmetric(rng, 0.9 * m))
        }
        Transform::ShearX | Transform::ShearY => TransformParams::Shear(symmetric(rng, 0.3 * m)),
        Transform::TranslateX | Transform::TranslateY => TransformParams::Shift(symmetric(rng, 0.45 * m * size as f64)),
    }
}

fn luminance(clip: &Clip, base: usize) -> f64 {
    if clip.c == 3 {
        0.299 * clip.data[base] as f64 + 0.587 * clip.data[base + 1] as f64 + 0.114 * clip.data[base + 2] as f64
    } else {
        (0..clip.c).map(|k| clip.data[base + k] as f64).sum::<f64>() / clip.c as f64
    }
}

fn reflect(u: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let mut v = u.abs() % period;
    if v > (n - 1) as f64 {
        v = period - v;
    }
    v
}

/// Resamples every frame through `map(x_out, y_out) -> (x_src, y_src)`
/// (pixel coordinates) with bilinear interpolation and reflection padding.
fn warp(clip: &Clip, map: impl Fn(f64, f64) -> (f64, f64)) -> Clip {
    let mut out = Vec::with_capacity(clip.data.len());
    let taps: Vec<_> = (0..clip.h)
        .flat_map(|y| (0..clip.w).map(move |x| (x, y)))
        .map(|(x, y)| {
            let (sx, sy) = map(x as f64, y as f64);
            let (sx, sy) = (reflect(sx, clip.w), reflect(sy, clip.h));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(clip.w - 1), (y0 + 1).min(clip.h - 1));
            (x0, x1, sx - x0 as f64, y0, y1, sy - y0 as f64)
        })
        .collect();
    for t in 0..clip.t {
        for &(x0, x1, fx, y0, y1, fy) in &taps {
            for ch in 0..clip.c {
                let top = clip.at(t, y0, x0, ch) * (1.0 - fx) + clip.at(t, y0, x1, ch) * fx;
                let bot = clip.at(t, y1, x0, ch) * (1.0 - fx) + clip.at(t, y1, x1, ch) * fx;
                out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0) as f32);
            }
        }
    }
    clip.with_data(out)
}

fn blend(clip: &Clip, other: &[f64], factor: f64) -> Clip {
    clip.with_data(
        clip.data
            .iter()
            .zip(other)
            .map(|(&x, &o)| (o + factor * (x as f64 - o)).clamp(0.0, 1.0) as f32)
            .collect(),
    )
}

fn auto_contrast(clip: &Clip) -> Clip {
    let mut lo = vec![f64::INFINITY; clip.c];
    let mut hi = vec![f64::NEG_INFINITY; clip.c];
    for (i, &v) in clip.data.iter().enumerate() {
        let k = i % clip.c;
        lo[k] = lo[k].min(v as f64);
        hi[k] = hi[k].max(v as f64);
    }
    let data = clip
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let k = i % clip.c;
            if hi[k] > lo[k] {
                ((v as f64 - lo[k]) / (hi[k] - lo[k])).clamp(0.0, 1.0) as f32
            } else {
                v
            }
        })
        .collect();
    clip.with_data(data)
}

fn level(v: f32) -> usize {
    ((v as f64) * 255.0).round().clamp(0.0, 255.0) as usize
}

fn equalize(clip: &Clip) -> Clip {
    let mut lut = vec![[0f32; 256]; clip.c];
    let mut identity = vec![false; clip.c];
    for k in 0..clip.c {
        let mut hist = [0usize; 256];
        for v in clip.data.iter().skip(k).step_by(clip.c) {
            hist[level(*v)] += 1;
        }
        let total: usize = hist.iter().sum();
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (i, &h) in hist.iter().enumerate() {
            acc += h;
            cdf[i] = acc;
        }
        let cmin = cdf[hist.iter().position(|&h| h > 0).unwrap_or(0)];
        if total == cmin {
            identity[k] = true;
            continue;
        }
        for i in 0..256 {
            lut[k][i] = (cdf[i].saturating_sub(cmin) as f64 / (total - cmin) as f64) as f32;
        }
    }
    let data = clip
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let k = i % clip.c;
            if identity[k] {
                v
            } else {
                lut[k][level(v)]
            }
        })
        .collect();
    clip.with_data(data)
}

fn smooth(clip: &Clip) -> Vec<f64> {
    let mut out: Vec<f64> = clip.data.iter().map(|&v| v as f64).collect();
    if clip.h < 3 || clip.w < 3 {
        return out;
    }
    for t in 0..clip.t {
        for y in 1..clip.h - 1 {
            for x in 1..clip.w - 1 {
                for ch in 0..clip.c {
                    let mut s = 4.0 * clip.at(t, y, x, ch);
                    for dy in 0..3 {
                        for dx in 0..3 {
                            s += clip.at(t, y + dy - 1, x + dx - 1, ch);
                        }
                    }
                    out[((t * clip.h + y) * clip.w + x) * clip.c + ch] = s / 13.0;
                }
            }
        }
    }
    out
}

/// Applies `t` with pre-drawn parameters to one clip; output in [0, 1].
pub fn apply_params(clip: &Clip, t: Transform, p: TransformParams) -> Clip {
    let (cx, cy) = ((clip.w as f64 - 1.0) / 2.0, (clip.h as f64 - 1.0) / 2.0);
    match (t, p) {
        (Transform::Identity, _) => clip.clone(),
        (Transform::AutoContrast, _) => auto_contrast(clip),
        (Transform::Equalize, _) => equalize(clip),
        (Transform::Rotate, TransformParams::Angle(deg)) => {
            if deg == 0.0 {
                return clip.clone();
            }
            let (s, c) = deg.to_radians().sin_cos();
            warp(clip, |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (cx + c * dx + s * dy, cy - s * dx + c * dy)
            })
        }
        (Transform::Solarize, TransformParams::Threshold(th)) => clip.map(|v| if v > th { 1.0 - v } else { v }),
        (Transform::Posterize, TransformParams::Bits(bits)) => {
            if bits >= 8 {
                return clip.clone();
            }
            let shift = 8 - bits;
            clip.map(|v| ((level(v as f32) >> shift) << shift) as f64 / 255.0)
        }
        (Transform::Brightness, TransformParams::Factor(f)) => blend(clip, &vec![0.0; clip.data.len()], f),
        (Transform::Color, TransformParams::Factor(f)) => {
            let gray: Vec<f64> = (0..clip.data.len() / clip.c)
                .flat_map(|p| std::iter::repeat(luminance(clip, p * clip.c)).take(clip.c))
                .collect();
            blend(clip, &gray, f)
        }
        (Transform::Contrast, TransformParams::Factor(f)) => {
            let n = clip.data.len() / clip.c;
            let mean = (0..n).map(|p| luminance(clip, p * clip.c)).sum::<f64>() / n as f64;
            blend(clip, &vec![mean; clip.data.len()], f)
        }
        (Transform::Sharpness, TransformParams::Factor(f)) => blend(clip, &smooth(clip), f),
        (Transform::ShearX, TransformParams::Shear(s)) => {
            if s == 0.0 {
                return clip.clone();
            }
            warp(clip, |x, y| (x + s * (y - cy), y))
        }
        (Transform::ShearY, TransformParams::Shear(s)) => {
            if s == 0.0 {
                return clip.clone();
            }
            warp(clip, |x, y| (x, y + s * (x - cx)))
        }
        (Transform::TranslateX, TransformParams::Shift(d)) => {
            if d == 0.0 {
                return clip.clone();
            }
            warp(clip, |x, y| (x - d, y))
        }
        (Transform::TranslateY, TransformParams::Shift(d)) => {
            if d == 0.0 {
                return clip.clone();
            }
            warp(clip, |x, y| (x, y - d))
        }
        (t, p) => panic!("parameters {p:?} do not belong to {t}"),
    }
}

/// Applies the named transformation to every video of `[B, T, H, W, C]`,
/// drawing one parameter set per video.
pub fn apply_transformation<R: Rng>(video: &Tensor<f32>, name: &str, magnitude: f64, rng: &mut R) -> Result<Tensor<f32>> {
    let t: Transform = name.parse()?;
    let clips = split_videos(video)?;
    let mut rngs = child_rngs(rng, clips.len());
    let out = clips
        .iter()
        .zip(&mut rngs)
        .map(|(clip, r)| {
            let p = sample_params(t, magnitude, clip.w, r);
            apply_params(clip, t, p)
        })
        .collect();
    Ok(join_videos(out))
}

/// The `num_transforms` transformations drawn uniformly from the policy set.
pub fn choose_transforms<R: Rng>(policy: &AugmentationPolicy, rng: &mut R) -> Vec<Transform> {
    (0..policy.num_transforms)
        .map(|_| policy.transform_set[rng.gen_range(0..policy.transform_set.len())])
        .collect()
}

fn augment_clip(clip: &Clip, policy: &AugmentationPolicy, target: usize, rng: &mut ChaCha8Rng) -> Result<Clip> {
    let win = sample_crop_window(clip.h, clip.w, policy.crop_min_ratio, rng)?;
    let mut out = crop_resize(clip, win, target)?;
    for t in choose_transforms(policy, rng) {
        let p = sample_params(t, policy.magnitude, target, rng);
        out = apply_params(&out, t, p);
    }
    Ok(out)
}

/// Crop-and-resize to `target`, then the policy's random transformations.
/// Each video uses its own stream derived from `rng`, so the result does not
/// depend on how videos are scheduled across threads.
pub fn augment_video<R: Rng>(
    video: &Tensor<f32>,
    policy: &AugmentationPolicy,
    target: usize,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    policy.validate()?;
    let clips = split_videos(video)?;
    let rngs = child_rngs(rng, clips.len());
    let jobs: Vec<(Clip, ChaCha8Rng)> = clips.into_iter().zip(rngs).collect();
    let out: Result<Vec<Clip>> = par::map_slice(&jobs, |(clip, r)| augment_clip(clip, policy, target, &mut r.clone()))
        .into_iter()
        .collect();
    Ok(join_videos(out?))
}
