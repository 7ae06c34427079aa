//! Residual convolutional encoder and decoder with squeeze-and-excite cells.
//!
//! Activations are NHWC. Video tensors `[B, T, H, W, C]` are folded to
//! `[B*T, H, W, C]` before any convolution, so every batch norm inside the
//! autoencoder pools its statistics over batch, time and space.

use fitvid_tensor::{Element, Var};
use rand::Rng;

use crate::config::{ModelConfig, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv, Dense, Init, SqueezeExcite};
use crate::params::Forward;

/// One encoder cell: `(bn, swish, 3x3) x2`, squeeze-excite, residual.
#[derive(Debug, Clone)]
pub struct EncoderCell {
    pub bn1: BatchNorm,
    pub conv1: Conv,
    pub bn2: BatchNorm,
    pub conv2: Conv,
    pub se: SqueezeExcite,
    pub shortcut: Option<Conv>,
}

impl EncoderCell {
    fn new<T: Element, R: Rng>(init: &mut Init<T, R>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            bn1: BatchNorm::new(init, &format!("{name}.bn1"), cin),
            conv1: Conv::new(init, &format!("{name}.conv1"), 3, cin, cout, stride),
            bn2: BatchNorm::new(init, &format!("{name}.bn2"), cout),
            conv2: Conv::new(init, &format!("{name}.conv2"), 3, cout, cout, 1),
            se: SqueezeExcite::new(init, &format!("{name}.se"), cout),
            shortcut: (cin != cout || stride != 1)
                .then(|| Conv::new(init, &format!("{name}.shortcut"), 1, cin, cout, stride)),
        }
    }

    pub fn forward<T: Element>(&self, f: &Forward<T>, x: &Var<T>) -> Var<T> {
        let g = f.graph;
        let y = self.conv1.forward(f, &g.swish(&self.bn1.forward(f, x)));
        let y = self.conv2.forward(f, &g.swish(&self.bn2.forward(f, &y)));
        let y = self.se.forward(f, &y);
        let skip = match &self.shortcut {
            Some(c) => c.forward(f, x),
            None => x.clone(),
        };
        g.add(&y, &skip)
    }
}

/// One decoder cell: bn, 1x1 expand, (bn, swish, 5x5), (bn, swish, 1x1
/// reduce), bn, squeeze-excite, residual.
#[derive(Debug, Clone)]
pub struct DecoderCell {
    pub bn0: BatchNorm,
    pub expand: Conv,
    pub bn1: BatchNorm,
    pub conv: Conv,
    pub bn2: BatchNorm,
    pub reduce: Conv,
    pub bn3: BatchNorm,
    pub se: SqueezeExcite,
    pub shortcut: Option<Conv>,
}

impl DecoderCell {
    fn new<T: Element, R: Rng>(init: &mut Init<T, R>, name: &str, cin: usize, cout: usize, expand: usize) -> Self {
        let wide = expand * cout;
        Self {
            bn0: BatchNorm::new(init, &format!("{name}.bn0"), cin),
            expand: Conv::new(init, &format!("{name}.expand"), 1, cin, wide, 1),
            bn1: BatchNorm::new(init, &format!("{name}.bn1"), wide),
            conv: Conv::new(init, &format!("{name}.conv"), 5, wide, wide, 1),
            bn2: BatchNorm::new(init, &format!("{name}.bn2"), wide),
            reduce: Conv::new(init, &format!("{name}.reduce"), 1, wide, cout, 1),
            bn3: BatchNorm::new(init, &format!("{name}.bn3"), cout),
            se: SqueezeExcite::new(init, &format!("{name}.se"), cout),
            shortcut: (cin != cout).then(|| Conv::new(init, &format!("{name}.shortcut"), 1, cin, cout, 1)),
        }
    }

    pub fn forward<T: Element>(&self, f: &Forward<T>, x: &Var<T>) -> Var<T> {
        let g = f.graph;
        let y = self.expand.forward(f, &self.bn0.forward(f, x));
        let y = self.conv.forward(f, &g.swish(&self.bn1.forward(f, &y)));
        let y = self.reduce.forward(f, &g.swish(&self.bn2.forward(f, &y)));
        let y = self.se.forward(f, &self.bn3.forward(f, &y));
        let skip = match &self.shortcut {
            Some(c) => c.forward(f, x),
            None => x.clone(),
        };
        g.add(&y, &skip)
    }
}

/// Encoder result for a `[B, T, ...]` clip.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T: Element> {
    /// Frame codes `[B, T, g_dim]`.
    pub h: Var<T>,
    /// One `[B, h, w, c]` map per encoder cell, shallowest first, taken at the
    /// requested timestep. Empty when no timestep was requested.
    pub skips: Vec<Var<T>>,
    /// Deepest feature map `[B, T, S, S, F_max]` before pooling.
    pub deepest: Var<T>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cells: Vec<EncoderCell>,
    pub project: Dense,
    input_size: usize,
    channels: usize,
}

impl Encoder {
    pub fn new<T: Element, R: Rng>(init: &mut Init<T, R>, cfg: &ModelConfig) -> Self {
        let mut cells = Vec::new();
        let mut cin = cfg.channels;
        for (b, &width) in cfg.stage_filters.iter().enumerate() {
            for j in 0..cfg.cells_per_block {
                let stride = if b > 0 && j == 0 { 2 } else { 1 };
                cells.push(EncoderCell::new(init, &format!("encoder.b{b}.c{j}"), cin, width, stride));
                cin = width;
            }
        }
        Self {
            cells,
            project: Dense::new(init, "encoder.project", cin, cfg.g_dim),
            input_size: cfg.input_size,
            channels: cfg.channels,
        }
    }

    /// Encodes every frame of `frames [B, T, H, W, C]`; skips are captured at
    /// timestep `skip_step` when given.
    pub fn encode<T: Element>(
        &self,
        f: &Forward<T>,
        frames: &Var<T>,
        skip_step: Option<usize>,
    ) -> Result<EncoderOutput<T>> {
        let s = frames.shape().to_vec();
        if s.len() != 5 || s[2] != self.input_size || s[3] != self.input_size || s[4] != self.channels {
            return Err(Error::Shape(format!(
                "encoder expects [B, T, {0}, {0}, {1}], got {s:?}",
                self.input_size, self.channels
            )));
        }
        if let Some(t) = skip_step {
            if t >= s[1] {
                return Err(Error::Shape(format!("skip timestep {t} outside {} frames", s[1])));
            }
        }
        if !frames.value().all_finite() {
            return Err(Error::Numeric("encoder input contains non-finite values".into()));
        }
        let g = f.graph;
        let (b, t) = (s[0], s[1]);
        let mut x = g.reshape(frames, &[b * t, s[2], s[3], s[4]]);
        let mut skips = Vec::new();
        for cell in &self.cells {
            x = cell.forward(f, &x);
            if let Some(step) = skip_step {
                let xs = x.shape().to_vec();
                let seq = g.reshape(&x, &[b, t, xs[1], xs[2], xs[3]]);
                skips.push(g.select_step(&seq, step));
            }
        }
        let xs = x.shape().to_vec();
        let pooled = g.spatial_mean(&x);
        let h = self.project.forward(f, &pooled);
        let gd = h.shape()[1];
        Ok(EncoderOutput {
            h: g.reshape(&h, &[b, t, gd]),
            skips,
            deepest: g.reshape(&x, &[b, t, xs[1], xs[2], xs[3]]),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// 1x1 projections of encoder skips, one per decoder cell.
    pub skip_project: Vec<Conv>,
    pub cells: Vec<DecoderCell>,
    pub output: Conv,
    cells_per_block: usize,
    /// Expected `(side, channels)` of each skip, shallowest encoder cell first.
    skip_shapes: Vec<(usize, usize)>,
    latent: [usize; 3],
}

impl Decoder {
    pub fn new<T: Element, R: Rng>(init: &mut Init<T, R>, cfg: &ModelConfig) -> Self {
        let mut skip_shapes = Vec::new();
        let mut side = cfg.input_size;
        for (b, &width) in cfg.stage_filters.iter().enumerate() {
            if b > 0 {
                side /= 2;
            }
            for _ in 0..cfg.cells_per_block {
                skip_shapes.push((side, width));
            }
        }
        let n = skip_shapes.len();
        let mut skip_project = Vec::new();
        let mut cells = Vec::new();
        let mut cin = cfg.max_filters();
        for (b, &width) in cfg.stage_filters.iter().rev().enumerate() {
            for j in 0..cfg.cells_per_block {
                let k = b * cfg.cells_per_block + j;
                let (_, skip_c) = skip_shapes[n - 1 - k];
                skip_project.push(Conv::new(init, &format!("decoder.skip{k}"), 1, skip_c, cin, 1));
                cells.push(DecoderCell::new(
                    init,
                    &format!("decoder.b{b}.c{j}"),
                    cin,
                    width,
                    cfg.decoder_expand_ratio,
                ));
                cin = width;
            }
        }
        Self {
            skip_project,
            cells,
            output: Conv::new(init, "decoder.output", 1, cin, cfg.channels, 1),
            cells_per_block: cfg.cells_per_block,
            skip_shapes,
            latent: [cfg.latent_size(), cfg.latent_size(), cfg.max_filters()],
        }
    }

    /// Pre-sigmoid output `[B, T, H, W, C]`.
    pub fn decode_logits<T: Element>(&self, f: &Forward<T>, h_hat: &Var<T>, skips: &[Var<T>]) -> Result<Var<T>> {
        let s = h_hat.shape().to_vec();
        if s.len() != 5 || s[2..] != self.latent {
            return Err(Error::Shape(format!(
                "decoder expects [B, T, {}, {}, {}], got {s:?}",
                self.latent[0], self.latent[1], self.latent[2]
            )));
        }
        if skips.len() != self.skip_shapes.len() {
            return Err(Error::Shape(format!(
                "decoder needs {} skips, got {}",
                self.skip_shapes.len(),
                skips.len()
            )));
        }
        let (b, t) = (s[0], s[1]);
        for (i, (skip, &(side, c))) in skips.iter().zip(&self.skip_shapes).enumerate() {
            if skip.shape() != [b, side, side, c] {
                return Err(Error::Shape(format!(
                    "skip {i} should be {:?}, got {:?}",
                    [b, side, side, c],
                    skip.shape()
                )));
            }
        }
        let g = f.graph;
        let n = skips.len();
        let mut x = g.reshape(h_hat, &[b * t, s[2], s[3], s[4]]);
        for (k, (cell, proj)) in self.cells.iter().zip(&self.skip_project).enumerate() {
            let fused = proj.forward(f, &skips[n - 1 - k]);
            x = g.add(&x, &g.repeat_rows(&fused, t));
            x = cell.forward(f, &x);
            let block = k / self.cells_per_block;
            if (k + 1) % self.cells_per_block == 0 && block + 1 < NUM_BLOCKS {
                x = g.upsample2x(&x);
            }
        }
        let y = self.output.forward(f, &x);
        let ys = y.shape().to_vec();
        Ok(g.reshape(&y, &[b, t, ys[1], ys[2], ys[3]]))
    }

    /// Predicted frames in (0, 1), `[B, T, H, W, C]`.
    pub fn decode<T: Element>(&self, f: &Forward<T>, h_hat: &Var<T>, skips: &[Var<T>]) -> Result<Var<T>> {
        let logits = self.decode_logits(f, h_hat, skips)?;
        Ok(f.graph.sigmoid(&logits))
    }
}

/// Batch norm of a `[B, T, H, W, C]` activation with statistics shared
/// across batch, time and space.
pub fn temporal_batch_norm<T: Element>(f: &Forward<T>, x: &Var<T>, bn: &BatchNorm) -> Result<Var<T>> {
    if x.shape().len() != 5 {
        return Err(Error::Shape(format!("expected a rank-5 activation, got {:?}", x.shape())));
    }
    Ok(bn.forward(f, x))
}
