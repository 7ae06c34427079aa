use fitvid_core::autoencoder::temporal_batch_norm;
use fitvid_core::layers::{BatchNorm, Init};
use fitvid_core::params::{Forward, NormMode, ParamStore};
use fitvid_core::tensor::{Graph, Tensor};
use fitvid_core::train::{adam_update, AdamState};
use fitvid_core::{FitVid, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight-line NHWC reference written with plain loops.
mod oracle {
    use fitvid_core::params::ParamStore;

    #[derive(Clone, Debug)]
    pub struct Img {
        pub n: usize,
        pub h: usize,
        pub w: usize,
        pub c: usize,
        pub d: Vec<f64>,
    }

    impl Img {
        pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
            self.d[((n * self.h + y) * self.w + x) * self.c + c]
        }
    }

    pub fn p<'a>(s: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
        s.get(s.find(name).unwrap_or_else(|| panic!("missing {name}"))).data()
    }

    pub fn conv(s: &ParamStore<f64>, name: &str, x: &Img, k: usize, co: usize, stride: usize) -> Img {
        let kern = p(s, &format!("{name}.kernel"));
        let bias = p(s, &format!("{name}.bias"));
        let pad = (k - 1) / 2;
        let oh = (x.h + 2 * pad - k) / stride + 1;
        let ow = (x.w + 2 * pad - k) / stride + 1;
        let mut d = vec![0.0; x.n * oh * ow * co];
        for n in 0..x.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..co {
                        let mut acc = bias[o];
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                for ci in 0..x.c {
                                    acc += x.at(n, iy as usize, ix as usize, ci) * kern[((ky * k + kx) * x.c + ci) * co + o];
                                }
                            }
                        }
                        d[((n * oh + oy) * ow + ox) * co + o] = acc;
                    }
                }
            }
        }
        Img { n: x.n, h: oh, w: ow, c: co, d }
    }

    pub fn bn(s: &ParamStore<f64>, name: &str, x: &Img, train: bool) -> Img {
        let gamma = p(s, &format!("{name}.gamma"));
        let beta = p(s, &format!("{name}.beta"));
        let count = (x.n * x.h * x.w) as f64;
        let mut out = x.clone();
        for c in 0..x.c {
            let vals: Vec<f64> = x.d.iter().skip(c).step_by(x.c).copied().collect();
            let (mean, var) = if train {
                let m = vals.iter().sum::<f64>() / count;
                (m, vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count)
            } else {
                let rm = s.buffer(s.buffer_ids().find(|&b| s.buffer_name(b) == format!("{name}.running_mean")).unwrap());
                let rv = s.buffer(s.buffer_ids().find(|&b| s.buffer_name(b) == format!("{name}.running_var")).unwrap());
                (rm[c], rv[c])
            };
            let inv = 1.0 / (var + 1e-5).sqrt();
            for (i, v) in out.d.iter_mut().enumerate().filter(|(i, _)| i % x.c == c) {
                let _ = i;
                *v = gamma[c] * (*v - mean) * inv + beta[c];
            }
        }
        out
    }

    pub fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    pub fn swish(x: &Img) -> Img {
        Img { d: x.d.iter().map(|&v| v * sig(v)).collect(), ..x.clone() }
    }

    pub fn add(a: &Img, b: &Img) -> Img {
        assert_eq!((a.n, a.h, a.w, a.c), (b.n, b.h, b.w, b.c));
        Img { d: a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect(), ..a.clone() }
    }

    pub fn dense(s: &ParamStore<f64>, name: &str, x: &[f64], fin: usize, fout: usize) -> Vec<f64> {
        let w = p(s, &format!("{name}.weight"));
        let b = p(s, &format!("{name}.bias"));
        let rows = x.len() / fin;
        let mut out = vec![0.0; rows * fout];
        for r in 0..rows {
            for o in 0..fout {
                let mut acc = b[o];
                for i in 0..fin {
                    acc += x[r * fin + i] * w[i * fout + o];
                }
                out[r * fout + o] = acc;
            }
        }
        out
    }

    pub fn pool(x: &Img) -> Vec<f64> {
        let mut out = vec![0.0; x.n * x.c];
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    for c in 0..x.c {
                        out[n * x.c + c] += x.at(n, y, xx, c) / (x.h * x.w) as f64;
                    }
                }
            }
        }
        out
    }

    pub fn se(s: &ParamStore<f64>, name: &str, x: &Img) -> Img {
        let r = (x.c / 4).max(1);
        let hidden: Vec<f64> = dense(s, &format!("{name}.reduce"), &pool(x), x.c, r).into_iter().map(|v| v.max(0.0)).collect();
        let gates: Vec<f64> = dense(s, &format!("{name}.expand"), &hidden, r, x.c).into_iter().map(sig).collect();
        let mut out = x.clone();
        for (i, v) in out.d.iter_mut().enumerate() {
            let n = i / (x.h * x.w * x.c);
            *v *= gates[n * x.c + i % x.c];
        }
        out
    }

    pub fn encoder_cell(s: &ParamStore<f64>, name: &str, x: &Img, co: usize, stride: usize, train: bool, with_se: bool) -> Img {
        let y = conv(s, &format!("{name}.conv1"), &swish(&bn(s, &format!("{name}.bn1"), x, train)), 3, co, stride);
        let y = conv(s, &format!("{name}.conv2"), &swish(&bn(s, &format!("{name}.bn2"), &y, train)), 3, co, 1);
        let y = if with_se { se(s, &format!("{name}.se"), &y) } else { y };
        let short = if x.c != co || stride != 1 {
            conv(s, &format!("{name}.shortcut"), x, 1, co, stride)
        } else {
            x.clone()
        };
        add(&y, &short)
    }

    pub fn decoder_cell(s: &ParamStore<f64>, name: &str, x: &Img, co: usize, expand: usize, train: bool) -> Img {
        let wide = co * expand;
        let y = conv(s, &format!("{name}.expand"), &bn(s, &format!("{name}.bn0"), x, train), 1, wide, 1);
        let y = conv(s, &format!("{name}.conv"), &swish(&bn(s, &format!("{name}.bn1"), &y, train)), 5, wide, 1);
        let y = conv(s, &format!("{name}.reduce"), &swish(&bn(s, &format!("{name}.bn2"), &y, train)), 1, co, 1);
        let y = se(s, &format!("{name}.se"), &bn(s, &format!("{name}.bn3"), &y, train));
        let short = if x.c != co { conv(s, &format!("{name}.shortcut"), x, 1, co, 1) } else { x.clone() };
        add(&y, &short)
    }

    pub fn upsample(x: &Img) -> Img {
        let mut d = Vec::with_capacity(x.d.len() * 4);
        for n in 0..x.n {
            for y in 0..2 * x.h {
                for xx in 0..2 * x.w {
                    for c in 0..x.c {
                        d.push(x.at(n, y / 2, xx / 2, c));
                    }
                }
            }
        }
        Img { h: 2 * x.h, w: 2 * x.w, d, ..x.clone() }
    }

    /// Frame codes, every cell output (all frames) and the deepest map.
    pub fn encode(s: &ParamStore<f64>, frames: &Img, filters: &[usize], g_dim: usize, train: bool) -> (Vec<f64>, Vec<Img>) {
        let mut x = frames.clone();
        let mut cells = Vec::new();
        for (b, &f) in filters.iter().enumerate() {
            for j in 0..2 {
                let stride = if b > 0 && j == 0 { 2 } else { 1 };
                x = encoder_cell(s, &format!("encoder.b{b}.c{j}"), &x, f, stride, train, true);
                cells.push(x.clone());
            }
        }
        let h = dense(s, "encoder.project", &pool(&x), x.c, g_dim);
        (h, cells)
    }

    /// Decoder logits for `h_hat` (all B*T frames, batch-major) and skips
    /// (one image of B rows per encoder cell).
    pub fn decode_logits(s: &ParamStore<f64>, h_hat: &Img, skips: &[Img], t: usize, filters: &[usize], expand: usize, channels: usize, train: bool) -> Img {
        let mut x = h_hat.clone();
        let n = skips.len();
        let mut k = 0;
        for (b, &f) in filters.iter().rev().enumerate() {
            for j in 0..2 {
                let skip = &skips[n - 1 - k];
                let proj = conv(s, &format!("decoder.skip{k}"), skip, 1, x.c, 1);
                let mut fused = x.clone();
                for (i, v) in fused.d.iter_mut().enumerate() {
                    let row = i / (x.h * x.w * x.c);
                    let within = i % (x.h * x.w * x.c);
                    *v += proj.d[(row / t) * x.h * x.w * x.c + within];
                }
                x = decoder_cell(s, &format!("decoder.b{b}.c{j}"), &fused, f, expand, train);
                k += 1;
            }
            if b + 1 < filters.len() {
                x = upsample(&x);
            }
        }
        conv(s, "decoder.output", &x, 1, channels, 1)
    }
}

use oracle::Img;

fn tiny() -> ModelConfig {
    ModelConfig::tiny()
}

fn random_frames(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

fn as_img(t: &Tensor<f64>, n: usize) -> Img {
    let s = t.shape();
    let k = s.len();
    Img { n, h: s[k - 3], w: s[k - 2], c: s[k - 1], d: t.data().to_vec() }
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Drifts batch-norm affine parameters and running statistics away from
/// their initial values so the comparison exercises them.
fn perturb(params: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            for v in params.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
    }
    let bids: Vec<_> = params.buffer_ids().collect();
    for b in bids {
        let is_var = params.buffer_name(b).ends_with("running_var");
        for v in params.buffer_mut(b) {
            *v = if is_var { rng.gen_range(0.5..2.0) } else { rng.gen_range(-0.3..0.3) };
        }
    }
}

#[test]
fn tiny_forward_matches_straight_line_reference() {
    let cfg = tiny();
    let (model, mut params) = FitVid::init::<f64>(&cfg, 3).unwrap();
    perturb(&mut params, 4);
    let (b, t) = (2, 3);
    let frames = random_frames(&[b, t, 32, 32, 3], 5);
    for (mode, train) in [(NormMode::Train, true), (NormMode::Eval, false)] {
        let g = Graph::inference();
        let f = Forward::new(&g, &params, mode);
        let out = model.encoder.encode(&f, &g.constant(frames.clone()), Some(1)).unwrap();
        let (h, cells) = oracle::encode(&params, &as_img(&frames, b * t), &cfg.stage_filters, cfg.g_dim, train);
        assert!(max_gap(out.h.value().data(), &h) < 1e-5, "h differs");
        let deepest = cells.last().unwrap();
        assert!(max_gap(out.deepest.value().data(), &deepest.d) < 1e-5);
        let mut skip_imgs = Vec::new();
        for (mine, full) in out.skips.iter().zip(&cells) {
            let per = full.h * full.w * full.c;
            let d: Vec<f64> = (0..b).flat_map(|bi| full.d[(bi * t + 1) * per..(bi * t + 2) * per].to_vec()).collect();
            assert!(max_gap(mine.value().data(), &d) < 1e-5, "skip differs");
            skip_imgs.push(Img { n: b, d, ..full.clone() });
        }

        let h_hat = random_frames(&[b, t, 4, 4, 64], 6);
        let logits = model.decoder.decode_logits(&f, &g.constant(h_hat.clone()), &out.skips).unwrap();
        let want = oracle::decode_logits(&params, &as_img(&h_hat, b * t), &skip_imgs, t, &cfg.stage_filters, cfg.decoder_expand_ratio, 3, train);
        assert_eq!(logits.shape(), [b, t, 32, 32, 3]);
        assert!(max_gap(logits.value().data(), &want.d) < 1e-5, "decoder differs");
    }
}

#[test]
fn zero_input_stays_finite() {
    let cfg = tiny();
    let (model, params) = FitVid::init::<f32>(&cfg, 0).unwrap();
    let g = Graph::inference();
    let f = Forward::new(&g, &params, NormMode::Train);
    let out = model.encoder.encode(&f, &g.constant(Tensor::zeros(&[2, 3, 32, 32, 3])), Some(0)).unwrap();
    assert!(out.h.value().all_finite() && out.deepest.value().all_finite());
    assert!(out.skips.iter().all(|s| s.value().all_finite()));
    let y = model.decoder.decode(&f, &out.deepest, &out.skips).unwrap();
    assert!(y.value().all_finite());
}

#[test]
fn shape_ladder_halves_then_doubles() {
    let cfg = tiny();
    let (model, params) = FitVid::init::<f32>(&cfg, 0).unwrap();
    let g = Graph::inference();
    let f = Forward::new(&g, &params, NormMode::Eval);
    let x = g.constant(Tensor::full(&[1, 2, 32, 32, 3], 0.3f32));
    let out = model.encoder.encode(&f, &x, Some(1)).unwrap();
    let sides: Vec<(usize, usize)> = out.skips.iter().map(|s| (s.shape()[1], s.shape()[3])).collect();
    assert_eq!(sides, [(32, 8), (32, 8), (16, 16), (16, 16), (8, 32), (8, 32), (4, 64), (4, 64)]);
    assert_eq!(out.deepest.shape(), [1, 2, 4, 4, 64]);
    assert_eq!(out.h.shape(), [1, 2, 16]);
    let y = model.decoder.decode(&f, &out.deepest, &out.skips).unwrap();
    assert_eq!(y.shape(), [1, 2, 32, 32, 3]);
    assert!(y.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn encode_and_decode_are_deterministic() {
    let cfg = tiny();
    let (model, params) = FitVid::init::<f32>(&cfg, 1).unwrap();
    let frames = random_frames(&[2, 2, 32, 32, 3], 2).cast::<f32>();
    let run = || {
        let g = Graph::inference();
        let f = Forward::new(&g, &params, NormMode::Train);
        let out = model.encoder.encode(&f, &g.constant(frames.clone()), Some(1)).unwrap();
        let y = model.decoder.decode(&f, &out.deepest, &out.skips).unwrap();
        (out.h.value().clone(), y.value().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn decoder_rejects_mismatched_skips() {
    let cfg = tiny();
    let (model, params) = FitVid::init::<f32>(&cfg, 1).unwrap();
    let g = Graph::inference();
    let f = Forward::new(&g, &params, NormMode::Eval);
    let out = model.encoder.encode(&f, &g.constant(Tensor::full(&[1, 1, 32, 32, 3], 0.5f32)), Some(0)).unwrap();
    let wrong_batch = g.constant(Tensor::zeros(&[2, 1, 4, 4, 64]));
    assert!(model.decoder.decode(&f, &wrong_batch, &out.skips).is_err());
    assert!(model.decoder.decode(&f, &out.deepest, &out.skips[1..]).is_err());
    let bad_frames = g.constant(Tensor::zeros(&[1, 1, 30, 30, 3]));
    assert!(model.encoder.encode(&f, &bad_frames, None).is_err());
    let nan = g.constant(Tensor::full(&[1, 1, 32, 32, 3], f32::NAN));
    assert!(matches!(model.encoder.encode(&f, &nan, None), Err(fitvid_core::Error::Numeric(_))));
}

#[test]
fn forced_logits_saturate_the_sigmoid() {
    let cfg = tiny();
    let (model, mut params) = FitVid::init::<f64>(&cfg, 1).unwrap();
    let k = params.find("decoder.output.kernel").unwrap();
    let zeros = Tensor::zeros(params.get(k).shape());
    params.set(k, zeros).unwrap();
    let b = params.find("decoder.output.bias").unwrap();
    params.set(b, Tensor::from_vec(&[3], vec![40.0, -40.0, 40.0])).unwrap();
    let g = Graph::inference();
    let f = Forward::new(&g, &params, NormMode::Eval);
    let out = model.encoder.encode(&f, &g.constant(random_frames(&[1, 2, 32, 32, 3], 9)), Some(1)).unwrap();
    let y = model.decoder.decode(&f, &out.deepest, &out.skips).unwrap();
    for (i, &v) in y.value().data().iter().enumerate() {
        let target = if i % 3 == 1 { 0.0 } else { 1.0 };
        assert!((v - target).abs() < 1e-10);
    }
}

#[test]
fn overfit_single_video_reconstruction() {
    let cfg = tiny();
    let (model, mut params) = FitVid::init::<f32>(&cfg, 7).unwrap();
    let ds = fitvid_core::data::generate_pusher_dataset_at(1, 8, 3, 32).unwrap();
    let video = ds.videos.clone();
    let mut opt = AdamState::new(&params);
    let mut mse = f64::INFINITY;
    for _ in 0..2000 {
        let g = Graph::new();
        let f = Forward::new(&g, &params, NormMode::Train);
        let x = g.constant(video.clone());
        let out = model.encoder.encode(&f, &x, Some(1)).unwrap();
        let y = model.decoder.decode(&f, &out.deepest, &out.skips).unwrap();
        let loss = g.mean(&g.square(&g.sub(&y, &x)));
        mse = loss.value().item() as f64;
        if mse < 1e-3 {
            break;
        }
        let stats = f.take_stats();
        let mut grads = g.backward(&loss).unwrap();
        let pg = f.param_grads(&mut grads);
        adam_update(&mut params, &mut opt, &pg, &cfg);
        params.apply_batch_stats(&stats, fitvid_core::config::BN_MOMENTUM);
    }
    assert!(mse < 1e-3, "reconstruction mse {mse}");
}

fn bn_layer(c: usize) -> (ParamStore<f64>, BatchNorm) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bn = BatchNorm::new(&mut Init::new(&mut store, &mut rng), "bn", c);
    (store, bn)
}

fn channel_moments(d: &[f64], c: usize) -> Vec<(f64, f64)> {
    (0..c)
        .map(|k| {
            let v: Vec<f64> = d.iter().skip(k).step_by(c).copied().collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64)
        })
        .collect()
}

#[test]
fn temporal_batch_norm_standardises_each_channel() {
    let (store, bn) = bn_layer(5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[2, 3, 4, 4, 5], |i| rng.gen_range(-3.0..7.0) * (1 + i % 5) as f64);
    let g = Graph::inference();
    let f = Forward::new(&g, &store, NormMode::Train);
    let y = temporal_batch_norm(&f, &g.constant(x), &bn).unwrap();
    for (m, v) in channel_moments(y.value().data(), 5) {
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn temporal_batch_norm_leaves_standard_data_alone() {
    let (store, bn) = bn_layer(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let raw = Tensor::from_fn(&[2, 4, 3, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let moments = channel_moments(raw.data(), 3);
    let x = Tensor::from_fn(raw.shape(), |i| {
        let (m, v) = moments[i % 3];
        (raw.data()[i] - m) / v.sqrt()
    });
    let g = Graph::inference();
    let f = Forward::new(&g, &store, NormMode::Train);
    let y = temporal_batch_norm(&f, &g.constant(x.clone()), &bn).unwrap();
    assert!(y.value().max_abs_diff(&x) < 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn temporal_batch_norm_equals_folded_batch_norm(
        b in 1usize..3, t in 1usize..4, side in 1usize..4, c in 1usize..5, seed in any::<u64>(), train in any::<bool>()
    ) {
        let (mut store, bn) = bn_layer(c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v = rng.gen_range(0.5..1.5);
            }
        }
        let x = Tensor::from_fn(&[b, t, side, side, c], |_| rng.gen_range(-2.0..2.0));
        let mode = if train { NormMode::Train } else { NormMode::Eval };
        let g = Graph::inference();
        let f = Forward::new(&g, &store, mode);
        let five = temporal_batch_norm(&f, &g.constant(x.clone()), &bn).unwrap();
        let folded = bn.forward(&f, &g.constant(x.reshape(&[b * t, side, side, c])));
        prop_assert!(five.value().data().iter().zip(folded.value().data()).all(|(p, q)| (p - q).abs() <= 1e-6));
        prop_assert_eq!(five.shape(), &[b, t, side, side, c][..]);
    }
}

#[test]
fn squeeze_excite_at_full_gate_is_transparent() {
    let cfg = tiny();
    let (model, mut params) = FitVid::init::<f64>(&cfg, 2).unwrap();
    let name = "encoder.b1.c1.se.expand";
    let w = params.find(&format!("{name}.weight")).unwrap();
    let zeros = Tensor::zeros(params.get(w).shape());
    params.set(w, zeros).unwrap();
    let bias = params.find(&format!("{name}.bias")).unwrap();
    let big = Tensor::full(params.get(bias).shape(), 60.0);
    params.set(bias, big).unwrap();

    let x = random_frames(&[3, 16, 16, 16], 4);
    let g = Graph::inference();
    let f = Forward::new(&g, &params, NormMode::Train);
    let mine = model.encoder.cells[3].forward(&f, &g.constant(x.clone()));
    let plain = oracle::encoder_cell(&params, "encoder.b1.c1", &as_img(&x, 3), 16, 1, true, false);
    assert!(max_gap(mine.value().data(), &plain.d) <= 1e-6);
}

#[test]
fn encoder_cell_gradient_matches_finite_differences() {
    let cfg = tiny();
    let (model, params) = FitVid::init::<f64>(&cfg, 8).unwrap();
    let cell = &model.encoder.cells[2];
    let x = random_frames(&[2, 8, 8, 8], 10).map(|v| v * 2.0 - 1.0);
    let weights = random_frames(&[2, 4, 4, 16], 11);
    let loss = |store: &ParamStore<f64>, input: &Tensor<f64>| -> f64 {
        let g = Graph::inference();
        let f = Forward::new(&g, store, NormMode::Train);
        let y = cell.forward(&f, &g.constant(input.clone()));
        y.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let g = Graph::new();
    let f = Forward::new(&g, &params, NormMode::Train);
    let xv = g.leaf(std::sync::Arc::new(x.clone()));
    let y = cell.forward(&f, &xv);
    let root = g.sum(&g.mul(&y, &g.constant(weights.clone())));
    let mut grads = g.backward(&root).unwrap();
    let dx = grads.get(&xv).unwrap().clone();
    let pg = f.param_grads(&mut grads);

    let eps = 1e-4;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let names = ["encoder.b1.c0.conv1.kernel", "encoder.b1.c0.conv2.kernel", "encoder.b1.c0.bn1.gamma", "encoder.b1.c0.se.reduce.weight", "encoder.b1.c0.shortcut.kernel"];
    for name in names {
        let id = params.find(name).unwrap();
        let idx = rng.gen_range(0..params.get(id).numel());
        let mut plus = params.clone();
        plus.get_mut(id).data_mut()[idx] += eps;
        let mut minus = params.clone();
        minus.get_mut(id).data_mut()[idx] -= eps;
        let numeric = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * eps);
        let pos = params.ids().position(|i| i == id).unwrap();
        let analytic = pg[pos].data()[idx];
        assert!(rel(analytic, numeric) < 1e-3, "{name}: {analytic} vs {numeric}");
    }
    for _ in 0..5 {
        let idx = rng.gen_range(0..x.numel());
        let mut xp = x.clone();
        xp.data_mut()[idx] += eps;
        let mut xm = x.clone();
        xm.data_mut()[idx] -= eps;
        let numeric = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * eps);
        assert!(rel(dx.data()[idx], numeric) < 1e-3);
    }
}
