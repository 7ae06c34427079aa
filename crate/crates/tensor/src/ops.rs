//! Differentiable ops. Image tensors are NHWC; "row" ops treat the last axis
//! as channels and everything before it as rows.

use std::sync::Arc;

use crate::element::{gemm, Element, Trans};
use crate::graph::{Graph, Var};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn same_shape<T: Element>(op: &str, a: &Var<T>, b: &Var<T>) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("rank >= 1")
}

/// Output of a training-mode batch normalisation.
pub struct BatchNormOutput<T> {
    pub y: Var<T>,
    /// Per-channel batch mean.
    pub mean: Vec<f64>,
    /// Per-channel biased batch variance.
    pub var: Vec<f64>,
}

impl<T: Element> Graph<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        same_shape("add", a, b);
        let out = a.value().zip_map(b.value(), |x, y| x + y);
        self.op(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        same_shape("sub", a, b);
        let out = a.value().zip_map(b.value(), |x, y| x - y);
        self.op(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        same_shape("mul", a, b);
        let out = a.value().zip_map(b.value(), |x, y| x * y);
        let (sa, sb) = (a.shared(), b.shared());
        self.op(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&sb, |d, y| d * y)),
                need[1].then(|| g.zip_map(&sa, |d, x| d * x)),
            ]
        })
    }

    pub fn scale(&self, a: &Var<T>, s: f64) -> Var<T> {
        let s = T::of(s);
        self.op(a.value().map(|x| x * s), &[a], move |g, _| vec![Some(g.map(|d| d * s))])
    }

    pub fn add_scalar(&self, a: &Var<T>, s: f64) -> Var<T> {
        let s = T::of(s);
        self.op(a.value().map(|x| x + s), &[a], |g, _| vec![Some(g.clone())])
    }

    pub fn square(&self, a: &Var<T>) -> Var<T> {
        let sa = a.shared();
        self.op(a.value().map(|x| x * x), &[a], move |g, _| {
            let two = T::of(2.0);
            vec![Some(g.zip_map(&sa, |d, x| two * x * d))]
        })
    }

    pub fn exp(&self, a: &Var<T>) -> Var<T> {
        let out = Arc::new(a.value().map(|x| x.exp()));
        let saved = Arc::clone(&out);
        self.op((*out).clone(), &[a], move |g, _| vec![Some(g.zip_map(&saved, |d, y| d * y))])
    }

    pub fn sigmoid(&self, a: &Var<T>) -> Var<T> {
        let out = Arc::new(a.value().map(sigmoid));
        let saved = Arc::clone(&out);
        self.op((*out).clone(), &[a], move |g, _| {
            vec![Some(g.zip_map(&saved, |d, y| d * y * (T::one() - y)))]
        })
    }

    pub fn tanh(&self, a: &Var<T>) -> Var<T> {
        let out = Arc::new(a.value().map(|x| x.tanh()));
        let saved = Arc::clone(&out);
        self.op((*out).clone(), &[a], move |g, _| {
            vec![Some(g.zip_map(&saved, |d, y| d * (T::one() - y * y)))]
        })
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&self, a: &Var<T>) -> Var<T> {
        let sa = a.shared();
        self.op(a.value().map(|x| x * sigmoid(x)), &[a], move |g, _| {
            vec![Some(g.zip_map(&sa, |d, x| {
                let s = sigmoid(x);
                d * (s + x * s * (T::one() - s))
            }))]
        })
    }

    pub fn relu(&self, a: &Var<T>) -> Var<T> {
        let sa = a.shared();
        self.op(a.value().map(|x| x.max(T::zero())), &[a], move |g, _| {
            vec![Some(g.zip_map(&sa, |d, x| if x > T::zero() { d } else { T::zero() }))]
        })
    }

    /// Adds a per-channel vector to every row.
    pub fn add_row(&self, x: &Var<T>, b: &Var<T>) -> Var<T> {
        let c = last_dim(x.shape());
        assert_eq!(b.shape(), [c], "add_row: bias {:?} vs input {:?}", b.shape(), x.shape());
        let mut out = x.value().clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(b.value().data()) {
                *v += bb;
            }
        }
        self.op(out, &[x, b], move |g, need| {
            let db = need[1].then(|| {
                let mut db = Tensor::zeros(&[c]);
                for row in g.data().chunks(c) {
                    for (a, &v) in db.data_mut().iter_mut().zip(row) {
                        *a += v;
                    }
                }
                db
            });
            vec![need[0].then(|| g.clone()), db]
        })
    }

    /// Scales each channel of each image by a gate: `x [N,H,W,C] * gate [N,C]`.
    pub fn channel_gate(&self, x: &Var<T>, gate: &Var<T>) -> Var<T> {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "channel_gate expects NHWC");
        assert_eq!(gate.shape(), [s[0], s[3]], "channel_gate: gate shape");
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let mut out = x.value().clone();
        for b in 0..n {
            let gr = &gate.value().data()[b * c..(b + 1) * c];
            for row in out.data_mut()[b * hw * c..(b + 1) * hw * c].chunks_mut(c) {
                for (v, &gg) in row.iter_mut().zip(gr) {
                    *v *= gg;
                }
            }
        }
        let (sx, sg) = (x.shared(), gate.shared());
        self.op(out, &[x, gate], move |g, need| {
            let dx = need[0].then(|| {
                let mut dx = g.clone();
                for b in 0..n {
                    let gr = &sg.data()[b * c..(b + 1) * c];
                    for row in dx.data_mut()[b * hw * c..(b + 1) * hw * c].chunks_mut(c) {
                        for (v, &gg) in row.iter_mut().zip(gr) {
                            *v *= gg;
                        }
                    }
                }
                dx
            });
            let dg = need[1].then(|| {
                let mut dg = Tensor::zeros(&[n, c]);
                for b in 0..n {
                    let acc = &mut dg.data_mut()[b * c..(b + 1) * c];
                    let rows = g.data()[b * hw * c..(b + 1) * hw * c]
                        .chunks(c)
                        .zip(sx.data()[b * hw * c..(b + 1) * hw * c].chunks(c));
                    for (gr, xr) in rows {
                        for j in 0..c {
                            acc[j] += gr[j] * xr[j];
                        }
                    }
                }
                dg
            });
            vec![dx, dg]
        })
    }

    /// Mean over the spatial axes: `[N,H,W,C] -> [N,C]`.
    pub fn spatial_mean(&self, x: &Var<T>) -> Var<T> {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "spatial_mean expects NHWC");
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let inv = T::of(1.0 / hw as f64);
        let mut out = Tensor::zeros(&[n, c]);
        for b in 0..n {
            let acc = &mut out.data_mut()[b * c..(b + 1) * c];
            for row in x.value().data()[b * hw * c..(b + 1) * hw * c].chunks(c) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
        self.op(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&s);
            for b in 0..n {
                let gr = &g.data()[b * c..(b + 1) * c];
                for row in dx.data_mut()[b * hw * c..(b + 1) * hw * c].chunks_mut(c) {
                    for (v, &gg) in row.iter_mut().zip(gr) {
                        *v = gg * inv;
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let shape = x.shape().to_vec();
        let total: f64 = x.value().data().iter().map(|v| v.f64()).sum();
        self.op(Tensor::scalar(T::of(total)), &[x], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self, x: &Var<T>) -> Var<T> {
        let n = x.value().numel() as f64;
        let s = self.sum(x);
        self.scale(&s, 1.0 / n)
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        let (sa, sb) = (a.shape(), b.shape());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects matrices");
        assert_eq!(sa[1], sb[0], "matmul inner dims: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, a.value().data(), Trans::No, b.value().data(), Trans::No, T::zero(), out.data_mut());
        let (va, vb) = (a.shared(), b.shared());
        self.op(out, &[a, b], move |g, need| {
            let da = need[0].then(|| {
                let mut d = Tensor::zeros(&[m, k]);
                gemm(m, n, k, g.data(), Trans::No, vb.data(), Trans::Yes, T::zero(), d.data_mut());
                d
            });
            let db = need[1].then(|| {
                let mut d = Tensor::zeros(&[k, n]);
                gemm(k, m, n, va.data(), Trans::Yes, g.data(), Trans::No, T::zero(), d.data_mut());
                d
            });
            vec![da, db]
        })
    }

    /// `x W + b` for `x [N,in]`, `W [in,out]`, `b [out]`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Var<T> {
        let y = self.matmul(x, w);
        self.add_row(&y, b)
    }

    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Var<T> {
        let old = x.shape().to_vec();
        assert_eq!(numel(shape), numel(&old), "reshape {old:?} -> {shape:?}");
        let out = x.value().clone().reshape(shape);
        self.op(out, &[x], move |g, _| vec![Some(g.clone().reshape(&old))])
    }

    /// Concatenates `[N, C_i]` matrices along columns.
    pub fn concat_cols(&self, parts: &[&Var<T>]) -> Var<T> {
        assert!(!parts.is_empty());
        let n = parts[0].shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.shape().len(), 2, "concat_cols expects matrices");
                assert_eq!(p.shape()[0], n, "concat_cols row mismatch");
                p.shape()[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, total]);
        for r in 0..n {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                out.data_mut()[r * total + off..r * total + off + w]
                    .copy_from_slice(&p.value().data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        self.op(out, parts, move |g, need| {
            let mut off = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &nd)| {
                    let start = off;
                    off += w;
                    nd.then(|| {
                        let mut d = Tensor::zeros(&[n, w]);
                        for r in 0..n {
                            d.data_mut()[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + start..r * total + start + w]);
                        }
                        d
                    })
                })
                .collect()
        })
    }

    /// Columns `start..start+len` of a `[N, C]` matrix.
    pub fn slice_cols(&self, x: &Var<T>, start: usize, len: usize) -> Var<T> {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 2, "slice_cols expects a matrix");
        assert!(start + len <= s[1], "slice_cols out of range");
        let (n, c) = (s[0], s[1]);
        let mut out = Tensor::zeros(&[n, len]);
        for r in 0..n {
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&x.value().data()[r * c + start..r * c + start + len]);
        }
        self.op(out, &[x], move |g, _| {
            let mut d = Tensor::zeros(&[n, c]);
            for r in 0..n {
                d.data_mut()[r * c + start..r * c + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(d)]
        })
    }

    /// Stacks per-step `[B, ...]` values into `[B, T, ...]`.
    pub fn stack_steps(&self, steps: &[&Var<T>]) -> Var<T> {
        assert!(!steps.is_empty());
        let inner = steps[0].shape().to_vec();
        let b = inner[0];
        let row: usize = inner[1..].iter().product();
        let t = steps.len();
        let mut shape = vec![b, t];
        shape.extend_from_slice(&inner[1..]);
        let mut out = Tensor::zeros(&shape);
        for (ti, s) in steps.iter().enumerate() {
            assert_eq!(s.shape(), &inner[..], "stack_steps shape mismatch");
            for bi in 0..b {
                out.data_mut()[(bi * t + ti) * row..(bi * t + ti + 1) * row]
                    .copy_from_slice(&s.value().data()[bi * row..(bi + 1) * row]);
            }
        }
        self.op(out, steps, move |g, need| {
            (0..t)
                .map(|ti| {
                    need[ti].then(|| {
                        let mut d = Tensor::zeros(&inner);
                        for bi in 0..b {
                            d.data_mut()[bi * row..(bi + 1) * row]
                                .copy_from_slice(&g.data()[(bi * t + ti) * row..(bi * t + ti + 1) * row]);
                        }
                        d
                    })
                })
                .collect()
        })
    }

    /// Step `t` of a `[B, T, ...]` value.
    pub fn select_step(&self, x: &Var<T>, t: usize) -> Var<T> {
        let s = x.shape().to_vec();
        assert!(s.len() >= 2 && t < s[1], "select_step {t} of {s:?}");
        let (b, steps) = (s[0], s[1]);
        let row: usize = s[2..].iter().product();
        let mut shape = vec![b];
        shape.extend_from_slice(&s[2..]);
        let mut out = Tensor::zeros(&shape);
        for bi in 0..b {
            out.data_mut()[bi * row..(bi + 1) * row]
                .copy_from_slice(&x.value().data()[(bi * steps + t) * row..(bi * steps + t + 1) * row]);
        }
        self.op(out, &[x], move |g, _| {
            let mut d = Tensor::zeros(&s);
            for bi in 0..b {
                d.data_mut()[(bi * steps + t) * row..(bi * steps + t + 1) * row]
                    .copy_from_slice(&g.data()[bi * row..(bi + 1) * row]);
            }
            vec![Some(d)]
        })
    }

    /// Repeats each leading-axis item `times` times: row `b*times + j` is `x[b]`.
    pub fn repeat_rows(&self, x: &Var<T>, times: usize) -> Var<T> {
        let s = x.shape().to_vec();
        let b = s[0];
        let row: usize = s[1..].iter().product();
        let mut shape = s.clone();
        shape[0] = b * times;
        let mut out = Tensor::zeros(&shape);
        for bi in 0..b {
            let src = &x.value().data()[bi * row..(bi + 1) * row];
            for j in 0..times {
                out.data_mut()[(bi * times + j) * row..(bi * times + j + 1) * row].copy_from_slice(src);
            }
        }
        self.op(out, &[x], move |g, _| {
            let mut d = Tensor::zeros(&s);
            for bi in 0..b {
                let acc = &mut d.data_mut()[bi * row..(bi + 1) * row];
                for j in 0..times {
                    for (a, &v) in acc.iter_mut().zip(&g.data()[(bi * times + j) * row..(bi * times + j + 1) * row]) {
                        *a += v;
                    }
                }
            }
            vec![Some(d)]
        })
    }

    /// Same-padded convolution of `x [N,H,W,Cin]` with `kernel [kh,kw,Cin,Cout]`.
    pub fn conv2d(&self, x: &Var<T>, kernel: &Var<T>, bias: Option<&Var<T>>, stride: usize) -> Var<T> {
        let geom = ConvGeom::new(x.shape(), kernel.shape(), stride);
        if let Some(b) = bias {
            assert_eq!(b.shape(), [geom.cout], "conv bias shape");
        }
        let out = kernels::conv2d_forward(
            x.value().data(),
            kernel.value().data(),
            bias.map(|b| b.value().data()),
            &geom,
        );
        let out = Tensor::from_vec(&geom.out_shape(), out);
        let (sx, sk) = (x.shared(), kernel.shared());
        let xshape = x.shape().to_vec();
        let kshape = kernel.shape().to_vec();
        let mut parents = vec![x, kernel];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.op(out, &parents, move |g, need| {
            let grads = kernels::conv2d_backward(
                sx.data(),
                sk.data(),
                g.data(),
                &geom,
                need[0],
                need[1],
                has_bias && need[2],
            );
            let mut v = vec![
                grads.dx.map(|d| Tensor::from_vec(&xshape, d)),
                grads.dkernel.map(|d| Tensor::from_vec(&kshape, d)),
            ];
            if has_bias {
                v.push(grads.dbias.map(|d| Tensor::from_vec(&[geom.cout], d)));
            }
            v
        })
    }

    pub fn upsample2x(&self, x: &Var<T>) -> Var<T> {
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample2x expects NHWC");
        let out = kernels::upsample2x_forward(x.value().data(), s[0], s[1], s[2], s[3]);
        let out = Tensor::from_vec(&[s[0], 2 * s[1], 2 * s[2], s[3]], out);
        self.op(out, &[x], move |g, _| {
            vec![Some(Tensor::from_vec(
                &s,
                kernels::upsample2x_backward(g.data(), s[0], s[1], s[2], s[3]),
            ))]
        })
    }

    /// Batch normalisation with statistics pooled over every axis but the last.
    pub fn batch_norm_train(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> BatchNormOutput<T> {
        let c = last_dim(x.shape());
        assert_eq!(gamma.shape(), [c], "batch_norm gamma shape");
        assert_eq!(beta.shape(), [c], "batch_norm beta shape");
        let (mean, var) = kernels::channel_moments(x.value().data(), c);
        let (y, xhat) = kernels::normalize(
            x.value().data(),
            c,
            &mean,
            &var,
            gamma.value().data(),
            beta.value().data(),
            eps,
        );
        let shape = x.shape().to_vec();
        let sg = gamma.shared();
        let var_saved = var.clone();
        let y = self.op(Tensor::from_vec(&shape, y), &[x, gamma, beta], move |g, need| {
            let (dx, dgamma, dbeta) =
                kernels::normalize_train_backward(g.data(), &xhat, sg.data(), &var_saved, eps, c);
            vec![
                need[0].then(|| Tensor::from_vec(&shape, dx)),
                need[1].then(|| Tensor::from_vec(&[c], dgamma)),
                need[2].then(|| Tensor::from_vec(&[c], dbeta)),
            ]
        });
        BatchNormOutput { y, mean, var }
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var<T> {
        let c = last_dim(x.shape());
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let (y, xhat) = kernels::normalize(
            x.value().data(),
            c,
            mean,
            var,
            gamma.value().data(),
            beta.value().data(),
            eps,
        );
        let shape = x.shape().to_vec();
        let sg = gamma.shared();
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.op(Tensor::from_vec(&shape, y), &[x, gamma, beta], move |g, need| {
            let mut dx = g.clone();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ((dr, hr), gr) in dx.data_mut().chunks_mut(c).zip(xhat.chunks(c)).zip(g.data().chunks(c)) {
                for j in 0..c {
                    dbeta[j] += gr[j];
                    dgamma[j] += gr[j] * hr[j];
                    dr[j] = T::of(gr[j].f64() * sg.data()[j].f64() * inv[j]);
                }
            }
            vec![
                need[0].then_some(dx),
                need[1].then(|| Tensor::from_vec(&[c], dgamma)),
                need[2].then(|| Tensor::from_vec(&[c], dbeta)),
            ]
        })
    }
}
