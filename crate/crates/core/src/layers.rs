//! Parameterised building blocks. Each layer only stores ids into a
//! [`ParamStore`]; forward passes read values through a [`Forward`].

use fitvid_tensor::{Element, Tensor, Var};
use rand::Rng;

use crate::config::{BN_EPS, SE_REDUCTION};
use crate::params::{BatchStat, BufferId, Forward, NormMode, ParamId, ParamStore};

/// Parameter factory used while building a model.
pub struct Init<'a, T: Element, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<'a, T: Element, R: Rng> Init<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self { store, rng }
    }

    /// Fan-in scaled uniform weights, `U(-sqrt(3/fan_in), sqrt(3/fan_in))`.
    pub fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (3.0 / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)));
        self.store.add(name, t)
    }

    pub fn filled(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::of(value)))
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv {
    pub fn new<T: Element, R: Rng>(
        init: &mut Init<T, R>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        Self {
            kernel: init.uniform(format!("{name}.kernel"), &[k, k, cin, cout], k * k * cin),
            bias: init.filled(format!("{name}.bias"), &[cout], 0.0),
            stride,
        }
    }

    pub fn forward<T: Element>(&self, f: &Forward<T>, x: &Var<T>) -> Var<T> {
        let (k, b) = (f.param(self.kernel), f.param(self.bias));
        f.graph.conv2d(x, &k, Some(&b), self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Element, R: Rng>(init: &mut Init<T, R>, name: &str, fan_in: usize, out: usize) -> Self {
        Self {
            weight: init.uniform(format!("{name}.weight"), &[fan_in, out], fan_in),
            bias: init.filled(format!("{name}.bias"), &[out], 0.0),
        }
    }

    pub fn forward<T: Element>(&self, f: &Forward<T>, x: &Var<T>) -> Var<T> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.graph.linear(x, &w, &b)
    }
}

/// Batch normalisation over every axis but the channel axis. For rank-5
/// video activations that pools batch, time and space together.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Element, R: Rng>(init: &mut Init<T, R>, name: &str, c: usize) -> Self {
        Self {
            gamma: init.filled(format!("{name}.gamma"), &[c], 1.0),
            beta: init.filled(format!("{name}.beta"), &[c], 0.0),
            running_mean: init.store.add_buffer(format!("{name}.running_mean"), vec![0.0; c]),
            running_var: init.store.add_buffer(format!("{name}.running_var"), vec![1.0; c]),
        }
    }

    pub fn forward<T: Element>(&self, f: &Forward<T>, x: &Var<T>) -> Var<T> {
        let (gamma, beta) = (f.param(self.gamma), f.param(self.beta));
        match f.mode {
            NormMode::Train => {
                let out = f.graph.batch_norm_train(x, &gamma, &beta, BN_EPS);
                f.record_stat(BatchStat {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: out.mean,
                    batch_var: out.var,
                });
                out.y
            }
            NormMode::Eval => f.graph.batch_norm_eval(
                x,
                &gamma,
                &beta,
                f.params.buffer(self.running_mean),
                f.params.buffer(self.running_var),
                BN_EPS,
            ),
        }
    }
}

/// Channel gating: global average pool, bottleneck MLP, sigmoid gate.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub reduce: Dense,
    pub expand: Dense,
}

impl SqueezeExcite {
    pub fn new<T: Element, R: Rng>(init: &mut Init<T, R>, name: &str, c: usize) -> Self {
        let r = (c / SE_REDUCTION).max(1);
        Self {
            reduce: Dense::new(init, &format!("{name}.reduce"), c, r),
            expand: Dense::new(init, &format!("{name}.expand"), r, c),
        }
    }

    /// The per-channel gates in (0, 1), shape `[N, C]`.
    pub fn gates<T: Element>(&self, f: &Forward<T>, x: &Var<T>) -> Var<T> {
        let g = f.graph;
        let pooled = g.spatial_mean(x);
        let hidden = g.relu(&self.reduce.forward(f, &pooled));
        g.sigmoid(&self.expand.forward(f, &hidden))
    }

    pub fn forward<T: Element>(&self, f: &Forward<T>, x: &Var<T>) -> Var<T> {
        let gates = self.gates(f, x);
        f.graph.channel_gate(x, &gates)
    }
}

/// Hidden and cell state of one LSTM layer, each `[B, H]`.
#[derive(Debug, Clone)]
pub struct LstmState<T: Element> {
    pub h: Var<T>,
    pub c: Var<T>,
}

/// Single LSTM layer; gates `[i, f, g, o] = [x, h] W + b`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Element, R: Rng>(init: &mut Init<T, R>, name: &str, input: usize, hidden: usize) -> Self {
        let weight = init.uniform(format!("{name}.weight"), &[input + hidden, 4 * hidden], input + hidden);
        let mut b = vec![T::zero(); 4 * hidden];
        for v in &mut b[hidden..2 * hidden] {
            *v = T::one();
        }
        let bias = init.store.add(format!("{name}.bias"), Tensor::from_vec(&[4 * hidden], b));
        Self {
            weight,
            bias,
            input,
            hidden,
        }
    }

    pub fn step<T: Element>(&self, f: &Forward<T>, x: &Var<T>, state: &LstmState<T>) -> LstmState<T> {
        let g = f.graph;
        let n = self.hidden;
        let joined = g.concat_cols(&[x, &state.h]);
        let gates = g.linear(&joined, &f.param(self.weight), &f.param(self.bias));
        let i = g.sigmoid(&g.slice_cols(&gates, 0, n));
        let fg = g.sigmoid(&g.slice_cols(&gates, n, n));
        let cand = g.tanh(&g.slice_cols(&gates, 2 * n, n));
        let o = g.sigmoid(&g.slice_cols(&gates, 3 * n, n));
        let c = g.add(&g.mul(&fg, &state.c), &g.mul(&i, &cand));
        let h = g.mul(&o, &g.tanh(&c));
        LstmState { h, c }
    }
}
