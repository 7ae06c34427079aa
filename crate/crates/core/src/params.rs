//! Named parameter storage and the per-pass binding of parameters to graph
//! variables.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use fitvid_tensor::{Element, Gradients, Graph, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Learnable tensors plus non-learnable `f64` buffers (running statistics),
/// both addressed by insertion-ordered ids and unique names.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    buffer_names: Vec<String>,
    buffers: Vec<Vec<f64>>,
    lookup: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Vec<f64>) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.values[id.0].clone()
    }

    /// Replaces a parameter; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Mutable access, cloning the tensor if a graph still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn buffer_len(&self) -> usize {
        self.buffers.len()
    }

    pub fn buffer_name(&self, id: BufferId) -> &str {
        &self.buffer_names[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &[f64] {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Vec<f64> {
        &mut self.buffers[id.0]
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> {
        (0..self.buffers.len()).map(BufferId)
    }

    /// Same layout in another precision.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            buffer_names: self.buffer_names.clone(),
            buffers: self.buffers.clone(),
            lookup: self.lookup.clone(),
        }
    }

    /// Folds one pass's batch statistics into the running buffers.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStat], momentum: f64) {
        for s in stats {
            for (r, &b) in self.buffers[s.mean.0].iter_mut().zip(&s.batch_mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, &b) in self.buffers[s.var.0].iter_mut().zip(&s.batch_var) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch statistics observed by one normalisation layer during a pass.
#[derive(Debug, Clone)]
pub struct BatchStat {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// One forward pass: a graph, the parameters it reads, and the
/// normalisation mode. Parameters are bound to graph leaves on first use.
pub struct Forward<'a, T: Element> {
    pub graph: &'a Graph<T>,
    pub params: &'a ParamStore<T>,
    pub mode: NormMode,
    bound: RefCell<Vec<Option<Var<T>>>>,
    stats: RefCell<Vec<BatchStat>>,
}

impl<'a, T: Element> Forward<'a, T> {
    pub fn new(graph: &'a Graph<T>, params: &'a ParamStore<T>, mode: NormMode) -> Self {
        Self {
            graph,
            params,
            mode,
            bound: RefCell::new(vec![None; params.len()]),
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> Var<T> {
        let mut bound = self.bound.borrow_mut();
        bound[id.0]
            .get_or_insert_with(|| self.graph.leaf(self.params.shared(id)))
            .clone()
    }

    pub(crate) fn record_stat(&self, stat: BatchStat) {
        self.stats.borrow_mut().push(stat);
    }

    pub fn take_stats(&self) -> Vec<BatchStat> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    /// Gradient for every parameter, zeros for those the pass never touched.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        let bound = self.bound.borrow();
        self.params
            .ids()
            .map(|id| match &bound[id.0] {
                Some(v) => grads.take_or_zeros(v),
                None => Tensor::zeros(self.params.get(id).shape()),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_is_shared_within_a_pass() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let g = Graph::new();
        let f = Forward::new(&g, &store, NormMode::Train);
        let a = f.param(w);
        let b = f.param(w);
        let y = g.sum(&g.mul(&a, &b));
        let mut grads = g.backward(&y).unwrap();
        let pg = f.param_grads(&mut grads);
        assert_eq!(pg[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn running_stats_use_momentum() {
        let mut store = ParamStore::<f32>::new();
        let m = store.add_buffer("m", vec![0.0]);
        let v = store.add_buffer("v", vec![1.0]);
        let stat = BatchStat {
            mean: m,
            var: v,
            batch_mean: vec![1.0],
            batch_var: vec![3.0],
        };
        store.apply_batch_stats(&[stat], 0.99);
        assert!((store.buffer(m)[0] - 0.01).abs() < 1e-15);
        assert!((store.buffer(v)[0] - 1.02).abs() < 1e-15);
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::zeros(&[2, 2]));
        assert!(store.set(w, Tensor::zeros(&[4])).is_err());
        assert_eq!(store.find("w"), Some(w));
    }
}
