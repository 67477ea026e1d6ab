//! Named parameter storage and the per-forward binding of parameters into a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// A learnable tensor with a unique dotted name such as `backbone.stage2.block1.bn2.gamma`.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Frozen parameters enter the graph as constants and are never updated.
    pub frozen: bool,
}

/// Parameters plus non-learnable buffers (running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    names: HashMap<String, usize>,
    buffer_names: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), names: HashMap::new(), buffer_names: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(config_err(format!("duplicate parameter name `{name}`")));
        }
        self.names.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, tensor, frozen: false });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        if self.buffer_names.contains_key(&name) {
            return Err(config_err(format!("duplicate buffer name `{name}`")));
        }
        self.buffer_names.insert(name.clone(), self.buffers.len());
        self.buffers.push((name, tensor));
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).map(|&i| ParamId(i))
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffer_names.get(name).map(|&i| BufferId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Set the frozen flag of every parameter from a predicate on its name.
    pub fn set_frozen_by(&mut self, mut frozen: impl FnMut(&str) -> bool) {
        for p in &mut self.params {
            p.frozen = frozen(&p.name);
        }
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.name.as_str()).collect()
    }

    /// Exact parameter counts: total, trainable, and per top-level-name component.
    pub fn count(&self, component: impl Fn(&str) -> String) -> ParamCounts {
        let mut counts = ParamCounts::default();
        for p in &self.params {
            let n = p.tensor.numel() as u64;
            counts.total += n;
            if !p.frozen {
                counts.trainable += n;
            }
            *counts.per_component.entry(component(&p.name)).or_default() += n;
        }
        counts
    }

    /// Copy every parameter and buffer whose name exists in `other` with the same shape.
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = other.id(&p.name).map(|id| other.get(id)) {
                if src.tensor.shape() == p.tensor.shape() {
                    p.tensor = src.tensor.clone();
                    copied += 1;
                }
            }
        }
        for (name, t) in &mut self.buffers {
            if let Some(src) = other.buffer_id(name).map(|id| other.buffer(id)) {
                if src.shape() == t.shape() {
                    *t = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: u64,
    pub trainable: u64,
    pub per_component: BTreeMap<String, u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated afterwards.
    Train,
    /// Running statistics.
    Infer,
}

/// Batch moments observed by one normalization layer in train mode.
#[derive(Clone, Debug)]
pub struct ObservedMoments<T> {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
}

/// One forward pass: a fresh graph plus lazily bound parameters.
pub struct Forward<'a, T> {
    pub graph: Graph<T>,
    pub mode: Mode,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    observed: Vec<ObservedMoments<T>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self { graph: Graph::new(), mode, store, bound: vec![None; store.len()], observed: Vec::new() }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph variable for a parameter; trainable parameters receive gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if p.frozen { self.graph.constant(p.tensor.clone()) } else { self.graph.param(p.tensor.clone()) };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        self.store.buffer(id)
    }

    /// Graph variable of `id` if this pass has bound it.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn observe(&mut self, moments: ObservedMoments<T>) {
        self.observed.push(moments);
    }

    pub fn observed(&self) -> &[ObservedMoments<T>] {
        &self.observed
    }

    /// Backward from `loss`, returning gradients of the trainable parameters used in this pass.
    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads<T>> {
        let grads = self.graph.backward(loss)?;
        Ok(ParamGrads::collect(self.store, &self.bound, &grads))
    }

    pub fn into_observed(self) -> Vec<ObservedMoments<T>> {
        self.observed
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads<T> {
    pub entries: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> ParamGrads<T> {
    fn collect(store: &ParamStore<T>, bound: &[Option<Var>], grads: &Gradients<T>) -> Self {
        let entries = bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if store.params[i].frozen {
                    return None;
                }
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(store.params[i].tensor.shape()));
                Some((ParamId(i), g))
            })
            .collect();
        Self { entries }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

/// Dense layer `x·W + b` with uniform fan-in initialization `±1/sqrt(fan_in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[inputs, outputs], bound, rng))?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::uniform(&[outputs], bound, rng))?) } else { None };
        Ok(Self { weight, bias, inputs, outputs })
    }

    pub fn parameter_count(&self) -> usize {
        self.inputs * self.outputs + if self.bias.is_some() { self.outputs } else { 0 }
    }

    /// Graph handles `(W, b)` for this pass.
    pub fn bind<T: Scalar>(&self, fwd: &mut Forward<'_, T>) -> (Var, Option<Var>) {
        (fwd.param(self.weight), self.bias.map(|b| fwd.param(b)))
    }

    pub fn apply<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = self.bind(fwd);
        fwd.graph.affine(x, w, b)
    }
}

/// Fold observed batch moments into the running statistics by exponential moving average.
pub fn commit_running_stats<T: Scalar>(store: &mut ParamStore<T>, observed: &[ObservedMoments<T>]) {
    for obs in observed {
        let m = T::lit(obs.momentum);
        let keep = T::one() - m;
        for (buf, batch) in [(obs.running_mean, &obs.mean), (obs.running_var, &obs.var)] {
            let running = store.buffer_mut(buf);
            for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
                *r = keep * *r + m * b;
            }
        }
    }
}
