use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, NdTensor, Var};

/// Role of a stored tensor. Running statistics are state, not parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn suffix(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: NdTensor<T>,
}

impl<T> ParamEntry<T> {
    /// Parameter group: the first dotted component of the name
    /// (`unet2d`, `unet3d`, `combiner`).
    pub fn group(&self) -> &str {
        self.name.split('.').next().unwrap_or("")
    }

    /// Name of the owning layer (the name without its role suffix).
    pub fn layer(&self) -> &str {
        self.name.rsplit_once('.').map_or(self.name.as_str(), |(l, _)| l)
    }
}

/// Named tensors of one model, in construction order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, layer: &str, kind: ParamKind, value: NdTensor<T>) -> ParamId {
        let name = format!("{layer}.{}", kind.suffix());
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &NdTensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NdTensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Copy every entry of `other` whose name exists here. Returns how many
    /// entries were copied; shapes must agree.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for src in &other.entries {
            if let Some(id) = self.find(&src.name) {
                let dst = &mut self.entries[id.0];
                if dst.value.shape() != src.value.shape() || dst.kind != src.kind {
                    return Err(Error::shape(
                        "load",
                        format!(
                            "{}: stored {:?} vs model {:?}",
                            src.name,
                            src.value.shape(),
                            dst.value.shape()
                        ),
                    ));
                }
                dst.value = src.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Entries of one group, as a standalone store.
    pub fn subset(&self, group: &str) -> ParamStore<T> {
        ParamStore {
            entries: self.entries.iter().filter(|e| e.group() == group).cloned().collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }

    pub(crate) fn from_entries(entries: Vec<ParamEntry<T>>) -> Result<Self> {
        let mut store = Self::new();
        for e in entries {
            if store.find(&e.name).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate parameter {}", e.name)));
            }
            store.entries.push(e);
        }
        Ok(store)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients of the trainable parameters touched by one forward pass.
pub type Gradients<T> = Vec<(ParamId, NdTensor<T>)>;

/// One forward pass: a fresh graph plus access to the parameter store.
///
/// Parameters of frozen groups enter the graph untracked and their
/// batch-norm layers use running statistics.
pub struct Forward<'s, T: Element> {
    pub graph: Graph<T>,
    store: &'s mut ParamStore<T>,
    mode: Mode,
    frozen: Vec<String>,
    bound: Vec<(ParamId, Var)>,
}

impl<'s, T: Element> Forward<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            frozen: Vec::new(),
            bound: Vec::new(),
        }
    }

    pub fn freeze(mut self, group: &str) -> Self {
        self.frozen.push(group.to_string());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Whether `id` is being trained in this pass.
    pub fn training(&self, id: ParamId) -> bool {
        self.mode == Mode::Train && !self.frozen.iter().any(|g| g == self.store.entry(id).group())
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let tracked = self.training(id) && self.store.entry(id).kind.trainable();
        let v = self.graph.leaf(self.store.value(id).clone(), tracked)?;
        if tracked {
            self.bound.push((id, v));
        }
        Ok(v)
    }

    pub fn input(&mut self, value: NdTensor<T>) -> Result<Var> {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> Result<&NdTensor<T>> {
        self.graph.value(v)
    }

    pub(crate) fn running_stat(&self, id: ParamId) -> &[T] {
        self.store.value(id).data()
    }

    pub(crate) fn update_running_stat(&mut self, id: ParamId, observed: &[T], momentum: T) {
        let v = self.store.value_mut(id).data_mut();
        for (r, &o) in v.iter_mut().zip(observed) {
            *r = (T::one() - momentum) * *r + momentum * o;
        }
    }

    /// Run backward from `loss` and collect parameter gradients. Parameters
    /// bound more than once have their gradients summed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.graph.backward(loss)?;
        let mut grads: Gradients<T> = Vec::new();
        for &(id, var) in &self.bound {
            let Some(g) = self.graph.take_grad(var) else {
                continue;
            };
            match grads.iter_mut().find(|(i, _)| *i == id) {
                Some((_, acc)) => acc.add_assign(&g),
                None => grads.push((id, g)),
            }
        }
        grads.sort_by_key(|(id, _)| *id);
        Ok(grads)
    }
}
