//! Named learnable leaves and persistent non-learnable buffers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

/// Index of a leaf inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Index of a buffer inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct ParamLeaf {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl ParamLeaf {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        ParamLeaf {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// The parameter set of one model.
///
/// Names are hierarchical (`down1/conv/kernel`) and unique within the store.
/// Buffers hold state that is checkpointed but never optimized, such as
/// spectral-norm singular vectors.
#[derive(Debug)]
pub struct ParamStore {
    tag: u64,
    leaves: Vec<ParamLeaf>,
    buffers: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// A clone is an independent store: it gets a fresh tag so gradients
    /// recorded against the original are never routed into it.
    fn clone(&self) -> Self {
        ParamStore {
            tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed),
            leaves: self.leaves.clone(),
            buffers: self.buffers.clone(),
            index: self.index.clone(),
            buffer_index: self.buffer_index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed),
            leaves: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
            buffer_index: HashMap::new(),
        }
    }

    pub(crate) fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = self.leaves.len();
        self.index.insert(name.clone(), id);
        self.leaves.push(ParamLeaf::new(name, value));
        Ok(ParamId(id))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<BufferId> {
        let name = name.into();
        if self.buffer_index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate buffer name {name}")));
        }
        let id = self.buffers.len();
        self.buffer_index.insert(name.clone(), id);
        self.buffers.push((name, value));
        Ok(BufferId(id))
    }

    pub fn leaf(&self, id: ParamId) -> &ParamLeaf {
        &self.leaves[id.0]
    }

    pub fn leaf_mut(&mut self, id: ParamId) -> &mut ParamLeaf {
        &mut self.leaves[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.leaves[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.leaves[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.leaves[id.0].grad
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn leaves(&self) -> &[ParamLeaf] {
        &self.leaves
    }

    pub fn leaves_mut(&mut self) -> &mut [ParamLeaf] {
        &mut self.leaves
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.leaves.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.leaves.iter().map(|l| l.value.numel()).sum()
    }

    /// `(name, shape)` for every leaf, in registration order.
    pub fn census(&self) -> Vec<(String, Vec<usize>)> {
        self.leaves
            .iter()
            .map(|l| (l.name.clone(), l.value.shape().to_vec()))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for leaf in &mut self.leaves {
            leaf.grad.fill(0.0);
        }
    }

    /// Overwrites a leaf's value by name, checking the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        let leaf = &mut self.leaves[id.0];
        if leaf.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{name}: {:?} vs {:?}", leaf.value.shape(), value.shape()),
            ));
        }
        leaf.value = value;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = *self
            .buffer_index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown buffer {name}")))?;
        let slot = &mut self.buffers[id].1;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_buffer",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.leaves.iter().all(|l| l.value.all_finite())
    }
}
