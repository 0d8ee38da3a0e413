//! Named parameter storage and SGD with momentum.
//!
//! Every learnable tensor of a model lives in a [`ParamStore`] under a unique
//! dotted name (`"backbone.stem.weight"`, ...). The insertion order is stable,
//! which is what the checkpoint format serializes.

use std::collections::HashMap;

use super::{Element, Tensor, TensorError};

/// Index into a [`ParamStore`]. Only valid for the store that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

pub struct ParamEntry<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    /// Accumulated gradient; `None` until a backward pass deposits one.
    pub grad: Option<Tensor<T>>,
    /// Frozen parameters are staged as constants and skipped by the optimizer.
    pub trainable: bool,
}

pub struct ParamStore<T: Element = f32> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId, TensorError> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateParam { name: name.to_string() });
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: None,
            trainable: true,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter {} shape change",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].grad.as_ref()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<T>) {
        self.entries[id.0].grad = Some(grad);
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut() {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, contribution: &Tensor<T>) {
        let entry = &mut self.entries[id.0];
        if !entry.trainable {
            return;
        }
        match entry.grad.as_mut() {
            Some(g) => {
                for (gi, ci) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *gi += *ci;
                }
            }
            None => entry.grad = Some(contribution.clone()),
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            e.grad = None;
        }
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Sum of parameter element counts.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// SGD with momentum: `v <- momentum * v + grad; p <- p - lr * v`.
/// Velocity buffers exist only when `momentum > 0`.
pub struct SgdMomentum<T: Element = f32> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Element> SgdMomentum<T> {
    pub fn new(learning_rate: T, momentum: T) -> Self {
        SgdMomentum { learning_rate, momentum, velocity: Vec::new() }
    }

    /// One update over every trainable parameter. Each must hold a gradient
    /// (a zero gradient is fine, a missing one is an error). Gradients are
    /// cleared afterwards.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<(), TensorError> {
        let use_momentum = self.momentum > T::ZERO;
        if use_momentum && self.velocity.len() < store.entries.len() {
            self.velocity.resize_with(store.entries.len(), || None);
        }
        for (i, entry) in store.entries.iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let grad = entry
                .grad
                .take()
                .ok_or_else(|| TensorError::MissingGradient { name: entry.name.clone() })?;
            if use_momentum {
                let vel = self.velocity[i]
                    .get_or_insert_with(|| Tensor::zeros(entry.value.shape()));
                for (v, g) in vel.data_mut().iter_mut().zip(grad.data()) {
                    *v = self.momentum * *v + *g;
                }
                for (p, v) in entry.value.data_mut().iter_mut().zip(vel.data()) {
                    *p -= self.learning_rate * *v;
                }
            } else {
                for (p, g) in entry.value.data_mut().iter_mut().zip(grad.data()) {
                    *p -= self.learning_rate * *g;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_arithmetic() {
        let mut store = ParamStore::<f32>::new();
        let p = store.insert("p", Tensor::scalar(1.0)).unwrap();
        store.set_grad(p, Tensor::scalar(2.0));
        let mut opt = SgdMomentum::new(0.1, 0.0);
        opt.step(&mut store).unwrap();
        assert!((store.value(p).item() - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut store = ParamStore::<f32>::new();
        let p = store.insert("p", Tensor::scalar(5.0)).unwrap();
        store.set_grad(p, Tensor::scalar(0.0));
        let mut opt = SgdMomentum::new(0.1, 0.0);
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(p).item(), 5.0);
    }

    #[test]
    fn momentum_recurrence() {
        // two steps with momentum 0.9, grad 1, lr 1, from 0:
        // v = 1, p = -1; v = 1.9, p = -2.9
        let mut store = ParamStore::<f32>::new();
        let p = store.insert("p", Tensor::scalar(0.0)).unwrap();
        let mut opt = SgdMomentum::new(1.0, 0.9);
        store.set_grad(p, Tensor::scalar(1.0));
        opt.step(&mut store).unwrap();
        store.set_grad(p, Tensor::scalar(1.0));
        opt.step(&mut store).unwrap();
        assert!((store.value(p).item() + 2.9).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("p", Tensor::scalar(1.0)).unwrap();
        let mut opt = SgdMomentum::<f32>::new(0.1, 0.9);
        assert!(matches!(
            opt.step(&mut store),
            Err(TensorError::MissingGradient { .. })
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::scalar(0.0)).unwrap();
        assert!(matches!(
            store.insert("w", Tensor::scalar(1.0)),
            Err(TensorError::DuplicateParam { .. })
        ));
    }

    #[test]
    fn frozen_params_skipped() {
        let mut store = ParamStore::<f32>::new();
        let p = store.insert("head.w", Tensor::scalar(1.0)).unwrap();
        store.set_trainable_by_prefix("head.", false);
        let mut opt = SgdMomentum::new(0.5, 0.0);
        // no gradient on the frozen param: step must still succeed
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(p).item(), 1.0);
    }
}
