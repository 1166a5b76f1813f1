//! Reverse-mode gradient tape.
//!
//! A `Tape` records every differentiable operation applied through it,
//! in order; `backward` replays the records in reverse and accumulates
//! vector-Jacobian products into per-variable gradient buffers.
//!
//! Tensors entering the tape are immutable, so a node's backward
//! closure can capture handles to the exact forward values it needs.
//! An inference tape (`Tape::inference`) computes values only and
//! records nothing.

use std::collections::BTreeMap;

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub(crate) usize);

type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<T>)>;

struct Node<T: Scalar> {
    out: VarId,
    back: BackwardFn<T>,
}

/// Gradient accumulation buffers indexed by `VarId`, passed to backward
/// closures during replay.
pub struct GradSink<T: Scalar> {
    bufs: Vec<Option<Vec<T>>>,
    numels: Vec<usize>,
}

impl<T: Scalar> GradSink<T> {
    /// Mutable gradient buffer for `id`, created zero-filled on first use.
    pub fn buf(&mut self, id: VarId) -> &mut [T] {
        let n = self.numels[id.0];
        self.bufs[id.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Elementwise add into the buffer for `id`.
    pub fn accumulate(&mut self, id: VarId, grad: impl Iterator<Item = T>) {
        for (slot, g) in self.buf(id).iter_mut().zip(grad) {
            *slot = *slot + g;
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T: Scalar> {
    bufs: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `id`, or `None` if `id` did not
    /// participate in the forward pass.
    pub fn get(&self, id: VarId) -> Option<Tensor<T>> {
        self.bufs[id.0]
            .as_ref()
            .map(|b| Tensor::from_vec(self.shapes[id.0].clone(), b.clone()).expect("grad shape"))
    }

    /// Like `get`, but non-participating variables yield exact zeros.
    pub fn get_or_zeros(&self, id: VarId) -> Tensor<T> {
        self.get(id)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[id.0].clone()))
    }
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    recording: bool,
    named: BTreeMap<String, VarId>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
            recording: true,
            named: BTreeMap::new(),
        }
    }

    /// A tape that computes values but records no backward nodes.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Introduce a tensor as a leaf variable.
    pub fn leaf(&mut self, t: Tensor<T>) -> VarId {
        let id = VarId(self.values.len());
        self.values.push(t);
        id
    }

    /// Leaf registered under a name (model parameters).
    pub fn named_leaf(&mut self, name: impl Into<String>, t: Tensor<T>) -> VarId {
        let id = self.leaf(t);
        self.named.insert(name.into(), id);
        id
    }

    pub fn named_id(&self, name: &str) -> Option<VarId> {
        self.named.get(name).copied()
    }

    pub fn named_ids(&self) -> impl Iterator<Item = (&str, VarId)> {
        self.named.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.values[id.0].shape()
    }

    /// Record an output value together with its backward closure. The
    /// closure receives the upstream gradient of the output (flat) and
    /// accumulates into the inputs' buffers.
    pub fn emit(
        &mut self,
        value: Tensor<T>,
        back: impl Fn(&[T], &mut GradSink<T>) + 'static,
    ) -> VarId {
        let id = VarId(self.values.len());
        self.values.push(value);
        if self.recording {
            self.nodes.push(Node {
                out: id,
                back: Box::new(back),
            });
        }
        id
    }

    /// Replay all nodes in reverse from a scalar loss.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<T>> {
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                reason: format!(
                    "loss must be a scalar, got shape {:?}",
                    self.values[loss.0].shape()
                ),
            });
        }
        let n = self.values.len();
        let mut sink = GradSink {
            bufs: vec![None; n],
            numels: self.values.iter().map(|v| v.numel()).collect(),
        };
        sink.bufs[loss.0] = Some(vec![T::one()]);
        for node in self.nodes.iter().rev() {
            // Take the output grad out of the sink so the closure can
            // borrow the sink mutably while reading it.
            let Some(gout) = sink.bufs[node.out.0].take() else {
                continue;
            };
            (node.back)(&gout, &mut sink);
            sink.bufs[node.out.0] = Some(gout);
        }
        Ok(Gradients {
            bufs: sink.bufs,
            shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_without_nodes_has_no_grad() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(3.0));
        let b = tape.leaf(Tensor::scalar(4.0));
        let loss = tape.mul(a, a).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get_or_zeros(b).item(), 0.0);
        assert_eq!(grads.get(a).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::<f32>::inference();
        let a = tape.leaf(Tensor::scalar(2.0));
        let _ = tape.mul(a, a).unwrap();
        assert_eq!(tape.node_count(), 0);
    }

    #[test]
    fn fanout_accumulates() {
        // y = a*a + a  =>  dy/da = 2a + 1
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(a, a).unwrap();
        let y = tape.add(sq, a).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 7.0);
    }
}
