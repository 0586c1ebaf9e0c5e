use std::sync::Arc;

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Identifier of a model parameter, stable for the lifetime of the model.
pub type ParamId = usize;

/// Batchnorm behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    /// Use stored running statistics.
    #[default]
    Eval,
    /// Use batch statistics and emit running-stat updates.
    Train,
}

/// A value produced on a [`Tape`]. Cheap to clone.
#[derive(Clone, Debug)]
pub struct Var<T: Scalar = f32> {
    pub(crate) id: Option<usize>,
    pub(crate) value: Arc<Tensor<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }
}

pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    len: usize,
    param: Option<ParamId>,
}

/// Running-statistics update emitted by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T: Scalar> {
    pub mean_param: ParamId,
    pub var_param: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

/// Append-only record of a forward pass.
///
/// A non-recording tape evaluates ops without keeping anything alive, which is
/// what inference uses.
pub struct Tape<T: Scalar = f32> {
    mode: Mode,
    recording: bool,
    nodes: Vec<Node<T>>,
    consumed: bool,
    pub(crate) bn_updates: Vec<BnUpdate<T>>,
    kink_margin: f64,
}

impl<T: Scalar> Tape<T> {
    /// Recording tape for gradient computation.
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            recording: true,
            nodes: Vec::new(),
            consumed: false,
            bn_updates: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    /// Non-recording tape in eval mode.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new(Mode::Eval)
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance from zero of any recorded leaky-ReLU input. Finite
    /// differences are only meaningful when this exceeds the step size.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub(crate) fn note_kinks(&mut self, values: &[T]) {
        if self.recording {
            let m = values.iter().fold(f64::INFINITY, |m, v| m.min(v.f64().abs()));
            self.kink_margin = self.kink_margin.min(m);
        }
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var<T> {
        self.leaf_shared(Arc::new(value), None)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Arc::new(value),
        }
    }

    pub(crate) fn leaf_shared(&mut self, value: Arc<Tensor<T>>, param: Option<ParamId>) -> Var<T> {
        if !self.recording {
            return Var { id: None, value };
        }
        self.nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
            len: value.len(),
            param,
        });
        Var {
            id: Some(self.nodes.len() - 1),
            value,
        }
    }

    pub(crate) fn param_leaf(&mut self, id: ParamId, value: Arc<Tensor<T>>, trainable: bool) -> Var<T> {
        if trainable {
            self.leaf_shared(value, Some(id))
        } else {
            Var { id: None, value }
        }
    }

    /// Record an op. `backward` maps the output gradient and a per-input
    /// "needs gradient" mask to per-input gradients.
    pub(crate) fn record(
        &mut self,
        op: &'static str,
        inputs: &[&Var<T>],
        out: Tensor<T>,
        backward: impl FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Result<Var<T>> {
        if !out.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let value = Arc::new(out);
        if !self.recording || inputs.iter().all(|v| v.id.is_none()) {
            return Ok(Var { id: None, value });
        }
        self.nodes.push(Node {
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: Some(Box::new(backward)),
            len: value.len(),
            param: None,
        });
        Ok(Var {
            id: Some(self.nodes.len() - 1),
            value,
        })
    }

    /// Register an externally computed op (e.g. a loss) with its own backward.
    pub fn custom(
        &mut self,
        op: &'static str,
        inputs: &[&Var<T>],
        out: Tensor<T>,
        backward: impl FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Result<Var<T>> {
        self.record(op, inputs, out, backward)
    }

    /// Reverse pass from a scalar output. Consumes the recorded closures; a
    /// second call is an error.
    pub fn backward(&mut self, output: &Var<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if output.shape() != Shape::scalar() {
            return Err(Error::NonScalar(output.shape()));
        }
        let root = output.id.ok_or(Error::NotRecorded)?;
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let node = &mut self.nodes[i];
            let Some(backward) = node.backward.take() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &needs);
            let inputs = node.inputs.clone();
            for (slot, ig) in inputs.into_iter().zip(input_grads) {
                let (Some(j), Some(ig)) = (slot, ig) else {
                    continue;
                };
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&ig) {
                            *a = *a + *b;
                        }
                    }
                    empty => *empty = Some(ig),
                }
            }
        }
        let mut params: Vec<(ParamId, Vec<T>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(pid) = node.param else { continue };
            let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.len]);
            match params.iter_mut().find(|(p, _)| *p == pid) {
                Some((_, acc)) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a = *a + *b;
                    }
                }
                None => params.push((pid, g)),
            }
        }
        // Keep plain leaves only.
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.inputs.is_empty() {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Tape::backward`]: gradients of every differentiable leaf.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a non-parameter leaf; `None` if it does not require grad.
    pub fn wrt(&self, v: &Var<T>) -> Option<&[T]> {
        v.id.and_then(|i| self.grads.get(i)).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter, summed over every use on the tape.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// `(param id, gradient)` in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}
