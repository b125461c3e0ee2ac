//! Tensor arena and reverse-mode sweep.

use super::alloc::TrackedVec;
use super::{numel, AutonnError, Element, Result};

/// Handle to a tensor stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) u32);

impl TensorId {
    pub(crate) fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Backward context recorded by each operation.
///
/// Saved context is kept to per-channel vectors where the parent data in the
/// arena suffices to reconstruct the rest; only max-pool keeps a per-element
/// map (its argmax selection is not recoverable from values alone once ties
/// are broken).
pub(crate) enum Step<E: Element> {
    /// parents: [input, weight, bias]
    Conv2d { stride: usize, padding: usize },
    /// parents: [input, weight, bias]
    Conv3d { stride: usize, padding: usize },
    /// parents: [input, weight]
    Deconv2d { padding: usize },
    /// parents: [input, weight]
    Deconv3d { padding: usize },
    /// parents: [input]; argmax holds flat input indices per output element
    MaxPool { argmax: Vec<u64> },
    /// parents: [a, b]; split point is a's channel count
    ConcatChannels,
    /// parents: [input, gamma, beta]; stats are the ones used to normalise
    BatchNorm {
        mean: Vec<E>,
        inv_std: Vec<E>,
        train: bool,
    },
    /// parents: [input]
    LeakyRelu { slope: E },
    /// parents: [input]; backward reads the node's own output
    SoftmaxChannels,
    /// parents: [a, b]
    Add,
    /// parents: [a, b]
    Mul,
    /// parents: [input]
    Scale { factor: E },
    /// parents: [input]
    SumAll,
    /// parents: [input]
    MeanAll,
    /// parents: arbitrary
    Custom(Box<dyn CustomGrad<E>>),
}

/// Hand-derived backward for operations defined outside the engine
/// (the segmentation losses use this).
pub trait CustomGrad<E: Element>: Send {
    fn name(&self) -> &'static str;
    /// `out_grad` is the gradient at the op's output; `parent_data` the
    /// forward values of each parent. Returns one entry per parent
    /// (`None` where no gradient flows).
    fn backward(&self, out_grad: &[E], parent_data: &[&[E]]) -> Vec<Option<Vec<E>>>;
}

pub(crate) struct Node<E: Element> {
    pub data: TrackedVec<E>,
    pub shape: Vec<usize>,
    pub grad: Option<TrackedVec<E>>,
    pub requires_grad: bool,
    pub parents: Vec<TensorId>,
    pub step: Option<Step<E>>,
}

/// Arena of tensors plus the recorded operations connecting them.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// reverse-topological order for the backward sweep.
pub struct Graph<E: Element> {
    pub(crate) nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf tensor. `data.len()` must equal the shape product.
    pub fn leaf(&mut self, data: Vec<E>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if data.len() != numel(shape) {
            return Err(AutonnError::ShapeMismatch {
                op: "leaf",
                detail: format!("data length {} != shape product {:?}", data.len(), shape),
            });
        }
        Ok(self.push(TrackedVec::from_vec(data), shape.to_vec(), requires_grad, Vec::new(), None))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, data: Vec<E>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.nodes[id.idx()].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.idx()].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        numel(&self.nodes[id.idx()].shape)
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.idx()].requires_grad
    }

    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.nodes[id.idx()].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> Result<E> {
        let node = &self.nodes[id.idx()];
        if numel(&node.shape) != 1 {
            return Err(AutonnError::NotScalarLoss { numel: numel(&node.shape) });
        }
        Ok(node.data[0])
    }

    pub(crate) fn push(
        &mut self,
        data: TrackedVec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<TensorId>,
        step: Option<Step<E>>,
    ) -> TensorId {
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node { data, shape, grad: None, requires_grad, parents, step });
        id
    }

    /// Records an op node whose `requires_grad` follows from its parents.
    pub(crate) fn push_op(
        &mut self,
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<TensorId>,
        step: Step<E>,
    ) -> TensorId {
        let requires = parents.iter().any(|p| self.nodes[p.idx()].requires_grad);
        let step = if requires { Some(step) } else { None };
        self.push(TrackedVec::from_vec(data), shape, requires, parents, step)
    }

    /// Output of a differentiable operation defined by the caller.
    pub fn custom(
        &mut self,
        parents: &[TensorId],
        data: Vec<E>,
        shape: &[usize],
        op: Box<dyn CustomGrad<E>>,
    ) -> Result<TensorId> {
        if data.len() != numel(shape) {
            return Err(AutonnError::ShapeMismatch {
                op: "custom",
                detail: format!("data length {} != shape product {:?}", data.len(), shape),
            });
        }
        Ok(self.push_op(data, shape.to_vec(), parents.to_vec(), Step::Custom(op)))
    }

    fn accumulate(&mut self, id: TensorId, contribution: Vec<E>) {
        let node = &mut self.nodes[id.idx()];
        match node.grad.as_mut() {
            Some(grad) => {
                for (g, c) in grad.iter_mut().zip(contribution) {
                    *g += c;
                }
            }
            None => node.grad = Some(TrackedVec::from_vec(contribution)),
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients accumulate additively across fan-out. `requires_grad`
    /// leaves not reachable from the loss end up with an all-zero gradient
    /// and a warning rather than an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let loss_node = &self.nodes[loss.idx()];
        if numel(&loss_node.shape) != 1 {
            return Err(AutonnError::NotScalarLoss { numel: numel(&loss_node.shape) });
        }
        if loss_node.requires_grad {
            self.nodes[loss.idx()].grad = Some(TrackedVec::from_vec(vec![E::one()]));
            for idx in (0..=loss.idx()).rev() {
                if self.nodes[idx].grad.is_none() || self.nodes[idx].step.is_none() {
                    continue;
                }
                let step = self.nodes[idx].step.take().expect("checked above");
                let out_grad = self.nodes[idx].grad.take().expect("checked above");
                let parents = self.nodes[idx].parents.clone();
                let contribs = self.step_backward(idx, &step, &out_grad, &parents);
                self.nodes[idx].grad = Some(out_grad);
                self.nodes[idx].step = Some(step);
                for (pid, buf) in contribs {
                    self.accumulate(pid, buf);
                }
            }
        }
        for idx in 0..self.nodes.len() {
            let node = &mut self.nodes[idx];
            if node.requires_grad && node.parents.is_empty() && node.grad.is_none() {
                log::warn!("parameter tensor {idx} is not connected to the loss; gradient set to zero");
                node.grad = Some(TrackedVec::zeros(numel(&node.shape)));
            }
        }
        Ok(())
    }

    /// Gradient contributions of one recorded step to each parent that
    /// wants one. Dispatches to the op implementations.
    fn step_backward(
        &self,
        node_idx: usize,
        step: &Step<E>,
        out_grad: &[E],
        parents: &[TensorId],
    ) -> Vec<(TensorId, Vec<E>)> {
        let wants: Vec<bool> = parents.iter().map(|p| self.nodes[p.idx()].requires_grad).collect();
        let mut out = Vec::new();
        match step {
            Step::Conv2d { stride, padding } => {
                let grads = super::ops::conv::conv2d_backward(
                    self.data(parents[0]),
                    self.shape(parents[0]),
                    self.data(parents[1]),
                    self.shape(parents[1]),
                    *stride,
                    *padding,
                    out_grad,
                    &self.nodes[node_idx].shape,
                    (wants[0], wants[1], wants[2]),
                );
                for (slot, g) in grads.into_iter().enumerate() {
                    if let Some(g) = g {
                        out.push((parents[slot], g));
                    }
                }
            }
            Step::Conv3d { stride, padding } => {
                let grads = super::ops::conv::conv3d_backward(
                    self.data(parents[0]),
                    self.shape(parents[0]),
                    self.data(parents[1]),
                    self.shape(parents[1]),
                    *stride,
                    *padding,
                    out_grad,
                    &self.nodes[node_idx].shape,
                    (wants[0], wants[1], wants[2]),
                );
                for (slot, g) in grads.into_iter().enumerate() {
                    if let Some(g) = g {
                        out.push((parents[slot], g));
                    }
                }
            }
            Step::Deconv2d { padding } => {
                let grads = super::ops::conv::deconv2d_backward(
                    self.data(parents[0]),
                    self.shape(parents[0]),
                    self.data(parents[1]),
                    self.shape(parents[1]),
                    *padding,
                    out_grad,
                    &self.nodes[node_idx].shape,
                    (wants[0], wants[1]),
                );
                for (slot, g) in grads.into_iter().enumerate() {
                    if let Some(g) = g {
                        out.push((parents[slot], g));
                    }
                }
            }
            Step::Deconv3d { padding } => {
                let grads = super::ops::conv::deconv3d_backward(
                    self.data(parents[0]),
                    self.shape(parents[0]),
                    self.data(parents[1]),
                    self.shape(parents[1]),
                    *padding,
                    out_grad,
                    &self.nodes[node_idx].shape,
                    (wants[0], wants[1]),
                );
                for (slot, g) in grads.into_iter().enumerate() {
                    if let Some(g) = g {
                        out.push((parents[slot], g));
                    }
                }
            }
            Step::MaxPool { argmax } => {
                if wants[0] {
                    let mut din = vec![E::zero(); self.numel(parents[0])];
                    for (i, &src) in argmax.iter().enumerate() {
                        din[src as usize] += out_grad[i];
                    }
                    out.push((parents[0], din));
                }
            }
            Step::ConcatChannels => {
                let (ga, gb) = super::ops::basic::concat_backward(
                    self.shape(parents[0]),
                    self.shape(parents[1]),
                    out_grad,
                );
                if wants[0] {
                    out.push((parents[0], ga));
                }
                if wants[1] {
                    out.push((parents[1], gb));
                }
            }
            Step::BatchNorm { mean, inv_std, train } => {
                let grads = super::ops::norm::batchnorm_backward(
                    self.data(parents[0]),
                    self.shape(parents[0]),
                    self.data(parents[1]),
                    mean,
                    inv_std,
                    *train,
                    out_grad,
                    (wants[0], wants[1], wants[2]),
                );
                for (slot, g) in grads.into_iter().enumerate() {
                    if let Some(g) = g {
                        out.push((parents[slot], g));
                    }
                }
            }
            Step::LeakyRelu { slope } => {
                if wants[0] {
                    let input = self.data(parents[0]);
                    let mut din = Vec::with_capacity(input.len());
                    for (x, g) in input.iter().zip(out_grad) {
                        let f = if *x >= E::zero() { E::one() } else { *slope };
                        din.push(f * *g);
                    }
                    out.push((parents[0], din));
                }
            }
            Step::SoftmaxChannels => {
                if wants[0] {
                    let din = super::ops::act::softmax_backward(
                        &self.nodes[node_idx].data,
                        &self.nodes[node_idx].shape,
                        out_grad,
                    );
                    out.push((parents[0], din));
                }
            }
            Step::Add => {
                for slot in 0..2 {
                    if wants[slot] {
                        out.push((parents[slot], out_grad.to_vec()));
                    }
                }
            }
            Step::Mul => {
                for slot in 0..2 {
                    if wants[slot] {
                        let other = self.data(parents[1 - slot]);
                        let g = other.iter().zip(out_grad).map(|(o, g)| *o * *g).collect();
                        out.push((parents[slot], g));
                    }
                }
            }
            Step::Scale { factor } => {
                if wants[0] {
                    out.push((parents[0], out_grad.iter().map(|g| *g * *factor).collect()));
                }
            }
            Step::SumAll => {
                if wants[0] {
                    out.push((parents[0], vec![out_grad[0]; self.numel(parents[0])]));
                }
            }
            Step::MeanAll => {
                if wants[0] {
                    let n = self.numel(parents[0]);
                    let f = out_grad[0] / E::from_usize(n).expect("count fits element type");
                    out.push((parents[0], vec![f; n]));
                }
            }
            Step::Custom(op) => {
                let parent_data: Vec<&[E]> = parents.iter().map(|p| self.data(*p)).collect();
                let grads = op.backward(out_grad, &parent_data);
                debug_assert_eq!(grads.len(), parents.len(), "custom op {}", op.name());
                for (slot, g) in grads.into_iter().enumerate() {
                    if let Some(g) = g {
                        if wants[slot] {
                            out.push((parents[slot], g));
                        }
                    }
                }
            }
        }
        out
    }
}
