use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard};

use super::Float;
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static OP_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Number of graph operations executed on this thread since the last
/// [`reset_op_count`].
pub fn op_count() -> u64 {
    OP_COUNT.with(|c| c.get())
}

pub fn reset_op_count() {
    OP_COUNT.with(|c| c.set(0));
}

/// Computes one gradient per parent from the gradient of the output.
/// Entries for parents that do not require grad may be `None`.
pub(crate) type BackwardFn<F> =
    Box<dyn Fn(&[F], &[Tensor<F>]) -> Vec<Option<Vec<F>>> + Send + Sync>;

struct Edge<F: Float> {
    op: &'static str,
    parents: Vec<Tensor<F>>,
    backward: BackwardFn<F>,
}

struct Node<F: Float> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<F>>,
    grad: RwLock<Option<Vec<F>>>,
    requires_grad: bool,
    edge: Option<Edge<F>>,
}

/// Dense row-major tensor and node of a reverse-mode computation graph.
///
/// Cloning is cheap and shares the node. Values are immutable once created,
/// except for leaves, whose data may be rewritten by an optimizer between
/// forward passes.
pub struct Tensor<F: Float = f32> {
    node: Arc<Node<F>>,
}

impl<F: Float> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<F: Float> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<F> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("op", &self.op_name())
            .field("requires_grad", &self.node.requires_grad)
            .field("values", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Float> Tensor<F> {
    fn from_parts(
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
        edge: Option<Edge<F>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: RwLock::new(None),
                requires_grad,
                edge,
            }),
        }
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Leaf tensor, optionally tracked for gradients.
    pub fn leaf(shape: &[usize], data: Vec<F>, requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), data, requires_grad, None))
    }

    /// Trainable leaf.
    pub fn parameter(shape: &[usize], data: Vec<F>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![F::ZERO; numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: F) -> Self {
        Self::from_parts(Vec::new(), vec![value], false, None)
    }

    /// Result of an operator. Records the graph edge only when some parent
    /// requires grad.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<F>,
        parents: Vec<Tensor<F>>,
        backward: BackwardFn<F>,
    ) -> Self {
        OP_COUNT.with(|c| c.set(c.get() + 1));
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let edge = requires_grad.then(|| Edge {
            op,
            parents,
            backward,
        });
        Self::from_parts(shape, data, requires_grad, edge)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.edge.is_none()
    }

    pub fn op_name(&self) -> &'static str {
        self.node.edge.as_ref().map_or("leaf", |e| e.op)
    }

    /// Operands of the producing operation; empty for leaves and constants.
    pub fn parents(&self) -> Vec<Tensor<F>> {
        self.node
            .edge
            .as_ref()
            .map_or_else(Vec::new, |e| e.parents.clone())
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<F>> {
        self.node.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        let data = self.data();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.shape());
        data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.node.shape.clone(), self.to_vec(), false, None)
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.node.grad.read().expect("grad lock poisoned").clone()
    }

    pub fn has_grad(&self) -> bool {
        self.node.grad.read().expect("grad lock poisoned").is_some()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.write().expect("grad lock poisoned") = None;
    }

    /// Rewrites the values of a leaf in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [F])) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::InvalidArgument(
                "only leaf tensors can be updated in place".into(),
            ));
        }
        let mut data = self.node.data.write().expect("tensor data lock poisoned");
        f(&mut data);
        Ok(())
    }

    /// Replaces the values of a leaf; the new values must have the same length.
    pub fn assign(&self, values: &[F]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::shape("assign", self.shape(), &[values.len()]));
        }
        self.update_data(|d| d.copy_from_slice(values))
    }

    /// Reverse-mode sweep from this scalar. Populates `grad` on every
    /// reachable leaf that requires grad. Uses of the same node accumulate.
    ///
    /// Fails if the tensor is not a scalar, or if any reachable leaf already
    /// holds a gradient from an earlier sweep (call `zero_grad` first).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();

        if let Some(leaf) = order.iter().find(|t| t.is_leaf() && t.has_grad()) {
            return Err(Error::Graph(format!(
                "leaf #{} (shape {:?}) already holds a gradient; zero gradients before a second backward",
                leaf.id(),
                leaf.shape()
            )));
        }

        let mut grads: HashMap<u64, Vec<F>> = HashMap::new();
        grads.insert(self.id(), vec![F::ONE]);
        let mut leaf_grads: Vec<(Tensor<F>, Vec<F>)> = Vec::new();

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.node.edge {
                None => leaf_grads.push((node.clone(), g)),
                Some(edge) => {
                    let parent_grads = (edge.backward)(&g, &edge.parents);
                    debug_assert_eq!(parent_grads.len(), edge.parents.len());
                    for (parent, pg) in edge.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "grad size for {}", edge.op);
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }

        for (leaf, g) in leaf_grads {
            *leaf.node.grad.write().expect("grad lock poisoned") = Some(g);
        }
        Ok(())
    }

    /// Nodes requiring grad reachable from `self`, parents before children.
    fn topological_order(&self) -> Vec<Tensor<F>> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<F>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(edge) = &t.node.edge {
                for p in &edge.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_value_mismatch() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn product_rule() {
        let x = Tensor::<f64>::parameter(&[], vec![2.0]).unwrap();
        let y = Tensor::<f64>::parameter(&[], vec![3.0]).unwrap();
        let z = x.mul(&y).unwrap();
        z.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
        assert_eq!(y.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn square_grad() {
        let x = Tensor::<f64>::parameter(&[], vec![3.0]).unwrap();
        x.mul(&x).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let x = Tensor::<f64>::parameter(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let a = x.mul(&x).unwrap().sum();
        let b = x.scale(3.0).sum();
        a.add(&b).unwrap().backward().unwrap();
        let g = x.grad().unwrap();
        let expected: Vec<f64> = [1.0, -2.0, 0.5].iter().map(|v| 2.0 * v + 3.0).collect();
        assert_eq!(g, expected);
    }

    #[test]
    fn second_backward_without_reset_fails() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        let err = loss.backward().unwrap_err();
        assert!(matches!(err, Error::Graph(_)), "{err}");
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn non_scalar_backward_fails() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.scale(2.0).backward(), Err(Error::Graph(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.detach().mul(&x).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn constants_record_no_edges() {
        let a = Tensor::<f32>::new(&[2], vec![1.0, 2.0]).unwrap();
        let b = a.add(&a).unwrap();
        assert!(!b.requires_grad());
        assert!(b.is_leaf());
    }
}
