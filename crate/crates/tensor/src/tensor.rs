//! Tensor handles and the reverse-mode differentiation graph.
//!
//! A `Tensor` is a cheaply clonable handle onto an immutable f32 buffer plus
//! graph metadata. Ops record a backward closure and their parent handles;
//! `backward` walks the graph in reverse topological order and accumulates
//! gradients into `requires_grad` leaves. One graph is owned by one thread.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with gradient recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    NO_GRAD.with(|flag| {
        let prev = flag.get();
        flag.set(true);
        let out = f();
        flag.set(prev);
        out
    })
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD.with(|flag| !flag.get())
}

/// Backward closure: maps the gradient w.r.t. this node's output to gradients
/// w.r.t. each parent (in parent order); `None` skips a parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f32]) -> Vec<Option<Vec<f32>>>>;

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// N-dimensional f32 array participating in a differentiation graph.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.node.id, self.node.shape, self.node.requires_grad
        )
    }
}

fn check_finite(data: &[f32], op: &'static str, what: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op, what })
    }
}

impl Tensor {
    fn leaf(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    /// Constant leaf. Validates the shape/length contract and finiteness.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        check_finite(&data, "from_vec", "data")?;
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf (`requires_grad = true`).
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(Tensor::leaf(t.to_vec(), shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::leaf(vec![0.0; numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let numel = shape.iter().product();
        Tensor::leaf(vec![value; numel], shape.to_vec(), false)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::leaf(vec![value], vec![1], false)
    }

    /// Interior node produced by an op. Recording is skipped when grads are
    /// disabled or no parent requires them.
    pub(crate) fn from_op(
        data: Vec<f32>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Tensor::leaf(data, shape, false);
        }
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward_fn: Some(backward_fn),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.backward_fn.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.node.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.node.data.borrow()[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.node.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Constant copy outside the graph; gradients never flow through it.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.to_vec(), self.node.shape.to_vec(), false)
    }

    /// Overwrite the buffer in place (parameter updates and checkpoint loads).
    pub fn copy_from_slice(&self, src: &[f32]) -> Result<()> {
        if src.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "copy_from_slice",
                detail: format!("expected {} elements, got {}", self.numel(), src.len()),
            });
        }
        self.node.data.borrow_mut().copy_from_slice(src);
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.node.data.borrow_mut());
    }

    /// Reverse-mode pass from a scalar loss. Gradients accumulate into every
    /// reachable `requires_grad` leaf; repeated calls keep accumulating until
    /// `clear_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { numel: self.numel() });
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        grads.insert(self.node.id, vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.node.id) else {
                continue;
            };
            match &t.node.backward_fn {
                Some(f) => {
                    let parent_grads = f(&g);
                    debug_assert_eq!(parent_grads.len(), t.node.parents.len());
                    for (parent, pg) in t.node.parents.iter().zip(parent_grads) {
                        if !parent.requires_grad() {
                            continue;
                        }
                        if let Some(pg) = pg {
                            match grads.entry(parent.node.id) {
                                std::collections::hash_map::Entry::Occupied(mut e) => {
                                    for (acc, v) in e.get_mut().iter_mut().zip(&pg) {
                                        *acc += v;
                                    }
                                }
                                std::collections::hash_map::Entry::Vacant(e) => {
                                    e.insert(pg);
                                }
                            }
                        }
                    }
                }
                None => {
                    // requires_grad leaf: fold into the persistent buffer.
                    let mut slot = t.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(buf) => {
                            for (acc, v) in buf.iter_mut().zip(&g) {
                                *acc += v;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the reachable grad-requiring subgraph (leaves first).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (tensor, children_pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node.id) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.node.parents {
                if p.requires_grad() && !visited.contains(&p.node.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    /// Leaf ids of every `requires_grad` leaf reachable from this tensor.
    pub fn reachable_leaf_ids(&self) -> HashSet<u64> {
        self.topo_order()
            .iter()
            .filter(|t| t.is_leaf() && t.requires_grad())
            .map(|t| t.id())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::from_vec(vec![1.0, 2.0], &[3]).is_err());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::from_vec(vec![1.0, f32::NAN], &[2]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = ops::mul_scalar(&w, 2.0);
        assert!(matches!(y.backward(), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn linear_gradient_is_exact() {
        // loss = sum(w * x) => grad(w) = x
        let w = Tensor::param(vec![0.5, -1.0, 2.0], &[3]).unwrap();
        let x = Tensor::from_vec(vec![3.0, 4.0, 5.0], &[3]).unwrap();
        let loss = ops::sum(&ops::mul(&w, &x).unwrap());
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn tanh_chain_rule_at_origin() {
        // loss = mean((tanh(w) - 1)^2) at w = 0 => grad = -2
        let w = Tensor::param(vec![0.0], &[1]).unwrap();
        let loss = ops::mean(&ops::square(&ops::add_scalar(&ops::tanh(&w), -1.0)));
        loss.backward().unwrap();
        let g = w.grad().unwrap();
        assert!((g[0] + 2.0).abs() < 1e-6, "grad {}", g[0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let w = Tensor::param(vec![1.0], &[1]).unwrap();
        let x = Tensor::from_vec(vec![3.0], &[1]).unwrap();
        let loss = ops::sum(&ops::mul(&w, &x).unwrap());
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0]);
        w.clear_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradients() {
        let w = Tensor::param(vec![2.0], &[1]).unwrap();
        let d = ops::mul_scalar(&w, 3.0).detach();
        let loss = ops::sum(&d);
        loss.backward().unwrap();
        assert!(w.grad().is_none());
    }

    #[test]
    fn no_grad_skips_recording() {
        let w = Tensor::param(vec![2.0], &[1]).unwrap();
        let y = no_grad(|| ops::mul_scalar(&w, 3.0));
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }

    #[test]
    fn shared_node_receives_summed_gradient() {
        // loss = sum(w + w) => grad(w) = 2
        let w = Tensor::param(vec![1.0, 1.0], &[2]).unwrap();
        let loss = ops::sum(&ops::add(&w, &w).unwrap());
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 2.0]);
    }
}
