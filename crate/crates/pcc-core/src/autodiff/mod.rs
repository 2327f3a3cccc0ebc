//! Dense differentiable arrays with reverse-mode gradients.
//!
//! Storage is contiguous row-major f32. Each operation records a backward
//! closure; [`DiffArray::backward`] replays closures in reverse creation
//! order, which is a valid topological order and makes gradient
//! accumulation deterministic (two runs on the same graph produce
//! bit-identical grads).

mod ops;
mod params;

pub use params::{load_checkpoint, load_into, save_checkpoint, ParamStore, Parameter, RawParam};

use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed)
}

type BackwardFn = Box<dyn Fn(&[f32])>;

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f32>>>,
    parents: Vec<DiffArray>,
    backward: Option<BackwardFn>,
}

/// Handle to a node in the computation graph. Cloning is cheap and shares
/// the underlying storage.
#[derive(Clone)]
pub struct DiffArray {
    node: Rc<Node>,
}

impl std::fmt::Debug for DiffArray {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffArray")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::Contract(format!(
            "array extents must be positive, got {shape:?}"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::Contract(format!(
            "shape {shape:?} implies {numel} elements but data has {len}"
        )));
    }
    Ok(())
}

impl DiffArray {
    fn new_node(
        data: Vec<f32>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<DiffArray>,
        backward: Option<BackwardFn>,
    ) -> DiffArray {
        DiffArray {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        }
    }

    /// Constant (non-differentiable) array.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<DiffArray> {
        check_shape(shape, data.len())?;
        Ok(Self::new_node(data, shape.to_vec(), false, Vec::new(), None))
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(data: Vec<f32>, shape: &[usize]) -> Result<DiffArray> {
        check_shape(shape, data.len())?;
        Ok(Self::new_node(data, shape.to_vec(), true, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> DiffArray {
        let numel: usize = shape.iter().product();
        Self::new_node(vec![0.0; numel], shape.to_vec(), false, Vec::new(), None)
    }

    pub fn scalar(v: f32) -> DiffArray {
        Self::new_node(vec![v], Vec::new(), false, Vec::new(), None)
    }

    pub(crate) fn from_op(
        data: Vec<f32>,
        shape: Vec<usize>,
        parents: Vec<DiffArray>,
        backward: BackwardFn,
    ) -> DiffArray {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Self::new_node(data, shape, true, parents, Some(backward))
        } else {
            // Constant subgraph: drop edges so memory is reclaimed eagerly.
            Self::new_node(data, shape, false, Vec::new(), None)
        }
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

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element array.
    pub fn value(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.node.data.borrow()[0]
    }

    /// Overwrite the stored values in place (used by the optimizer).
    pub fn set_data(&self, new: &[f32]) {
        let mut d = self.node.data.borrow_mut();
        debug_assert_eq!(d.len(), new.len());
        d.copy_from_slice(new);
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn accum_grad(&self, g: &[f32]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse pass from a scalar. Gradients accumulate (sum) over multiple
    /// uses of a node; traversal order is reverse creation order.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward on a graph with no differentiable leaves".into(),
            ));
        }
        // Collect reachable grad-requiring nodes.
        let mut stack = vec![self.clone()];
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<DiffArray> = Vec::new();
        seen.insert(self.node.id);
        while let Some(n) = stack.pop() {
            for p in &n.node.parents {
                if p.requires_grad() && seen.insert(p.node.id) {
                    stack.push(p.clone());
                }
            }
            nodes.push(n);
        }
        // Reverse creation order = topological order (inputs precede outputs).
        nodes.sort_by(|a, b| b.node.id.cmp(&a.node.id));

        self.accum_grad(&[1.0]);
        for n in &nodes {
            if let Some(bw) = &n.node.backward {
                let g = n.node.grad.borrow().clone();
                if let Some(g) = g {
                    bw(&g);
                }
            }
        }
        Ok(())
    }
}
