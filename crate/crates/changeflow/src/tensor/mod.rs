//! Minimal reverse-mode automatic differentiation over `ndarray`, f64 only.
//!
//! A [`Tensor`] is a reference-counted graph node holding its forward value.
//! Operations build the graph eagerly; [`Tensor::backward`] runs the tape in
//! reverse topological order, accumulating gradients on every node that
//! requires them. Graphs are per-sample and short-lived: build, run
//! `backward`, harvest leaf gradients, then drop (or [`Tensor::free_graph`]
//! for explicit teardown of large graphs).

mod check;
mod ops;
mod optim;
mod params;

pub use check::finite_diff_check;
pub use ops::{
    bce_with_logits_masked, bilinear_resize, concat, conv2d, offset_sample, stack0, warp,
    weighted_sum,
};
pub use optim::{cosine_lr, AdamW};
pub use params::{Graph, ParamSnapshot, ParamStore};

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

type BackwardFn = Box<dyn Fn(&ArrayD<f64>)>;

pub(crate) struct Node {
    id: u64,
    value: ArrayD<f64>,
    requires: bool,
    grad: RefCell<Option<ArrayD<f64>>>,
    parents: RefCell<Vec<Tensor>>,
    backward: RefCell<Option<BackwardFn>>,
}

thread_local! {
    static NEXT_ID: RefCell<u64> = const { RefCell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let mut c = c.borrow_mut();
        *c += 1;
        *c
    })
}

/// Node handle in the autodiff graph. Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl Tensor {
    /// Non-differentiable input.
    pub fn constant(value: ArrayD<f64>) -> Tensor {
        Tensor::make(value, false)
    }

    /// Differentiable input; gradients accumulate on it during `backward`.
    pub fn leaf(value: ArrayD<f64>) -> Tensor {
        Tensor::make(value, true)
    }

    pub fn scalar_const(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn make(value: ArrayD<f64>, requires: bool) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                value,
                requires,
                grad: RefCell::new(None),
                parents: RefCell::new(Vec::new()),
                backward: RefCell::new(None),
            }),
        }
    }

    /// Interior node produced by an operation. The closure receives the
    /// output gradient and must accumulate into the parents it captured.
    /// When no parent requires gradients the edge is pruned entirely.
    pub(crate) fn from_op(
        value: ArrayD<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires = parents.iter().any(|p| p.node.requires);
        let t = Tensor::make(value, requires);
        if requires {
            *t.node.parents.borrow_mut() = parents;
            *t.node.backward.borrow_mut() = Some(backward);
        }
        t
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires
    }

    /// Value of a 0-d or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.node.value.len(), 1, "item() on non-scalar");
        *self.node.value.iter().next().expect("empty tensor")
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.node.grad.borrow().clone()
    }

    pub(crate) fn accumulate(&self, g: &ArrayD<f64>) {
        debug_assert_eq!(
            g.shape(),
            self.node.value.shape(),
            "gradient shape mismatch"
        );
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += g,
            None => *slot = Some(g.as_standard_layout().into_owned()),
        }
    }

    /// Runs reverse-mode accumulation from this node, seeding with ones.
    pub fn backward(&self) {
        let seed = ArrayD::ones(IxDyn(self.node.value.shape()));
        self.accumulate(&seed);
        for t in self.topo() {
            let grad = t.node.grad.borrow();
            let backward = t.node.backward.borrow();
            if let (Some(g), Some(f)) = (grad.as_ref(), backward.as_ref()) {
                f(g);
            }
        }
    }

    /// Reverse topological order: every node before the nodes it consumes.
    fn topo(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
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
            for p in t.node.parents.borrow().iter() {
                if p.node.requires && !visited.contains(&p.node.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order.reverse();
        order
    }

    /// Iteratively severs the graph so refcounted teardown never recurses
    /// through deep parent chains.
    pub fn free_graph(&self) {
        let mut nodes = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !visited.insert(t.node.id) {
                continue;
            }
            for p in t.node.parents.borrow().iter() {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        for t in &nodes {
            t.node.backward.borrow_mut().take();
            t.node.parents.borrow_mut().clear();
            t.node.grad.borrow_mut().take();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn arr(shape: &[usize], vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), vals.to_vec()).unwrap()
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        // y = x*x + x: dy/dx = 2x + 1.
        let x = Tensor::leaf(arr(&[2], &[3.0, -1.5]));
        let y = x.mul(&x).add(&x).sum();
        y.backward();
        let g = x.grad().unwrap();
        assert!((g[[0]] - 7.0).abs() < 1e-12);
        assert!((g[[1]] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn constants_prune_backward_edges() {
        let c = Tensor::constant(arr(&[2], &[1.0, 2.0]));
        let d = c.mul(&c).sum();
        assert!(!d.requires_grad());
        d.backward();
        assert!(c.grad().is_none());
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // z = (x + x) * x = 2x^2: dz/dx = 4x.
        let x = Tensor::leaf(arr(&[1], &[5.0]));
        let z = x.add(&x).mul(&x).sum();
        z.backward();
        assert!((x.grad().unwrap()[[0]] - 20.0).abs() < 1e-12);
    }

    #[test]
    fn deep_chain_survives_teardown() {
        let mut t = Tensor::leaf(arr(&[4], &[1.0, 2.0, 3.0, 4.0]));
        for _ in 0..20_000 {
            t = t.scale(1.0);
        }
        let loss = t.sum();
        loss.backward();
        assert!((loss.item() - 10.0).abs() < 1e-9);
        loss.free_graph();
    }
}
