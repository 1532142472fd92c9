//! The reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so walking indices backwards is a
//! valid reverse-topological order. Each node holds its forward value and a
//! closure that scatters the incoming cotangent into its parents' slots.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use super::{numel, Tensor};
use crate::scalar::Real;

pub(super) type BackFn<F> = Box<dyn Fn(&[F], &mut GradStore<F>)>;

pub(super) struct Node<F: Real> {
    pub value: Rc<Vec<F>>,
    pub shape: Vec<usize>,
    pub backward: Option<BackFn<F>>,
}

/// Per-node gradient slots, zero-initialized on first touch.
pub struct GradStore<F: Real> {
    slots: Vec<Option<Vec<F>>>,
}

impl<F: Real> GradStore<F> {
    pub fn slot(&mut self, idx: usize, len: usize) -> &mut [F] {
        self.slots[idx].get_or_insert_with(|| vec![F::zero(); len])
    }
}

pub struct Tape<F: Real> {
    inner: RefCell<TapeInner<F>>,
}

struct TapeInner<F: Real> {
    nodes: Vec<Node<F>>,
    /// Tensor id -> node index, for leaves registered via `param`.
    params: BTreeMap<u64, usize>,
}

/// Cheap handle to a node on a tape.
pub struct Var<'t, F: Real> {
    pub(super) tape: &'t Tape<F>,
    pub(super) idx: usize,
}

impl<F: Real> Clone for Var<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<F: Real> Copy for Var<'_, F> {}

/// Batch statistics returned by train-mode batch normalization so the caller
/// can fold them into running estimates after the step succeeds.
#[derive(Clone, Debug)]
pub struct BatchStats<F: Real> {
    pub mean: Vec<F>,
    /// Biased (1/B) variance, as used for normalization.
    pub var: Vec<F>,
    pub batch: usize,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                params: BTreeMap::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(super) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<F>,
        backward: Option<BackFn<F>>,
    ) -> Var<'_, F> {
        debug_assert_eq!(value.len(), numel(&shape));
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value: Rc::new(value),
            shape,
            backward,
        });
        Var {
            tape: self,
            idx: inner.nodes.len() - 1,
        }
    }

    /// Constant leaf: participates in the forward value only.
    pub fn constant(&self, shape: Vec<usize>, values: Vec<F>) -> Var<'_, F> {
        self.push(shape, values, None)
    }

    pub fn constant_of(&self, t: &Tensor<F>) -> Var<'_, F> {
        self.constant(t.shape().to_vec(), t.values().to_vec())
    }

    pub fn scalar(&self, v: F) -> Var<'_, F> {
        self.constant(vec![1], vec![v])
    }

    /// Differentiable leaf bound to a parameter tensor. Binding the same
    /// tensor again returns the existing node, so gradients of shared
    /// parameters accumulate in one slot.
    pub fn param(&self, t: &Tensor<F>) -> Var<'_, F> {
        if let Some(&idx) = self.inner.borrow().params.get(&t.id()) {
            return Var { tape: self, idx };
        }
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), None);
        self.inner.borrow_mut().params.insert(t.id(), v.idx);
        v
    }

    /// Reverse pass from a scalar root. Returns gradient slots for every
    /// leaf reached plus the param-id index.
    pub fn backward(&self, root: Var<'_, F>) -> Gradients<F> {
        assert!(core::ptr::eq(root.tape, self), "var belongs to another tape");
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        assert_eq!(
            numel(&nodes[root.idx].shape),
            1,
            "backward requires a scalar root"
        );
        let mut store = GradStore {
            slots: vec![None; nodes.len()],
        };
        store.slots[root.idx] = Some(vec![F::one()]);
        for idx in (0..=root.idx).rev() {
            let node = &nodes[idx];
            let Some(back) = &node.backward else {
                continue; // leaf: keep its accumulated grad
            };
            let Some(g) = store.slots[idx].take() else {
                continue;
            };
            back(&g, &mut store);
        }
        Gradients {
            slots: store.slots,
            params: inner.params.clone(),
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<F: Real> {
    slots: Vec<Option<Vec<F>>>,
    params: BTreeMap<u64, usize>,
}

impl<F: Real> Gradients<F> {
    pub fn of_var(&self, v: Var<'_, F>) -> Option<&[F]> {
        self.slots.get(v.idx).and_then(|s| s.as_deref())
    }

    pub fn of_tensor(&self, t: &Tensor<F>) -> Option<&[F]> {
        self.params
            .get(&t.id())
            .and_then(|&idx| self.slots[idx].as_deref())
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn value(&self) -> Rc<Vec<F>> {
        Rc::clone(&self.tape.inner.borrow().nodes[self.idx].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].shape.clone()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape())
    }

    /// Value of a scalar node.
    pub fn item(&self) -> F {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() requires a scalar");
        v[0]
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }
}
