//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! A [`Var`] is an immutable node in a dynamically built graph. Operations in
//! [`ops`], [`conv`], [`norm`] and [`interp`] create new nodes and record a
//! closure mapping the output gradient to input gradients. Nodes whose inputs
//! carry no gradient record nothing, so running a forward pass on parameters
//! bound without gradient tracking is plain inference with no graph retained.

pub mod conv;
pub mod interp;
pub mod norm;
pub mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArcArray, ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of every tensor.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Archive dtype tag.
    const DTYPE: &'static str;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Converts an `f64` literal into the working scalar type.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable literal")
}

/// Reference-counted, copy-on-write tensor storage.
pub type Shared<T> = ArcArray<T, IxDyn>;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<Option<ArrayD<T>>>>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node<T: Scalar> {
    id: u64,
    value: Shared<T>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// A tensor value participating in the autodiff graph.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn standard<T: Scalar>(a: Shared<T>) -> Shared<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned().into_shared()
    }
}

impl<T: Scalar> Var<T> {
    fn new_node(
        value: Shared<T>,
        parents: Vec<Var<T>>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: standard(value),
            parents,
            backward,
            requires_grad,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: impl Into<Shared<T>>) -> Self {
        Self::new_node(value.into(), Vec::new(), None, false)
    }

    /// A graph input whose gradient is collected by [`Var::backward`].
    pub fn leaf(value: impl Into<Shared<T>>) -> Self {
        Self::new_node(value.into(), Vec::new(), None, true)
    }

    pub fn scalar(x: T) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    /// Records an operation result. The closure is dropped when no parent
    /// needs a gradient.
    pub(crate) fn from_op(value: ArrayD<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Self::new_node(value.into_shared(), parents, Some(backward), true)
        } else {
            Self::new_node(value.into_shared(), Vec::new(), None, false)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Shared<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.0.value.len(), 1, "item() on a tensor with {} elements", self.0.value.len());
        *self.0.value.iter().next().expect("one element")
    }

    /// Backpropagates from this node seeded with ones.
    pub fn backward(&self) -> Gradients<T> {
        self.backward_with(ArrayD::from_elem(self.shape(), T::one()))
    }

    /// Backpropagates from this node with an explicit output gradient.
    pub fn backward_with(&self, seed: ArrayD<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape");
        let mut grads: HashMap<u64, ArrayD<T>> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { map: grads };
        }

        // Node ids increase with creation order, so descending id order is a
        // valid reverse topological order.
        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.id()) {
                continue;
            }
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push(p.clone());
                }
            }
            order.push(v);
        }
        order.sort_unstable_by_key(|v| std::cmp::Reverse(v.id()));

        grads.insert(self.id(), seed);
        for node in &order {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.shape(), parent.shape(), "gradient shape for parent");
                match grads.get_mut(&parent.id()) {
                    Some(acc) => *acc += &pg,
                    None => {
                        grads.insert(parent.id(), pg);
                    }
                }
            }
        }
        Gradients { map: grads }
    }
}

/// Gradients of leaf nodes produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T: Scalar> {
    map: HashMap<u64, ArrayD<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&ArrayD<T>> {
        self.map.get(&v.id())
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<ArrayD<T>> {
        self.map.remove(&v.id())
    }
}
