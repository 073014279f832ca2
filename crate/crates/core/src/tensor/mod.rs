//! A minimal reverse-mode automatic differentiation engine.
//!
//! Values are dense row-major [`ArrayD`]s. Every operation records its output
//! together with a closure that maps the output gradient to gradients of its
//! inputs. [`Tape::backward`] walks the recorded nodes in reverse order.
//!
//! The engine is single-threaded and performs every reduction in a fixed order,
//! so identical inputs produce bit-identical outputs and gradients.

mod conv;
mod loss;
mod ops;

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use loss::{cross_entropy_value, softmax_cross_entropy};

/// Floating point element type usable on the tape.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<ArrayD<F>>>;

struct Node<F: Real> {
    value: Rc<ArrayD<F>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<F>>,
}

/// Records operations for a single forward/backward pass.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Adds a leaf holding `value`. Gradients are only accumulated for leaves
    /// created with `requires_grad` and for nodes depending on them.
    pub fn leaf(&self, value: ArrayD<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A constant (no gradient) leaf.
    pub fn constant(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<F>,
        parents: Vec<usize>,
        backward: BackwardFn<F>,
    ) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Back-propagates from a scalar `output`, seeding its gradient with one.
    pub fn backward(&self, output: Var<'_, F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; nodes.len()];
        grads[output.id] = Some(ArrayD::from_elem(nodes[output.id].value.raw_dim(), F::one()));
        for id in (0..=output.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, g) in node.parents.iter().zip(parent_grads) {
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => *acc += &g,
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            if node.parents.is_empty() {
                grads[id] = Some(grad);
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&ArrayD<F>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<ArrayD<F>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Real> Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn value(&self) -> Rc<ArrayD<F>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn unary(self, value: ArrayD<F>, backward: BackwardFn<F>) -> Var<'t, F> {
        self.tape.push(value, vec![self.id], backward)
    }
}

/// Builds a standard-layout array from a shape and flat data.
pub(crate) fn from_vec<F: Real>(shape: &[usize], data: Vec<F>) -> ArrayD<F> {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data length")
}
