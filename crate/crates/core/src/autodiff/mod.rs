//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles during a
//! forward pass (define-by-run). [`Tape::backward`] replays the adjoint rules
//! in reverse order; [`Tape::jvp`] pushes a tangent forward through the same
//! records, which is what the Jacobian code uses when the parameter count is
//! much smaller than the output size.
//!
//! ```
//! use ddsp_core::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x), vec![6.0]);
//! ```

mod check;
pub mod kernels;
mod ops;
mod tensor;

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, Ref, RefCell};

pub use check::{grad_check, grad_check_coords, GradCheckReport};
pub use kernels::{AllPolePlan, FilterPlan, HarmonicPlan, LowpassPlan, StftPlan};
pub use ops::OpKind;
pub use tensor::Tensor;

use crate::{Error, Result};

/// Lower clamp applied before `log`.
pub const LOG_FLOOR: f64 = 1e-7;

/// Index of a recorded tensor on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Unary {
    Abs,
    Log,
    Exp,
    Sin,
    Cos,
    Tanh,
    Softplus,
    Square,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `[r, c] + [c]` broadcast over rows.
    AddRow(usize, usize),
    /// Tensor times a one-element tensor.
    MulScalar(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Matmul(usize, usize),
    Sum(usize),
    Mean(usize),
    /// `[r, c] -> [c]`.
    SumRows(usize),
    Unary(usize, Unary),
    Concat(Vec<usize>),
    ConcatCols(Vec<usize>),
    Slice(usize, usize),
    SliceCols(usize, usize, usize),
    Reshape(usize),
    Transpose(usize),
    Stft(usize, Rc<StftPlan>),
    ComplexAbs(usize),
    Harmonic(usize, usize, usize, Rc<HarmonicPlan>),
    AllPole(usize, usize, AllPolePlan),
    Filter(usize, Rc<FilterPlan>),
    Lowpass(usize, Rc<LowpassPlan>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) | Op::AddRow(..) | Op::Offset(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) | Op::MulScalar(..) | Op::Scale(..) => "mul",
            Op::Div(..) => "div",
            Op::Matmul(..) => "matmul",
            Op::Sum(..) | Op::SumRows(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Unary(_, u) => match u {
                Unary::Abs => "abs",
                Unary::Log => "log",
                Unary::Exp => "exp",
                Unary::Sin => "sin",
                Unary::Cos => "cos",
                Unary::Tanh => "tanh",
                Unary::Softplus => "softplus",
                Unary::Square => "square",
            },
            Op::Concat(..) | Op::ConcatCols(..) => "concat",
            Op::Slice(..) | Op::SliceCols(..) => "slice",
            Op::Reshape(..) | Op::Transpose(..) => "reshape",
            Op::Stft(..) | Op::ComplexAbs(..) => "stft-magnitude",
            Op::Harmonic(..) => "harmonic",
            Op::AllPole(..) => "allpole",
            Op::Filter(..) => "filter",
            Op::Lowpass(..) => "lowpass",
        }
    }
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a forward computation. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<&'static str>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient of `var`, `None` when no path reaches it from the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zeros when unreachable or untracked.
    pub fn wrt(&self, var: Var<'_>) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; self.sizes[var.id]], <[f64]>::to_vec)
    }

    pub fn by_id(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked leaf: receives a gradient.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, true)
    }

    /// Untracked leaf: never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    /// Deliberately corrupts the adjoint of every op of the given kind (the
    /// names reported by [`OpKind::name`]). Used to prove that gradient
    /// checks catch broken rules.
    pub fn inject_fault(&self, kind: &'static str) {
        self.fault.set(Some(kind));
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        let fault = self.fault.get();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !matches!(node.op, Op::Leaf) {
                let g = match fault {
                    Some(k) if k == node.op.kind() => g.iter().map(|v| v * 1.5 + 1e-3).collect(),
                    _ => g,
                };
                ops::backprop(&nodes, id, &g, &mut grads);
                grads[id] = Some(g);
            } else {
                grads[id] = Some(g);
            }
        }
        // Only tracked leaves and tracked interior nodes keep gradients.
        let sizes = nodes.iter().map(|n| n.value.len()).collect();
        Ok(Gradients { grads, sizes })
    }

    /// Forward tangent sweep: directional derivative of `output` when the
    /// seeded leaves move along the given directions.
    pub fn jvp(&self, seeds: &[(Var<'_>, &[f64])], output: Var<'_>) -> Result<Vec<f64>> {
        let nodes = self.nodes.borrow();
        let mut tangents: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        let mut first = output.id;
        for (v, d) in seeds {
            let n = nodes[v.id].value.len();
            if d.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: d.len() });
            }
            if v.id <= output.id {
                tangents[v.id] = Some(d.to_vec());
                first = first.min(v.id);
            }
        }
        for id in first..=output.id {
            if tangents[id].is_some() || matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            tangents[id] = ops::tangent(&nodes, id, &tangents);
        }
        Ok(tangents[output.id].take().unwrap_or_else(|| vec![0.0; nodes[output.id].value.len()]))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        NodeId(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shape is consistent")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes()[self.id].value.clone()
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.tape.nodes()[self.id].value[0]
    }
}
