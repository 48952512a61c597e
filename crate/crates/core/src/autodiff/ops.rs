use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{AllPolePlan, FilterPlan, HarmonicPlan, LowpassPlan, StftPlan};
use super::{Node, Op, Tape, Unary, Var, LOG_FLOOR};
use crate::{Error, Result};

/// Operation kinds accepted by [`Tape::record`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Sum,
    Mean,
    Abs,
    Log,
    Exp,
    Sin,
    Tanh,
    Concat,
    Slice {
        start: usize,
        end: usize,
    },
    /// Hann-windowed STFT followed by the complex modulus.
    StftMagnitude {
        window: usize,
        hop: usize,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Matmul => "matmul",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Abs => "abs",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sin => "sin",
            OpKind::Tanh => "tanh",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::StftMagnitude { .. } => "stft-magnitude",
        }
    }
}

impl Tape {
    /// Records `kind` applied to `inputs` and returns the output handle.
    pub fn record<'t>(&'t self, kind: &OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidShape { op: kind.name(), msg: format!("expects {n} inputs, got {}", inputs.len()) })
            }
        };
        match kind {
            OpKind::Add => arity(2).and_then(|_| inputs[0].add(inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| inputs[0].sub(inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| inputs[0].mul(inputs[1])),
            OpKind::Div => arity(2).and_then(|_| inputs[0].div(inputs[1])),
            OpKind::Matmul => arity(2).and_then(|_| inputs[0].matmul(inputs[1])),
            OpKind::Sum => arity(1).map(|_| inputs[0].sum()),
            OpKind::Mean => arity(1).map(|_| inputs[0].mean()),
            OpKind::Abs => arity(1).map(|_| inputs[0].abs()),
            OpKind::Log => arity(1).map(|_| inputs[0].log()),
            OpKind::Exp => arity(1).map(|_| inputs[0].exp()),
            OpKind::Sin => arity(1).map(|_| inputs[0].sin()),
            OpKind::Tanh => arity(1).map(|_| inputs[0].tanh()),
            OpKind::Concat => Var::concat(inputs),
            OpKind::Slice { start, end } => arity(1).and_then(|_| inputs[0].slice(*start, *end)),
            OpKind::StftMagnitude { window, hop } => {
                arity(1)?;
                let plan = Rc::new(StftPlan::new(*window, *hop)?);
                inputs[0].stft(plan)?.complex_abs()
            }
        }
    }
}

fn shape_mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

fn invalid(op: &'static str, msg: String) -> Error {
    Error::InvalidShape { op, msg }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `q / sqrt(q + eps)`, `q = re^2 + im^2`.
pub(crate) fn modulus(re: f64, im: f64) -> f64 {
    libm::sqrt(re * re + im * im)
}

/// `d modulus / d re = re * slope` (likewise for `im`) with `slope = 1 / r`,
/// and the zero subgradient at the origin.
fn modulus_slope(re: f64, im: f64) -> f64 {
    let r = libm::sqrt(re * re + im * im);
    if r > 0.0 {
        1.0 / r
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// Arithmetic is fallible (shape checks), so these are methods, not operator impls.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn unary_op(self, u: Unary) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let value: Vec<f64> = n
                .value
                .iter()
                .map(|&x| match u {
                    Unary::Abs => libm::fabs(x),
                    Unary::Log => libm::log(if x >= LOG_FLOOR { x } else { LOG_FLOOR }),
                    Unary::Exp => libm::exp(x),
                    Unary::Sin => libm::sin(x),
                    Unary::Cos => libm::cos(x),
                    Unary::Tanh => libm::tanh(x),
                    Unary::Softplus => softplus(x),
                    Unary::Square => x * x,
                })
                .collect();
            (n.shape.clone(), value, n.requires_grad)
        };
        self.tape.push(shape, value, Op::Unary(self.id, u), rg)
    }

    fn same_shape(self, other: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(shape_mismatch(op, &a.shape, &b.shape));
            }
            let v = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, value, rec, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "div", |x, y| x / y, Op::Div(self.id, other.id))
    }

    /// Adds a `[c]` row vector to every row of a `[r, c]` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let (m, r) = (&nodes[self.id], &nodes[row.id]);
            if m.shape.len() != 2 || r.value.len() != m.shape[1] {
                return Err(shape_mismatch("add_row", &m.shape, &r.shape));
            }
            let c = m.shape[1];
            let v = m.value.iter().enumerate().map(|(i, x)| x + r.value[i % c]).collect();
            (m.shape.clone(), v, m.requires_grad || r.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::AddRow(self.id, row.id), rg))
    }

    /// Multiplies every element by a one-element tensor.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let (a, sv) = (&nodes[self.id], &nodes[s.id]);
            if sv.value.len() != 1 {
                return Err(shape_mismatch("mul_scalar", &a.shape, &sv.shape));
            }
            let c = sv.value[0];
            (a.shape.clone(), a.value.iter().map(|x| x * c).collect(), a.requires_grad || sv.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::MulScalar(self.id, s.id), rg))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            (a.shape.clone(), a.value.iter().map(|x| x * c).collect(), a.requires_grad)
        };
        self.tape.push(shape, value, Op::Scale(self.id, c), rg)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            (a.shape.clone(), a.value.iter().map(|x| x + c).collect(), a.requires_grad)
        };
        self.tape.push(shape, value, Op::Offset(self.id), rg)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(shape_mismatch("matmul", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            matmul_into(&a.value, &b.value, m, k, n, &mut out);
            (vec![m, n], out, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::Matmul(self.id, other.id), rg))
    }

    pub fn sum(self) -> Var<'t> {
        let (v, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            (a.value.iter().sum::<f64>(), a.requires_grad)
        };
        self.tape.push(vec![1], vec![v], Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let (v, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            (a.value.iter().sum::<f64>() / a.value.len().max(1) as f64, a.requires_grad)
        };
        self.tape.push(vec![1], vec![v], Op::Mean(self.id), rg)
    }

    /// Column sums of a `[r, c]` matrix.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(invalid("sum_rows", format!("expects a matrix, got {:?}", a.shape)));
            }
            let c = a.shape[1];
            let mut out = vec![0.0; c];
            for (i, x) in a.value.iter().enumerate() {
                out[i % c] += x;
            }
            (vec![c], out, a.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::SumRows(self.id), rg))
    }

    /// Absolute value; the adjoint at exactly zero is zero.
    pub fn abs(self) -> Var<'t> {
        self.unary_op(Unary::Abs)
    }

    /// Natural log with the input clamped below at [`LOG_FLOOR`].
    pub fn log(self) -> Var<'t> {
        self.unary_op(Unary::Log)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary_op(Unary::Exp)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary_op(Unary::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary_op(Unary::Cos)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary_op(Unary::Tanh)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary_op(Unary::Softplus)
    }

    pub fn square(self) -> Var<'t> {
        self.unary_op(Unary::Square)
    }

    /// Flat concatenation into a 1-D tensor.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs".into()))?;
        let tape = first.tape;
        let (value, rg) = {
            let nodes = tape.nodes();
            let mut v = Vec::new();
            let mut rg = false;
            for p in parts {
                v.extend_from_slice(&nodes[p.id].value);
                rg |= nodes[p.id].requires_grad;
            }
            (v, rg)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(vec![value.len()], value, Op::Concat(ids), rg))
    }

    /// Concatenation of `[r, c_i]` matrices along columns.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| invalid("concat_cols", "no inputs".into()))?;
        let tape = first.tape;
        let (shape, value, rg) = {
            let nodes = tape.nodes();
            let r0 = &nodes[first.id].shape;
            if r0.len() != 2 {
                return Err(invalid("concat_cols", format!("expects matrices, got {r0:?}")));
            }
            let rows = r0[0];
            let mut total = 0;
            let mut rg = false;
            for p in parts {
                let s = &nodes[p.id].shape;
                if s.len() != 2 || s[0] != rows {
                    return Err(shape_mismatch("concat_cols", r0, s));
                }
                total += s[1];
                rg |= nodes[p.id].requires_grad;
            }
            let mut v = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    let c = nodes[p.id].shape[1];
                    v.extend_from_slice(&nodes[p.id].value[r * c..(r + 1) * c]);
                }
            }
            (vec![rows, total], v, rg)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(shape, value, Op::ConcatCols(ids), rg))
    }

    /// Flat slice `[start, end)` as a 1-D tensor.
    pub fn slice(self, start: usize, end: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if start > end || end > a.value.len() {
                return Err(invalid("slice", format!("range {start}..{end} out of bounds for {:?}", a.shape)));
            }
            (a.value[start..end].to_vec(), a.requires_grad)
        };
        Ok(self.tape.push(vec![end - start], value, Op::Slice(self.id, start), rg))
    }

    /// Columns `[start, end)` of a `[r, c]` matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 2 || start > end || end > a.shape[1] {
                return Err(invalid("slice_cols", format!("columns {start}..{end} out of bounds for {:?}", a.shape)));
            }
            let (rows, c) = (a.shape[0], a.shape[1]);
            let mut v = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                v.extend_from_slice(&a.value[r * c + start..r * c + end]);
            }
            (vec![rows, end - start], v, a.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::SliceCols(self.id, start, end), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if shape.iter().product::<usize>() != a.value.len() {
                return Err(shape_mismatch("reshape", &a.shape, shape));
            }
            (a.value.clone(), a.requires_grad)
        };
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape(self.id), rg))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(invalid("transpose", format!("expects a matrix, got {:?}", a.shape)));
            }
            let (r, c) = (a.shape[0], a.shape[1]);
            let mut v = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    v[j * r + i] = a.value[i * c + j];
                }
            }
            (vec![c, r], v, a.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::Transpose(self.id), rg))
    }

    /// Short-time Fourier transform of a 1-D signal; output `[2, frames, bins]`.
    pub fn stft(self, plan: Rc<StftPlan>) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 1 {
                return Err(invalid("stft", format!("expects a 1-D signal, got {:?}", a.shape)));
            }
            let frames = plan.frames(a.value.len())?;
            let mut out = vec![0.0; 2 * frames * plan.bins()];
            plan.forward(&a.value, &mut out);
            (vec![2, frames, plan.bins()], out, a.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::Stft(self.id, plan), rg))
    }

    /// Modulus over a `[2, ...]` tensor. Exactly homogeneous; the
    /// derivative at the origin is taken as zero.
    pub fn complex_abs(self) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.first() != Some(&2) {
                return Err(invalid("complex_abs", format!("expects leading dimension 2, got {:?}", a.shape)));
            }
            let half = a.value.len() / 2;
            let v = (0..half).map(|i| modulus(a.value[i], a.value[half + i])).collect();
            let shape = if a.shape.len() == 1 { vec![1] } else { a.shape[1..].to_vec() };
            (shape, v, a.requires_grad)
        };
        Ok(self.tape.push(shape, value, Op::ComplexAbs(self.id), rg))
    }

    /// Harmonics-plus-noise oscillator bank; `f0: [F]`, `amps: [F, H]`,
    /// `noise_gain: [F]`, output `[F * hop]`.
    pub fn harmonic(f0: Var<'t>, amps: Var<'t>, noise_gain: Var<'t>, plan: Rc<HarmonicPlan>) -> Result<Var<'t>> {
        let tape = f0.tape;
        let (len, value, rg) = {
            let nodes = tape.nodes();
            let (f, a, g) = (&nodes[f0.id], &nodes[amps.id], &nodes[noise_gain.id]);
            let frames = f.value.len();
            if frames == 0 || a.shape != [frames, plan.harmonics] || g.value.len() != frames {
                return Err(invalid(
                    "harmonic",
                    format!("f0 {:?}, amps {:?}, noise gain {:?} with {} harmonics", f.shape, a.shape, g.shape, plan.harmonics),
                ));
            }
            let len = frames * plan.hop;
            if plan.noise.len() != len {
                return Err(invalid("harmonic", format!("noise realization has {} samples, need {len}", plan.noise.len())));
            }
            let mut out = vec![0.0; len];
            plan.forward(&f.value, &a.value, &g.value, &mut out);
            (len, out, f.requires_grad || a.requires_grad || g.requires_grad)
        };
        Ok(tape.push(vec![len], value, Op::Harmonic(f0.id, amps.id, noise_gain.id, plan), rg))
    }

    /// Frame-wise lattice all-pole filter; `k: [F, order]` reflection
    /// coefficients, each strictly inside `(-1, 1)`.
    pub fn allpole(self, k: Var<'t>, plan: AllPolePlan) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (x, kn) = (&nodes[self.id], &nodes[k.id]);
            let n = x.value.len();
            let frames = n.div_ceil(plan.hop.max(1));
            let expected = [frames, plan.order];
            if x.shape.len() != 1 || (plan.order > 0 && kn.shape != expected) {
                return Err(shape_mismatch("allpole", &x.shape, &kn.shape));
            }
            if let Some(pos) = kn.value.iter().position(|v| !(v.abs() < 1.0)) {
                return Err(Error::UnstableFilter { frame: pos / plan.order.max(1), index: pos % plan.order.max(1), value: kn.value[pos] });
            }
            let mut y = vec![0.0; n];
            plan.forward(&x.value, &kn.value, &mut y);
            (y, x.requires_grad || kn.requires_grad)
        };
        let n = value.len();
        Ok(self.tape.push(vec![n], value, Op::AllPole(self.id, k.id, plan), rg))
    }

    /// Complex frequency-domain filtering of a 1-D real signal; output `[2, n]`.
    pub fn filter(self, plan: Rc<FilterPlan>) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 1 || a.value.len() != plan.input_len() {
                return Err(invalid("filter", format!("expects [{}], got {:?}", plan.input_len(), a.shape)));
            }
            let mut out = vec![0.0; 2 * a.value.len()];
            plan.forward(&a.value, &mut out);
            (out, a.requires_grad)
        };
        let n = value.len() / 2;
        Ok(self.tape.push(vec![2, n], value, Op::Filter(self.id, plan), rg))
    }

    /// Strided FIR smoothing of a 1-D signal.
    pub fn lowpass(self, plan: Rc<LowpassPlan>) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 1 {
                return Err(invalid("lowpass", format!("expects a 1-D signal, got {:?}", a.shape)));
            }
            let mut out = vec![0.0; plan.output_len(a.value.len())];
            plan.forward(&a.value, &mut out);
            (out, a.requires_grad)
        };
        let n = value.len();
        Ok(self.tape.push(vec![n], value, Op::Lowpass(self.id, plan), rg))
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, src: &[f64]) {
    if let Some(d) = slot(nodes, grads, id) {
        for (a, b) in d.iter_mut().zip(src) {
            *a += b;
        }
    }
}

/// Accumulates the input adjoints of node `id` given its output adjoint `g`.
pub(crate) fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id];
    match &out.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, g);
            add_into(nodes, grads, *b, g);
        }
        Op::Sub(a, b) => {
            add_into(nodes, grads, *a, g);
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g.iter().zip(bv)).for_each(|(x, (gi, bi))| *x += gi * bi);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (gi, ai))| *x += gi * ai);
            }
        }
        Op::Div(a, b) => {
            let bv = &nodes[*b].value;
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g.iter().zip(bv)).for_each(|(x, (gi, bi))| *x += gi / bi);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for i in 0..d.len() {
                    d[i] -= g[i] * out.value[i] / bv[i];
                }
            }
        }
        Op::AddRow(m, r) => {
            add_into(nodes, grads, *m, g);
            if let Some(d) = slot(nodes, grads, *r) {
                let c = d.len();
                for (i, gi) in g.iter().enumerate() {
                    d[i % c] += gi;
                }
            }
        }
        Op::MulScalar(a, s) => {
            let c = nodes[*s].value[0];
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * c);
            }
            if let Some(d) = slot(nodes, grads, *s) {
                d[0] += g.iter().zip(&nodes[*a].value).map(|(gi, ai)| gi * ai).sum::<f64>();
            }
        }
        Op::Scale(a, c) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * c);
            }
        }
        Op::Offset(a) | Op::Reshape(a) => add_into(nodes, grads, *a, g),
        Op::Matmul(a, b) => {
            let (an, bn) = (&nodes[*a], &nodes[*b]);
            let (m, k, n) = (an.shape[0], an.shape[1], bn.shape[1]);
            if an.requires_grad {
                // ga = g b^T, as row-by-row dot products.
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        ga[i * k + p] = dot(gi, &bn.value[p * n..(p + 1) * n]);
                    }
                }
                add_into(nodes, grads, *a, &ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // gb += a^T g, one output row at a time so each row stays in cache.
                for p in 0..k {
                    let row = &mut gb[p * n..(p + 1) * n];
                    for i in 0..m {
                        let av = an.value[i * k + p];
                        if av != 0.0 {
                            for (o, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                let s = g[0] / d.len().max(1) as f64;
                d.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::SumRows(a) => {
            if let Some(d) = slot(nodes, grads, *a) {
                let c = g.len();
                for (i, x) in d.iter_mut().enumerate() {
                    *x += g[i % c];
                }
            }
        }
        Op::Unary(a, u) => {
            let x = &nodes[*a].value;
            let y = &out.value;
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..d.len() {
                    let dy = match u {
                        Unary::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Log => {
                            if x[i] >= LOG_FLOOR {
                                1.0 / x[i]
                            } else {
                                0.0
                            }
                        }
                        Unary::Exp => y[i],
                        Unary::Sin => libm::cos(x[i]),
                        Unary::Cos => -libm::sin(x[i]),
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Softplus => sigmoid(x[i]),
                        Unary::Square => 2.0 * x[i],
                    };
                    d[i] += g[i] * dy;
                }
            }
        }
        Op::Concat(ids) => {
            let mut off = 0;
            for &p in ids {
                let n = nodes[p].value.len();
                add_into(nodes, grads, p, &g[off..off + n]);
                off += n;
            }
        }
        Op::ConcatCols(ids) => {
            let rows = out.shape[0];
            let total = out.shape[1];
            let mut col = 0;
            for &p in ids {
                let c = nodes[p].shape[1];
                if let Some(d) = slot(nodes, grads, p) {
                    for r in 0..rows {
                        for j in 0..c {
                            d[r * c + j] += g[r * total + col + j];
                        }
                    }
                }
                col += c;
            }
        }
        Op::Slice(a, start) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for (i, gi) in g.iter().enumerate() {
                    d[start + i] += gi;
                }
            }
        }
        Op::SliceCols(a, start, end) => {
            let c = nodes[*a].shape[1];
            let w = end - start;
            if let Some(d) = slot(nodes, grads, *a) {
                for (i, gi) in g.iter().enumerate() {
                    d[(i / w) * c + start + i % w] += gi;
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Stft(a, plan) => {
            if let Some(d) = slot(nodes, grads, *a) {
                plan.adjoint(g, d);
            }
        }
        Op::ComplexAbs(a) => {
            let x = &nodes[*a].value;
            let half = x.len() / 2;
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..half {
                    let w = modulus_slope(x[i], x[half + i]);
                    d[i] += g[i] * x[i] * w;
                    d[half + i] += g[i] * x[half + i] * w;
                }
            }
        }
        Op::Harmonic(f, a, n, plan) => {
            let (fv, av) = (&nodes[*f].value, &nodes[*a].value);
            let mut gf = nodes[*f].requires_grad.then(|| vec![0.0; fv.len()]);
            let mut ga = nodes[*a].requires_grad.then(|| vec![0.0; av.len()]);
            let mut gn = nodes[*n].requires_grad.then(|| vec![0.0; nodes[*n].value.len()]);
            plan.adjoint(fv, av, g, gf.as_deref_mut(), ga.as_deref_mut(), gn.as_deref_mut());
            if let Some(v) = gf {
                add_into(nodes, grads, *f, &v);
            }
            if let Some(v) = ga {
                add_into(nodes, grads, *a, &v);
            }
            if let Some(v) = gn {
                add_into(nodes, grads, *n, &v);
            }
        }
        Op::AllPole(x, k, plan) => {
            let kv = &nodes[*k].value;
            let mut gx = nodes[*x].requires_grad.then(|| vec![0.0; out.value.len()]);
            let mut gk = (nodes[*k].requires_grad && plan.order > 0).then(|| vec![0.0; kv.len()]);
            plan.adjoint(kv, &out.value, g, gx.as_deref_mut(), gk.as_deref_mut());
            if let Some(v) = gx {
                add_into(nodes, grads, *x, &v);
            }
            if let Some(v) = gk {
                add_into(nodes, grads, *k, &v);
            }
        }
        Op::Filter(a, plan) => {
            if let Some(d) = slot(nodes, grads, *a) {
                plan.adjoint(g, d);
            }
        }
        Op::Lowpass(a, plan) => {
            if let Some(d) = slot(nodes, grads, *a) {
                plan.adjoint(g, d);
            }
        }
    }
}

/// Tangent of node `id` from its inputs' tangents; `None` when no input
/// carries one.
pub(crate) fn tangent(nodes: &[Node], id: usize, t: &[Option<Vec<f64>>]) -> Option<Vec<f64>> {
    let out = &nodes[id];
    let n = out.value.len();
    let get = |i: usize| t[i].as_deref();
    let zeros = |len: usize| vec![0.0; len];
    match &out.op {
        Op::Leaf => None,
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(out.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            match (get(*a), get(*b)) {
                (None, None) => None,
                (da, db) => Some((0..n).map(|i| da.map_or(0.0, |d| d[i]) + sign * db.map_or(0.0, |d| d[i])).collect()),
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            match (get(*a), get(*b)) {
                (None, None) => None,
                (da, db) => Some((0..n).map(|i| da.map_or(0.0, |d| d[i] * bv[i]) + db.map_or(0.0, |d| av[i] * d[i])).collect()),
            }
        }
        Op::Div(a, b) => {
            let bv = &nodes[*b].value;
            match (get(*a), get(*b)) {
                (None, None) => None,
                (da, db) => {
                    Some((0..n).map(|i| da.map_or(0.0, |d| d[i] / bv[i]) - db.map_or(0.0, |d| d[i] * out.value[i] / bv[i])).collect())
                }
            }
        }
        Op::AddRow(m, r) => match (get(*m), get(*r)) {
            (None, None) => None,
            (dm, dr) => {
                let c = nodes[*r].value.len();
                Some((0..n).map(|i| dm.map_or(0.0, |d| d[i]) + dr.map_or(0.0, |d| d[i % c])).collect())
            }
        },
        Op::MulScalar(a, s) => {
            let (av, c) = (&nodes[*a].value, nodes[*s].value[0]);
            match (get(*a), get(*s)) {
                (None, None) => None,
                (da, ds) => Some((0..n).map(|i| da.map_or(0.0, |d| d[i] * c) + ds.map_or(0.0, |d| d[0] * av[i])).collect()),
            }
        }
        Op::Scale(a, c) => get(*a).map(|d| d.iter().map(|v| v * c).collect()),
        Op::Offset(a) | Op::Reshape(a) => get(*a).map(<[f64]>::to_vec),
        Op::Matmul(a, b) => {
            let (an, bn) = (&nodes[*a], &nodes[*b]);
            let (m, k, nn) = (an.shape[0], an.shape[1], bn.shape[1]);
            match (get(*a), get(*b)) {
                (None, None) => None,
                (da, db) => {
                    let mut o = zeros(n);
                    if let Some(da) = da {
                        matmul_into(da, &bn.value, m, k, nn, &mut o);
                    }
                    if let Some(db) = db {
                        matmul_into(&an.value, db, m, k, nn, &mut o);
                    }
                    Some(o)
                }
            }
        }
        Op::Sum(a) => get(*a).map(|d| vec![d.iter().sum()]),
        Op::Mean(a) => get(*a).map(|d| vec![d.iter().sum::<f64>() / d.len().max(1) as f64]),
        Op::SumRows(a) => get(*a).map(|d| {
            let mut o = zeros(n);
            for (i, v) in d.iter().enumerate() {
                o[i % n] += v;
            }
            o
        }),
        Op::Unary(a, u) => {
            let x = &nodes[*a].value;
            let y = &out.value;
            get(*a).map(|d| {
                (0..n)
                    .map(|i| {
                        let dy = match u {
                            Unary::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Log => {
                                if x[i] >= LOG_FLOOR {
                                    1.0 / x[i]
                                } else {
                                    0.0
                                }
                            }
                            Unary::Exp => y[i],
                            Unary::Sin => libm::cos(x[i]),
                            Unary::Cos => -libm::sin(x[i]),
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Softplus => sigmoid(x[i]),
                            Unary::Square => 2.0 * x[i],
                        };
                        dy * d[i]
                    })
                    .collect()
            })
        }
        Op::Concat(ids) => {
            if ids.iter().all(|&p| t[p].is_none()) {
                return None;
            }
            let mut o = Vec::with_capacity(n);
            for &p in ids {
                match get(p) {
                    Some(d) => o.extend_from_slice(d),
                    None => o.extend(core::iter::repeat_n(0.0, nodes[p].value.len())),
                }
            }
            Some(o)
        }
        Op::ConcatCols(ids) => {
            if ids.iter().all(|&p| t[p].is_none()) {
                return None;
            }
            let (rows, total) = (out.shape[0], out.shape[1]);
            let mut o = zeros(n);
            let mut col = 0;
            for &p in ids {
                let c = nodes[p].shape[1];
                if let Some(d) = get(p) {
                    for r in 0..rows {
                        o[r * total + col..r * total + col + c].copy_from_slice(&d[r * c..(r + 1) * c]);
                    }
                }
                col += c;
            }
            Some(o)
        }
        Op::Slice(a, start) => get(*a).map(|d| d[*start..*start + n].to_vec()),
        Op::SliceCols(a, start, end) => get(*a).map(|d| {
            let c = nodes[*a].shape[1];
            let rows = nodes[*a].shape[0];
            let mut o = Vec::with_capacity(n);
            for r in 0..rows {
                o.extend_from_slice(&d[r * c + start..r * c + end]);
            }
            o
        }),
        Op::Transpose(a) => get(*a).map(|d| {
            let (r, c) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let mut o = zeros(n);
            for i in 0..r {
                for j in 0..c {
                    o[j * r + i] = d[i * c + j];
                }
            }
            o
        }),
        Op::Stft(a, plan) => get(*a).map(|d| {
            let mut o = zeros(n);
            plan.forward(d, &mut o);
            o
        }),
        Op::ComplexAbs(a) => get(*a).map(|d| {
            let x = &nodes[*a].value;
            (0..n).map(|i| (x[i] * d[i] + x[n + i] * d[n + i]) * modulus_slope(x[i], x[n + i])).collect()
        }),
        Op::Harmonic(f, a, g, plan) => {
            if get(*f).is_none() && get(*a).is_none() && get(*g).is_none() {
                return None;
            }
            let mut o = zeros(n);
            plan.tangent(&nodes[*f].value, &nodes[*a].value, get(*f), get(*a), get(*g), &mut o);
            Some(o)
        }
        Op::AllPole(x, k, plan) => {
            if get(*x).is_none() && get(*k).is_none() {
                return None;
            }
            let mut o = zeros(n);
            plan.tangent(&nodes[*k].value, &out.value, get(*x), get(*k), &mut o);
            Some(o)
        }
        Op::Filter(a, plan) => get(*a).map(|d| {
            let mut o = zeros(n);
            plan.forward(d, &mut o);
            o
        }),
        Op::Lowpass(a, plan) => get(*a).map(|d| {
            let mut o = zeros(n);
            plan.forward(d, &mut o);
            o
        }),
    }
}
