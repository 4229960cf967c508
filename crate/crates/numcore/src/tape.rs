//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value; [`Tape::backward`]
//! walks the nodes in reverse append order, so each node is visited once and
//! after all of its consumers. A tape is meant to live for one forward/backward
//! pass and is then dropped.

use std::rc::Rc;

use crate::error::{NumError, Result};
use crate::linalg::Lu;
use crate::param::{Grads, ParamId, ParamStore};
use crate::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, softmax_row, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Recip(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Softmax(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    RowNorm(Var),
    Min(Var, usize),
    LogAbsDet(Var, Tensor),
    Inverse(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_to(slot: &mut Option<Vec<f64>>, contribution: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution.to_vec()),
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'s> Tape<'s> {
    /// A tape without parameters; inputs enter through [`Tape::leaf`].
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            param_vars: vec![None; store.len()],
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Differentiable input whose gradient is available through [`Tape::grad`].
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// Registers a parameter on first use; later calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| NumError::Contract("tape has no parameter store".into()))?;
        if let Some(v) = self.param_vars[id.index()] {
            return Ok(v);
        }
        let v = self.push("param", store.get(id).clone(), Op::Param, true)?;
        self.param_vars[id.index()] = Some(v);
        Ok(v)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(name, value, op, ng)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(name, value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let cols = *av.shape().last().unwrap();
        if rv.len() != cols {
            return Err(dim_err(name, av, rv));
        }
        let data = av
            .data()
            .chunks(cols)
            .flat_map(|r| r.iter().zip(rv.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(row);
        self.push(name, value, op, ng)
    }

    /// `a + row` with `row` broadcast over the leading axis (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// `a ⊙ row` with `row` broadcast over the leading axis.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    /// `a + s` for a one-element `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(dim_err("add_scalar", self.value(a), sv));
        }
        let c = sv.data()[0];
        let value = self.value(a).map(|x| x + c);
        let ng = self.needs(a) || self.needs(s);
        self.push("add_scalar", value, Op::AddScalar(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("shift", a, |x| x + c, Op::Shift(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "gelu",
            a,
            |x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary("recip", a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// Hard clamp; the gradient is zero wherever the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (n, k2) = bv.dims2()?;
        if k != k2 {
            return Err(dim_err("matmul_bt", av, bv));
        }
        let value = Tensor::from_parts(vec![m, n], matmul_bt_raw(av.data(), bv.data(), m, k, n));
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul_bt", value, Op::MatMulBt(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let ng = self.needs(a);
        self.push("transpose", value, Op::Transpose(a), ng)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Row-wise softmax where positions with `keep[i] == false` have their
    /// score replaced by the masked sentinel, giving an exact zero weight.
    /// `keep` is laid out like the input (row-major).
    pub fn masked_softmax(&mut self, a: Var, keep: Rc<[bool]>) -> Result<Var> {
        if keep.len() != self.value(a).len() {
            return Err(NumError::Contract(format!(
                "mask of {} entries for scores of shape {:?}",
                keep.len(),
                self.shape(a)
            )));
        }
        self.softmax_impl(a, Some(keep))
    }

    fn softmax_impl(&mut self, a: Var, keep: Option<Rc<[bool]>>) -> Result<Var> {
        let av = self.value(a);
        let cols = *av.shape().last().unwrap();
        let mut scratch = vec![0.0; cols];
        let mut out = vec![0.0; av.len()];
        for (r, (src, dst)) in av.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            scratch.copy_from_slice(src);
            if let Some(k) = &keep {
                for (s, &kp) in scratch.iter_mut().zip(&k[r * cols..(r + 1) * cols]) {
                    if !kp {
                        *s = crate::tensor::MASKED;
                    }
                }
            }
            softmax_row(&scratch, dst).map_err(|_| NumError::DegenerateMask { row: r })?;
        }
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        let ng = self.needs(a);
        self.push("softmax", value, Op::Softmax(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        if start >= end || end > c {
            return Err(NumError::Contract(format!("slice_cols {start}..{end} of {:?}", av.shape())));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for row in av.data().chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::from_parts(vec![r, w], data);
        let ng = self.needs(a);
        self.push("slice_cols", value, Op::SliceCols(a, start, end), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(dim_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::from_parts(vec![rows, total], data);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        if start >= end || end > r {
            return Err(NumError::Contract(format!("slice_rows {start}..{end} of {:?}", av.shape())));
        }
        let value = Tensor::from_parts(vec![end - start, c], av.data()[start * c..end * c].to_vec());
        let ng = self.needs(a);
        self.push("slice_rows", value, Op::SliceRows(a, start, end), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(dim_err("concat_rows", self.value(parts[0]), self.value(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_parts(vec![rows, cols], data);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Output row `i` is input row `index[i]`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(NumError::Contract(format!("gather_rows index {i} of {r} rows")));
            }
            data.extend_from_slice(av.row(i));
        }
        let value = Tensor::from_parts(vec![index.len(), c], data);
        let ng = self.needs(a);
        self.push("gather_rows", value, Op::GatherRows(a, index.into()), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.needs(a);
        self.push("reshape", value, Op::Reshape(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push("sum", value, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::scalar(av.sum() / av.len() as f64);
        let ng = self.needs(a);
        self.push("mean", value, Op::MeanAll(a), ng)
    }

    /// Sum across columns: `m×n → m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        let data = av.data().chunks(c).map(|row| row.iter().sum()).collect();
        let value = Tensor::from_parts(vec![r, 1], data);
        let ng = self.needs(a);
        self.push("sum_cols", value, Op::SumCols(a), ng)
    }

    /// Euclidean norm of each row: `m×n → m×1`. The subgradient at a zero
    /// row is taken as zero.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        let data = av
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::from_parts(vec![r, 1], data);
        let ng = self.needs(a);
        self.push("row_norm", value, Op::RowNorm(a), ng)
    }

    /// Smallest element as a scalar. Ties go to the lowest flat index, and
    /// the gradient is routed to that element only.
    pub fn min(&mut self, a: Var) -> Result<Var> {
        let (idx, val) = self
            .value(a)
            .data()
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        let ng = self.needs(a);
        self.push("min", Tensor::scalar(val), Op::Min(a, idx), ng)
    }

    /// Index of the element selected by a [`Tape::min`] node.
    pub fn argmin_of(&self, v: Var) -> Option<usize> {
        match self.nodes[v.0].op {
            Op::Min(_, i) => Some(i),
            _ => None,
        }
    }

    /// `log|det a|` of a square matrix via LU with partial pivoting.
    pub fn log_abs_det(&mut self, a: Var) -> Result<Var> {
        let lu = Lu::new(self.value(a))?;
        let value = Tensor::scalar(lu.log_abs_det());
        let inv_t = lu.inverse().transpose()?;
        let ng = self.needs(a);
        self.push("log_abs_det", value, Op::LogAbsDet(a, inv_t), ng)
    }

    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let value = Lu::new(self.value(a))?.inverse();
        let ng = self.needs(a);
        self.push("inverse", value, Op::Inverse(a), ng)
    }

    /// Accumulates `d loss / d node` for every node that depends on a leaf or
    /// parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(NumError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    /// Parameter gradients of the last backward pass.
    pub fn param_grads(&self) -> Grads {
        let slots = self
            .param_vars
            .iter()
            .map(|pv| pv.and_then(|v| self.grads.get(v.0).cloned().flatten()))
            .collect();
        Grads { slots }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut give = |v: Var, c: &[f64]| {
            if needs(v) {
                add_to(&mut grads[v.0], c);
            }
        };
        let elementwise = |x: &[f64], f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
            x.iter().zip(out).zip(g).map(|((&x, &y), &g)| f(x, y, g)).collect()
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                give(*a, g);
                give(*b, g);
            }
            Op::Sub(a, b) => {
                give(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                give(*b, &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                give(*a, &ga);
                give(*b, &gb);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g / b).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(av)
                    .zip(bv)
                    .map(|((g, a), b)| -g * a / (b * b))
                    .collect();
                give(*a, &ga);
                give(*b, &gb);
            }
            Op::AddRow(a, row) => {
                give(*a, g);
                let cols = val(*row).len();
                let mut gr = vec![0.0; cols];
                for chunk in g.chunks(cols) {
                    gr.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                }
                give(*row, &gr);
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (val(*a), val(*row));
                let cols = rv.len();
                let ga: Vec<f64> = g
                    .chunks(cols)
                    .flat_map(|chunk| chunk.iter().zip(rv).map(|(g, r)| g * r))
                    .collect();
                let mut gr = vec![0.0; cols];
                for (gc, ac) in g.chunks(cols).zip(av.chunks(cols)) {
                    for ((s, g), a) in gr.iter_mut().zip(gc).zip(ac) {
                        *s += g * a;
                    }
                }
                give(*a, &ga);
                give(*row, &gr);
            }
            Op::AddScalar(a, s) => {
                give(*a, g);
                give(*s, &[g.iter().sum()]);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| c * v).collect();
                give(*a, &ga);
            }
            Op::Shift(a) => give(*a, g),
            Op::Relu(a) => give(*a, &elementwise(val(*a), &|x, _, g| if x > 0.0 { g } else { 0.0 })),
            Op::Gelu(a) => give(
                *a,
                &elementwise(val(*a), &|x, _, g| {
                    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x))
                }),
            ),
            Op::Tanh(a) => give(*a, &elementwise(val(*a), &|_, y, g| g * (1.0 - y * y))),
            Op::Sigmoid(a) => give(*a, &elementwise(val(*a), &|_, y, g| g * y * (1.0 - y))),
            Op::Exp(a) => give(*a, &elementwise(val(*a), &|_, y, g| g * y)),
            Op::Log(a) => give(*a, &elementwise(val(*a), &|x, _, g| g / x)),
            Op::Abs(a) => give(*a, &elementwise(val(*a), &|x, _, g| g * x.signum())),
            Op::Recip(a) => give(*a, &elementwise(val(*a), &|_, y, g| -g * y * y)),
            Op::Square(a) => give(*a, &elementwise(val(*a), &|x, _, g| 2.0 * g * x)),
            Op::Clamp(a, lo, hi) => give(
                *a,
                &elementwise(val(*a), &|x, _, g| if x < *lo || x > *hi { 0.0 } else { g }),
            ),
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.dims2().unwrap().1;
                if needs(*a) {
                    give(*a, &matmul_bt_raw(g, val(*b), m, n, k));
                }
                if needs(*b) {
                    give(*b, &matmul_at_raw(val(*a), g, m, k, n));
                }
            }
            Op::MatMulBt(a, b) => {
                // c = a·bᵀ, a: m×k, b: n×k
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.dims2().unwrap().0;
                if needs(*a) {
                    give(*a, &matmul_raw(g, val(*b), m, n, k));
                }
                if needs(*b) {
                    give(*b, &matmul_at_raw(g, val(*a), m, n, k));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2().unwrap();
                let gt = Tensor::from_parts(vec![r, c], g.to_vec()).transpose().unwrap();
                give(*a, gt.data());
            }
            Op::Softmax(a) => {
                let cols = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for ((gc, yc), dst) in g.chunks(cols).zip(out.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f64 = gc.iter().zip(yc).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dst.iter_mut().zip(gc).zip(yc) {
                        *d = y * (g - dot);
                    }
                }
                give(*a, &ga);
            }
            Op::SliceCols(a, start, end) => {
                let c = self.nodes[a.0].value.dims2().unwrap().1;
                let w = end - start;
                let mut ga = vec![0.0; val(*a).len()];
                for (dst, src) in ga.chunks_mut(c).zip(g.chunks(w)) {
                    dst[*start..*end].copy_from_slice(src);
                }
                give(*a, &ga);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2().unwrap().1;
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.dims2().unwrap().1;
                    if needs(p) {
                        let gp: Vec<f64> = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        give(p, &gp);
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start, end) => {
                let c = self.nodes[a.0].value.dims2().unwrap().1;
                let mut ga = vec![0.0; val(*a).len()];
                ga[start * c..end * c].copy_from_slice(g);
                give(*a, &ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    give(p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::GatherRows(a, index) => {
                let c = self.nodes[a.0].value.dims2().unwrap().1;
                let mut ga = vec![0.0; val(*a).len()];
                for (&src_row, gr) in index.iter().zip(g.chunks(c)) {
                    ga[src_row * c..(src_row + 1) * c]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(d, v)| *d += v);
                }
                give(*a, &ga);
            }
            Op::Reshape(a) => give(*a, g),
            Op::SumAll(a) => give(*a, &vec![g[0]; val(*a).len()]),
            Op::MeanAll(a) => {
                let n = val(*a).len();
                give(*a, &vec![g[0] / n as f64; n]);
            }
            Op::SumCols(a) => {
                let c = self.nodes[a.0].value.dims2().unwrap().1;
                let ga: Vec<f64> = g.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
                give(*a, &ga);
            }
            Op::RowNorm(a) => {
                let c = self.nodes[a.0].value.dims2().unwrap().1;
                let ga: Vec<f64> = val(*a)
                    .chunks(c)
                    .zip(out.iter().zip(g))
                    .flat_map(|(row, (&norm, &gv))| {
                        row.iter()
                            .map(move |&x| if norm > 0.0 { gv * x / norm } else { 0.0 })
                    })
                    .collect();
                give(*a, &ga);
            }
            Op::Min(a, idx) => {
                let mut ga = vec![0.0; val(*a).len()];
                ga[*idx] = g[0];
                give(*a, &ga);
            }
            Op::LogAbsDet(a, inv_t) => {
                let ga: Vec<f64> = inv_t.data().iter().map(|v| g[0] * v).collect();
                give(*a, &ga);
            }
            Op::Inverse(a) => {
                // d(A⁻¹) = -A⁻¹ dA A⁻¹  =>  gA = -A⁻ᵀ g A⁻ᵀ
                let n = node.value.dims2().unwrap().0;
                let left = matmul_at_raw(out, g, n, n, n);
                let ga: Vec<f64> = matmul_bt_raw(&left, out, n, n, n).iter().map(|v| -v).collect();
                give(*a, &ga);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[0.3, -1.2, 2.0, 0.1]])).unwrap();
        let s = tape.softmax(x).unwrap();
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap();
        for g in tape.grad(x).unwrap().data() {
            assert!(g.abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.0, 2.0]])).unwrap();
        assert!(matches!(tape.backward(x), Err(NumError::NonScalarLoss { .. })));
    }

    #[test]
    fn masked_softmax_zeroes_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[5.0, -3.0, 1.0]])).unwrap();
        let keep: Rc<[bool]> = vec![true, false, true].into();
        let s = tape.masked_softmax(x, keep).unwrap();
        assert_eq!(tape.value(s).data()[1], 0.0);
        let keep: Rc<[bool]> = vec![false, false, false].into();
        assert!(matches!(tape.masked_softmax(x, keep), Err(NumError::DegenerateMask { row: 0 })));
    }

    #[test]
    fn min_routes_to_lowest_index_on_tie() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[2.0], &[1.0], &[1.0]])).unwrap();
        let m = tape.min(x).unwrap();
        assert_eq!(tape.argmin_of(m), Some(1));
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1000.0)).unwrap();
        assert_eq!(tape.exp(x), Err(NumError::NonFinite { op: "exp" }));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0)).unwrap();
        let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(c, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
    }
}
