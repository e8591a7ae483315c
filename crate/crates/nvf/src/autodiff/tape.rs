//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Operations append nodes to a [`Tape`]; `backward` walks the tape once in
//! reverse and accumulates exact derivatives. The tape is append-only and
//! freezes after `backward` — recording onto a frozen tape is an error, as is
//! calling `backward` twice.
//!
//! Conventions:
//! * everything is `f64`;
//! * matrices are row-major, the leading dimension is the batch;
//! * "rowwise" ops (softmax, logsumexp, ...) treat a 1-d tensor as one row;
//! * any forward op that produces a non-finite value reports an error instead
//!   of letting NaN/inf propagate silently.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{NodeRef, Tensor};
use super::Parameter;
use crate::error::{Error, Result};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Operand of a recorded op: either an earlier node or an inline constant.
#[derive(Clone, Debug)]
enum Arg {
    Node(usize),
    Const(Tensor),
}

impl Arg {
    fn node(&self) -> Option<usize> {
        match self {
            Arg::Node(i) => Some(*i),
            Arg::Const(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Arg, Arg),
    Sub(Arg, Arg),
    Mul(Arg, Arg),
    Neg(Arg),
    AddScalar(Arg),
    MulScalar(Arg, f64),
    Matmul(Arg, Arg),
    Exp(Arg),
    Log(Arg),
    Tanh(Arg),
    Relu(Arg),
    Clamp(Arg, f64, f64),
    Sum(Arg),
    Mean(Arg),
    SumCols(Arg),
    BroadcastRows(Arg, usize),
    SliceCols(Arg, usize, usize),
    ConcatCols(Vec<Arg>),
    Softmax(Arg),
    LogSumExp(Arg),
    LogSoftmax(Arg),
    Reshape(Arg),
    Transpose(Arg),
    ReverseCols(Arg),
    Diag(Arg),
    GatherRows(Arg, Vec<usize>),
    SelectCols(Arg, Vec<usize>),
    StraightThrough(Arg),
    SolveLowerUnit { mat: Arg, rhs: Arg },
    SolveUpper { mat: Arg, rhs: Arg },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor, // detached forward value
}

/// Dynamic tape of recorded operations.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    frozen: Cell<bool>,
    // parameter name -> node index, so repeated `watch` of one parameter
    // reuses a single leaf and its gradient accumulates in one place
    named: RefCell<HashMap<String, usize>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            frozen: Cell::new(false),
            named: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn arg(&self, t: &Tensor, op: &'static str) -> Result<Arg> {
        match t.node {
            Some(nr) if nr.tape == self.id => Ok(Arg::Node(nr.idx)),
            Some(nr) => Err(Error::TapeMismatch { expected: self.id, found: nr.tape }),
            None => {
                let _ = op;
                Ok(Arg::Const(t.detach()))
            }
        }
    }

    fn push(&self, op: Op, shape: Vec<usize>, data: Vec<f64>, name: &'static str) -> Result<Tensor> {
        if self.frozen.get() {
            return Err(Error::FrozenTape { op: name });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let value = Tensor::from_shape(shape, data)?;
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node { op, value: value.clone() });
        Ok(value.with_node(NodeRef { tape: self.id, idx }))
    }

    /// Register an anonymous differentiable input (a leaf node).
    pub fn leaf(&self, t: &Tensor) -> Result<Tensor> {
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), "leaf")
    }

    /// Register a named parameter as a leaf; repeated calls with the same name
    /// return the same node so the gradient accumulates once per parameter.
    pub fn watch(&self, p: &Parameter) -> Result<Tensor> {
        if let Some(&idx) = self.named.borrow().get(&p.name) {
            let existing = &self.nodes.borrow()[idx].value;
            if existing.data() != p.value.data() {
                return Err(Error::InvalidModel(format!(
                    "two distinct parameters share the name `{}`",
                    p.name
                )));
            }
            return Ok(existing.with_node(NodeRef { tape: self.id, idx }));
        }
        let t = self.leaf(&p.value)?;
        if let Some(nr) = t.node {
            self.named.borrow_mut().insert(p.name.clone(), nr.idx);
        }
        Ok(t)
    }

    // ---- elementwise binary ----

    fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        Ok(())
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape(a, b, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.push(Op::Add(self.arg(a, "add")?, self.arg(b, "add")?), a.shape().to_vec(), data, "add")
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape(a, b, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.push(Op::Sub(self.arg(a, "sub")?, self.arg(b, "sub")?), a.shape().to_vec(), data, "sub")
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape(a, b, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.push(Op::Mul(self.arg(a, "mul")?, self.arg(b, "mul")?), a.shape().to_vec(), data, "mul")
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| -x).collect();
        self.push(Op::Neg(self.arg(a, "neg")?), a.shape().to_vec(), data, "neg")
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x + c).collect();
        self.push(Op::AddScalar(self.arg(a, "add_scalar")?), a.shape().to_vec(), data, "add_scalar")
    }

    pub fn mul_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x * c).collect();
        self.push(Op::MulScalar(self.arg(a, "mul_scalar")?, c), a.shape().to_vec(), data, "mul_scalar")
    }

    // ---- matmul ----

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", a.shape(), b.shape()),
            });
        }
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = matmul_raw(a.data(), n, k, b.data(), m);
        self.push(
            Op::Matmul(self.arg(a, "matmul")?, self.arg(b, "matmul")?),
            vec![n, m],
            data,
            "matmul",
        )
    }

    // ---- elementwise unary ----

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.exp()).collect();
        self.push(Op::Exp(self.arg(a, "exp")?), a.shape().to_vec(), data, "exp")
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.ln()).collect();
        self.push(Op::Log(self.arg(a, "log")?), a.shape().to_vec(), data, "log")
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(self.arg(a, "tanh")?), a.shape().to_vec(), data, "tanh")
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu(self.arg(a, "relu")?), a.shape().to_vec(), data, "relu")
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only where the input
    /// lies inside the interval (boundary included).
    pub fn clamp(&self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.max(lo).min(hi)).collect();
        self.push(Op::Clamp(self.arg(a, "clamp")?, lo, hi), a.shape().to_vec(), data, "clamp")
    }

    // ---- reductions ----

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let s: f64 = a.data().iter().sum();
        self.push(Op::Sum(self.arg(a, "sum")?), vec![], vec![s], "sum")
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        if a.is_empty() {
            return Err(Error::ShapeMismatch { op: "mean", detail: "empty tensor".into() });
        }
        let s: f64 = a.data().iter().sum::<f64>() / a.len() as f64;
        self.push(Op::Mean(self.arg(a, "mean")?), vec![], vec![s], "mean")
    }

    /// Per-row sum: `[n,d] -> [n]`; a vector reduces to a scalar.
    pub fn sum_cols(&self, a: &Tensor) -> Result<Tensor> {
        match a.shape().len() {
            2 => {
                let (n, d) = (a.shape()[0], a.shape()[1]);
                let mut out = vec![0.0; n];
                for r in 0..n {
                    out[r] = a.data()[r * d..(r + 1) * d].iter().sum();
                }
                self.push(Op::SumCols(self.arg(a, "sum_cols")?), vec![n], out, "sum_cols")
            }
            1 => {
                let s: f64 = a.data().iter().sum();
                self.push(Op::SumCols(self.arg(a, "sum_cols")?), vec![], vec![s], "sum_cols")
            }
            _ => Err(Error::ShapeMismatch {
                op: "sum_cols",
                detail: format!("need 1-d or 2-d, got {:?}", a.shape()),
            }),
        }
    }

    // ---- shape ops ----

    /// Repeat a tensor `n` times along a new leading axis:
    /// scalar -> `[n]`, `[d]` -> `[n,d]`.
    pub fn broadcast_rows(&self, a: &Tensor, n: usize) -> Result<Tensor> {
        if a.shape().len() > 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                detail: format!("need scalar or vector, got {:?}", a.shape()),
            });
        }
        let mut shape = vec![n];
        shape.extend_from_slice(a.shape());
        let mut data = Vec::with_capacity(n * a.len());
        for _ in 0..n {
            data.extend_from_slice(a.data());
        }
        self.push(Op::BroadcastRows(self.arg(a, "broadcast_rows")?, n), shape, data, "broadcast_rows")
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_cols(&self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let d = a.ncols();
        if start > end || end > d || a.shape().is_empty() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("range {start}..{end} of {:?}", a.shape()),
            });
        }
        let w = end - start;
        match a.shape().len() {
            1 => {
                let data = a.data()[start..end].to_vec();
                self.push(Op::SliceCols(self.arg(a, "slice_cols")?, start, end), vec![w], data, "slice_cols")
            }
            2 => {
                let n = a.shape()[0];
                let mut data = Vec::with_capacity(n * w);
                for r in 0..n {
                    data.extend_from_slice(&a.data()[r * d + start..r * d + end]);
                }
                self.push(Op::SliceCols(self.arg(a, "slice_cols")?, start, end), vec![n, w], data, "slice_cols")
            }
            _ => Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("need 1-d or 2-d, got {:?}", a.shape()),
            }),
        }
    }

    /// Concatenate along the last axis. All inputs must be 1-d, or all 2-d with
    /// the same number of rows.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat_cols", detail: "no inputs".into() });
        }
        let rank = parts[0].shape().len();
        if rank != 1 && rank != 2 {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                detail: format!("need 1-d or 2-d, got {:?}", parts[0].shape()),
            });
        }
        let mut args = Vec::with_capacity(parts.len());
        for p in parts {
            if p.shape().len() != rank || (rank == 2 && p.shape()[0] != parts[0].shape()[0]) {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("{:?} vs {:?}", parts[0].shape(), p.shape()),
                });
            }
            args.push(self.arg(p, "concat_cols")?);
        }
        let total: usize = parts.iter().map(|p| p.ncols()).sum();
        if rank == 1 {
            let mut data = Vec::with_capacity(total);
            for p in parts {
                data.extend_from_slice(p.data());
            }
            self.push(Op::ConcatCols(args), vec![total], data, "concat_cols")
        } else {
            let n = parts[0].shape()[0];
            let mut data = Vec::with_capacity(n * total);
            for r in 0..n {
                for p in parts {
                    let d = p.ncols();
                    data.extend_from_slice(&p.data()[r * d..(r + 1) * d]);
                }
            }
            self.push(Op::ConcatCols(args), vec![n, total], data, "concat_cols")
        }
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", a.shape(), shape),
            });
        }
        self.push(Op::Reshape(self.arg(a, "reshape")?), shape.to_vec(), a.data().to_vec(), "reshape")
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("need 2-d, got {:?}", a.shape()),
            });
        }
        let (n, m) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                data[c * n + r] = a.data()[r * m + c];
            }
        }
        self.push(Op::Transpose(self.arg(a, "transpose")?), vec![m, n], data, "transpose")
    }

    /// Reverse the last axis (rowwise for matrices).
    pub fn reverse_cols(&self, a: &Tensor) -> Result<Tensor> {
        let d = a.ncols();
        let n = a.nrows();
        if a.shape().is_empty() {
            return Err(Error::ShapeMismatch { op: "reverse_cols", detail: "scalar input".into() });
        }
        let mut data = vec![0.0; a.len()];
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] = a.data()[r * d + (d - 1 - c)];
            }
        }
        self.push(Op::ReverseCols(self.arg(a, "reverse_cols")?), a.shape().to_vec(), data, "reverse_cols")
    }

    /// Embed a vector as the diagonal of a square matrix.
    pub fn diag(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "diag",
                detail: format!("need 1-d, got {:?}", a.shape()),
            });
        }
        let d = a.len();
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = a.data()[i];
        }
        self.push(Op::Diag(self.arg(a, "diag")?), vec![d, d], data, "diag")
    }

    // ---- rowwise softmax family ----

    pub fn softmax(&self, a: &Tensor) -> Result<Tensor> {
        let (n, d) = rowwise_dims(a, "softmax")?;
        let mut data = vec![0.0; a.len()];
        for r in 0..n {
            let row = &a.data()[r * d..(r + 1) * d];
            softmax_row(row, &mut data[r * d..(r + 1) * d]);
        }
        self.push(Op::Softmax(self.arg(a, "softmax")?), a.shape().to_vec(), data, "softmax")
    }

    pub fn log_softmax(&self, a: &Tensor) -> Result<Tensor> {
        let (n, d) = rowwise_dims(a, "log_softmax")?;
        let mut data = vec![0.0; a.len()];
        for r in 0..n {
            let row = &a.data()[r * d..(r + 1) * d];
            let lse = logsumexp_row(row);
            for c in 0..d {
                data[r * d + c] = row[c] - lse;
            }
        }
        self.push(Op::LogSoftmax(self.arg(a, "log_softmax")?), a.shape().to_vec(), data, "log_softmax")
    }

    /// Rowwise log-sum-exp reduction: `[n,d] -> [n]`, `[d] -> scalar`.
    pub fn logsumexp(&self, a: &Tensor) -> Result<Tensor> {
        let (n, d) = rowwise_dims(a, "logsumexp")?;
        let mut data = vec![0.0; n];
        for r in 0..n {
            data[r] = logsumexp_row(&a.data()[r * d..(r + 1) * d]);
        }
        let shape = if a.shape().len() == 2 { vec![n] } else { vec![] };
        self.push(Op::LogSumExp(self.arg(a, "logsumexp")?), shape, data, "logsumexp")
    }

    // ---- indexing ----

    /// Gather rows of a matrix by index (duplicates allowed); gradients
    /// scatter-add back into the source rows.
    pub fn gather_rows(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if a.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: format!("need 2-d, got {:?}", a.shape()),
            });
        }
        let (s, d) = (a.shape()[0], a.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= s {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    detail: format!("row index {i} out of range 0..{s}"),
                });
            }
            data.extend_from_slice(&a.data()[i * d..(i + 1) * d]);
        }
        self.push(
            Op::GatherRows(self.arg(a, "gather_rows")?, idx.to_vec()),
            vec![idx.len(), d],
            data,
            "gather_rows",
        )
    }

    /// Pick one column per row: `out[i] = a[i, idx[i]]`.
    pub fn select_cols(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if a.shape().len() != 2 || idx.len() != a.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "select_cols",
                detail: format!("shape {:?} with {} indices", a.shape(), idx.len()),
            });
        }
        let d = a.shape()[1];
        let mut data = Vec::with_capacity(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            if c >= d {
                return Err(Error::ShapeMismatch {
                    op: "select_cols",
                    detail: format!("column index {c} out of range 0..{d}"),
                });
            }
            data.push(a.data()[r * d + c]);
        }
        self.push(
            Op::SelectCols(self.arg(a, "select_cols")?, idx.to_vec()),
            vec![idx.len()],
            data,
            "select_cols",
        )
    }

    /// Forward the given `value`, but route the gradient unchanged to `a`
    /// (straight-through estimator). Shapes must match.
    pub fn straight_through(&self, a: &Tensor, value: &Tensor) -> Result<Tensor> {
        Self::same_shape(a, value, "straight_through")?;
        self.push(
            Op::StraightThrough(self.arg(a, "straight_through")?),
            value.shape().to_vec(),
            value.data().to_vec(),
            "straight_through",
        )
    }

    // ---- triangular solves ----

    /// Solve `L z = y` per row of `rhs` for unit lower-triangular `L`
    /// (entries above the diagonal and the diagonal itself are ignored).
    pub fn solve_lower_unit(&self, mat: &Tensor, rhs: &Tensor) -> Result<Tensor> {
        let d = check_solve_shapes(mat, rhs, "solve_lower_unit")?;
        let n = rhs.shape()[0];
        let l = mat.data();
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let y = &rhs.data()[r * d..(r + 1) * d];
            let z = &mut data[r * d..(r + 1) * d];
            for i in 0..d {
                let mut acc = y[i];
                for j in 0..i {
                    acc -= l[i * d + j] * z[j];
                }
                z[i] = acc;
            }
        }
        self.push(
            Op::SolveLowerUnit {
                mat: self.arg(mat, "solve_lower_unit")?,
                rhs: self.arg(rhs, "solve_lower_unit")?,
            },
            vec![n, d],
            data,
            "solve_lower_unit",
        )
    }

    /// Solve `U z = y` per row of `rhs` for upper-triangular `U` (entries
    /// below the diagonal are ignored). A zero diagonal surfaces as a
    /// non-finite error.
    pub fn solve_upper(&self, mat: &Tensor, rhs: &Tensor) -> Result<Tensor> {
        let d = check_solve_shapes(mat, rhs, "solve_upper")?;
        let n = rhs.shape()[0];
        let u = mat.data();
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let y = &rhs.data()[r * d..(r + 1) * d];
            let z = &mut data[r * d..(r + 1) * d];
            for i in (0..d).rev() {
                let mut acc = y[i];
                for j in i + 1..d {
                    acc -= u[i * d + j] * z[j];
                }
                z[i] = acc / u[i * d + i];
            }
        }
        self.push(
            Op::SolveUpper {
                mat: self.arg(mat, "solve_upper")?,
                rhs: self.arg(rhs, "solve_upper")?,
            },
            vec![n, d],
            data,
            "solve_upper",
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Freezes the tape and returns the
    /// gradients of every node reachable from the loss; watched parameters are
    /// additionally addressable by name.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if self.frozen.get() {
            return Err(Error::BackwardTwice);
        }
        if !loss.shape().is_empty() {
            return Err(Error::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        let seed = match loss.node {
            Some(nr) if nr.tape == self.id => nr.idx,
            Some(nr) => return Err(Error::TapeMismatch { expected: self.id, found: nr.tape }),
            None => {
                return Err(Error::ShapeMismatch {
                    op: "backward",
                    detail: "loss is a constant with no tape node".into(),
                })
            }
        };
        self.frozen.set(true);

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[seed] = Some(vec![1.0]);

        for idx in (0..=seed).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[idx];
            self.propagate(&nodes, &mut grads, &node.op, &node.value, &g);
            grads[idx] = Some(g);
        }

        let by_name: HashMap<String, (usize, Vec<usize>)> = self
            .named
            .borrow()
            .iter()
            .map(|(name, &idx)| (name.clone(), (idx, nodes[idx].value.shape().to_vec())))
            .collect();
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor::from_shape(nodes[i].value.shape().to_vec(), data).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { tape: self.id, grads: out, by_name })
    }

    fn propagate(
        &self,
        nodes: &[Node],
        grads: &mut [Option<Vec<f64>>],
        op: &Op,
        value: &Tensor,
        g: &[f64],
    ) {
        let acc = |grads: &mut [Option<Vec<f64>>], arg: &Arg, contrib: Vec<f64>| {
            if let Some(i) = arg.node() {
                match &mut grads[i] {
                    Some(buf) => {
                        for (b, c) in buf.iter_mut().zip(&contrib) {
                            *b += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        };
        let val = |arg: &Arg| -> Tensor {
            match arg {
                Arg::Node(i) => nodes[*i].value.clone(),
                Arg::Const(t) => t.clone(),
            }
        };

        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, a, g.to_vec());
                acc(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, a, g.to_vec());
                acc(grads, b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let va = val(a);
                let vb = val(b);
                acc(grads, a, g.iter().zip(vb.data()).map(|(x, y)| x * y).collect());
                acc(grads, b, g.iter().zip(va.data()).map(|(x, y)| x * y).collect());
            }
            Op::Neg(a) => acc(grads, a, g.iter().map(|x| -x).collect()),
            Op::AddScalar(a) => acc(grads, a, g.to_vec()),
            Op::MulScalar(a, c) => acc(grads, a, g.iter().map(|x| x * c).collect()),
            Op::Matmul(a, b) => {
                let va = val(a);
                let vb = val(b);
                let (n, k) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[1];
                // ga = g @ b^T
                let mut ga = vec![0.0; n * k];
                for r in 0..n {
                    for c in 0..k {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g[r * m + j] * vb.data()[c * m + j];
                        }
                        ga[r * k + c] = s;
                    }
                }
                // gb = a^T @ g
                let mut gb = vec![0.0; k * m];
                for r in 0..k {
                    for c in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += va.data()[j * k + r] * g[j * m + c];
                        }
                        gb[r * m + c] = s;
                    }
                }
                acc(grads, a, ga);
                acc(grads, b, gb);
            }
            Op::Exp(a) => {
                acc(grads, a, g.iter().zip(value.data()).map(|(x, y)| x * y).collect());
            }
            Op::Log(a) => {
                let va = val(a);
                acc(grads, a, g.iter().zip(va.data()).map(|(x, y)| x / y).collect());
            }
            Op::Tanh(a) => {
                acc(grads, a, g.iter().zip(value.data()).map(|(x, y)| x * (1.0 - y * y)).collect());
            }
            Op::Relu(a) => {
                let va = val(a);
                acc(grads, a, g.iter().zip(va.data()).map(|(x, y)| if *y > 0.0 { *x } else { 0.0 }).collect());
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(a);
                acc(
                    grads,
                    a,
                    g.iter()
                        .zip(va.data())
                        .map(|(x, y)| if *y >= *lo && *y <= *hi { *x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sum(a) => {
                let va = val(a);
                acc(grads, a, vec![g[0]; va.len()]);
            }
            Op::Mean(a) => {
                let va = val(a);
                let c = g[0] / va.len() as f64;
                acc(grads, a, vec![c; va.len()]);
            }
            Op::SumCols(a) => {
                let va = val(a);
                if va.shape().len() == 2 {
                    let (n, d) = (va.shape()[0], va.shape()[1]);
                    let mut ga = vec![0.0; n * d];
                    for r in 0..n {
                        for c in 0..d {
                            ga[r * d + c] = g[r];
                        }
                    }
                    acc(grads, a, ga);
                } else {
                    acc(grads, a, vec![g[0]; va.len()]);
                }
            }
            Op::BroadcastRows(a, n) => {
                let va = val(a);
                let w = va.len();
                let mut ga = vec![0.0; w];
                for r in 0..*n {
                    for c in 0..w {
                        ga[c] += g[r * w + c];
                    }
                }
                acc(grads, a, ga);
            }
            Op::SliceCols(a, start, end) => {
                let va = val(a);
                let d = va.ncols();
                let n = va.nrows();
                let w = end - start;
                let mut ga = vec![0.0; va.len()];
                for r in 0..n {
                    for c in 0..w {
                        ga[r * d + start + c] = g[r * w + c];
                    }
                }
                acc(grads, a, ga);
            }
            Op::ConcatCols(args) => {
                let vals: Vec<Tensor> = args.iter().map(val).collect();
                let n = vals[0].nrows();
                let total: usize = vals.iter().map(|v| v.ncols()).sum();
                let mut offset = 0;
                for (arg, v) in args.iter().zip(&vals) {
                    let d = v.ncols();
                    let mut ga = vec![0.0; v.len()];
                    for r in 0..n {
                        ga[r * d..(r + 1) * d].copy_from_slice(&g[r * total + offset..r * total + offset + d]);
                    }
                    acc(grads, arg, ga);
                    offset += d;
                }
            }
            Op::Softmax(a) => {
                let y = value.data();
                let (n, d) = (value.nrows(), value.ncols());
                let mut ga = vec![0.0; y.len()];
                for r in 0..n {
                    let dot: f64 = (0..d).map(|c| g[r * d + c] * y[r * d + c]).sum();
                    for c in 0..d {
                        ga[r * d + c] = y[r * d + c] * (g[r * d + c] - dot);
                    }
                }
                acc(grads, a, ga);
            }
            Op::LogSumExp(a) => {
                let va = val(a);
                let (n, d) = (va.nrows(), va.ncols());
                let mut ga = vec![0.0; va.len()];
                let mut sm = vec![0.0; d];
                for r in 0..n {
                    softmax_row(&va.data()[r * d..(r + 1) * d], &mut sm);
                    for c in 0..d {
                        ga[r * d + c] = sm[c] * g[r];
                    }
                }
                acc(grads, a, ga);
            }
            Op::LogSoftmax(a) => {
                let va = val(a);
                let (n, d) = (va.nrows(), va.ncols());
                let mut ga = vec![0.0; va.len()];
                let mut sm = vec![0.0; d];
                for r in 0..n {
                    softmax_row(&va.data()[r * d..(r + 1) * d], &mut sm);
                    let gsum: f64 = g[r * d..(r + 1) * d].iter().sum();
                    for c in 0..d {
                        ga[r * d + c] = g[r * d + c] - sm[c] * gsum;
                    }
                }
                acc(grads, a, ga);
            }
            Op::Reshape(a) => acc(grads, a, g.to_vec()),
            Op::Transpose(a) => {
                let va = val(a);
                let (n, m) = (va.shape()[0], va.shape()[1]);
                let mut ga = vec![0.0; n * m];
                for r in 0..n {
                    for c in 0..m {
                        ga[r * m + c] = g[c * n + r];
                    }
                }
                acc(grads, a, ga);
            }
            Op::ReverseCols(a) => {
                let va = val(a);
                let (n, d) = (va.nrows(), va.ncols());
                let mut ga = vec![0.0; va.len()];
                for r in 0..n {
                    for c in 0..d {
                        ga[r * d + c] = g[r * d + (d - 1 - c)];
                    }
                }
                acc(grads, a, ga);
            }
            Op::Diag(a) => {
                let va = val(a);
                let d = va.len();
                let mut ga = vec![0.0; d];
                for i in 0..d {
                    ga[i] = g[i * d + i];
                }
                acc(grads, a, ga);
            }
            Op::GatherRows(a, idx) => {
                let va = val(a);
                let d = va.shape()[1];
                let mut ga = vec![0.0; va.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        ga[i * d + c] += g[r * d + c];
                    }
                }
                acc(grads, a, ga);
            }
            Op::SelectCols(a, idx) => {
                let va = val(a);
                let d = va.shape()[1];
                let mut ga = vec![0.0; va.len()];
                for (r, &c) in idx.iter().enumerate() {
                    ga[r * d + c] = g[r];
                }
                acc(grads, a, ga);
            }
            Op::StraightThrough(a) => acc(grads, a, g.to_vec()),
            Op::SolveLowerUnit { mat, rhs } => {
                let l = val(mat);
                let d = l.shape()[0];
                let n = value.shape()[0];
                let z = value.data();
                // gy rows solve L^T r = g (upper triangular, unit diagonal)
                let mut gy = vec![0.0; n * d];
                for r in 0..n {
                    let gr = &g[r * d..(r + 1) * d];
                    let out = &mut gy[r * d..(r + 1) * d];
                    for i in (0..d).rev() {
                        let mut acc_v = gr[i];
                        for j in i + 1..d {
                            acc_v -= l.data()[j * d + i] * out[j];
                        }
                        out[i] = acc_v;
                    }
                }
                // gL = -gy^T @ z, restricted to the strictly lower triangle:
                // the forward pass never reads the diagonal or above
                let mut gl = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..i {
                        let mut s = 0.0;
                        for r in 0..n {
                            s += gy[r * d + i] * z[r * d + j];
                        }
                        gl[i * d + j] = -s;
                    }
                }
                acc(grads, mat, gl);
                acc(grads, rhs, gy);
            }
            Op::SolveUpper { mat, rhs } => {
                let u = val(mat);
                let d = u.shape()[0];
                let n = value.shape()[0];
                let z = value.data();
                // gy rows solve U^T r = g (lower triangular)
                let mut gy = vec![0.0; n * d];
                for r in 0..n {
                    let gr = &g[r * d..(r + 1) * d];
                    let out = &mut gy[r * d..(r + 1) * d];
                    for i in 0..d {
                        let mut acc_v = gr[i];
                        for j in 0..i {
                            acc_v -= u.data()[j * d + i] * out[j];
                        }
                        out[i] = acc_v / u.data()[i * d + i];
                    }
                }
                // restricted to the upper triangle incl. diagonal (the forward
                // pass never reads below the diagonal)
                let mut gu = vec![0.0; d * d];
                for i in 0..d {
                    for j in i..d {
                        let mut s = 0.0;
                        for r in 0..n {
                            s += gy[r * d + i] * z[r * d + j];
                        }
                        gu[i * d + j] = -s;
                    }
                }
                acc(grads, mat, gu);
                acc(grads, rhs, gy);
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    by_name: HashMap<String, (usize, Vec<usize>)>,
}

impl Gradients {
    /// Gradient with respect to a tensor recorded on the originating tape.
    /// Returns `None` for constants and nodes unreachable from the loss.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        match t.node {
            Some(nr) if nr.tape == self.tape => self.grads.get(nr.idx).and_then(|g| g.clone()),
            _ => None,
        }
    }

    /// Gradient of a watched parameter by name; zeros of the leaf's shape when
    /// the parameter did not influence the loss, `None` if it was never
    /// watched on this tape.
    pub fn by_name(&self, name: &str) -> Option<Tensor> {
        self.by_name.get(name).map(|(idx, shape)| {
            self.grads[*idx].clone().unwrap_or_else(|| Tensor::zeros(shape))
        })
    }

    /// Gradient of `p`, zeros when the loss does not depend on it.
    pub fn param_grad(&self, p: &Parameter) -> Tensor {
        self.by_name(&p.name).unwrap_or_else(|| Tensor::zeros(p.value.shape()))
    }
}

// ---- shared raw kernels ----

fn rowwise_dims(a: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match a.shape().len() {
        1 => Ok((1, a.shape()[0])),
        2 => Ok((a.shape()[0], a.shape()[1])),
        _ => Err(Error::ShapeMismatch { op, detail: format!("need 1-d or 2-d, got {:?}", a.shape()) }),
    }
}

fn check_solve_shapes(mat: &Tensor, rhs: &Tensor, op: &'static str) -> Result<usize> {
    if mat.shape().len() != 2 || mat.shape()[0] != mat.shape()[1] {
        return Err(Error::ShapeMismatch { op, detail: format!("matrix must be square, got {:?}", mat.shape()) });
    }
    if rhs.shape().len() != 2 || rhs.shape()[1] != mat.shape()[0] {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("rhs {:?} incompatible with matrix {:?}", rhs.shape(), mat.shape()),
        });
    }
    Ok(mat.shape()[0])
}

pub(crate) fn matmul_raw(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        for i in 0..k {
            let av = a[r * k + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * m..(i + 1) * m];
            let orow = &mut out[r * m..(r + 1) * m];
            for c in 0..m {
                orow[c] += av * brow[c];
            }
        }
    }
    out
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub(crate) fn logsumexp_row(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    let s: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
    mx + s.ln()
}
