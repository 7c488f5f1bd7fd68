//! Tape-based automatic differentiation over dense row-major `f64` arrays.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`];
//! parents always precede children, so the tape is a topological order.
//! Gradients of scalar outputs use a single reverse sweep. Jacobians pick
//! reverse sweeps (one per output) or forward tangent sweeps (one per input
//! component), whichever needs fewer passes.
//!
//! Conventions: `relu'(0) = 0`, `|x|'(0) = 0`.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Operation kinds accepted by [`Tape::record`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    /// `a * b^T`
    MatMulT,
    /// matrix plus a row vector broadcast over every row
    AddRow,
    Tanh,
    Sigmoid,
    Relu,
    Square,
    Abs,
    Sin,
    Cos,
    Exp,
    Sum,
    /// column-wise concatenation of operands with equal row counts
    Concat,
    /// row-wise stacking of operands with equal column counts
    Stack,
    /// columns `start..start + len`
    Slice { start: usize, len: usize },
    /// rows `start..start + len`
    Rows { start: usize, len: usize },
    Scale(f64),
    Offset(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    AddRow(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Square(usize),
    Abs(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Sum(usize),
    Concat(Vec<usize>),
    Stack(Vec<usize>),
    Slice { src: usize, start: usize, len: usize },
    Rows { src: usize, start: usize, len: usize },
    Scale(usize, f64),
    Offset(usize, f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a tape. Shapes are fixed at creation.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    rows: usize,
    cols: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Independent variable from row-major values.
    pub fn leaf(&self, value: Vec<f64>, rows: usize, cols: usize) -> Result<Var<'_>> {
        if value.len() != rows * cols {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("{} values for a {rows}x{cols} array", value.len()),
            });
        }
        Ok(self.push(Op::Leaf, rows, cols, value))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(Op::Leaf, 1, 1, vec![v])
    }

    /// `1 x n` row vector.
    pub fn row(&self, v: &[f64]) -> Var<'_> {
        self.push(Op::Leaf, 1, v.len(), v.to_vec())
    }

    pub fn matrix(&self, m: &DMatrix<f64>) -> Var<'_> {
        let mut v = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            v.extend(m.row(r).iter());
        }
        self.push(Op::Leaf, m.nrows(), m.ncols(), v)
    }

    fn push(&self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
            rows,
            cols,
        }
    }

    fn own<'t>(&'t self, v: &Var<'t>) -> Result<()> {
        if v.tape.id != self.id {
            return Err(Error::ForeignTape);
        }
        Ok(())
    }

    /// Generic entry point: applies `op` to `args` and appends the result.
    pub fn record<'t>(&'t self, op: OpKind, args: &[Var<'t>]) -> Result<Var<'t>> {
        for a in args {
            self.own(a)?;
        }
        let arity = |n: usize| -> Result<()> {
            if args.len() != n {
                return Err(Error::Shape {
                    op: "record",
                    detail: format!("{op:?} takes {n} operand(s), got {}", args.len()),
                });
            }
            Ok(())
        };
        let (op, rows, cols) = match op {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                arity(2)?;
                let (a, b) = (args[0], args[1]);
                if (a.rows, a.cols) != (b.rows, b.cols) {
                    return Err(shape_err("elementwise", &a, &b));
                }
                let op = match op {
                    OpKind::Add => Op::Add(a.idx, b.idx),
                    OpKind::Sub => Op::Sub(a.idx, b.idx),
                    _ => Op::Mul(a.idx, b.idx),
                };
                (op, a.rows, a.cols)
            }
            OpKind::MatMul => {
                arity(2)?;
                let (a, b) = (args[0], args[1]);
                if a.cols != b.rows {
                    return Err(shape_err("matmul", &a, &b));
                }
                (Op::MatMul(a.idx, b.idx), a.rows, b.cols)
            }
            OpKind::MatMulT => {
                arity(2)?;
                let (a, b) = (args[0], args[1]);
                if a.cols != b.cols {
                    return Err(shape_err("matmul_t", &a, &b));
                }
                (Op::MatMulT(a.idx, b.idx), a.rows, b.rows)
            }
            OpKind::AddRow => {
                arity(2)?;
                let (a, b) = (args[0], args[1]);
                if b.rows != 1 || b.cols != a.cols {
                    return Err(shape_err("add_row", &a, &b));
                }
                (Op::AddRow(a.idx, b.idx), a.rows, a.cols)
            }
            OpKind::Tanh
            | OpKind::Sigmoid
            | OpKind::Relu
            | OpKind::Square
            | OpKind::Abs
            | OpKind::Sin
            | OpKind::Cos
            | OpKind::Exp => {
                arity(1)?;
                let a = args[0];
                let i = a.idx;
                let op = match op {
                    OpKind::Tanh => Op::Tanh(i),
                    OpKind::Sigmoid => Op::Sigmoid(i),
                    OpKind::Relu => Op::Relu(i),
                    OpKind::Square => Op::Square(i),
                    OpKind::Abs => Op::Abs(i),
                    OpKind::Sin => Op::Sin(i),
                    OpKind::Cos => Op::Cos(i),
                    _ => Op::Exp(i),
                };
                (op, a.rows, a.cols)
            }
            OpKind::Scale(c) => {
                arity(1)?;
                (Op::Scale(args[0].idx, c), args[0].rows, args[0].cols)
            }
            OpKind::Offset(c) => {
                arity(1)?;
                (Op::Offset(args[0].idx, c), args[0].rows, args[0].cols)
            }
            OpKind::Sum => {
                arity(1)?;
                (Op::Sum(args[0].idx), 1, 1)
            }
            OpKind::Concat => {
                let first = args.first().ok_or(Error::Shape {
                    op: "concat",
                    detail: "no operands".into(),
                })?;
                if let Some(bad) = args.iter().find(|a| a.rows != first.rows) {
                    return Err(shape_err("concat", first, bad));
                }
                let cols = args.iter().map(|a| a.cols).sum();
                (Op::Concat(args.iter().map(|a| a.idx).collect()), first.rows, cols)
            }
            OpKind::Stack => {
                let first = args.first().ok_or(Error::Shape {
                    op: "stack",
                    detail: "no operands".into(),
                })?;
                if let Some(bad) = args.iter().find(|a| a.cols != first.cols) {
                    return Err(shape_err("stack", first, bad));
                }
                let rows = args.iter().map(|a| a.rows).sum();
                (Op::Stack(args.iter().map(|a| a.idx).collect()), rows, first.cols)
            }
            OpKind::Rows { start, len } => {
                arity(1)?;
                let a = args[0];
                if len == 0 || start + len > a.rows {
                    return Err(Error::Shape {
                        op: "rows",
                        detail: format!("rows {start}..{} of {}", start + len, a.rows),
                    });
                }
                (
                    Op::Rows {
                        src: a.idx,
                        start,
                        len,
                    },
                    len,
                    a.cols,
                )
            }
            OpKind::Slice { start, len } => {
                arity(1)?;
                let a = args[0];
                if len == 0 || start + len > a.cols {
                    return Err(Error::Shape {
                        op: "slice",
                        detail: format!("columns {start}..{} of {}", start + len, a.cols),
                    });
                }
                (
                    Op::Slice {
                        src: a.idx,
                        start,
                        len,
                    },
                    a.rows,
                    len,
                )
            }
        };
        let value = {
            let nodes = self.nodes.borrow();
            eval(&op, &nodes, rows, cols)
        };
        Ok(self.push(op, rows, cols, value))
    }

    pub fn concat<'t>(&'t self, args: &[Var<'t>]) -> Result<Var<'t>> {
        self.record(OpKind::Concat, args)
    }

    pub fn stack<'t>(&'t self, args: &[Var<'t>]) -> Result<Var<'t>> {
        self.record(OpKind::Stack, args)
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Vec<Vec<f64>> {
        let nodes = self.nodes.borrow();
        let mut replayed: Vec<Node> = Vec::with_capacity(nodes.len());
        for n in nodes.iter() {
            let value = match n.op {
                Op::Leaf => n.value.clone(),
                _ => eval(&n.op, &replayed, n.rows, n.cols),
            };
            replayed.push(Node {
                op: n.op.clone(),
                rows: n.rows,
                cols: n.cols,
                value,
            });
        }
        replayed.into_iter().map(|n| n.value).collect()
    }

    /// Reverse-mode gradient of a scalar `output` with respect to `wrt`.
    /// Each returned array has the shape of its variable (row-major).
    pub fn gradient<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Vec<f64>>> {
        self.own(&output)?;
        for w in wrt {
            self.own(w)?;
        }
        if output.rows * output.cols != 1 {
            return Err(Error::Shape {
                op: "gradient",
                detail: format!("output is {}x{}, expected a scalar", output.rows, output.cols),
            });
        }
        let nodes = self.nodes.borrow();
        let mut sweep = ReverseSweep::new(&nodes, output.idx);
        sweep.run(&nodes, output.idx, &[1.0]);
        Ok(wrt.iter().map(|w| sweep.take(w.idx, w.rows * w.cols)).collect())
    }

    /// Jacobian of all elements of `output` (row-major order) with respect to
    /// the concatenated elements of `wrt`.
    pub fn jacobian<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<DMatrix<f64>> {
        self.own(&output)?;
        for w in wrt {
            self.own(w)?;
        }
        let nodes = self.nodes.borrow();
        if let Some(bad) = nodes[output.idx].value.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(format!("jacobian output ({bad})")));
        }
        let m = output.rows * output.cols;
        let n: usize = wrt.iter().map(|w| w.rows * w.cols).sum();
        let mut jac = DMatrix::zeros(m, n);
        if m == 0 || n == 0 {
            return Ok(jac);
        }
        if m <= n {
            let mut sweep = ReverseSweep::new(&nodes, output.idx);
            let mut seed = vec![0.0; m];
            for i in 0..m {
                seed.iter_mut().for_each(|s| *s = 0.0);
                seed[i] = 1.0;
                sweep.reset();
                sweep.run(&nodes, output.idx, &seed);
                let mut col = 0;
                for w in wrt {
                    let size = w.rows * w.cols;
                    if let Some(adj) = sweep.get(w.idx) {
                        for (k, a) in adj.iter().enumerate() {
                            jac[(i, col + k)] = *a;
                        }
                    }
                    col += size;
                }
            }
        } else {
            let lo = wrt.iter().map(|w| w.idx).min().unwrap_or(0);
            let mut sweep = ForwardSweep::new(&nodes, lo, output.idx);
            let mut col = 0;
            for w in wrt {
                for k in 0..w.rows * w.cols {
                    sweep.run(&nodes, w.idx, k, output.idx);
                    if let Some(t) = sweep.get(output.idx) {
                        for (i, v) in t.iter().enumerate() {
                            jac[(i, col + k)] = *v;
                        }
                    }
                }
                col += w.rows * w.cols;
            }
        }
        Ok(jac)
    }
}

fn shape_err(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Error {
    Error::Shape {
        op,
        detail: format!("{}x{} with {}x{}", a.rows, a.cols, b.rows, b.cols),
    }
}

// fallible, so not the operator traits
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn all_finite(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].value.iter().all(|v| v.is_finite())
    }

    /// Value of a scalar variable (first element otherwise).
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value[0]
    }

    fn unary(self, op: OpKind) -> Var<'t> {
        self.tape
            .record(op, &[self])
            .expect("unary operations accept any shape")
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(OpKind::Add, &[self, other])
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(OpKind::Sub, &[self, other])
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(OpKind::Mul, &[self, other])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(OpKind::MatMul, &[self, other])
    }

    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(OpKind::MatMulT, &[self, other])
    }

    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.tape.record(OpKind::AddRow, &[self, row])
    }

    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.tape.record(OpKind::Slice { start, len }, &[self])
    }

    pub fn rows_range(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.tape.record(OpKind::Rows { start, len }, &[self])
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(OpKind::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(OpKind::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(OpKind::Relu)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(OpKind::Square)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(OpKind::Abs)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(OpKind::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(OpKind::Cos)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(OpKind::Exp)
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(OpKind::Sum)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(OpKind::Scale(c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(OpKind::Offset(c))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }
}

/// `f(x)` Jacobian at `x`, with `f` expressed on a fresh tape.
pub fn jacobian<F>(f: F, x: &[f64]) -> Result<DMatrix<f64>>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.row(x);
    let y = f(&tape, xv)?;
    tape.jacobian(y, &[xv])
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn eval(op: &Op, nodes: &[Node], rows: usize, cols: usize) -> Vec<f64> {
    let v = |i: usize| &nodes[i].value;
    let map = |i: usize, f: fn(f64) -> f64| v(i).iter().map(|&x| f(x)).collect::<Vec<_>>();
    match *op {
        Op::Leaf => unreachable!("leaves carry their own values"),
        Op::Add(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x + y).collect(),
        Op::Sub(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x - y).collect(),
        Op::Mul(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x * y).collect(),
        Op::MatMul(a, b) => {
            let mut out = vec![0.0; rows * cols];
            matmul_acc(&mut out, v(a), v(b), rows, nodes[a].cols, cols);
            out
        }
        Op::MatMulT(a, b) => {
            let mut out = vec![0.0; rows * cols];
            matmul_t_acc(&mut out, v(a), v(b), rows, nodes[a].cols, cols);
            out
        }
        Op::AddRow(a, b) => {
            let (va, vb) = (v(a), v(b));
            va.iter().enumerate().map(|(k, x)| x + vb[k % cols]).collect()
        }
        Op::Tanh(a) => map(a, f64::tanh),
        Op::Sigmoid(a) => map(a, sigmoid),
        Op::Relu(a) => map(a, |x| if x > 0.0 { x } else { 0.0 }),
        Op::Square(a) => map(a, |x| x * x),
        Op::Abs(a) => map(a, f64::abs),
        Op::Sin(a) => map(a, f64::sin),
        Op::Cos(a) => map(a, f64::cos),
        Op::Exp(a) => map(a, f64::exp),
        Op::Sum(a) => vec![v(a).iter().sum()],
        Op::Concat(ref parts) => {
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    let pc = nodes[p].cols;
                    out.extend_from_slice(&v(p)[r * pc..(r + 1) * pc]);
                }
            }
            out
        }
        Op::Stack(ref parts) => parts.iter().flat_map(|&p| v(p).iter().copied()).collect(),
        Op::Rows { src, start, len } => {
            let sc = nodes[src].cols;
            v(src)[start * sc..(start + len) * sc].to_vec()
        }
        Op::Slice { src, start, len } => {
            let sc = nodes[src].cols;
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&v(src)[r * sc + start..r * sc + start + len]);
            }
            out
        }
        Op::Scale(a, c) => v(a).iter().map(|x| x * c).collect(),
        Op::Offset(a, c) => v(a).iter().map(|x| x + c).collect(),
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`
fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`
fn matmul_t_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`
fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Adjoint buffers reused across several reverse sweeps.
struct ReverseSweep {
    adj: Vec<Vec<f64>>,
    live: Vec<bool>,
}

impl ReverseSweep {
    fn new(nodes: &[Node], top: usize) -> Self {
        Self {
            adj: nodes[..=top].iter().map(|n| vec![0.0; n.value.len()]).collect(),
            live: vec![false; top + 1],
        }
    }

    fn reset(&mut self) {
        for (a, l) in self.adj.iter_mut().zip(self.live.iter_mut()) {
            if *l {
                a.iter_mut().for_each(|x| *x = 0.0);
                *l = false;
            }
        }
    }

    fn get(&self, idx: usize) -> Option<&[f64]> {
        (idx < self.live.len() && self.live[idx]).then(|| self.adj[idx].as_slice())
    }

    fn take(&mut self, idx: usize, size: usize) -> Vec<f64> {
        match self.get(idx) {
            Some(a) => a.to_vec(),
            None => vec![0.0; size],
        }
    }

    fn run(&mut self, nodes: &[Node], top: usize, seed: &[f64]) {
        self.adj[top].copy_from_slice(seed);
        self.live[top] = true;
        for i in (0..=top).rev() {
            if !self.live[i] {
                continue;
            }
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // split so the child's adjoint can be read while parents are written
            let (lower, upper) = self.adj.split_at_mut(i);
            let g = &upper[0];
            let live = &mut self.live;
            macro_rules! touch {
                ($p:expr) => {{
                    let p = $p;
                    live[p] = true;
                    &mut lower[p]
                }};
            }
            let val = |p: usize| &nodes[p].value;
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    axpy(touch!(a), 1.0, g);
                    axpy(touch!(b), 1.0, g);
                }
                Op::Sub(a, b) => {
                    axpy(touch!(a), 1.0, g);
                    axpy(touch!(b), -1.0, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    {
                        let da = touch!(a);
                        for k in 0..g.len() {
                            da[k] += g[k] * vb[k];
                        }
                    }
                    let db = touch!(b);
                    for k in 0..g.len() {
                        db[k] += g[k] * va[k];
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k, n) = (nodes[a].rows, nodes[a].cols, node.cols);
                    matmul_t_acc(touch!(a), g, val(b), m, n, k);
                    matmul_tn_acc(touch!(b), val(a), g, m, k, n);
                }
                Op::MatMulT(a, b) => {
                    let (m, k, n) = (nodes[a].rows, nodes[a].cols, node.cols);
                    matmul_acc(touch!(a), g, val(b), m, n, k);
                    matmul_tn_acc(touch!(b), g, val(a), m, n, k);
                }
                Op::AddRow(a, b) => {
                    axpy(touch!(a), 1.0, g);
                    let n = node.cols;
                    let db = touch!(b);
                    for (k, gv) in g.iter().enumerate() {
                        db[k % n] += gv;
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = touch!(a);
                    for k in 0..g.len() {
                        da[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = touch!(a);
                    for k in 0..g.len() {
                        da[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
                Op::Relu(a) => {
                    let x = val(a);
                    let da = touch!(a);
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            da[k] += g[k];
                        }
                    }
                }
                Op::Square(a) => {
                    let x = val(a);
                    let da = touch!(a);
                    for k in 0..g.len() {
                        da[k] += 2.0 * x[k] * g[k];
                    }
                }
                Op::Abs(a) => {
                    let x = val(a);
                    let da = touch!(a);
                    for k in 0..g.len() {
                        da[k] += g[k] * sign(x[k]);
                    }
                }
                Op::Sin(a) => {
                    let x = val(a);
                    let da = touch!(a);
                    for k in 0..g.len() {
                        da[k] += g[k] * x[k].cos();
                    }
                }
                Op::Cos(a) => {
                    let x = val(a);
                    let da = touch!(a);
                    for k in 0..g.len() {
                        da[k] -= g[k] * x[k].sin();
                    }
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    let da = touch!(a);
                    for k in 0..g.len() {
                        da[k] += g[k] * y[k];
                    }
                }
                Op::Sum(a) => {
                    let s = g[0];
                    touch!(a).iter_mut().for_each(|d| *d += s);
                }
                Op::Concat(ref parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = nodes[p].cols;
                        let dp = touch!(p);
                        for r in 0..node.rows {
                            for c in 0..pc {
                                dp[r * pc + c] += g[r * node.cols + off + c];
                            }
                        }
                        off += pc;
                    }
                }
                Op::Stack(ref parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        let dp = touch!(p);
                        for k in 0..n {
                            dp[k] += g[off + k];
                        }
                        off += n;
                    }
                }
                Op::Rows { src, start, .. } => {
                    let off = start * nodes[src].cols;
                    let ds = touch!(src);
                    for (k, gk) in g.iter().enumerate() {
                        ds[off + k] += gk;
                    }
                }
                Op::Slice { src, start, len } => {
                    let sc = nodes[src].cols;
                    let ds = touch!(src);
                    for r in 0..node.rows {
                        for c in 0..len {
                            ds[r * sc + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::Scale(a, c) => axpy(touch!(a), c, g),
                Op::Offset(a, _) => axpy(touch!(a), 1.0, g),
            }
        }
    }
}

/// Tangent buffers for forward sweeps seeded at a single input component.
struct ForwardSweep {
    tan: Vec<Vec<f64>>,
    live: Vec<bool>,
    lo: usize,
}

impl ForwardSweep {
    fn new(nodes: &[Node], lo: usize, hi: usize) -> Self {
        Self {
            tan: nodes[lo..=hi].iter().map(|n| vec![0.0; n.value.len()]).collect(),
            live: vec![false; hi + 1 - lo],
            lo,
        }
    }

    fn get(&self, idx: usize) -> Option<&[f64]> {
        let j = idx.checked_sub(self.lo)?;
        (j < self.live.len() && self.live[j]).then(|| self.tan[j].as_slice())
    }

    fn run(&mut self, nodes: &[Node], input: usize, component: usize, hi: usize) {
        let lo = self.lo;
        for (t, l) in self.tan.iter_mut().zip(self.live.iter_mut()) {
            if *l {
                t.iter_mut().for_each(|x| *x = 0.0);
                *l = false;
            }
        }
        self.tan[input - lo][component] = 1.0;
        self.live[input - lo] = true;
        for i in input + 1..=hi {
            let node = &nodes[i];
            let parents = parents(&node.op);
            if !parents.iter().any(|&p| p >= lo && self.live[p - lo]) {
                continue;
            }
            let (lower, upper) = self.tan.split_at_mut(i - lo);
            let out = &mut upper[0];
            let live = &self.live;
            let t = |p: usize| -> Option<&Vec<f64>> {
                (p >= lo && live[p - lo]).then(|| &lower[p - lo])
            };
            let val = |p: usize| &nodes[p].value;
            out.iter_mut().for_each(|x| *x = 0.0);
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sb = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if let Some(ta) = t(a) {
                        axpy(out, 1.0, ta);
                    }
                    if let Some(tb) = t(b) {
                        axpy(out, sb, tb);
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(ta) = t(a) {
                        for (k, o) in out.iter_mut().enumerate() {
                            *o += ta[k] * val(b)[k];
                        }
                    }
                    if let Some(tb) = t(b) {
                        for (k, o) in out.iter_mut().enumerate() {
                            *o += val(a)[k] * tb[k];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k, n) = (nodes[a].rows, nodes[a].cols, node.cols);
                    if let Some(ta) = t(a) {
                        matmul_acc(out, ta, val(b), m, k, n);
                    }
                    if let Some(tb) = t(b) {
                        matmul_acc(out, val(a), tb, m, k, n);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (m, k, n) = (nodes[a].rows, nodes[a].cols, node.cols);
                    if let Some(ta) = t(a) {
                        matmul_t_acc(out, ta, val(b), m, k, n);
                    }
                    if let Some(tb) = t(b) {
                        matmul_t_acc(out, val(a), tb, m, k, n);
                    }
                }
                Op::AddRow(a, b) => {
                    if let Some(ta) = t(a) {
                        axpy(out, 1.0, ta);
                    }
                    if let Some(tb) = t(b) {
                        let n = node.cols;
                        for (k, o) in out.iter_mut().enumerate() {
                            *o += tb[k % n];
                        }
                    }
                }
                Op::Tanh(a) => {
                    let (ta, y) = (t(a).expect("live parent"), &node.value);
                    for k in 0..out.len() {
                        out[k] = ta[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::Sigmoid(a) => {
                    let (ta, y) = (t(a).expect("live parent"), &node.value);
                    for k in 0..out.len() {
                        out[k] = ta[k] * y[k] * (1.0 - y[k]);
                    }
                }
                Op::Relu(a) => {
                    let (ta, x) = (t(a).expect("live parent"), val(a));
                    for k in 0..out.len() {
                        out[k] = if x[k] > 0.0 { ta[k] } else { 0.0 };
                    }
                }
                Op::Square(a) => {
                    let (ta, x) = (t(a).expect("live parent"), val(a));
                    for k in 0..out.len() {
                        out[k] = 2.0 * x[k] * ta[k];
                    }
                }
                Op::Abs(a) => {
                    let (ta, x) = (t(a).expect("live parent"), val(a));
                    for k in 0..out.len() {
                        out[k] = sign(x[k]) * ta[k];
                    }
                }
                Op::Sin(a) => {
                    let (ta, x) = (t(a).expect("live parent"), val(a));
                    for k in 0..out.len() {
                        out[k] = x[k].cos() * ta[k];
                    }
                }
                Op::Cos(a) => {
                    let (ta, x) = (t(a).expect("live parent"), val(a));
                    for k in 0..out.len() {
                        out[k] = -x[k].sin() * ta[k];
                    }
                }
                Op::Exp(a) => {
                    let (ta, y) = (t(a).expect("live parent"), &node.value);
                    for k in 0..out.len() {
                        out[k] = y[k] * ta[k];
                    }
                }
                Op::Sum(a) => out[0] = t(a).expect("live parent").iter().sum(),
                Op::Concat(ref parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = nodes[p].cols;
                        if let Some(tp) = t(p) {
                            for r in 0..node.rows {
                                for c in 0..pc {
                                    out[r * node.cols + off + c] = tp[r * pc + c];
                                }
                            }
                        }
                        off += pc;
                    }
                }
                Op::Stack(ref parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        if let Some(tp) = t(p) {
                            out[off..off + n].copy_from_slice(tp);
                        }
                        off += n;
                    }
                }
                Op::Rows { src, start, .. } => {
                    let off = start * nodes[src].cols;
                    let ts = t(src).expect("live parent");
                    let n = out.len();
                    out.copy_from_slice(&ts[off..off + n]);
                }
                Op::Slice { src, start, len } => {
                    let (ts, sc) = (t(src).expect("live parent"), nodes[src].cols);
                    for r in 0..node.rows {
                        for c in 0..len {
                            out[r * len + c] = ts[r * sc + start + c];
                        }
                    }
                }
                Op::Scale(a, c) => axpy(out, c, t(a).expect("live parent")),
                Op::Offset(a, _) => axpy(out, 1.0, t(a).expect("live parent")),
            }
            self.live[i - lo] = true;
        }
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MatMul(a, b)
        | Op::MatMulT(a, b)
        | Op::AddRow(a, b) => vec![a, b],
        Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::Square(a)
        | Op::Abs(a)
        | Op::Sin(a)
        | Op::Cos(a)
        | Op::Exp(a)
        | Op::Sum(a)
        | Op::Scale(a, _)
        | Op::Offset(a, _) => vec![a],
        Op::Slice { src, .. } | Op::Rows { src, .. } => vec![src],
        Op::Concat(ref p) | Op::Stack(ref p) => p.clone(),
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
