//! Dense-matrix operation tape with reverse-mode gradients.
//!
//! Every value produced while recording lives on a [`Tape`] and is addressed by
//! a lightweight [`Var`] handle. Operations are appended in execution order, so
//! the tape is topologically sorted by construction and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! Only values that depend on a parameter leaf (created with [`Tape::param`])
//! take part in the reverse sweep; constants keep an all-zero gradient.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape_id: u64,
}

impl Var {
    pub fn tape_id(&self) -> u64 {
        self.tape_id
    }
}

/// The closed catalog of differentiable operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Matmul,
    /// Elementwise sum. The second operand may also be a single row, which is
    /// broadcast over every row of the first.
    Add,
    Scale(f64),
    ConcatColumns,
    Relu,
    MeanRows,
    SumAll,
    RowSoftmax,
    L2NormalizeRows,
    ElementwiseMultiply,
    Transpose,
    Log,
    Exp,
    SelectRow(usize),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::ConcatColumns => "concat-columns",
            OpKind::Relu => "relu",
            OpKind::MeanRows => "mean-rows",
            OpKind::SumAll => "sum-all",
            OpKind::RowSoftmax => "row-softmax",
            OpKind::L2NormalizeRows => "l2-normalize-rows",
            OpKind::ElementwiseMultiply => "elementwise-multiply",
            OpKind::Transpose => "transpose",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::SelectRow(_) => "select-row",
        }
    }

    /// Every catalog entry, with representative parameters for the
    /// parameterised kinds.
    pub fn catalog() -> [OpKind; 14] {
        [
            OpKind::Matmul,
            OpKind::Add,
            OpKind::Scale(-1.5),
            OpKind::ConcatColumns,
            OpKind::Relu,
            OpKind::MeanRows,
            OpKind::SumAll,
            OpKind::RowSoftmax,
            OpKind::L2NormalizeRows,
            OpKind::ElementwiseMultiply,
            OpKind::Transpose,
            OpKind::Log,
            OpKind::Exp,
            OpKind::SelectRow(0),
        ]
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Scale(c) => write!(f, "scale:{c}"),
            OpKind::SelectRow(i) => write!(f, "select-row:{i}"),
            other => f.write_str(other.name()),
        }
    }
}

/// Parses `name` or `name:arg`, e.g. `relu`, `scale:0.5`, `select-row:2`.
impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let unknown = || Error::UnknownOp(s.to_string());
        let kind = match (name, arg) {
            ("matmul", None) => OpKind::Matmul,
            ("add", None) => OpKind::Add,
            ("scale", Some(a)) => OpKind::Scale(a.parse().map_err(|_| unknown())?),
            ("concat-columns", None) => OpKind::ConcatColumns,
            ("relu", None) => OpKind::Relu,
            ("mean-rows", None) => OpKind::MeanRows,
            ("sum-all", None) => OpKind::SumAll,
            ("row-softmax", None) => OpKind::RowSoftmax,
            ("l2-normalize-rows", None) => OpKind::L2NormalizeRows,
            ("elementwise-multiply", None) => OpKind::ElementwiseMultiply,
            ("transpose", None) => OpKind::Transpose,
            ("log", None) => OpKind::Log,
            ("exp", None) => OpKind::Exp,
            ("select-row", Some(a)) => OpKind::SelectRow(a.parse().map_err(|_| unknown())?),
            _ => return Err(unknown()),
        };
        Ok(kind)
    }
}

/// Test hook: scales the input gradients produced by one op kind during
/// backward. Used as a negative control for gradient checking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradFault {
    pub op: &'static str,
    pub factor: f64,
}

#[derive(Debug)]
enum Source {
    Leaf,
    Op { kind: OpKind, inputs: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    requires_grad: bool,
    source: Source,
}

/// A single forward recording. Rebuilt for every forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    zero_norm_rows: usize,
    warnings: usize,
    fault: Option<GradFault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            zero_norm_rows: 0,
            warnings: 0,
            fault: None,
        }
    }

    pub fn with_fault(fault: Option<GradFault>) -> Self {
        Tape {
            fault,
            ..Self::new()
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of all-zero rows seen by `l2-normalize-rows`.
    pub fn zero_norm_rows(&self) -> usize {
        self.zero_norm_rows
    }

    /// Degenerate-input warnings raised by model code (e.g. an empty role graph).
    pub fn warnings(&self) -> usize {
        self.warnings
    }

    pub fn warn(&mut self) {
        self.warnings += 1;
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            source: Source::Leaf,
        });
        Var {
            index: self.nodes.len() - 1,
            tape_id: self.id,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape_id != self.id {
            return Err(Error::ForeignValue {
                expected: self.id,
                found: v.tape_id,
            });
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        assert_eq!(v.tape_id, self.id, "value from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Gradient of the last backward root with respect to `v`; zeros when `v`
    /// did not influence the root or no backward pass has run.
    pub fn grad(&self, v: Var) -> Array2<f64> {
        let node = &self.nodes[v.index];
        assert_eq!(v.tape_id, self.id, "grad from another tape");
        match &node.grad {
            Some(g) => g.clone(),
            None => Array2::zeros(node.value.dim()),
        }
    }

    /// Leaves whose gradient from the last backward pass is nonzero.
    pub fn leaves_with_grad(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.source, Source::Leaf))
            .filter(|(_, n)| n.grad.as_ref().is_some_and(|g| g.iter().any(|&x| x != 0.0)))
            .map(|(index, _)| Var { index, tape_id: self.id })
            .collect()
    }

    /// Records `kind` applied to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|v| self.check(*v)).collect::<Result<_>>()?;
        let value = self.forward(kind, &idx)?;
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            source: Source::Op { kind, inputs: idx },
        });
        Ok(Var {
            index: self.nodes.len() - 1,
            tape_id: self.id,
        })
    }

    fn arity(kind: OpKind, idx: &[usize]) -> Result<()> {
        let want = match kind {
            OpKind::Matmul | OpKind::Add | OpKind::ElementwiseMultiply => 2,
            OpKind::ConcatColumns => {
                if idx.is_empty() {
                    return Err(Error::shape(kind.name(), "needs at least one input"));
                }
                return Ok(());
            }
            _ => 1,
        };
        if idx.len() != want {
            return Err(Error::shape(
                kind.name(),
                format!("expected {want} inputs, got {}", idx.len()),
            ));
        }
        Ok(())
    }

    fn forward(&mut self, kind: OpKind, idx: &[usize]) -> Result<Array2<f64>> {
        Self::arity(kind, idx)?;
        let name = kind.name();
        let a = &self.nodes[idx[0]].value;
        let out = match kind {
            OpKind::Matmul => {
                let b = &self.nodes[idx[1]].value;
                if a.ncols() != b.nrows() {
                    return Err(Error::shape(
                        name,
                        format!("{:?} x {:?}: inner dimensions {} != {}", a.dim(), b.dim(), a.ncols(), b.nrows()),
                    ));
                }
                a.dot(b)
            }
            OpKind::Add => {
                let b = &self.nodes[idx[1]].value;
                if a.dim() == b.dim() || (b.nrows() == 1 && b.ncols() == a.ncols()) {
                    a + b
                } else {
                    return Err(Error::shape(name, format!("{:?} + {:?}", a.dim(), b.dim())));
                }
            }
            OpKind::Scale(c) => a * c,
            OpKind::ConcatColumns => {
                let rows = a.nrows();
                if let Some(bad) = idx.iter().find(|&&i| self.nodes[i].value.nrows() != rows) {
                    return Err(Error::shape(
                        name,
                        format!("row counts differ: {} vs {}", rows, self.nodes[*bad].value.nrows()),
                    ));
                }
                let views: Vec<ArrayView2<f64>> = idx.iter().map(|&i| self.nodes[i].value.view()).collect();
                concatenate(Axis(1), &views).expect("row counts checked")
            }
            OpKind::Relu => a.mapv(|x| if x > 0.0 { x } else { 0.0 }),
            OpKind::MeanRows => {
                if a.nrows() == 0 {
                    return Err(Error::shape(name, "no rows"));
                }
                a.mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0))
            }
            OpKind::SumAll => Array2::from_elem((1, 1), a.sum()),
            OpKind::RowSoftmax => {
                let mut out = a.clone();
                for mut row in out.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    row.mapv_inplace(|x| (x - max).exp());
                    let z = row.sum();
                    row.mapv_inplace(|x| x / z);
                }
                out
            }
            OpKind::L2NormalizeRows => {
                let mut out = a.clone();
                let mut zeros = 0;
                for mut row in out.rows_mut() {
                    let norm = row.dot(&row).sqrt();
                    if norm > 0.0 {
                        row.mapv_inplace(|x| x / norm);
                    } else {
                        zeros += 1;
                    }
                }
                self.zero_norm_rows += zeros;
                out
            }
            OpKind::ElementwiseMultiply => {
                let b = &self.nodes[idx[1]].value;
                if a.dim() != b.dim() {
                    return Err(Error::shape(name, format!("{:?} * {:?}", a.dim(), b.dim())));
                }
                a * b
            }
            OpKind::Transpose => a.t().to_owned(),
            OpKind::Log => a.mapv(f64::ln),
            OpKind::Exp => a.mapv(f64::exp),
            OpKind::SelectRow(i) => {
                if i >= a.nrows() {
                    return Err(Error::shape(name, format!("row {i} out of range for {:?}", a.dim())));
                }
                a.slice(s![i..i + 1, ..]).to_owned()
            }
        };
        Ok(out)
    }

    /// Reverse sweep from a 1x1 root. Gradients from a previous sweep are
    /// discarded first, so repeated calls are idempotent.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root = self.check(root)?;
        let (rows, cols) = self.nodes[root].value.dim();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarRoot { rows, cols });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root].grad = Some(Array2::ones((1, 1)));

        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if let Source::Op { kind, inputs } = &self.nodes[i].source {
                let kind = *kind;
                let inputs = inputs.clone();
                let mut contributions = self.input_grads(kind, &inputs, i, &g);
                if let Some(fault) = self.fault {
                    if fault.op == kind.name() {
                        for c in contributions.iter_mut().flatten() {
                            c.mapv_inplace(|x| x * fault.factor);
                        }
                    }
                }
                for (&input, contribution) in inputs.iter().zip(contributions) {
                    let Some(c) = contribution else { continue };
                    let node = &mut self.nodes[input];
                    match &mut node.grad {
                        Some(acc) => *acc += &c,
                        None => node.grad = Some(c),
                    }
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Gradient contribution for each input; `None` for inputs that do not
    /// require grad.
    fn input_grads(
        &self,
        kind: OpKind,
        inputs: &[usize],
        out: usize,
        g: &Array2<f64>,
    ) -> Vec<Option<Array2<f64>>> {
        let needs = |k: usize| self.nodes[inputs[k]].requires_grad;
        let val = |k: usize| &self.nodes[inputs[k]].value;
        let y = &self.nodes[out].value;
        match kind {
            OpKind::Matmul => vec![
                needs(0).then(|| g.dot(&val(1).t())),
                needs(1).then(|| val(0).t().dot(g)),
            ],
            OpKind::Add => {
                let broadcast = val(1).dim() != val(0).dim();
                vec![
                    needs(0).then(|| g.clone()),
                    needs(1).then(|| {
                        if broadcast {
                            g.sum_axis(Axis(0)).insert_axis(Axis(0))
                        } else {
                            g.clone()
                        }
                    }),
                ]
            }
            OpKind::Scale(c) => vec![needs(0).then(|| g * c)],
            OpKind::ConcatColumns => {
                let mut offset = 0;
                inputs
                    .iter()
                    .enumerate()
                    .map(|(k, _)| {
                        let w = val(k).ncols();
                        let part = needs(k).then(|| g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                        part
                    })
                    .collect()
            }
            OpKind::Relu => vec![needs(0).then(|| {
                let mut d = g.clone();
                d.zip_mut_with(val(0), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                d
            })],
            OpKind::MeanRows => vec![needs(0).then(|| {
                let n = val(0).nrows();
                let row = g.row(0).mapv(|x| x / n as f64);
                row.broadcast(val(0).dim()).expect("same width").to_owned()
            })],
            OpKind::SumAll => vec![needs(0).then(|| Array2::from_elem(val(0).dim(), g[[0, 0]]))],
            OpKind::RowSoftmax => vec![needs(0).then(|| {
                let mut d = Array2::zeros(y.dim());
                for ((mut dr, yr), gr) in d.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                    let inner = yr.dot(&gr);
                    for ((dx, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dx = yv * (gv - inner);
                    }
                }
                d
            })],
            OpKind::L2NormalizeRows => vec![needs(0).then(|| {
                let x = val(0);
                let mut d = Array2::zeros(x.dim());
                for (((mut dr, xr), yr), gr) in d.rows_mut().into_iter().zip(x.rows()).zip(y.rows()).zip(g.rows()) {
                    let norm = xr.dot(&xr).sqrt();
                    if norm > 0.0 {
                        let inner = yr.dot(&gr);
                        for ((dx, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dx = (gv - yv * inner) / norm;
                        }
                    }
                }
                d
            })],
            OpKind::ElementwiseMultiply => vec![
                needs(0).then(|| g * val(1)),
                needs(1).then(|| g * val(0)),
            ],
            OpKind::Transpose => vec![needs(0).then(|| g.t().to_owned())],
            OpKind::Log => vec![needs(0).then(|| g / val(0))],
            OpKind::Exp => vec![needs(0).then(|| g * y)],
            OpKind::SelectRow(r) => vec![needs(0).then(|| {
                let mut d = Array2::zeros(val(0).dim());
                d.row_mut(r).assign(&g.row(0));
                d
            })],
        }
    }

    // Shorthands for model code. Shape errors propagate unchanged.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatColumns, parts)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::MeanRows, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::SumAll, &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::RowSoftmax, &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::L2NormalizeRows, &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::ElementwiseMultiply, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        self.apply(OpKind::SelectRow(row), &[a])
    }

    /// Stacks 1xC rows (or any equal-width blocks) vertically. Composed from
    /// transpose and concat-columns.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.len() == 1 {
            return Ok(rows[0]);
        }
        let cols: Vec<Var> = rows.iter().map(|&r| self.transpose(r)).collect::<Result<_>>()?;
        let wide = self.concat_columns(&cols)?;
        self.transpose(wide)
    }

    /// Adds a constant scalar to every element.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let (_, cols) = self.shape(a);
        let row = self.constant(Array2::from_elem((1, cols), c));
        self.add(a, row)
    }

    /// Selects rows by index via a constant one-hot matrix.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let n = self.shape(table).0;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather-rows", format!("row {bad} out of range for {n} rows")));
        }
        let mut onehot = Array2::zeros((rows.len(), n));
        for (i, &r) in rows.iter().enumerate() {
            onehot[[i, r]] = 1.0;
        }
        let sel = self.constant(onehot);
        self.matmul(sel, table)
    }
}
