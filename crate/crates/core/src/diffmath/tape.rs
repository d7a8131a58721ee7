use super::matrix::{gemm, Matrix};
use super::DiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Piecewise-constant selectors. Their derivative is zero almost everywhere,
/// so backward never propagates through them.
#[derive(Debug, Clone, Copy)]
enum MaskKind {
    /// 1 where `a > 0`, `slope` elsewhere.
    Step { a: Var, slope: f64 },
    /// 1 where `a <= b` (first argument wins ties), 0 elsewhere.
    LessEq { a: Var, b: Var },
    /// 1 where `lo <= a <= hi` (boundary counts as inside), 0 elsewhere.
    Inside { a: Var, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddRow { a: Var, row: Var },
    SumRows(Var),
    SumCols(Var),
    BroadcastRows { a: Var, n: usize },
    BroadcastCols { a: Var, m: usize },
    Fill { a: Var, rows: usize, cols: usize },
    Sum(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { a: Var, scale: f64, shift: f64 },
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Square(Var),
    LeakyRelu { a: Var, slope: f64 },
    Min(Var, Var),
    Clip { a: Var, lo: f64, hi: f64 },
    Mask(MaskKind),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::AddRow { .. } => "add_row",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::Fill { .. } => "fill",
            Op::Sum(_) => "sum",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine { .. } => "affine",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Min(..) => "min",
            Op::Clip { .. } => "clip",
            Op::Mask(_) => "mask",
        }
    }

    fn operands(&self) -> ([Option<Var>; 2], bool) {
        // second field: whether derivatives flow through this node at all
        match *self {
            Op::Leaf => ([None, None], true),
            Op::MatMul { a, b, .. } => ([Some(a), Some(b)], true),
            Op::AddRow { a, row } => ([Some(a), Some(row)], true),
            Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Sum(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Sqrt(a)
            | Op::Square(a) => ([Some(a), None], true),
            Op::BroadcastRows { a, .. }
            | Op::BroadcastCols { a, .. }
            | Op::Fill { a, .. }
            | Op::Affine { a, .. }
            | Op::LeakyRelu { a, .. }
            | Op::Clip { a, .. } => ([Some(a), None], true),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Min(a, b) => {
                ([Some(a), Some(b)], true)
            }
            Op::Mask(MaskKind::Step { a, .. }) | Op::Mask(MaskKind::Inside { a, .. }) => {
                ([Some(a), None], false)
            }
            Op::Mask(MaskKind::LessEq { a, b }) => ([Some(a), Some(b)], false),
        }
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

/// Evaluates one node from already-computed operand values. Used both when a
/// node is first recorded and on replay, so both paths agree bit for bit.
fn compute(op: &Op, vals: &[Matrix]) -> Result<Matrix, DiffError> {
    let v = |x: Var| &vals[x.0];
    let out = match *op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul { a, b, ta, tb } => {
            let (a, b) = (v(a), v(b));
            let inner_a = if ta { a.rows() } else { a.cols() };
            let inner_b = if tb { b.cols() } else { b.rows() };
            if inner_a != inner_b {
                return Err(DiffError::Shape {
                    op: "matmul",
                    lhs: a.shape(),
                    rhs: b.shape(),
                });
            }
            gemm(a, ta, b, tb)
        }
        Op::AddRow { a, row } => {
            let (a, row) = (v(a), v(row));
            if row.rows() != 1 || row.cols() != a.cols() {
                return Err(DiffError::Shape {
                    op: "add_row",
                    lhs: a.shape(),
                    rhs: row.shape(),
                });
            }
            let r = row.as_slice();
            let mut data = Vec::with_capacity(a.len());
            for chunk in a.as_slice().chunks(a.cols().max(1)) {
                data.extend(chunk.iter().zip(r).map(|(x, b)| x + b));
            }
            Matrix::new(a.rows(), a.cols(), data)
        }
        Op::SumRows(a) => {
            let a = v(a);
            let mut out = vec![0.0; a.cols()];
            for r in 0..a.rows() {
                for (o, x) in out.iter_mut().zip(a.row_slice(r)) {
                    *o += x;
                }
            }
            Matrix::row(out)
        }
        Op::SumCols(a) => {
            let a = v(a);
            Matrix::column((0..a.rows()).map(|r| a.row_slice(r).iter().sum()).collect())
        }
        Op::BroadcastRows { a, n } => {
            let a = v(a);
            if a.rows() != 1 {
                return Err(DiffError::Shape {
                    op: "broadcast_rows",
                    lhs: a.shape(),
                    rhs: (n, a.cols()),
                });
            }
            let mut data = Vec::with_capacity(n * a.cols());
            for _ in 0..n {
                data.extend_from_slice(a.as_slice());
            }
            Matrix::new(n, a.cols(), data)
        }
        Op::BroadcastCols { a, m } => {
            let a = v(a);
            if a.cols() != 1 {
                return Err(DiffError::Shape {
                    op: "broadcast_cols",
                    lhs: a.shape(),
                    rhs: (a.rows(), m),
                });
            }
            let mut data = Vec::with_capacity(a.rows() * m);
            for &x in a.as_slice() {
                data.extend(std::iter::repeat_n(x, m));
            }
            Matrix::new(a.rows(), m, data)
        }
        Op::Fill { a, rows, cols } => {
            let a = v(a);
            let x = a.item().ok_or(DiffError::NonScalar {
                rows: a.rows(),
                cols: a.cols(),
            })?;
            Matrix::filled(rows, cols, x)
        }
        Op::Sum(a) => Matrix::scalar(v(a).as_slice().iter().sum()),
        Op::Add(a, b) => {
            same_shape("add", v(a), v(b))?;
            v(a).zip(v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape("sub", v(a), v(b))?;
            v(a).zip(v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape("mul", v(a), v(b))?;
            v(a).zip(v(b), |x, y| x * y)
        }
        Op::Div(a, b) => {
            same_shape("div", v(a), v(b))?;
            v(a).zip(v(b), |x, y| x / y)
        }
        Op::Affine { a, scale, shift } => v(a).map(|x| scale * x + shift),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => v(a).map(f64::ln),
        Op::Tanh(a) => v(a).map(f64::tanh),
        Op::Sigmoid(a) => v(a).map(sigmoid),
        Op::Sqrt(a) => v(a).map(f64::sqrt),
        Op::Square(a) => v(a).map(|x| x * x),
        Op::LeakyRelu { a, slope } => v(a).map(|x| if x > 0.0 { x } else { slope * x }),
        Op::Min(a, b) => {
            same_shape("min", v(a), v(b))?;
            v(a).zip(v(b), |x, y| if x <= y { x } else { y })
        }
        Op::Clip { a, lo, hi } => v(a).map(|x| x.clamp(lo, hi)),
        Op::Mask(MaskKind::Step { a, slope }) => v(a).map(|x| if x > 0.0 { 1.0 } else { slope }),
        Op::Mask(MaskKind::LessEq { a, b }) => {
            same_shape("min", v(a), v(b))?;
            v(a).zip(v(b), |x, y| if x <= y { 1.0 } else { 0.0 })
        }
        Op::Mask(MaskKind::Inside { a, lo, hi }) => {
            v(a).map(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 })
        }
    };
    if !out.is_finite() {
        return Err(DiffError::NonFinite { op: op.name() });
    }
    Ok(out)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Append-only record of evaluated operations.
///
/// Every operation is evaluated eagerly when recorded. Gradients are built by
/// [`Tape::gradients`], which appends the adjoint computation to the same tape
/// as ordinary differentiable nodes; differentiating a function of those
/// nodes again gives second-order quantities such as the parameter gradient of
/// an input-gradient penalty.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Matrix>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> Result<Var, DiffError> {
        let value = compute(&op, &self.values)?;
        self.ops.push(op);
        self.values.push(value);
        Ok(Var(self.ops.len() - 1))
    }

    /// Records an input. Leaves are the only nodes whose value can be swapped
    /// on [`replay`](Tape::replay).
    pub fn leaf(&mut self, value: Matrix) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: "leaf" });
        }
        self.ops.push(Op::Leaf);
        self.values.push(value);
        Ok(Var(self.ops.len() - 1))
    }

    pub fn constant(&mut self, value: f64) -> Result<Var, DiffError> {
        self.leaf(Matrix::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> Result<f64, DiffError> {
        let m = self.value(v);
        m.item().ok_or(DiffError::NonScalar {
            rows: m.rows(),
            cols: m.cols(),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::MatMul {
            a,
            b,
            ta: false,
            tb: false,
        })
    }

    /// `op(a) * op(b)`, with `op` transposing when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, DiffError> {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        self.push(Op::AddRow { a, row })
    }

    /// `n x m -> 1 x m`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        self.push(Op::SumRows(a))
    }

    /// `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, DiffError> {
        self.push(Op::SumCols(a))
    }

    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var, DiffError> {
        self.push(Op::BroadcastRows { a, n })
    }

    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> Result<Var, DiffError> {
        self.push(Op::BroadcastCols { a, m })
    }

    /// Repeats a scalar node into a `rows x cols` matrix.
    pub fn fill(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, DiffError> {
        self.push(Op::Fill { a, rows, cols })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(DiffError::Shape {
                op: "mean",
                lhs: self.value(a).shape(),
                rhs: (1, 1),
            });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::Div(a, b))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, DiffError> {
        self.push(Op::Affine { a, scale, shift })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.affine(a, c, 0.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.affine(a, 1.0, c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        self.affine(a, -1.0, 0.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        self.push(Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.push(Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        self.push(Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        self.push(Op::Square(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, DiffError> {
        self.push(Op::LeakyRelu { a, slope })
    }

    /// Elementwise minimum; on ties the first argument is selected.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::Min(a, b))
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient passes unchanged for
    /// inputs on the boundary and is zero strictly outside.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        self.push(Op::Clip { a, lo, hi })
    }

    /// Per-row Euclidean norm `sqrt(sum_j a_ij^2 + eps)`, `n x m -> n x 1`.
    pub fn row_norm(&mut self, a: Var, eps: f64) -> Result<Var, DiffError> {
        let sq = self.square(a)?;
        let s = self.sum_cols(sq)?;
        let s = self.add_scalar(s, eps)?;
        self.sqrt(s)
    }

    /// Nodes whose value depends on any of `wrt`.
    fn dependents(&self, wrt: &[Var]) -> Vec<bool> {
        let mut live = vec![false; self.ops.len()];
        for v in wrt {
            live[v.0] = true;
        }
        for (i, op) in self.ops.iter().enumerate() {
            if live[i] {
                continue;
            }
            let (operands, differentiable) = op.operands();
            if differentiable {
                live[i] = operands.iter().flatten().any(|o| live[o.0]);
            }
        }
        live
    }

    /// Records the reverse-mode adjoint of scalar `output` with respect to
    /// each of `wrt`. Returns `None` for inputs the output does not depend on.
    ///
    /// The returned nodes are ordinary tape nodes and can be differentiated
    /// again.
    pub fn gradients(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>, DiffError> {
        for v in wrt.iter().chain(std::iter::once(&output)) {
            if v.0 >= self.ops.len() {
                return Err(DiffError::UnknownNode(v.0));
            }
        }
        let out_val = self.value(output);
        if out_val.item().is_none() {
            return Err(DiffError::NonScalar {
                rows: out_val.rows(),
                cols: out_val.cols(),
            });
        }
        let live = self.dependents(wrt);
        let end = output.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; end];
        if live[output.0] {
            adj[output.0] = Some(self.constant(1.0)?);
        }

        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.ops[i];
            let y = Var(i);
            let mut contribs: Vec<(Var, Var)> = Vec::with_capacity(2);
            match op {
                Op::Leaf | Op::Mask(_) => {}
                Op::MatMul { a, b, ta, tb } => {
                    if live[a.0] {
                        let da = if ta {
                            self.matmul_t(b, tb, g, true)?
                        } else {
                            self.matmul_t(g, false, b, !tb)?
                        };
                        contribs.push((a, da));
                    }
                    if live[b.0] {
                        let db = if tb {
                            self.matmul_t(g, true, a, ta)?
                        } else {
                            self.matmul_t(a, !ta, g, false)?
                        };
                        contribs.push((b, db));
                    }
                }
                Op::AddRow { a, row } => {
                    if live[a.0] {
                        contribs.push((a, g));
                    }
                    if live[row.0] {
                        let d = self.sum_rows(g)?;
                        contribs.push((row, d));
                    }
                }
                Op::SumRows(a) => {
                    let n = self.value(a).rows();
                    let d = self.broadcast_rows(g, n)?;
                    contribs.push((a, d));
                }
                Op::SumCols(a) => {
                    let m = self.value(a).cols();
                    let d = self.broadcast_cols(g, m)?;
                    contribs.push((a, d));
                }
                Op::BroadcastRows { a, .. } => {
                    let d = self.sum_rows(g)?;
                    contribs.push((a, d));
                }
                Op::BroadcastCols { a, .. } => {
                    let d = self.sum_cols(g)?;
                    contribs.push((a, d));
                }
                Op::Fill { a, .. } => {
                    let d = self.sum(g)?;
                    contribs.push((a, d));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(a).shape();
                    let d = self.fill(g, r, c)?;
                    contribs.push((a, d));
                }
                Op::Add(a, b) => {
                    if live[a.0] {
                        contribs.push((a, g));
                    }
                    if live[b.0] {
                        contribs.push((b, g));
                    }
                }
                Op::Sub(a, b) => {
                    if live[a.0] {
                        contribs.push((a, g));
                    }
                    if live[b.0] {
                        let d = self.neg(g)?;
                        contribs.push((b, d));
                    }
                }
                Op::Mul(a, b) => {
                    if live[a.0] {
                        let d = self.mul(g, b)?;
                        contribs.push((a, d));
                    }
                    if live[b.0] {
                        let d = self.mul(g, a)?;
                        contribs.push((b, d));
                    }
                }
                Op::Div(a, b) => {
                    if live[a.0] {
                        let d = self.div(g, b)?;
                        contribs.push((a, d));
                    }
                    if live[b.0] {
                        let gy = self.mul(g, y)?;
                        let q = self.div(gy, b)?;
                        let d = self.neg(q)?;
                        contribs.push((b, d));
                    }
                }
                Op::Affine { a, scale, .. } => {
                    let d = self.scale(g, scale)?;
                    contribs.push((a, d));
                }
                Op::Exp(a) => {
                    let d = self.mul(g, y)?;
                    contribs.push((a, d));
                }
                Op::Log(a) => {
                    let d = self.div(g, a)?;
                    contribs.push((a, d));
                }
                Op::Tanh(a) => {
                    let y2 = self.square(y)?;
                    let dy = self.affine(y2, -1.0, 1.0)?;
                    let d = self.mul(g, dy)?;
                    contribs.push((a, d));
                }
                Op::Sigmoid(a) => {
                    let one_minus = self.affine(y, -1.0, 1.0)?;
                    let dy = self.mul(y, one_minus)?;
                    let d = self.mul(g, dy)?;
                    contribs.push((a, d));
                }
                Op::Sqrt(a) => {
                    let half = self.scale(g, 0.5)?;
                    let d = self.div(half, y)?;
                    contribs.push((a, d));
                }
                Op::Square(a) => {
                    let two_a = self.scale(a, 2.0)?;
                    let d = self.mul(g, two_a)?;
                    contribs.push((a, d));
                }
                Op::LeakyRelu { a, slope } => {
                    let m = self.push(Op::Mask(MaskKind::Step { a, slope }))?;
                    let d = self.mul(g, m)?;
                    contribs.push((a, d));
                }
                Op::Min(a, b) => {
                    let m = self.push(Op::Mask(MaskKind::LessEq { a, b }))?;
                    let ga = self.mul(g, m)?;
                    if live[a.0] {
                        contribs.push((a, ga));
                    }
                    if live[b.0] {
                        let gb = self.sub(g, ga)?;
                        contribs.push((b, gb));
                    }
                }
                Op::Clip { a, lo, hi } => {
                    let m = self.push(Op::Mask(MaskKind::Inside { a, lo, hi }))?;
                    let d = self.mul(g, m)?;
                    contribs.push((a, d));
                }
            }
            for (target, d) in contribs {
                if !live[target.0] {
                    continue;
                }
                adj[target.0] = Some(match adj[target.0] {
                    None => d,
                    Some(prev) => self.add(prev, d)?,
                });
            }
        }
        Ok(wrt.iter().map(|v| adj.get(v.0).copied().flatten()).collect())
    }

    /// Gradient values of scalar `output` with respect to each of `wrt`.
    /// Fails with [`DiffError::Detached`] if some input does not influence
    /// the output.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Matrix>, DiffError> {
        let nodes = self.gradients(output, wrt)?;
        nodes
            .into_iter()
            .zip(wrt)
            .map(|(g, v)| match g {
                Some(g) => Ok(self.value(g).clone()),
                None => Err(DiffError::Detached(v.0)),
            })
            .collect()
    }

    /// Like [`grad`](Tape::grad) but detached inputs get a zero gradient.
    pub fn grad_or_zero(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Matrix>, DiffError> {
        let nodes = self.gradients(output, wrt)?;
        Ok(nodes
            .into_iter()
            .zip(wrt)
            .map(|(g, v)| match g {
                Some(g) => self.value(g).clone(),
                None => {
                    let (r, c) = self.value(*v).shape();
                    Matrix::zeros(r, c)
                }
            })
            .collect())
    }

    /// Re-evaluates the whole tape with some leaves replaced. Returns the
    /// value of every node.
    pub fn replay(&self, inputs: &[(Var, Matrix)]) -> Result<Vec<Matrix>, DiffError> {
        let mut overrides: Vec<Option<&Matrix>> = vec![None; self.ops.len()];
        for (v, m) in inputs {
            if v.0 >= self.ops.len() {
                return Err(DiffError::UnknownNode(v.0));
            }
            if !matches!(self.ops[v.0], Op::Leaf) {
                return Err(DiffError::NotALeaf(v.0));
            }
            if m.shape() != self.values[v.0].shape() {
                return Err(DiffError::Shape {
                    op: "replay",
                    lhs: self.values[v.0].shape(),
                    rhs: m.shape(),
                });
            }
            if !m.is_finite() {
                return Err(DiffError::NonFinite { op: "leaf" });
            }
            overrides[v.0] = Some(m);
        }
        let mut vals: Vec<Matrix> = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = match op {
                Op::Leaf => overrides[i].unwrap_or(&self.values[i]).clone(),
                _ => compute(op, &vals)?,
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Value of `output` after replaying with the given leaf values.
    pub fn forward(&self, output: Var, inputs: &[(Var, Matrix)]) -> Result<Matrix, DiffError> {
        let mut vals = self.replay(inputs)?;
        Ok(vals.swap_remove(output.0))
    }
}
