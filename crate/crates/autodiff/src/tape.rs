use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    /// Shapes are identical.
    None,
    /// rhs is a single row `(1, n)` combined with every row of lhs `(m, n)`.
    Row,
    /// rhs is a single column `(m, 1)` combined with every column of lhs.
    Col,
    /// rhs is a single scalar.
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Matmul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    SoftmaxT(Var, f64),
    LogSoftmax(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    Sum(Var),
    Mean(Var),
    RowGather(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    MaxN(Vec<Var>, Vec<u32>),
    Scale(Var, f64),
    AddK(Var),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Define-by-run gradient tape. Forward methods evaluate eagerly and record
/// one node each; [`Tape::backward`] replays the record in reverse.
///
/// Parameter values are snapshotted onto the tape when first referenced, so
/// the tape holds no borrow of the [`ParamStore`]. Re-referencing the same
/// parameter returns the cached node, which is what makes gradients
/// accumulate across multiple uses.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: Vec<(ParamId, Var)>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("rank {} tensor where rank <= 2 expected", shape.len()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Record a constant; it never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(Op::Const, shape, data, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(vec![1], vec![v])
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.constant(t.shape().to_vec(), t.data().to_vec())
    }

    /// Reference a parameter, snapshotting its current value. Repeated calls
    /// with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, var)) = self.param_nodes.iter().find(|(pid, _)| *pid == id) {
            return var;
        }
        let t = store.get(id);
        let var = self.push(
            Op::Param,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        );
        self.param_nodes.push((id, var));
        var
    }

    // ── Elementwise binary ops ───────────────────────────────────────

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa == sb {
            return Ok(Broadcast::None);
        }
        if self.nodes[b.0].value.len() == 1 {
            return Ok(Broadcast::Scalar);
        }
        let (ra, ca) = rows_cols(sa);
        let (rb, cb) = rows_cols(sb);
        if rb == 1 && cb == ca && ra > 1 {
            return Ok(Broadcast::Row);
        }
        if cb == 1 && rb == ra && ca > 1 {
            return Ok(Broadcast::Col);
        }
        Err(Error::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() })
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let bc = self.broadcast_kind(op_name, a, b)?;
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(av.len());
        match bc {
            Broadcast::None => out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y))),
            Broadcast::Scalar => {
                let y = bv[0];
                out.extend(av.iter().map(|&x| f(x, y)));
            }
            Broadcast::Row => {
                for r in 0..rows {
                    for c in 0..cols {
                        out.push(f(av[r * cols + c], bv[c]));
                    }
                }
            }
            Broadcast::Col => {
                for r in 0..rows {
                    for c in 0..cols {
                        out.push(f(av[r * cols + c], bv[r]));
                    }
                }
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(make(a, b, bc), shape, out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    // ── Elementwise unary ops ────────────────────────────────────────

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, make: impl Fn(Var) -> Op) -> Var {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(make(a), shape, value, needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.nodes[a.0].value.iter().find(|v| **v <= 0.0) {
            return Err(Error::LogNonPositive { value: bad });
        }
        Ok(self.unary(a, f64::ln, Op::Log))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, |v| Op::Scale(v, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddK)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ── Matrix product ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(&self.nodes[a.0].shape);
        let (k2, n) = rows_cols(&self.nodes[b.0].shape);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), vec![m, n], out, needs))
    }

    // ── Softmax family ───────────────────────────────────────────────

    /// Row-wise `softmax(x / tau)` along the last axis.
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail the check too
    pub fn softmax_t(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::NonPositiveTemperature { tau });
        }
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let o = &mut out[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = ((xi - mx) / tau).exp();
                z += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= z;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        Ok(self.push(Op::SoftmaxT(a, tau), shape, out, needs))
    }

    /// Row-wise log-softmax, computed via max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let o = &mut out[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&xi| (xi - mx).exp()).sum::<f64>().ln();
            for (oi, &xi) in o.iter_mut().zip(row) {
                *oi = xi - lse;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(Op::LogSoftmax(a), shape, out, needs)
    }

    // ── Structure ops ────────────────────────────────────────────────

    /// Concatenate along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of zero parts");
        if axis > 1 {
            return Err(Error::BadShape {
                op: "concat",
                shape: vec![axis],
                expected: "axis 0 or 1".to_string(),
            });
        }
        let (r0, c0) = rows_cols(&self.nodes[parts[0].0].shape);
        let mut rows = r0;
        let mut cols = c0;
        for &p in &parts[1..] {
            let (r, c) = rows_cols(&self.nodes[p.0].shape);
            if axis == 0 {
                if c != c0 {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                cols += c;
            }
        }
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(&self.nodes[p.0].value);
            }
        } else {
            for r in 0..rows {
                for &p in parts {
                    let (_, c) = rows_cols(&self.nodes[p.0].shape);
                    let v = &self.nodes[p.0].value;
                    out.extend_from_slice(&v[r * c..(r + 1) * c]);
                }
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::Concat(parts.to_vec(), axis), vec![rows, cols], out, needs))
    }

    /// Contiguous slice of `len` entries along `axis`, starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        let bound = if axis == 0 { rows } else { cols };
        if axis > 1 || start + len > bound {
            return Err(Error::IndexOutOfRange { op: "slice", index: start + len, bound });
        }
        let v = &self.nodes[a.0].value;
        let (out, shape) = if axis == 0 {
            (v[start * cols..(start + len) * cols].to_vec(), vec![len, cols])
        } else {
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
            }
            (out, vec![rows, len])
        };
        let needs = self.needs(a);
        Ok(self.push(Op::Slice(a, axis, start, len), shape, out, needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let needs = self.needs(a);
        self.push(Op::Sum(a), vec![1], vec![s], needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let needs = self.needs(a);
        self.push(Op::Mean(a), vec![1], vec![s / n], needs)
    }

    /// Gather rows of a `(V, E)` table: output row `i` is `table[ids[i]]`.
    /// This is exactly one-hot-times-table, done sparsely.
    pub fn row_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v_rows, cols) = rows_cols(&self.nodes[table.0].shape);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v_rows) {
            return Err(Error::IndexOutOfRange { op: "row_gather", index: bad, bound: v_rows });
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(table);
        Ok(self.push(Op::RowGather(table, ids.to_vec()), vec![ids.len(), cols], out, needs))
    }

    /// Per-row element pick: output `(m, 1)` with `y[r] = a[r, ids[r]]`.
    pub fn pick(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
        if ids.len() != rows {
            return Err(Error::BadShape {
                op: "pick",
                shape: vec![ids.len()],
                expected: format!("one index per row ({rows})"),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cols) {
            return Err(Error::IndexOutOfRange { op: "pick", index: bad, bound: cols });
        }
        let v = &self.nodes[a.0].value;
        let out: Vec<f64> = ids.iter().enumerate().map(|(r, &c)| v[r * cols + c]).collect();
        let needs = self.needs(a);
        Ok(self.push(Op::Pick(a, ids.to_vec()), vec![rows, 1], out, needs))
    }

    /// Elementwise maximum over several same-shaped nodes. Ties resolve to
    /// the earliest operand so backward routing is deterministic.
    pub fn max_n(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "max_n of zero parts");
        let shape = self.nodes[parts[0].0].shape.clone();
        for &p in &parts[1..] {
            if self.nodes[p.0].shape != shape {
                return Err(Error::ShapeMismatch {
                    op: "max_n",
                    lhs: shape,
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let n = self.nodes[parts[0].0].value.len();
        let mut out = self.nodes[parts[0].0].value.clone();
        let mut which = vec![0u32; n];
        for (pi, &p) in parts.iter().enumerate().skip(1) {
            let v = &self.nodes[p.0].value;
            for j in 0..n {
                if v[j] > out[j] {
                    out[j] = v[j];
                    which[j] = pi as u32;
                }
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::MaxN(parts.to_vec(), which), shape, out, needs))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reset all accumulated gradients, keeping forward values intact so a
    /// second backward pass from a different scalar can reuse the tape.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Accumulate `d loss / d node` for every node that can reach a
    /// parameter, starting from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        acc_into(&mut self.grads[loss.0], 1, 0, &[1.0]);
        let nodes = &self.nodes;
        for i in (0..nodes.len()).rev() {
            if self.grads[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            // Inputs always precede their consumers, so splitting at `i`
            // gives mutable access to every input gradient slot.
            let (lo, hi) = self.grads.split_at_mut(i);
            let g = hi[0].as_ref().expect("checked above").clone();
            Self::backprop_node(nodes, &nodes[i], &g, lo);
        }
        Ok(())
    }

    fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &[f64] { &nodes[v.0].value };
        let nlen = |v: Var| nodes[v.0].value.len();
        let needs = |v: Var| nodes[v.0].needs_grad;
        match &node.op {
            Op::Const | Op::Param => {}
            Op::Add(a, b, bc) => {
                if needs(*a) {
                    acc_into(&mut lo[a.0], nlen(*a), 0, g);
                }
                if needs(*b) {
                    let (rows, cols) = rows_cols(&node.shape);
                    reduce_broadcast(&mut lo[b.0], nlen(*b), g, *bc, rows, cols, 1.0);
                }
            }
            Op::Sub(a, b, bc) => {
                if needs(*a) {
                    acc_into(&mut lo[a.0], nlen(*a), 0, g);
                }
                if needs(*b) {
                    let (rows, cols) = rows_cols(&node.shape);
                    reduce_broadcast(&mut lo[b.0], nlen(*b), g, *bc, rows, cols, -1.0);
                }
            }
            Op::Mul(a, b, bc) => {
                let (rows, cols) = rows_cols(&node.shape);
                if needs(*a) {
                    let bv = val(*b);
                    let slot = ensure(&mut lo[a.0], nlen(*a));
                    match bc {
                        Broadcast::None => {
                            for j in 0..slot.len() {
                                slot[j] += g[j] * bv[j];
                            }
                        }
                        Broadcast::Scalar => {
                            for j in 0..slot.len() {
                                slot[j] += g[j] * bv[0];
                            }
                        }
                        Broadcast::Row => {
                            for r in 0..rows {
                                for c in 0..cols {
                                    slot[r * cols + c] += g[r * cols + c] * bv[c];
                                }
                            }
                        }
                        Broadcast::Col => {
                            for r in 0..rows {
                                for c in 0..cols {
                                    slot[r * cols + c] += g[r * cols + c] * bv[r];
                                }
                            }
                        }
                    }
                }
                if needs(*b) {
                    let av = val(*a);
                    let prod: Vec<f64> = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                    reduce_broadcast(&mut lo[b.0], nlen(*b), &prod, *bc, rows, cols, 1.0);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = rows_cols(&nodes[a.0].shape);
                let n = rows_cols(&node.shape).1;
                if needs(*a) {
                    let slot = ensure(&mut lo[a.0], m * k);
                    mm_nt(g, val(*b), slot, m, n, k);
                }
                if needs(*b) {
                    let slot = ensure(&mut lo[b.0], k * n);
                    mm_tn(val(*a), g, slot, m, k, n);
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let slot = ensure(&mut lo[a.0], y.len());
                    for j in 0..y.len() {
                        slot[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let slot = ensure(&mut lo[a.0], y.len());
                    for j in 0..y.len() {
                        slot[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let slot = ensure(&mut lo[a.0], y.len());
                    for j in 0..y.len() {
                        slot[j] += g[j] * y[j];
                    }
                }
            }
            Op::Log(a) => {
                if needs(*a) {
                    let x = val(*a);
                    let slot = ensure(&mut lo[a.0], x.len());
                    for j in 0..x.len() {
                        slot[j] += g[j] / x[j];
                    }
                }
            }
            Op::SoftmaxT(a, tau) => {
                if needs(*a) {
                    let y = &node.value;
                    let (rows, cols) = rows_cols(&node.shape);
                    let slot = ensure(&mut lo[a.0], y.len());
                    for r in 0..rows {
                        let off = r * cols;
                        let dot: f64 =
                            (0..cols).map(|c| g[off + c] * y[off + c]).sum();
                        for c in 0..cols {
                            slot[off + c] += y[off + c] * (g[off + c] - dot) / tau;
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let (rows, cols) = rows_cols(&node.shape);
                    let slot = ensure(&mut lo[a.0], y.len());
                    for r in 0..rows {
                        let off = r * cols;
                        let gsum: f64 = (0..cols).map(|c| g[off + c]).sum();
                        for c in 0..cols {
                            slot[off + c] += g[off + c] - y[off + c].exp() * gsum;
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (rows, _cols) = rows_cols(&node.shape);
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let plen = nlen(p);
                        if needs(p) {
                            acc_into(&mut lo[p.0], plen, 0, &g[off..off + plen]);
                        }
                        off += plen;
                    }
                } else {
                    let total_cols = rows_cols(&node.shape).1;
                    let mut col_off = 0;
                    for &p in parts {
                        let pc = rows_cols(&nodes[p.0].shape).1;
                        if needs(p) {
                            let slot = ensure(&mut lo[p.0], rows * pc);
                            for r in 0..rows {
                                for c in 0..pc {
                                    slot[r * pc + c] += g[r * total_cols + col_off + c];
                                }
                            }
                        }
                        col_off += pc;
                    }
                }
            }
            Op::Slice(a, axis, start, len) => {
                if needs(*a) {
                    let (_arows, acols) = rows_cols(&nodes[a.0].shape);
                    let slot = ensure(&mut lo[a.0], nlen(*a));
                    let (rows, cols) = rows_cols(&node.shape);
                    if *axis == 0 {
                        acc_slice(&mut slot[start * acols..], &g[..len * acols]);
                    } else {
                        for r in 0..rows {
                            for c in 0..cols {
                                slot[r * acols + start + c] += g[r * cols + c];
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let slot = ensure(&mut lo[a.0], nlen(*a));
                    for s in slot.iter_mut() {
                        *s += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = nlen(*a);
                    let slot = ensure(&mut lo[a.0], n);
                    let gper = g[0] / n as f64;
                    for s in slot.iter_mut() {
                        *s += gper;
                    }
                }
            }
            Op::RowGather(table, ids) => {
                if needs(*table) {
                    let cols = rows_cols(&node.shape).1;
                    let slot = ensure(&mut lo[table.0], nlen(*table));
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..cols {
                            slot[i * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Pick(a, ids) => {
                if needs(*a) {
                    let acols = rows_cols(&nodes[a.0].shape).1;
                    let slot = ensure(&mut lo[a.0], nlen(*a));
                    for (r, &c) in ids.iter().enumerate() {
                        slot[r * acols + c] += g[r];
                    }
                }
            }
            Op::MaxN(parts, which) => {
                for (pi, &p) in parts.iter().enumerate() {
                    if !needs(p) {
                        continue;
                    }
                    let slot = ensure(&mut lo[p.0], nlen(p));
                    for j in 0..which.len() {
                        if which[j] == pi as u32 {
                            slot[j] += g[j];
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if needs(*a) {
                    let slot = ensure(&mut lo[a.0], nlen(*a));
                    for j in 0..slot.len() {
                        slot[j] += g[j] * k;
                    }
                }
            }
            Op::AddK(a) => {
                if needs(*a) {
                    acc_into(&mut lo[a.0], nlen(*a), 0, g);
                }
            }
        }
    }

    /// Write accumulated parameter gradients back into the store, in the
    /// order parameters were first referenced on this tape.
    pub fn apply_param_grads(&self, store: &mut ParamStore) {
        for &(pid, var) in &self.param_nodes {
            if let Some(g) = self.grads[var.0].as_deref() {
                store.get_mut(pid).accumulate_grad(g);
            }
        }
    }
}

fn ensure(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn acc_into(slot: &mut Option<Vec<f64>>, len: usize, offset: usize, g: &[f64]) {
    let s = ensure(slot, len);
    acc_slice(&mut s[offset..], g);
}

fn acc_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Reduce an output-shaped gradient onto a broadcast operand and accumulate.
fn reduce_broadcast(
    slot: &mut Option<Vec<f64>>,
    blen: usize,
    g: &[f64],
    bc: Broadcast,
    rows: usize,
    cols: usize,
    sign: f64,
) {
    let s = ensure(slot, blen);
    match bc {
        Broadcast::None => {
            for j in 0..blen {
                s[j] += sign * g[j];
            }
        }
        Broadcast::Scalar => s[0] += sign * g.iter().sum::<f64>(),
        Broadcast::Row => {
            for r in 0..rows {
                for c in 0..cols {
                    s[c] += sign * g[r * cols + c];
                }
            }
        }
        Broadcast::Col => {
            for r in 0..rows {
                for c in 0..cols {
                    s[r] += sign * g[r * cols + c];
                }
            }
        }
    }
}

/// `out += a (m,k) · b (k,n)`, ikj loop order for contiguous access. Public
/// so tape-free forward passes reproduce tape matmuls bit for bit.
pub fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += g (m,n) · bᵀ` where `b` is `(k,n)`: gradient w.r.t. the left
/// matmul operand.
fn mm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            orow[l] += acc;
        }
    }
}

/// `out += aᵀ · g` where `a` is `(m,k)`, `g` is `(m,n)`: gradient w.r.t. the
/// right matmul operand.
fn mm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, shape: Vec<usize>, data: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register(name, Tensor::new(shape, data));
        (s, id)
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 3], vec![0.0, 0.0, 0.0]);
        let y = t.softmax_t(x, 1.0).unwrap();
        for &v in t.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_two_logits_matches_closed_form() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 2], vec![2.0, 0.0]);
        let y = t.softmax_t(x, 1.0).unwrap();
        assert!((t.value(y)[0] - 0.8807970779778824).abs() < 1e-12);
        assert!((t.value(y)[1] - 0.11920292202211755).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 2], vec![1.0, 2.0]);
        assert!(matches!(
            t.softmax_t(x, 0.0),
            Err(Error::NonPositiveTemperature { .. })
        ));
        assert!(t.softmax_t(x, -1.0).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t.constant(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let a = t.constant(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let y = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(y), t.value(a));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]);
        let b = t.constant(vec![2, 2], vec![0.0; 4]);
        match t.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut t = Tape::new();
        let x = t.constant(vec![2], vec![1.0, 0.0]);
        assert!(matches!(t.log(x), Err(Error::LogNonPositive { value }) if value == 0.0));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let (store, id) = store_with("x", vec![3], vec![1.0, 2.0, 3.0]);
        let mut t = Tape::new();
        let x = t.param(&store, id);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_nonscalar() {
        let (store, id) = store_with("x", vec![2], vec![1.0, 2.0]);
        let mut t = Tape::new();
        let x = t.param(&store, id);
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn reuse_accumulates_gradients() {
        // y = sum(x) + sum(x) should give grad 2 everywhere.
        let (store, id) = store_with("x", vec![2], vec![5.0, -1.0]);
        let mut t = Tape::new();
        let x = t.param(&store, id);
        let s1 = t.sum(x);
        let s2 = t.sum(x);
        let y = t.add(s1, s2).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn param_node_is_cached() {
        let (store, id) = store_with("x", vec![2], vec![1.0, 2.0]);
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        assert_eq!(a, b);
    }

    #[test]
    fn temperature_equals_prescaled_logits() {
        // softmax_t(v, tau) must match softmax_t(v / tau, 1) in values and
        // in gradients w.r.t. v.
        let data = vec![0.3, -1.2, 2.0, 0.7];
        let tau = 0.37;
        let run = |pre_scale: bool| {
            let (store, id) = store_with("v", vec![1, 4], data.clone());
            let mut t = Tape::new();
            let v = t.param(&store, id);
            let y = if pre_scale {
                let scaled = t.scale(v, 1.0 / tau);
                t.softmax_t(scaled, 1.0).unwrap()
            } else {
                t.softmax_t(v, tau).unwrap()
            };
            // weighted sum so the gradient is non-trivial
            let w = t.constant(vec![1, 4], vec![1.0, -2.0, 0.5, 3.0]);
            let p = t.mul(y, w).unwrap();
            let loss = t.sum(p);
            t.backward(loss).unwrap();
            (t.value(y).to_vec(), t.grad(v).unwrap().to_vec())
        };
        let (y0, g0) = run(false);
        let (y1, g1) = run(true);
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g0.iter().zip(&g1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_and_concat_round_trip_gradient() {
        let (store, id) = store_with("x", vec![2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]);
        let mut t = Tape::new();
        let x = t.param(&store, id);
        let left = t.slice(x, 1, 0, 2).unwrap();
        let right = t.slice(x, 1, 2, 2).unwrap();
        let back = t.concat(&[left, right], 1).unwrap();
        assert_eq!(t.value(back), t.value(x));
        let loss = t.sum(back);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn row_gather_scatters_gradient() {
        let (store, id) = store_with("emb", vec![3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let mut t = Tape::new();
        let e = t.param(&store, id);
        let rows = t.row_gather(e, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(rows), &[5., 6., 1., 2., 5., 6.]);
        let loss = t.sum(rows);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(e).unwrap(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn pick_selects_per_row() {
        let (store, id) = store_with("x", vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let mut t = Tape::new();
        let x = t.param(&store, id);
        let y = t.pick(x, &[2, 0]).unwrap();
        assert_eq!(t.value(y), &[3.0, 4.0]);
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0., 0., 1., 1., 0., 0.]);
    }

    #[test]
    fn max_n_routes_gradient_to_argmax() {
        let mut store = ParamStore::new();
        let id = store.register("a", Tensor::new(vec![1, 2], vec![1.0, 9.0]));
        let id2 = store.register("b", Tensor::new(vec![1, 2], vec![5.0, 2.0]));
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id2);
        let m = t.max_n(&[a, b]).unwrap();
        assert_eq!(t.value(m), &[5.0, 9.0]);
        let loss = t.sum(m);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 1.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn broadcast_row_and_col() {
        let mut t = Tape::new();
        let x = t.constant(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let row = t.constant(vec![1, 3], vec![10., 20., 30.]);
        let col = t.constant(vec![2, 1], vec![100., 200.]);
        let y = t.add(x, row).unwrap();
        assert_eq!(t.value(y), &[11., 22., 33., 14., 25., 36.]);
        let z = t.add(x, col).unwrap();
        assert_eq!(t.value(z), &[101., 102., 103., 204., 205., 206.]);
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let (store, id) = store_with("b", vec![1, 2], vec![0.5, -0.5]);
        let mut t = Tape::new();
        let x = t.constant(vec![3, 2], vec![1.; 6]);
        let b = t.param(&store, id);
        let y = t.add(x, b).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(b).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn two_backward_passes_with_zero_between() {
        let (store, id) = store_with("x", vec![2], vec![3.0, 4.0]);
        let mut t = Tape::new();
        let x = t.param(&store, id);
        let sq = t.mul(x, x).unwrap();
        let l1 = t.sum(sq);
        let l2 = t.mean(sq);
        t.backward(l1).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0, 8.0]);
        t.zero_grads();
        t.backward(l2).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
    }
}
