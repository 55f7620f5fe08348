use super::{check_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations. Binary kinds accept a second operand of equal
/// shape or a single-element operand that is broadcast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Hadamard,
    Abs,
    Tanh,
    Relu,
    Scale(f64),
}

impl ElementwiseOp {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Hadamard)
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Hadamard => "hadamard",
            Self::Abs => "abs",
            Self::Tanh => "tanh",
            Self::Relu => "relu",
            Self::Scale(_) => "scale",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Unary(ElementwiseOp, Var),
    Binary(ElementwiseOp, Var, Var),
    Sigmoid(Var),
    Concat(Var, Var),
    Slice { src: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Propagate { op: Var, h: Var },
    AddBias { x: Var, bias: Var },
    RepeatBatch(Var),
    RowNormalize { src: Var, sums: Vec<f64> },
    Sum(Var),
    Mean(Var),
    MeanAbsError(Var, Var),
    GatherRows { src: Var, rows: Vec<usize> },
    ScatterRows { src: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run recording of tensor operations.
///
/// Every operation appends one node holding its output value; `backward`
/// walks the nodes in reverse and accumulates gradients into every node
/// whose value has `requires_grad` set.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Record an input value. Its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.requires_grad = false;
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_grad())
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &str, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: None,
        };
        Ok(self.push(value, op))
    }

    // ---- forward operations ----

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let out = matmul_nn(self.data(a), self.data(b), m, k, n);
        self.record("matmul", &[m, n], out, Op::Matmul(a, b), &[a, b])
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op.is_binary(), b) {
            (true, Some(b)) => self.binary(op, a, b),
            (false, None) => self.unary(op, a),
            (true, None) => Err(Error::Contract(format!("{} needs two operands", op.name()))),
            (false, Some(_)) => Err(Error::Contract(format!("{} takes one operand", op.name()))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Hadamard, a, b)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Abs, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(ElementwiseOp::Relu, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary(ElementwiseOp::Scale(factor), a)
    }

    fn unary(&mut self, op: ElementwiseOp, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out: Vec<f64> = match op {
            ElementwiseOp::Abs => x.data().iter().map(|v| v.abs()).collect(),
            ElementwiseOp::Tanh => x.data().iter().map(|v| v.tanh()).collect(),
            ElementwiseOp::Relu => x.data().iter().map(|v| v.max(0.0)).collect(),
            ElementwiseOp::Scale(s) => x.data().iter().map(|v| v * s).collect(),
            _ => unreachable!("binary op routed to unary"),
        };
        let shape = x.shape().to_vec();
        self.record(op.name(), &shape, out, Op::Unary(op, a), &[a])
    }

    fn binary(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op.name(), x, y)?;
        let n = shape.iter().product::<usize>();
        let f = |u: f64, v: f64| match op {
            ElementwiseOp::Add => u + v,
            ElementwiseOp::Sub => u - v,
            ElementwiseOp::Hadamard => u * v,
            _ => unreachable!("unary op routed to binary"),
        };
        let out: Vec<f64> = (0..n).map(|i| f(at(x, i), at(y, i))).collect();
        self.record(op.name(), &shape, out, Op::Binary(op, a, b), &[a, b])
    }

    /// Logistic function, evaluated without overflow for large |x|.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = x.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = x.shape().to_vec();
        self.record("sigmoid", &shape, out, Op::Sigmoid(a), &[a])
    }

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let (c1, c2) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = c1 + c2;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len() + db.len());
        for (ra, rb) in da.chunks(c1).zip(db.chunks(c2)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        self.record("concat_channels", &shape, out, Op::Concat(a, b), &[a, b])
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_channels(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(src);
        let c = *s.last().ok_or_else(|| Error::dim("slice_channels", "scalar input"))?;
        if len == 0 || start + len > c {
            return Err(Error::dim(
                "slice_channels",
                format!("range {start}..{} of {c} channels", start + len),
            ));
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        let out = self
            .data(src)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.record("slice_channels", &shape, out, Op::Slice { src, start }, &[src])
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(src).numel() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(src)),
            ));
        }
        let out = self.data(src).to_vec();
        self.record("reshape", shape, out, Op::Reshape(src), &[src])
    }

    pub fn transpose(&mut self, src: Var) -> Result<Var> {
        let (r, c) = matrix_dims("transpose", self.shape(src))?;
        let out = transpose(self.data(src), r, c);
        self.record("transpose", &[c, r], out, Op::Transpose(src), &[src])
    }

    /// Left-multiply every batch slice: `out[b] = op · h[b]` for `op: [N, N]`, `h: [B, N, C]`.
    pub fn propagate(&mut self, op: Var, h: Var) -> Result<Var> {
        let (n, n2) = matrix_dims("propagate", self.shape(op))?;
        let hs = self.shape(h);
        if n != n2 || hs.len() != 3 || hs[1] != n {
            return Err(Error::dim("propagate", format!("{:?} applied to {hs:?}", self.shape(op))));
        }
        let shape = hs.to_vec();
        let (b, c) = (shape[0], shape[2]);
        let (od, hd) = (self.data(op), self.data(h));
        let mut out = Vec::with_capacity(b * n * c);
        for slice in hd.chunks(n * c) {
            out.extend(matmul_nn(od, slice, n, n, c));
        }
        self.record("propagate", &shape, out, Op::Propagate { op, h }, &[op, h])
    }

    /// Add a `[C]` bias to every row of a `[..., C]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(bias) != [c] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} for {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let bd = self.data(bias);
        let out = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(v, b)| v + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.record("add_bias", &shape, out, Op::AddBias { x, bias }, &[x, bias])
    }

    /// Stack `batch` copies of a `[N, C]` tensor into `[batch, N, C]`.
    pub fn repeat_batch(&mut self, src: Var, batch: usize) -> Result<Var> {
        let (n, c) = matrix_dims("repeat_batch", self.shape(src))?;
        if batch == 0 {
            return Err(Error::dim("repeat_batch", "zero batch"));
        }
        let out = self.data(src).repeat(batch);
        self.record("repeat_batch", &[batch, n, c], out, Op::RepeatBatch(src), &[src])
    }

    /// Divide each row of a non-negative matrix by its sum. Rows summing to
    /// zero become uniform `1/C` and pass no gradient.
    pub fn row_normalize(&mut self, src: Var) -> Result<Var> {
        let (r, c) = matrix_dims("row_normalize", self.shape(src))?;
        let x = self.data(src);
        if x.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("row_normalize expects non-negative input".into()));
        }
        let mut out = Vec::with_capacity(r * c);
        let mut sums = Vec::with_capacity(r);
        for row in x.chunks(c) {
            let s: f64 = row.iter().sum();
            sums.push(s);
            if s > 0.0 {
                out.extend(row.iter().map(|v| v / s));
            } else {
                out.extend(std::iter::repeat_n(1.0 / c as f64, c));
            }
        }
        self.record("row_normalize", &[r, c], out, Op::RowNormalize { src, sums }, &[src])
    }

    pub fn sum(&mut self, src: Var) -> Result<Var> {
        let s = self.data(src).iter().sum();
        self.record("sum", &[], vec![s], Op::Sum(src), &[src])
    }

    pub fn mean(&mut self, src: Var) -> Result<Var> {
        let d = self.data(src);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.record("mean", &[], vec![m], Op::Mean(src), &[src])
    }

    /// `(1/count) Σ |pred − target|`.
    pub fn mean_abs_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::dim(
                "mean_abs_error",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let (p, t) = (self.data(pred), self.data(target));
        let m = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        self.record("mean_abs_error", &[], vec![m], Op::MeanAbsError(pred, target), &[pred, target])
    }

    /// Select rows of a `[R, C]` matrix.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = matrix_dims("gather_rows", self.shape(src))?;
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::dim("gather_rows", format!("row selection out of range for {r} rows")));
        }
        let x = self.data(src);
        let out = rows.iter().flat_map(|&i| x[i * c..(i + 1) * c].iter().copied()).collect();
        let op = Op::GatherRows { src, rows: rows.to_vec() };
        self.record("gather_rows", &[rows.len(), c], out, op, &[src])
    }

    /// Place the rows of a `[K, C]` matrix at `rows` of a zero `[total, C]` matrix.
    pub fn scatter_rows(&mut self, src: Var, rows: &[usize], total: usize) -> Result<Var> {
        let (k, c) = matrix_dims("scatter_rows", self.shape(src))?;
        if rows.len() != k || rows.iter().any(|&i| i >= total) {
            return Err(Error::dim("scatter_rows", format!("{k} rows into {total}")));
        }
        let mut out = vec![0.0; total * c];
        for (j, &i) in rows.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&self.data(src)[j * c..(j + 1) * c]);
        }
        let op = Op::ScatterRows { src, rows: rows.to_vec() };
        self.record("scatter_rows", &[total, c], out, op, &[src])
    }

    // ---- reverse pass ----

    /// Populate gradients of `loss` with respect to every recorded value that
    /// requires them. Previous gradients on this tape are discarded first;
    /// fan-out contributions accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].value.grad.take() else {
                continue;
            };
            let contributions = self.input_grads(idx, &g);
            self.nodes[idx].value.grad = Some(g);
            for (var, delta) in contributions {
                if !self.requires_grad(var) {
                    continue;
                }
                let slot = &mut self.nodes[var.0].value.grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    None => *slot = Some(delta),
                }
            }
        }
        for node in &self.nodes {
            if let Some(g) = &node.value.grad {
                check_finite("backward", g)?;
            }
        }
        Ok(())
    }

    fn input_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            &Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                vec![
                    (a, matmul_nt(g, self.data(b), m, n, k)),
                    (b, matmul_tn(self.data(a), g, m, k, n)),
                ]
            }
            &Op::Unary(op, a) => {
                let x = self.data(a);
                let d: Vec<f64> = match op {
                    ElementwiseOp::Abs => g.iter().zip(x).map(|(g, &x)| g * sign(x)).collect(),
                    ElementwiseOp::Tanh => g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    ElementwiseOp::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    ElementwiseOp::Scale(s) => g.iter().map(|g| g * s).collect(),
                    _ => unreachable!(),
                };
                vec![(a, d)]
            }
            &Op::Binary(op, a, b) => {
                let (x, y) = (self.value(a), self.value(b));
                let (ga, gb): (Vec<f64>, Vec<f64>) = match op {
                    ElementwiseOp::Add => (g.to_vec(), g.to_vec()),
                    ElementwiseOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    ElementwiseOp::Hadamard => (
                        g.iter().enumerate().map(|(i, g)| g * at(y, i)).collect(),
                        g.iter().enumerate().map(|(i, g)| g * at(x, i)).collect(),
                    ),
                    _ => unreachable!(),
                };
                vec![(a, reduce_broadcast(ga, x.numel())), (b, reduce_broadcast(gb, y.numel()))]
            }
            &Op::Sigmoid(a) => vec![(a, g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect())],
            &Op::Concat(a, b) => {
                let (c1, c2) = (self.value(a).channels(), self.value(b).channels());
                let mut ga = Vec::with_capacity(self.value(a).numel());
                let mut gb = Vec::with_capacity(self.value(b).numel());
                for row in g.chunks(c1 + c2) {
                    ga.extend_from_slice(&row[..c1]);
                    gb.extend_from_slice(&row[c1..]);
                }
                vec![(a, ga), (b, gb)]
            }
            &Op::Slice { src, start } => {
                let c = self.value(src).channels();
                let len = node.value.channels();
                let mut d = vec![0.0; self.value(src).numel()];
                for (row, grow) in d.chunks_mut(c).zip(g.chunks(len)) {
                    row[start..start + len].copy_from_slice(grow);
                }
                vec![(src, d)]
            }
            &Op::Reshape(src) => vec![(src, g.to_vec())],
            &Op::Transpose(src) => {
                let (r, c) = (self.shape(src)[0], self.shape(src)[1]);
                vec![(src, transpose(g, c, r))]
            }
            &Op::Propagate { op, h } => {
                let n = self.shape(op)[0];
                let c = self.shape(h)[2];
                let a = self.data(op);
                let mut g_op = vec![0.0; n * n];
                let mut g_h = Vec::with_capacity(g.len());
                for (gs, hs) in g.chunks(n * c).zip(self.data(h).chunks(n * c)) {
                    let part = matmul_nt(gs, hs, n, c, n);
                    g_op.iter_mut().zip(part).for_each(|(acc, v)| *acc += v);
                    g_h.extend(matmul_tn(a, gs, n, n, c));
                }
                vec![(op, g_op), (h, g_h)]
            }
            &Op::AddBias { x, bias } => {
                let c = node.value.channels();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                }
                vec![(x, g.to_vec()), (bias, gb)]
            }
            &Op::RepeatBatch(src) => {
                let len = self.value(src).numel();
                let mut d = vec![0.0; len];
                for chunk in g.chunks(len) {
                    d.iter_mut().zip(chunk).for_each(|(acc, v)| *acc += v);
                }
                vec![(src, d)]
            }
            Op::RowNormalize { src, sums } => {
                let c = node.value.channels();
                let mut d = Vec::with_capacity(g.len());
                for ((grow, yrow), &s) in g.chunks(c).zip(out.chunks(c)).zip(sums) {
                    if s > 0.0 {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        d.extend(grow.iter().map(|gv| (gv - dot) / s));
                    } else {
                        d.extend(std::iter::repeat_n(0.0, c));
                    }
                }
                vec![(*src, d)]
            }
            &Op::Sum(src) => vec![(src, vec![g[0]; self.value(src).numel()])],
            &Op::Mean(src) => {
                let n = self.value(src).numel();
                vec![(src, vec![g[0] / n as f64; n])]
            }
            &Op::MeanAbsError(p, t) => {
                let n = self.value(p).numel() as f64;
                let gp: Vec<f64> = self
                    .data(p)
                    .iter()
                    .zip(self.data(t))
                    .map(|(a, b)| g[0] * sign(a - b) / n)
                    .collect();
                let gt = gp.iter().map(|v| -v).collect();
                vec![(p, gp), (t, gt)]
            }
            Op::GatherRows { src, rows } => {
                let c = node.value.channels();
                let mut d = vec![0.0; self.value(*src).numel()];
                for (j, &i) in rows.iter().enumerate() {
                    d[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[j * c..(j + 1) * c])
                        .for_each(|(acc, v)| *acc += v);
                }
                vec![(*src, d)]
            }
            Op::ScatterRows { src, rows } => {
                let c = node.value.channels();
                let d = rows.iter().flat_map(|&i| g[i * c..(i + 1) * c].iter().copied()).collect();
                vec![(*src, d)]
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sign with a zero subgradient at exactly zero.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn at(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn broadcast_shape(op: &'static str, x: &Tensor, y: &Tensor) -> Result<Vec<usize>> {
    if x.shape() == y.shape() || y.numel() == 1 {
        Ok(x.shape().to_vec())
    } else if x.numel() == 1 {
        Ok(y.shape().to_vec())
    } else {
        Err(Error::dim(op, format!("{:?} vs {:?}", x.shape(), y.shape())))
    }
}

fn reduce_broadcast(g: Vec<f64>, target_len: usize) -> Vec<f64> {
    if g.len() == target_len {
        g
    } else {
        vec![g.iter().sum()]
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        &[r, c] => Ok((r, c)),
        _ => Err(Error::dim(op, format!("expected a matrix, got {shape:?}"))),
    }
}

fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += s * bv;
            }
        }
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ` → `[m×k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = ar.iter().zip(&b[j * n..(j + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · g[m×n]` → `[k×n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += s * gv;
            }
        }
    }
    out
}
