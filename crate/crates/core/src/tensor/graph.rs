use super::{GradBuffer, ParamId, ParamStore, Tensor, MASK_THRESHOLD};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used as negative controls for
/// gradient checking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// relu passes the upstream gradient through unconditionally.
    ReluPassThrough,
    /// the bias gradient of a row-broadcast add is dropped.
    DropBiasGrad,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    L2Rows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedSoftmax(Var),
    ScaleRows(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
        denom: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Option<Vec<f64>>,
}

/// A single-threaded differentiation tape.
///
/// Nodes are appended in creation order, which is a topological order, so
/// the backward sweep walks the tape once in reverse.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    bound: Vec<Option<Var>>,
    fault: Option<BackwardFault>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            bound: Vec::new(),
            fault: None,
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            params: Some(params),
            bound: vec![None; params.len()],
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of the last loss passed to [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Leaf that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a stored parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    pub fn accumulate_into(&self, buf: &mut GradBuffer) {
        for (id, g) in self.param_grads() {
            buf.add(id, g);
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}x{k}] x [{k2}x{n}]: inner dimensions differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    /// `a x b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul_t",
                format!("[{m}x{k}] x [{n}x{k2}]^T: inner dimensions differ"),
            ));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulT(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(
                op,
                format!("[{}x{}] vs [{}x{}]", da.0, da.1, db.0, db.1),
            ));
        }
        Ok(da)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (m, n) = self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(m, n, out), Op::Scale(a, s), rg)
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let (br, bc) = self.dims(bias);
        if br != 1 || bc != n {
            return Err(Error::shape(
                "add_bias",
                format!("bias [{br}x{bc}] for input [{m}x{n}]"),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::matrix(m, n, out), Op::AddBias(x, bias), rg))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(Tensor::matrix(m, n, out), Op::Relu(x), rg)
    }

    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_last_dim", "no inputs"));
        };
        let m = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(Error::shape(
                    "concat_last_dim",
                    format!("row counts differ: {m} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(m, n, out), Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of [{m}x{n}]", start + len),
            ));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, len, out), Op::SliceCols(x, start), rg))
    }

    /// Column means, `m x n -> 1 x n`.
    pub fn mean_pool_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if m == 0 {
            return Err(Error::shape("mean_pool_rows", "zero rows"));
        }
        let mut out = vec![0.0; n];
        for row in self.value(x).data().chunks(n.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(1, n, out), Op::MeanRows(x), rg))
    }

    /// Euclidean norm of every row, `m x n -> m x 1`.
    pub fn l2_norm_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let out = self
            .value(x)
            .data()
            .chunks(n.max(1))
            .map(|r| dot(r, r).sqrt())
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::matrix(m, 1, out), Op::L2Rows(x), rg)
    }

    /// Row-wise layer normalization followed by the affine map `gamma, beta`
    /// (both `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.dims(p) != (1, n) {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} must be [1x{n}], got {:?}", self.dims(p)),
                ));
            }
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::matrix(m, n, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax of `logits + mask`. Mask entries are `0` or a large
    /// negative value ([`super::MASK_NEG`] or `-inf`); masked entries come
    /// out as exactly zero.
    pub fn masked_softmax(&mut self, logits: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if let Some(mk) = mask {
            if mk.dims2()? != (m, n) {
                return Err(Error::shape(
                    "masked_softmax",
                    format!("mask {:?} for logits [{m}x{n}]", mk.shape()),
                ));
            }
        }
        let x = self.value(logits).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xr = &x[i * n..(i + 1) * n];
            let mr = mask.map(|mk| mk.row(i));
            let masked = |j: usize| mr.is_some_and(|r| r[j] <= MASK_THRESHOLD);
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if !masked(j) {
                    let z = xr[j] + mr.map_or(0.0, |r| r[j]);
                    max = max.max(z);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { row: i });
            }
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                if !masked(j) {
                    let e = (xr[j] + mr.map_or(0.0, |r| r[j]) - max).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            let inv = 1.0 / sum;
            orow.iter_mut().for_each(|p| *p *= inv);
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MaskedSoftmax(logits), rg))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if factors.len() != m {
            return Err(Error::shape(
                "scale_rows",
                format!("{} factors for {m} rows", factors.len()),
            ));
        }
        let mut out = self.value(x).data().to_vec();
        for (row, f) in out.chunks_mut(n.max(1)).zip(&factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, n, out), Op::ScaleRows(x, factors), rg))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table);
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {id} of a {m}-row table"),
                ));
            }
            out.extend_from_slice(&t[id * n..(id + 1) * n]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), n, out),
            Op::Gather(table, ids.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax cross-entropy of a flat logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let x = self.value(logits).data();
        if target >= x.len() {
            return Err(Error::TargetOutOfRange {
                target,
                count: x.len(),
            });
        }
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = sum.ln() + max - x[target];
        let probs = exps.iter().map(|e| e / sum).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Binary cross-entropy with logits, averaged over entries whose weight
    /// is nonzero.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        labels: &[f64],
        weights: &[f64],
    ) -> Result<Var> {
        let x = self.value(logits).data();
        if labels.len() != x.len() || weights.len() != x.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!(
                    "{} logits, {} labels, {} weights",
                    x.len(),
                    labels.len(),
                    weights.len()
                ),
            ));
        }
        let denom: f64 = weights.iter().sum();
        if denom <= 0.0 {
            return Err(Error::AllPadding);
        }
        let mut total = 0.0;
        for ((&z, &y), &w) in x.iter().zip(labels).zip(weights) {
            if w != 0.0 {
                total += w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                denom,
            },
            rg,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d loss / d node` into the gradient of every node that
    /// requires one. Calling twice without [`Graph::zero_grad`] doubles the
    /// stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let fault = self.fault;
        for i in (0..=loss.0).rev() {
            let (lower, upper) = adj.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut sink = Sink { nodes, adj: lower };
            backward_op(node, g, &mut sink, fault);
        }
        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if let (true, Some(a)) = (node.requires_grad, a) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&a).for_each(|(s, v)| *s += v),
                    None => node.grad = Some(a),
                }
            }
        }
        Ok(())
    }
}

struct Sink<'a> {
    nodes: &'a [Node],
    adj: &'a mut [Option<Vec<f64>>],
}

impl Sink<'_> {
    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Calls `f` with the adjoint buffer of `v` when `v` needs a gradient.
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = self.adj[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(buf, self.nodes);
    }
}

fn backward_op(node: &Node, g: &[f64], s: &mut Sink<'_>, fault: Option<BackwardFault>) {
    let out_shape = node.value.shape();
    let (m, n) = (out_shape[0], out_shape[1]);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let k = s.val(*a).cols();
            let (a, b) = (*a, *b);
            s.with(a, |ga, nodes| {
                // ga += g b^T
                let bd = nodes[b.0].value.data();
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        ga[i * k + p] += dot(gr, &bd[p * n..(p + 1) * n]);
                    }
                }
            });
            s.with(b, |gb, nodes| {
                // gb += a^T g
                let ad = nodes[a.0].value.data();
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        axpy(ad[i * k + p], gr, &mut gb[p * n..(p + 1) * n]);
                    }
                }
            });
        }
        Op::MatMulT(a, b) => {
            let k = s.val(*a).cols();
            let (a, b) = (*a, *b);
            s.with(a, |ga, nodes| {
                let bd = nodes[b.0].value.data();
                for i in 0..m {
                    for j in 0..n {
                        axpy(
                            g[i * n + j],
                            &bd[j * k..(j + 1) * k],
                            &mut ga[i * k..(i + 1) * k],
                        );
                    }
                }
            });
            s.with(b, |gb, nodes| {
                let ad = nodes[a.0].value.data();
                for i in 0..m {
                    for j in 0..n {
                        axpy(
                            g[i * n + j],
                            &ad[i * k..(i + 1) * k],
                            &mut gb[j * k..(j + 1) * k],
                        );
                    }
                }
            });
        }
        Op::Add(a, b) => {
            s.with(*a, |ga, _| axpy(1.0, g, ga));
            s.with(*b, |gb, _| axpy(1.0, g, gb));
        }
        Op::Sub(a, b) => {
            s.with(*a, |ga, _| axpy(1.0, g, ga));
            s.with(*b, |gb, _| axpy(-1.0, g, gb));
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            s.with(a, |ga, nodes| {
                for ((o, gv), bv) in ga.iter_mut().zip(g).zip(nodes[b.0].value.data()) {
                    *o += gv * bv;
                }
            });
            s.with(b, |gb, nodes| {
                for ((o, gv), av) in gb.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                    *o += gv * av;
                }
            });
        }
        Op::Scale(a, k) => s.with(*a, |ga, _| axpy(*k, g, ga)),
        Op::AddBias(x, b) => {
            s.with(*x, |gx, _| axpy(1.0, g, gx));
            if fault != Some(BackwardFault::DropBiasGrad) {
                s.with(*b, |gb, _| {
                    for row in g.chunks(n.max(1)) {
                        axpy(1.0, row, gb);
                    }
                });
            }
        }
        Op::Relu(x) => {
            let y = node.value.data();
            let leak = fault == Some(BackwardFault::ReluPassThrough);
            s.with(*x, |gx, _| {
                for ((o, gv), yv) in gx.iter_mut().zip(g).zip(y) {
                    if leak || *yv > 0.0 {
                        *o += gv;
                    }
                }
            });
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let w = s.val(p).cols();
                s.with(p, |gp, _| {
                    for i in 0..m {
                        axpy(
                            1.0,
                            &g[i * n + offset..i * n + offset + w],
                            &mut gp[i * w..(i + 1) * w],
                        );
                    }
                });
                offset += w;
            }
        }
        Op::SliceCols(x, start) => {
            let src_n = s.val(*x).cols();
            let start = *start;
            s.with(*x, |gx, _| {
                for i in 0..m {
                    axpy(
                        1.0,
                        &g[i * n..(i + 1) * n],
                        &mut gx[i * src_n + start..i * src_n + start + n],
                    );
                }
            });
        }
        Op::MeanRows(x) => {
            let rows = s.val(*x).rows();
            let inv = 1.0 / rows as f64;
            s.with(*x, |gx, _| {
                for row in gx.chunks_mut(n.max(1)) {
                    axpy(inv, g, row);
                }
            });
        }
        Op::L2Rows(x) => {
            let y = node.value.data();
            let w = s.val(*x).cols();
            let x = *x;
            s.with(x, |gx, nodes| {
                let xd = nodes[x.0].value.data();
                for i in 0..m {
                    // subgradient 0 at the origin
                    if y[i] > 0.0 {
                        axpy(
                            g[i] / y[i],
                            &xd[i * w..(i + 1) * w],
                            &mut gx[i * w..(i + 1) * w],
                        );
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gam = s.val(*gamma).data().to_vec();
            s.with(*x, |gx, _| {
                let mut gh = vec![0.0; n];
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let hr = &xhat[i * n..(i + 1) * n];
                    for j in 0..n {
                        gh[j] = gr[j] * gam[j];
                    }
                    let mean_gh = gh.iter().sum::<f64>() / n as f64;
                    let mean_ghh = dot(&gh, hr) / n as f64;
                    let row = &mut gx[i * n..(i + 1) * n];
                    for j in 0..n {
                        row[j] += rstd[i] * (gh[j] - mean_gh - hr[j] * mean_ghh);
                    }
                }
            });
            s.with(*gamma, |gg, _| {
                for i in 0..m {
                    for j in 0..n {
                        gg[j] += g[i * n + j] * xhat[i * n + j];
                    }
                }
            });
            s.with(*beta, |gb, _| {
                for row in g.chunks(n.max(1)) {
                    axpy(1.0, row, gb);
                }
            });
        }
        Op::MaskedSoftmax(x) => {
            let p = node.value.data();
            s.with(*x, |gx, _| {
                for i in 0..m {
                    let pr = &p[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let inner = dot(pr, gr);
                    for j in 0..n {
                        gx[i * n + j] += pr[j] * (gr[j] - inner);
                    }
                }
            });
        }
        Op::ScaleRows(x, f) => {
            s.with(*x, |gx, _| {
                for i in 0..m {
                    axpy(f[i], &g[i * n..(i + 1) * n], &mut gx[i * n..(i + 1) * n]);
                }
            });
        }
        Op::Gather(t, ids) => {
            s.with(*t, |gt, _| {
                for (i, &id) in ids.iter().enumerate() {
                    axpy(1.0, &g[i * n..(i + 1) * n], &mut gt[id * n..(id + 1) * n]);
                }
            });
        }
        Op::Sum(x) => {
            let gv = g[0];
            s.with(*x, |gx, _| gx.iter_mut().for_each(|o| *o += gv));
        }
        Op::CrossEntropy {
            logits,
            target,
            probs,
        } => {
            let gv = g[0];
            s.with(*logits, |gl, _| {
                for (j, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                    let onehot = if j == *target { 1.0 } else { 0.0 };
                    *o += gv * (p - onehot);
                }
            });
        }
        Op::BceWithLogits {
            logits,
            labels,
            weights,
            denom,
        } => {
            let gv = g[0] / denom;
            let x = *logits;
            s.with(x, |gl, nodes| {
                let z = nodes[x.0].value.data();
                for j in 0..gl.len() {
                    if weights[j] != 0.0 {
                        gl[j] += gv * weights[j] * (sigmoid(z[j]) - labels[j]);
                    }
                }
            });
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
}
