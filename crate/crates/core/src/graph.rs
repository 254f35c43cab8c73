//! Reverse-mode differentiation over a closed set of matrix primitives.
//!
//! Every node holds a `rows x cols` matrix. Leaves are named inputs or
//! constants; interior nodes are one of the primitives below. Anything else
//! (sums, square roots, biases) is composed from them by the helpers at the
//! bottom of [`Graph`]'s builder API.
//!
//! Values and gradients are carried in `f64` while the graph runs; inputs and
//! returned gradients are `f32` [`Tensor`]s.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result, Tensor};

/// Named graph inputs or gradients.
pub type NamedTensors = BTreeMap<String, Tensor>;

/// Floor applied by the logarithm primitive; below it the value is clamped
/// and the gradient is zero.
pub const LN_FLOOR: f64 = f32::MIN_POSITIVE as f64;

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Constant(Vec<f64>),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    RowSoftmax(NodeId, f64),
    RowL1Normalize(NodeId),
    RowL2Normalize(NodeId),
    MeanRows(NodeId),
    SquaredDistance(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowL1Normalize(_) => "row_l1_normalize",
            Op::RowL2Normalize(_) => "row_l2_normalize",
            Op::MeanRows(_) => "mean_rows",
            Op::SquaredDistance(..) => "squared_distance",
            Op::GatherRows(..) => "gather_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
}

/// An acyclic computation graph. Nodes can only reference earlier nodes, so
/// insertion order is a topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    output: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `(rows, cols)` of a node.
    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    /// Names of all declared inputs, in declaration order.
    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node { op, rows, cols });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> Error {
        Error::DimensionMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "node {} does not belong to this graph",
                id.0
            )))
        }
    }

    pub fn input(&mut self, name: &str, rows: usize, cols: usize) -> Result<NodeId> {
        if rows == 0 || cols == 0 {
            return Err(self.mismatch("input", format!("`{name}` has zero extent")));
        }
        if self.input_names().contains(&name) {
            return Err(Error::InvalidArgument(format!("duplicate input `{name}`")));
        }
        Ok(self.push(Op::Input(name.to_string()), rows, cols))
    }

    pub fn constant(&mut self, value: &Tensor) -> NodeId {
        self.push(Op::Constant(value.to_f64()), value.rows(), value.cols())
    }

    pub fn constant_f64(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(self.mismatch(
                "constant",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(self.push(Op::Constant(data), rows, cols))
    }

    pub fn filled(&mut self, rows: usize, cols: usize, value: f64) -> Result<NodeId> {
        self.constant_f64(rows, cols, vec![value; rows * cols])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(self.mismatch("matmul", format!("{ar}x{ac} times {br}x{bc}")));
        }
        Ok(self.push(Op::MatMul(a, b), ar, bc))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        Ok(self.push(Op::Transpose(a), c, r))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(self.mismatch(
                op,
                format!("operands are {}x{} and {}x{}", sa.0, sa.1, sb.0, sb.1),
            ));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), r, c))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), r, c))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.check(a)?;
        if !factor.is_finite() {
            return Err(Error::InvalidArgument(format!("scale factor {factor}")));
        }
        let (r, c) = self.shape(a);
        Ok(self.push(Op::Scale(a, factor), r, c))
    }

    /// Element-wise `max(x, 0)`.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp(a))
    }

    /// Natural logarithm of `max(x, LN_FLOOR)`.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Ln(a))
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn row_softmax(&mut self, a: NodeId, temperature: f64) -> Result<NodeId> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        self.unary(a, Op::RowSoftmax(a, temperature))
    }

    /// Divides each row by its L1 norm; all-zero rows stay zero.
    pub fn row_l1_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::RowL1Normalize(a))
    }

    /// Divides each row by its L2 norm; all-zero rows stay zero.
    pub fn row_l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::RowL2Normalize(a))
    }

    /// Mean over rows (the spatial axis of a position-major feature matrix).
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let (_, c) = self.shape(a);
        Ok(self.push(Op::MeanRows(a), 1, c))
    }

    /// `Σ (a - b)²` as a 1x1 node.
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("squared_distance", a, b)?;
        Ok(self.push(Op::SquaredDistance(a, b), 1, 1))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        if rows.is_empty() {
            return Err(self.mismatch("gather_rows", "empty row set".to_string()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(self.mismatch("gather_rows", format!("row {bad} of a {r}-row operand")));
        }
        Ok(self.push(Op::GatherRows(a, rows.to_vec()), rows.len(), c))
    }

    fn unary(&mut self, a: NodeId, op: Op) -> Result<NodeId> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        Ok(self.push(op, r, c))
    }

    // Composites built only from the primitives above.

    /// Sum of all entries: `1ᵀ · a · 1`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        let left = self.filled(1, r, 1.0)?;
        let right = self.filled(c, 1, 1.0)?;
        let rows = self.matmul(left, a)?;
        self.matmul(rows, right)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    /// `exp(0.5 · ln x)`; zero (up to the log floor) at zero.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let l = self.ln(a)?;
        let h = self.scale(l, 0.5)?;
        self.exp(h)
    }

    /// `x · w + 1 · b` for `x: n×i`, `w: i×o`, `b: 1×o`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, weight)?;
        let (n, _) = self.shape(x);
        let ones = self.filled(n, 1, 1.0)?;
        let b = self.matmul(ones, bias)?;
        self.add(xw, b)
    }

    // Evaluation.

    fn input_node(&self, name: &str) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| matches!(&n.op, Op::Input(s) if s == name))
    }

    fn bind(&self, inputs: &NamedTensors) -> Result<Vec<Option<Vec<f64>>>> {
        let mut bound = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Input(name) = &node.op {
                let t = inputs
                    .get(name)
                    .ok_or_else(|| Error::MissingInput(name.clone()))?;
                let dims_ok = t.dims() == [node.rows, node.cols]
                    || (node.rows == 1 && t.dims() == [node.cols]);
                if !dims_ok {
                    return Err(Error::DimensionMismatch {
                        node: i,
                        op: "input",
                        detail: format!(
                            "`{name}` declared {}x{}, given {:?}",
                            node.rows,
                            node.cols,
                            t.dims()
                        ),
                    });
                }
                bound[i] = Some(t.to_f64());
            }
        }
        Ok(bound)
    }

    fn output_checked(&self) -> Result<NodeId> {
        let out = self.output.ok_or(Error::NoOutput)?;
        let (rows, cols) = self.shape(out);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarOutput {
                node: out.0,
                rows,
                cols,
            });
        }
        Ok(out)
    }

    fn forward(&self, bound: &[Option<Vec<f64>>]) -> Vec<Vec<f64>> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Input(_) => bound[i].clone().unwrap_or_default(),
                Op::Constant(data) => data.clone(),
                Op::MatMul(a, b) => {
                    let (_, k) = self.shape(*a);
                    matmul(&values[a.0], &values[b.0], node.rows, k, node.cols)
                }
                Op::Transpose(a) => transpose(&values[a.0], node.cols, node.rows),
                Op::Add(a, b) => zip_with(&values[a.0], &values[b.0], |x, y| x + y),
                Op::Mul(a, b) => zip_with(&values[a.0], &values[b.0], |x, y| x * y),
                Op::Scale(a, s) => values[a.0].iter().map(|x| x * s).collect(),
                Op::Relu(a) => values[a.0].iter().map(|&x| x.max(0.0)).collect(),
                Op::Exp(a) => values[a.0].iter().map(|&x| math::exp(x)).collect(),
                Op::Ln(a) => values[a.0]
                    .iter()
                    .map(|&x| math::ln(x.max(LN_FLOOR)))
                    .collect(),
                Op::RowSoftmax(a, t) => row_softmax(&values[a.0], node.cols, *t),
                Op::RowL1Normalize(a) => row_normalize(&values[a.0], node.cols, |r| {
                    r.iter().map(|x| x.abs()).sum()
                }),
                Op::RowL2Normalize(a) => row_normalize(&values[a.0], node.cols, |r| {
                    math::sqrt(r.iter().map(|x| x * x).sum())
                }),
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut out = vec![0.0; c];
                    for row in values[a.0].chunks_exact(c) {
                        for (o, x) in out.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    out.iter_mut().for_each(|o| *o /= r as f64);
                    out
                }
                Op::SquaredDistance(a, b) => {
                    let s = values[a.0]
                        .iter()
                        .zip(&values[b.0])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    vec![s]
                }
                Op::GatherRows(a, rows) => {
                    let c = node.cols;
                    let src = &values[a.0];
                    rows.iter()
                        .flat_map(|&r| src[r * c..(r + 1) * c].iter().copied())
                        .collect()
                }
            };
            values.push(v);
        }
        values
    }

    fn backward(&self, values: &[Vec<f64>], out: NodeId) -> Vec<Vec<f64>> {
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|_| Vec::new()).collect();
        grads[out.0] = vec![1.0];
        for i in (0..=out.0).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let g = core::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            let y = &values[i];
            match &node.op {
                Op::Input(_) | Op::Constant(_) => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    // dA = G Bᵀ, dB = Aᵀ G
                    let bt = transpose(&values[b.0], k, n);
                    accumulate(&mut grads[a.0], &matmul(&g, &bt, m, n, k));
                    let at = transpose(&values[a.0], m, k);
                    accumulate(&mut grads[b.0], &matmul(&at, &g, k, m, n));
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[a.0], &transpose(&g, node.rows, node.cols));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Mul(a, b) => {
                    let da = zip_with(&g, &values[b.0], |x, y| x * y);
                    let db = zip_with(&g, &values[a.0], |x, y| x * y);
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::Scale(a, s) => {
                    let d: Vec<f64> = g.iter().map(|x| x * s).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                Op::Relu(a) => {
                    let d = zip_with(&g, &values[a.0], |gi, x| if x > 0.0 { gi } else { 0.0 });
                    accumulate(&mut grads[a.0], &d);
                }
                Op::Exp(a) => {
                    let d = zip_with(&g, y, |gi, yi| gi * yi);
                    accumulate(&mut grads[a.0], &d);
                }
                Op::Ln(a) => {
                    let d = zip_with(&g, &values[a.0], |gi, x| {
                        if x > LN_FLOOR {
                            gi / x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[a.0], &d);
                }
                Op::RowSoftmax(a, t) => {
                    let c = node.cols;
                    let mut d = vec![0.0; g.len()];
                    for ((dr, gr), yr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *o = yi * (gi - dot) / t;
                        }
                    }
                    accumulate(&mut grads[a.0], &d);
                }
                Op::RowL1Normalize(a) => {
                    let c = node.cols;
                    let x = &values[a.0];
                    let mut d = vec![0.0; g.len()];
                    for r in 0..node.rows {
                        let xr = &x[r * c..(r + 1) * c];
                        let s: f64 = xr.iter().map(|v| v.abs()).sum();
                        if s == 0.0 {
                            continue;
                        }
                        let gr = &g[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            let sign = if xr[k] > 0.0 {
                                1.0
                            } else if xr[k] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            d[r * c + k] = (gr[k] - sign * dot) / s;
                        }
                    }
                    accumulate(&mut grads[a.0], &d);
                }
                Op::RowL2Normalize(a) => {
                    let c = node.cols;
                    let x = &values[a.0];
                    let mut d = vec![0.0; g.len()];
                    for r in 0..node.rows {
                        let xr = &x[r * c..(r + 1) * c];
                        let n = math::sqrt(xr.iter().map(|v| v * v).sum());
                        if n == 0.0 {
                            continue;
                        }
                        let gr = &g[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            d[r * c + k] = (gr[k] - yr[k] * dot) / n;
                        }
                    }
                    accumulate(&mut grads[a.0], &d);
                }
                Op::MeanRows(a) => {
                    let (r, _) = self.shape(*a);
                    let mut d = Vec::with_capacity(r * node.cols);
                    for _ in 0..r {
                        d.extend(g.iter().map(|gi| gi / r as f64));
                    }
                    accumulate(&mut grads[a.0], &d);
                }
                Op::SquaredDistance(a, b) => {
                    let da = zip_with(&values[a.0], &values[b.0], |x, y| 2.0 * g[0] * (x - y));
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::GatherRows(a, rows) => {
                    let (r, c) = self.shape(*a);
                    let mut d = vec![0.0; r * c];
                    for (k, &src) in rows.iter().enumerate() {
                        for j in 0..c {
                            d[src * c + j] += g[k * c + j];
                        }
                    }
                    accumulate(&mut grads[a.0], &d);
                }
            }
            grads[i] = g;
        }
        grads
    }

    fn first_non_finite(&self, values: &[Vec<f64>]) -> Option<usize> {
        values
            .iter()
            .position(|v| v.iter().any(|x| !x.is_finite()))
    }

    fn run(&self, bound: &[Option<Vec<f64>>], out: NodeId) -> Result<Vec<Vec<f64>>> {
        let values = self.forward(bound);
        if let Some(i) = self.first_non_finite(&values[..=out.0]) {
            return Err(Error::NonFinite {
                node: i,
                op: self.nodes[i].op.name(),
            });
        }
        Ok(values)
    }

    /// Scalar value of the output node.
    pub fn value(&self, inputs: &NamedTensors) -> Result<f64> {
        let out = self.output_checked()?;
        let bound = self.bind(inputs)?;
        Ok(self.run(&bound, out)?[out.0][0])
    }

    /// Value of an arbitrary node (any shape), rounded to `f32` storage.
    pub fn evaluate(&self, id: NodeId, inputs: &NamedTensors) -> Result<Tensor> {
        self.check(id)?;
        let bound = self.bind(inputs)?;
        let values = self.run(&bound, id)?;
        let (r, c) = self.shape(id);
        Tensor::from_f64(vec![r, c], &values[id.0])
    }

    fn wrt_nodes(&self, wrt: &[&str]) -> Result<Vec<(String, usize)>> {
        wrt.iter()
            .map(|name| {
                self.input_node(name)
                    .map(|i| (name.to_string(), i))
                    .ok_or_else(|| Error::UnknownInput(name.to_string()))
            })
            .collect()
    }
}

/// Output value and gradients with respect to the named inputs.
pub fn value_and_grad(
    graph: &Graph,
    inputs: &NamedTensors,
    wrt: &[&str],
) -> Result<(f64, NamedTensors)> {
    let (v, g, _) = value_grad_probes(graph, inputs, wrt, &[])?;
    Ok((v, g))
}

/// [`value_and_grad`] plus the first entry of each `probes` node, all from
/// one forward pass.
pub(crate) fn value_grad_probes(
    graph: &Graph,
    inputs: &NamedTensors,
    wrt: &[&str],
    probes: &[NodeId],
) -> Result<(f64, NamedTensors, Vec<f64>)> {
    for &p in probes {
        graph.check(p)?;
    }
    let out = graph.output_checked()?;
    let targets = graph.wrt_nodes(wrt)?;
    let bound = graph.bind(inputs)?;
    let values = graph.run(&bound, out)?;
    let grads = graph.backward(&values, out);
    let mut named = NamedTensors::new();
    for (name, i) in targets {
        let node = &graph.nodes[i];
        let g = if grads[i].is_empty() {
            vec![0.0; node.rows * node.cols]
        } else {
            grads[i].clone()
        };
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { node: i, op: "gradient" });
        }
        let dims = inputs[&name].dims().to_vec();
        named.insert(name, Tensor::from_f64(dims, &g)?);
    }
    let probed = probes.iter().map(|p| values[p.0][0]).collect();
    Ok((values[out.0][0], named, probed))
}

/// Maximum over every `wrt` entry of
/// `|analytic − numeric| / (|numeric| + 1e-8)`, where `numeric` is the
/// five-point central difference with spacing `step`.
///
/// Perturbations are applied in `f64`, so the step is exact.
pub fn finite_diff_check(
    graph: &Graph,
    inputs: &NamedTensors,
    wrt: &[&str],
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let out = graph.output_checked()?;
    let targets = graph.wrt_nodes(wrt)?;
    let mut bound = graph.bind(inputs)?;
    let values = graph.run(&bound, out)?;
    let grads = graph.backward(&values, out);
    let mut worst: f64 = 0.0;
    for (_, i) in targets {
        let n = graph.nodes[i].rows * graph.nodes[i].cols;
        for k in 0..n {
            let analytic = grads[i].get(k).copied().unwrap_or(0.0);
            let original = bound[i].as_ref().map(|v| v[k]).unwrap_or(0.0);
            let mut at = |offset: f64| -> Result<f64> {
                set_entry(&mut bound[i], k, original + offset);
                Ok(graph.run(&bound, out)?[out.0][0])
            };
            let numeric = (8.0 * (at(step)? - at(-step)?) - (at(2.0 * step)? - at(-2.0 * step)?))
                / (12.0 * step);
            set_entry(&mut bound[i], k, original);
            worst = worst.max((analytic - numeric).abs() / (numeric.abs() + 1e-8));
        }
    }
    Ok(worst)
}

fn set_entry(slot: &mut Option<Vec<f64>>, k: usize, v: f64) {
    if let Some(buf) = slot.as_mut() {
        buf[k] = v;
    }
}

fn accumulate(dst: &mut Vec<f64>, src: &[f64]) {
    if dst.is_empty() {
        dst.extend_from_slice(src);
    } else {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `(m×k) · (k×n)` row-major product.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Transpose of a `rows×cols` row-major matrix.
pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub(crate) fn row_softmax(x: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = math::exp((v - max) / temperature);
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    out
}

fn row_normalize(x: &[f64], cols: usize, norm: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let n = norm(row);
        if n == 0.0 {
            out.extend(core::iter::repeat_n(0.0, cols));
        } else {
            out.extend(row.iter().map(|v| v / n));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(pairs: &[(&str, Tensor)]) -> NamedTensors {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn square_value_and_grad() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1).unwrap();
        let y = g.mul(x, x).unwrap();
        g.set_output(y);
        let inputs = named(&[("x", Tensor::scalar(3.0).unwrap())]);
        let (v, grads) = value_and_grad(&g, &inputs, &["x"]).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(grads["x"].data(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", 3, 4).unwrap();
        let s = g.row_softmax(x, 0.7).unwrap();
        let total = g.sum(s).unwrap();
        g.set_output(total);
        let data = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
        let inputs = named(&[("x", Tensor::matrix(3, 4, data).unwrap())]);
        let (v, grads) = value_and_grad(&g, &inputs, &["x"]).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
        assert!(grads["x"].data().iter().all(|&d| d.abs() < 1e-7));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", 2, 2).unwrap();
        g.set_output(x);
        let inputs = named(&[("x", Tensor::zeros(vec![2, 2]).unwrap())]);
        assert!(matches!(
            value_and_grad(&g, &inputs, &["x"]),
            Err(Error::NonScalarOutput { rows: 2, cols: 2, .. })
        ));
    }

    #[test]
    fn dimension_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.input("a", 2, 3).unwrap();
        let b = g.input("b", 2, 3).unwrap();
        match g.matmul(a, b) {
            Err(Error::DimensionMismatch { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
        let s = g.squared_distance(a, b).unwrap();
        g.set_output(s);
        let inputs = named(&[
            ("a", Tensor::zeros(vec![3, 2]).unwrap()),
            ("b", Tensor::zeros(vec![2, 3]).unwrap()),
        ]);
        assert!(matches!(
            g.value(&inputs),
            Err(Error::DimensionMismatch { node: 0, op: "input", .. })
        ));
    }

    #[test]
    fn wrt_must_be_an_input() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1).unwrap();
        g.set_output(x);
        let inputs = named(&[("x", Tensor::scalar(1.0).unwrap())]);
        assert!(matches!(
            value_and_grad(&g, &inputs, &["y"]),
            Err(Error::UnknownInput(_))
        ));
    }

    #[test]
    fn zero_rows_normalize_to_zero() {
        let mut g = Graph::new();
        let x = g.input("x", 2, 3).unwrap();
        let n = g.row_l2_normalize(x).unwrap();
        let m = g.row_l1_normalize(x).unwrap();
        let inputs = named(&[(
            "x",
            Tensor::matrix(2, 3, alloc::vec![0.0, 0.0, 0.0, 3.0, 0.0, 4.0]).unwrap(),
        )]);
        let l2 = g.evaluate(n, &inputs).unwrap();
        assert_eq!(l2.data(), &[0.0, 0.0, 0.0, 0.6, 0.0, 0.8]);
        let l1 = g.evaluate(m, &inputs).unwrap();
        assert_eq!(l1.row(0), &[0.0, 0.0, 0.0]);
        assert!((l1.row(1).iter().map(|v| v.abs()).sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn linear_graph_is_exact_under_finite_differences() {
        let mut g = Graph::new();
        let x = g.input("x", 2, 3).unwrap();
        let w = g.constant(&Tensor::matrix(3, 1, alloc::vec![0.5, -1.0, 2.0]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.set_output(s);
        let inputs = named(&[(
            "x",
            Tensor::matrix(2, 3, alloc::vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]).unwrap(),
        )]);
        for step in [1e-4, 1e-2, 1.0] {
            assert!(finite_diff_check(&g, &inputs, &["x"], step).unwrap() < 1e-6);
        }
        assert!(finite_diff_check(&g, &inputs, &["x"], 0.0).is_err());
    }

    #[test]
    fn relu_kink_can_break_finite_differences() {
        let mut g = Graph::new();
        let x = g.input("x", 1, 1).unwrap();
        let r = g.relu(x).unwrap();
        g.set_output(r);
        let inputs = named(&[("x", Tensor::scalar(0.0).unwrap())]);
        // analytic 0, central difference 0.5
        let dev = finite_diff_check(&g, &inputs, &["x"], 1e-3).unwrap();
        assert!(dev > 1e-4);
    }

    #[test]
    fn evaluation_is_bit_deterministic() {
        let mut g = Graph::new();
        let x = g.input("x", 4, 5).unwrap();
        let xt = g.transpose(x).unwrap();
        let r = g.matmul(x, xt).unwrap();
        let a = g.row_softmax(r, 0.3).unwrap();
        let l = g.ln(a).unwrap();
        let s = g.sum(l).unwrap();
        g.set_output(s);
        let data = (0..20).map(|i| ((i * 7 % 11) as f32) / 11.0).collect();
        let inputs = named(&[("x", Tensor::matrix(4, 5, data).unwrap())]);
        let first = value_and_grad(&g, &inputs, &["x"]).unwrap();
        let second = value_and_grad(&g, &inputs, &["x"]).unwrap();
        assert_eq!(first.0.to_bits(), second.0.to_bits());
        assert_eq!(first.1, second.1);
    }
}
