//! Tape-based reverse-mode differentiation over [`Mat`].
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and `backward` is a single reverse sweep.
//! Parameters enter the tape through [`Graph::param`]; each parameter gets
//! at most one node per graph, so its gradient is accumulated in one place.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Mat;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Row sums below this leave the normalized row at zero.
pub const ROW_NORMALIZE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Recip(usize),
    Square(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Transpose(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    LayerNormRows { a: usize, xhat: Rc<Mat>, inv_std: Vec<f64> },
    RowNormalize { a: usize, sums: Vec<f64> },
    VStack(Vec<usize>),
    HStack(Vec<usize>),
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    RepeatRows { a: usize, times: usize },
    Tile { a: usize, times: usize },
    SumBlocks { a: usize, blocks: usize },
    Reshape(usize),
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward pass.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value on the tape.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    g: &'g Graph<'g>,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    by_node: Vec<Option<Mat>>,
    param_nodes: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Mat> {
        self.by_node.get(v.id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.param_nodes
            .get(&id)
            .and_then(|&n| self.by_node[n].as_ref())
    }

    /// Moves parameter gradients out, keyed by parameter id.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Mat)> {
        let mut out: Vec<(ParamId, Mat)> = self
            .param_nodes
            .iter()
            .filter_map(|(&pid, &n)| self.by_node[n].take().map(|g| (pid, g)))
            .collect();
        out.sort_by_key(|(pid, _)| pid.0);
        out
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph with no parameter store; only leaves and constants.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params.expect("graph was created without a parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        nodes.len() - 1
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn val(&self, id: usize) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn wrap(&self, id: usize) -> Var<'_> {
        Var { g: self, id }
    }

    /// A differentiable input.
    pub fn var(&self, value: Mat) -> Var<'_> {
        let id = self.push(value, Op::Leaf, true);
        self.wrap(id)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        let id = self.push(value, Op::Leaf, false);
        self.wrap(id)
    }

    pub fn param(&self, pid: ParamId) -> Var<'_> {
        if let Some(&id) = self.param_nodes.borrow().get(&pid) {
            return self.wrap(id);
        }
        let value = self.params().get(pid).clone();
        let id = self.push(value, Op::Leaf, true);
        self.param_nodes.borrow_mut().insert(pid, id);
        self.wrap(id)
    }

    pub fn vstack(&self, parts: &[Var<'_>]) -> Var<'_> {
        assert!(!parts.is_empty(), "vstack of nothing");
        let vals: Vec<Rc<Mat>> = parts.iter().map(|p| self.val(p.id)).collect();
        let refs: Vec<&Mat> = vals.iter().map(|v| v.as_ref()).collect();
        let out = Mat::vstack(&refs);
        let rg = parts.iter().any(|p| self.rg(p.id));
        let id = self.push(out, Op::VStack(parts.iter().map(|p| p.id).collect()), rg);
        self.wrap(id)
    }

    pub fn hstack(&self, parts: &[Var<'_>]) -> Var<'_> {
        assert!(!parts.is_empty(), "hstack of nothing");
        let vals: Vec<Rc<Mat>> = parts.iter().map(|p| self.val(p.id)).collect();
        let rows = vals[0].rows();
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for v in &vals {
                assert_eq!(v.rows(), rows, "hstack row mismatch");
                out.row_mut(r)[c0..c0 + v.cols()].copy_from_slice(v.row(r));
                c0 += v.cols();
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.id));
        let id = self.push(out, Op::HStack(parts.iter().map(|p| p.id).collect()), rg);
        self.wrap(id)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let out_val = &nodes[output.id].value;
        assert_eq!(out_val.shape(), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        grads[output.id] = Some(Mat::scalar(1.0));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients {
            by_node: grads,
            param_nodes: self.param_nodes.borrow().clone(),
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], nodes: &[Node], id: usize, g: Mat) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn row_sums(m: &Mat) -> Mat {
    Mat::from_fn(m.rows(), 1, |r, _| m.row(r).iter().sum())
}

fn col_sums(m: &Mat) -> Mat {
    let mut out = Mat::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn mul_row(m: &Mat, row: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (o, s) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o *= s;
        }
    }
    out
}

fn mul_col(m: &Mat, col: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let s = col.data()[r];
        for o in out.row_mut(r) {
            *o *= s;
        }
    }
    out
}

fn tile(m: &Mat, times: usize) -> Mat {
    let mut data = Vec::with_capacity(m.len() * times);
    for _ in 0..times {
        data.extend_from_slice(m.data());
    }
    Mat::from_vec(m.rows() * times, m.cols(), data)
}

fn sum_blocks(m: &Mat, blocks: usize) -> Mat {
    let br = m.rows() / blocks;
    let mut out = Mat::zeros(br, m.cols());
    let stride = br * m.cols();
    for b in 0..blocks {
        for (o, v) in out
            .data_mut()
            .iter_mut()
            .zip(&m.data()[b * stride..(b + 1) * stride])
        {
            *o += v;
        }
    }
    out
}

fn backprop(nodes: &[Node], node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
    let v = |id: usize| -> &Mat { &nodes[id].value };
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            if nodes[a].requires_grad {
                let da = if ta {
                    Mat::matmul_t(v(b), tb, g, true)
                } else {
                    Mat::matmul_t(g, false, v(b), !tb)
                };
                accumulate(grads, nodes, a, da);
            }
            if nodes[b].requires_grad {
                let db = if tb {
                    Mat::matmul_t(g, true, v(a), ta)
                } else {
                    Mat::matmul_t(v(a), !ta, g, false)
                };
                accumulate(grads, nodes, b, db);
            }
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.clone());
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.map(|x| -x));
        }
        &Op::Mul(a, b) => {
            accumulate(grads, nodes, a, g.zip_map(v(b), |x, y| x * y));
            accumulate(grads, nodes, b, g.zip_map(v(a), |x, y| x * y));
        }
        &Op::AddRow(a, r) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, r, col_sums(g));
        }
        &Op::MulRow(a, r) => {
            accumulate(grads, nodes, a, mul_row(g, v(r)));
            if nodes[r].requires_grad {
                accumulate(grads, nodes, r, col_sums(&g.zip_map(v(a), |x, y| x * y)));
            }
        }
        &Op::AddCol(a, c) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, c, row_sums(g));
        }
        &Op::MulCol(a, c) => {
            accumulate(grads, nodes, a, mul_col(g, v(c)));
            if nodes[c].requires_grad {
                accumulate(grads, nodes, c, row_sums(&g.zip_map(v(a), |x, y| x * y)));
            }
        }
        &Op::Scale(a, s) => accumulate(grads, nodes, a, g.map(|x| x * s)),
        &Op::AddScalar(a) => accumulate(grads, nodes, a, g.clone()),
        &Op::Relu(a) => {
            accumulate(grads, nodes, a, g.zip_map(v(a), |d, x| if x > 0.0 { d } else { 0.0 }))
        }
        &Op::Gelu(a) => accumulate(grads, nodes, a, g.zip_map(v(a), |d, x| d * gelu_grad(x))),
        &Op::Sigmoid(a) => accumulate(grads, nodes, a, g.zip_map(y, |d, s| d * s * (1.0 - s))),
        &Op::Tanh(a) => accumulate(grads, nodes, a, g.zip_map(y, |d, t| d * (1.0 - t * t))),
        &Op::Exp(a) => accumulate(grads, nodes, a, g.zip_map(y, |d, e| d * e)),
        &Op::Log(a) => accumulate(grads, nodes, a, g.zip_map(v(a), |d, x| d / x)),
        &Op::Sqrt(a) => accumulate(grads, nodes, a, g.zip_map(y, |d, s| 0.5 * d / s)),
        &Op::Recip(a) => accumulate(grads, nodes, a, g.zip_map(y, |d, r| -d * r * r)),
        &Op::Square(a) => accumulate(grads, nodes, a, g.zip_map(v(a), |d, x| 2.0 * d * x)),
        &Op::SoftmaxRows(a) => {
            let mut da = Mat::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &yv), &gv) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            accumulate(grads, nodes, a, da);
        }
        &Op::LogSoftmaxRows(a) => {
            let mut da = Mat::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let gsum: f64 = gr.iter().sum();
                for ((o, &yv), &gv) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *o = gv - yv.exp() * gsum;
                }
            }
            accumulate(grads, nodes, a, da);
        }
        &Op::Transpose(a) => accumulate(grads, nodes, a, g.transpose()),
        &Op::SumAll(a) => {
            let (r, c) = v(a).shape();
            accumulate(grads, nodes, a, Mat::filled(r, c, g.item()));
        }
        &Op::SumRows(a) => {
            let (r, _) = v(a).shape();
            accumulate(grads, nodes, a, tile(g, r));
        }
        &Op::SumCols(a) => {
            let (r, c) = v(a).shape();
            accumulate(grads, nodes, a, Mat::from_fn(r, c, |i, _| g.data()[i]));
        }
        Op::LayerNormRows { a, xhat, inv_std } => {
            let cols = xhat.cols() as f64;
            let mut da = Mat::zeros(xhat.rows(), xhat.cols());
            for r in 0..xhat.rows() {
                let (xr, gr) = (xhat.row(r), g.row(r));
                let gmean = gr.iter().sum::<f64>() / cols;
                let gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols;
                for ((o, &xv), &gv) in da.row_mut(r).iter_mut().zip(xr).zip(gr) {
                    *o = inv_std[r] * (gv - gmean - xv * gx);
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::RowNormalize { a, sums } => {
            let mut da = Mat::zeros(y.rows(), y.cols());
            for (r, &s) in sums.iter().enumerate() {
                if s < ROW_NORMALIZE_FLOOR {
                    continue;
                }
                let (yr, gr) = (y.row(r), g.row(r));
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for (o, &gv) in da.row_mut(r).iter_mut().zip(gr) {
                    *o = (gv - dot) / s;
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::VStack(parts) => {
            let mut r0 = 0;
            for &p in parts {
                let rows = v(p).rows();
                if nodes[p].requires_grad {
                    accumulate(grads, nodes, p, g.slice_rows(r0, rows));
                }
                r0 += rows;
            }
        }
        Op::HStack(parts) => {
            let mut c0 = 0;
            for &p in parts {
                let cols = v(p).cols();
                if nodes[p].requires_grad {
                    let part = Mat::from_fn(g.rows(), cols, |r, c| g.get(r, c0 + c));
                    accumulate(grads, nodes, p, part);
                }
                c0 += cols;
            }
        }
        &Op::SliceRows { a, start } => {
            let src = v(a);
            let mut da = Mat::zeros(src.rows(), src.cols());
            let c = src.cols();
            da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(grads, nodes, a, da);
        }
        &Op::SliceCols { a, start } => {
            let src = v(a);
            let mut da = Mat::zeros(src.rows(), src.cols());
            for r in 0..g.rows() {
                da.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
            }
            accumulate(grads, nodes, a, da);
        }
        &Op::RepeatRows { a, times } => {
            let src = v(a);
            let mut da = Mat::zeros(src.rows(), src.cols());
            for r in 0..src.rows() {
                let acc = da.row_mut(r);
                for j in 0..times {
                    for (o, x) in acc.iter_mut().zip(g.row(r * times + j)) {
                        *o += x;
                    }
                }
            }
            accumulate(grads, nodes, a, da);
        }
        &Op::Tile { a, times } => accumulate(grads, nodes, a, sum_blocks(g, times)),
        &Op::SumBlocks { a, blocks } => accumulate(grads, nodes, a, tile(g, blocks)),
        &Op::Reshape(a) => {
            let (r, c) = v(a).shape();
            accumulate(grads, nodes, a, g.clone().reshape(r, c));
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<'g> {
        self.g
    }

    pub fn value(&self) -> Rc<Mat> {
        self.g.val(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.g.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    fn unary(self, op: Op, value: Mat) -> Var<'g> {
        let id = self.g.push(value, op, self.g.rg(self.id));
        self.g.wrap(id)
    }

    fn binary(self, other: Var<'g>, op: Op, value: Mat) -> Var<'g> {
        let rg = self.g.rg(self.id) || self.g.rg(other.id);
        let id = self.g.push(value, op, rg);
        self.g.wrap(id)
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.matmul_t(false, other, false)
    }

    /// `self @ other^T`
    pub fn matmul_nt(self, other: Var<'g>) -> Var<'g> {
        self.matmul_t(false, other, true)
    }

    pub fn matmul_t(self, ta: bool, other: Var<'g>, tb: bool) -> Var<'g> {
        let out = Mat::matmul_t(&self.value(), ta, &other.value(), tb);
        self.binary(
            other,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            out,
        )
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, Op::Add(self.id, other.id), out)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, Op::Sub(self.id, other.id), out)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let out = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, Op::Mul(self.id, other.id), out)
    }

    /// Adds a `1 x C` row to every row.
    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        let rv = row.value();
        assert_eq!(rv.shape(), (1, self.cols()), "add_row expects a 1x{} row", self.cols());
        let mut out = (*self.value()).clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.binary(row, Op::AddRow(self.id, row.id), out)
    }

    /// Multiplies every row elementwise by a `1 x C` row.
    pub fn mul_row(self, row: Var<'g>) -> Var<'g> {
        let rv = row.value();
        assert_eq!(rv.shape(), (1, self.cols()), "mul_row expects a 1x{} row", self.cols());
        let out = mul_row(&self.value(), &rv);
        self.binary(row, Op::MulRow(self.id, row.id), out)
    }

    /// Adds an `R x 1` column to every column.
    pub fn add_col(self, col: Var<'g>) -> Var<'g> {
        let cv = col.value();
        assert_eq!(cv.shape(), (self.rows(), 1), "add_col expects a {}x1 column", self.rows());
        let mut out = (*self.value()).clone();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            for o in out.row_mut(r) {
                *o += s;
            }
        }
        self.binary(col, Op::AddCol(self.id, col.id), out)
    }

    /// Scales row `r` by `col[r]`.
    pub fn mul_col(self, col: Var<'g>) -> Var<'g> {
        let cv = col.value();
        assert_eq!(cv.shape(), (self.rows(), 1), "mul_col expects a {}x1 column", self.rows());
        let out = mul_col(&self.value(), &cv);
        self.binary(col, Op::MulCol(self.id, col.id), out)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let out = self.value().map(|x| x * s);
        self.unary(Op::Scale(self.id, s), out)
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let out = self.value().map(|x| x + s);
        self.unary(Op::AddScalar(self.id), out)
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'g> {
        let out = self.value().map(|x| x.max(0.0));
        self.unary(Op::Relu(self.id), out)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'g> {
        let out = self.value().map(gelu);
        self.unary(Op::Gelu(self.id), out)
    }

    pub fn sigmoid(self) -> Var<'g> {
        let out = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(Op::Sigmoid(self.id), out)
    }

    pub fn tanh(self) -> Var<'g> {
        let out = self.value().map(f64::tanh);
        self.unary(Op::Tanh(self.id), out)
    }

    pub fn exp(self) -> Var<'g> {
        let out = self.value().map(f64::exp);
        self.unary(Op::Exp(self.id), out)
    }

    pub fn ln(self) -> Var<'g> {
        let out = self.value().map(f64::ln);
        self.unary(Op::Log(self.id), out)
    }

    pub fn sqrt(self) -> Var<'g> {
        let out = self.value().map(f64::sqrt);
        self.unary(Op::Sqrt(self.id), out)
    }

    pub fn recip(self) -> Var<'g> {
        let out = self.value().map(|x| 1.0 / x);
        self.unary(Op::Recip(self.id), out)
    }

    pub fn square(self) -> Var<'g> {
        let out = self.value().map(|x| x * x);
        self.unary(Op::Square(self.id), out)
    }

    /// Softmax across the columns of each row (max-shifted).
    pub fn softmax_rows(self) -> Var<'g> {
        let mut out = (*self.value()).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.unary(Op::SoftmaxRows(self.id), out)
    }

    /// Softmax across the rows of each column.
    pub fn softmax_cols(self) -> Var<'g> {
        self.t().softmax_rows().t()
    }

    /// Log-softmax across the columns of each row via log-sum-exp.
    pub fn log_softmax_rows(self) -> Var<'g> {
        let mut out = (*self.value()).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.unary(Op::LogSoftmaxRows(self.id), out)
    }

    pub fn t(self) -> Var<'g> {
        let out = self.value().transpose();
        self.unary(Op::Transpose(self.id), out)
    }

    pub fn sum(self) -> Var<'g> {
        let out = Mat::scalar(self.value().sum());
        self.unary(Op::SumAll(self.id), out)
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over rows, giving `1 x C`.
    pub fn sum_rows(self) -> Var<'g> {
        let out = col_sums(&self.value());
        self.unary(Op::SumRows(self.id), out)
    }

    /// Sum over columns, giving `R x 1`.
    pub fn sum_cols(self) -> Var<'g> {
        let out = row_sums(&self.value());
        self.unary(Op::SumCols(self.id), out)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let cols = x.cols() as f64;
        let mut xhat = Mat::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let xhat = Rc::new(xhat);
        let out = (*xhat).clone();
        self.unary(
            Op::LayerNormRows {
                a: self.id,
                xhat,
                inv_std,
            },
            out,
        )
    }

    /// Divides each row by its sum; rows summing below
    /// [`ROW_NORMALIZE_FLOOR`] become zero.
    pub fn row_normalize(self) -> Var<'g> {
        let x = self.value();
        let mut out = Mat::zeros(x.rows(), x.cols());
        let mut sums = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let s: f64 = x.row(r).iter().sum();
            if s >= ROW_NORMALIZE_FLOOR {
                for (o, v) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                    *o = v / s;
                }
            }
            sums.push(s);
        }
        self.unary(Op::RowNormalize { a: self.id, sums }, out)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'g> {
        let out = self.value().slice_rows(start, len);
        self.unary(Op::SliceRows { a: self.id, start }, out)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let out = Mat::from_fn(x.rows(), len, |r, c| x.get(r, start + c));
        self.unary(Op::SliceCols { a: self.id, start }, out)
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(self, times: usize) -> Var<'g> {
        let x = self.value();
        let mut data = Vec::with_capacity(x.len() * times);
        for r in 0..x.rows() {
            for _ in 0..times {
                data.extend_from_slice(x.row(r));
            }
        }
        let out = Mat::from_vec(x.rows() * times, x.cols(), data);
        self.unary(Op::RepeatRows { a: self.id, times }, out)
    }

    /// The whole matrix stacked `times` times.
    pub fn tile(self, times: usize) -> Var<'g> {
        let out = tile(&self.value(), times);
        self.unary(Op::Tile { a: self.id, times }, out)
    }

    /// Sum of `blocks` equal vertical blocks.
    pub fn sum_blocks(self, blocks: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rows() % blocks, 0, "sum_blocks: rows not divisible");
        let out = sum_blocks(&x, blocks);
        self.unary(Op::SumBlocks { a: self.id, blocks }, out)
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'g> {
        let out = (*self.value()).clone().reshape(rows, cols);
        self.unary(Op::Reshape(self.id), out)
    }
}
