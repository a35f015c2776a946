//! Operation tape and backward rules.

use crate::Tensor;
use std::sync::Arc;

pub type NodeId = usize;

/// Local gradient rule of one recorded operation.
///
/// `backward` receives the gradient of the node's output and returns one
/// contribution per declared input, in declaration order. Inputs that do
/// not require gradient get an empty vec.
pub trait Backward {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>>;
}

struct Node {
    inputs: Vec<Option<NodeId>>,
    rule: Box<dyn Backward>,
    numel: usize,
}

/// Define-by-run tape. Topological order is creation order; backward
/// traverses in reverse. Single-writer: one graph per training step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

struct LeafRule;
impl Backward for LeafRule {
    fn backward(&self, _grad: &[f32]) -> Vec<Vec<f32>> {
        Vec::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(Vec::new(), Box::new(LeafRule), t.numel());
        Tensor { data: t.data.clone(), shape: t.shape.clone(), node: Some(id) }
    }

    /// Record an operation with an externally defined gradient rule.
    /// `inputs` order must match the contribution order of `rule`.
    pub fn custom(
        &mut self,
        inputs: &[&Tensor],
        data: Vec<f32>,
        shape: &[usize],
        rule: Box<dyn Backward>,
    ) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(data.len(), numel, "custom op data length vs shape {:?}", shape);
        if inputs.iter().all(|t| t.node.is_none()) {
            return Tensor::from_vec(data, shape);
        }
        let ids: Vec<Option<NodeId>> = inputs.iter().map(|t| t.node).collect();
        let id = self.push(ids, rule, numel);
        Tensor { data: Arc::new(data), shape: shape.to_vec(), node: Some(id) }
    }

    fn push(&mut self, inputs: Vec<Option<NodeId>>, rule: Box<dyn Backward>, numel: usize) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { inputs, rule, numel });
        id
    }

    /// Gradient of a tensor from the last backward pass; `None` for
    /// detached tensors or when no gradient reached it.
    pub fn grad(&self, t: &Tensor) -> Option<&[f32]> {
        let id = t.node?;
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Backward from a scalar loss (seed gradient 1).
    pub fn backward(&mut self, loss: &Tensor) {
        assert_eq!(loss.numel(), 1, "backward() expects a scalar loss, got {:?}", loss.shape);
        self.backward_seeded(&[(loss, &[1.0])]);
    }

    /// Backward from explicit seed gradients on one or more tensors.
    pub fn backward_seeded(&mut self, seeds: &[(&Tensor, &[f32])]) {
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        for (t, seed) in seeds {
            let id = t.node.expect("seed tensor is detached");
            assert_eq!(seed.len(), t.numel(), "seed gradient length mismatch");
            let slot = self.grads[id].get_or_insert_with(|| vec![0.0; t.numel()]);
            for (a, b) in slot.iter_mut().zip(seed.iter()) {
                *a += *b;
            }
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(grad) = self.grads[id].take() else { continue };
            let contribs = self.nodes[id].rule.backward(&grad);
            debug_assert!(
                contribs.len() == self.nodes[id].inputs.len() || self.nodes[id].inputs.is_empty()
            );
            for (slot, contrib) in self.nodes[id].inputs.clone().iter().zip(contribs) {
                let Some(src) = slot else { continue };
                if contrib.is_empty() {
                    continue;
                }
                let numel = self.nodes[*src].numel;
                assert_eq!(contrib.len(), numel, "gradient contribution shape mismatch");
                let acc = self.grads[*src].get_or_insert_with(|| vec![0.0; numel]);
                for (a, b) in acc.iter_mut().zip(contrib.iter()) {
                    *a += *b;
                }
            }
            self.grads[id] = Some(grad);
        }
    }
}

// ── elementwise ops ─────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Shapes equal, or one side is a scalar. Anything else is rejected.
fn broadcast_layout(a: &Tensor, b: &Tensor) -> (usize, bool, bool) {
    if a.shape == b.shape {
        (a.numel(), false, false)
    } else if a.numel() == 1 {
        (b.numel(), true, false)
    } else if b.numel() == 1 {
        (a.numel(), false, true)
    } else {
        panic!("shape mismatch: lhs {:?} vs rhs {:?}", a.shape, b.shape);
    }
}

struct BinRule {
    kind: BinKind,
    a: Arc<Vec<f32>>,
    b: Arc<Vec<f32>>,
    a_scalar: bool,
    b_scalar: bool,
}

impl Backward for BinRule {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>> {
        let at = |v: &[f32], i: usize, scalar: bool| if scalar { v[0] } else { v[i] };
        let mut ga = vec![0.0f32; if self.a_scalar { 1 } else { self.a.len() }];
        let mut gb = vec![0.0f32; if self.b_scalar { 1 } else { self.b.len() }];
        for (i, g) in grad.iter().enumerate() {
            let av = at(&self.a, i, self.a_scalar);
            let bv = at(&self.b, i, self.b_scalar);
            let (da, db) = match self.kind {
                BinKind::Add => (*g, *g),
                BinKind::Sub => (*g, -*g),
                BinKind::Mul => (*g * bv, *g * av),
                BinKind::Div => (*g / bv, -*g * av / (bv * bv)),
            };
            ga[if self.a_scalar { 0 } else { i }] += da;
            gb[if self.b_scalar { 0 } else { i }] += db;
        }
        vec![ga, gb]
    }
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Neg,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Abs,
    Powi(i32),
    Clamp01,
    Scale(f32),
    AddConst(f32),
}

struct UnRule {
    kind: UnKind,
    x: Arc<Vec<f32>>,
    y: Arc<Vec<f32>>,
}

impl Backward for UnRule {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>> {
        let gx = grad
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let x = self.x[i];
                let y = self.y[i];
                let d = match self.kind {
                    UnKind::Neg => -1.0,
                    UnKind::Exp => y,
                    UnKind::Log => 1.0 / x,
                    UnKind::Relu => {
                        if x > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    UnKind::Sigmoid => y * (1.0 - y),
                    UnKind::Tanh => 1.0 - y * y,
                    UnKind::Softplus => 1.0 / (1.0 + (-x).exp()),
                    UnKind::Abs => {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    UnKind::Powi(k) => k as f32 * x.powi(k - 1),
                    UnKind::Clamp01 => {
                        if (0.0..=1.0).contains(&x) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    UnKind::Scale(c) => c,
                    UnKind::AddConst(_) => 1.0,
                };
                g * d
            })
            .collect();
        vec![gx]
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f32) -> f32 {
    // ln(1 + e^x), stable for large |x|
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    fn binary(&mut self, kind: BinKind, a: &Tensor, b: &Tensor) -> Tensor {
        let (n, a_sc, b_sc) = broadcast_layout(a, b);
        let at = |v: &[f32], i: usize, sc: bool| if sc { v[0] } else { v[i] };
        let data: Vec<f32> = (0..n)
            .map(|i| {
                let x = at(&a.data, i, a_sc);
                let y = at(&b.data, i, b_sc);
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                }
            })
            .collect();
        let shape = if a_sc { b.shape.clone() } else { a.shape.clone() };
        let rule = BinRule {
            kind,
            a: a.data.clone(),
            b: b.data.clone(),
            a_scalar: a_sc,
            b_scalar: b_sc,
        };
        self.custom(&[a, b], data, &shape, Box::new(rule))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, x: &Tensor) -> Tensor {
        let data: Vec<f32> = x
            .data
            .iter()
            .map(|&v| match kind {
                UnKind::Neg => -v,
                UnKind::Exp => v.exp(),
                UnKind::Log => v.ln(),
                UnKind::Relu => v.max(0.0),
                UnKind::Sigmoid => sigmoid(v),
                UnKind::Tanh => v.tanh(),
                UnKind::Softplus => softplus(v),
                UnKind::Abs => v.abs(),
                UnKind::Powi(k) => v.powi(k),
                UnKind::Clamp01 => v.clamp(0.0, 1.0),
                UnKind::Scale(c) => v * c,
                UnKind::AddConst(c) => v + c,
            })
            .collect();
        let out = Arc::new(data);
        let rule = UnRule { kind, x: x.data.clone(), y: out.clone() };
        let shape = x.shape.clone();
        if x.node.is_none() {
            return Tensor { data: out, shape, node: None };
        }
        let id = self.push(vec![x.node], Box::new(rule), out.len());
        Tensor { data: out, shape, node: Some(id) }
    }

    pub fn neg(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Neg, x)
    }

    pub fn exp(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Exp, x)
    }

    pub fn log(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Log, x)
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Tanh, x)
    }

    pub fn softplus(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Softplus, x)
    }

    pub fn abs(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Abs, x)
    }

    /// Elementwise integer power (power-by-constant).
    pub fn powi(&mut self, x: &Tensor, k: i32) -> Tensor {
        self.unary(UnKind::Powi(k), x)
    }

    /// Clamp to [0,1]; gradient passes only inside the range.
    pub fn clamp01(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnKind::Clamp01, x)
    }

    pub fn scale(&mut self, x: &Tensor, c: f32) -> Tensor {
        self.unary(UnKind::Scale(c), x)
    }

    pub fn add_const(&mut self, x: &Tensor, c: f32) -> Tensor {
        self.unary(UnKind::AddConst(c), x)
    }
}

// ── matmul ──────────────────────────────────────────────────────────

/// C = A[m,k] · B[k,n], all row-major.
pub(crate) fn sgemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C = A[m,k] · B[n,k]ᵀ (transpose of the right factor via strides).
pub(crate) fn sgemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C = A[k,m]ᵀ · B[k,n].
pub(crate) fn sgemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatmulRule {
    a: Arc<Vec<f32>>,
    b: Arc<Vec<f32>>,
    m: usize,
    k: usize,
    n: usize,
}

impl Backward for MatmulRule {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>> {
        // dA = G · Bᵀ, dB = Aᵀ · G
        let mut ga = vec![0.0f32; self.m * self.k];
        let mut gb = vec![0.0f32; self.k * self.n];
        sgemm_nt(self.m, self.n, self.k, grad, &self.b, &mut ga);
        sgemm_tn(self.k, self.m, self.n, &self.a, grad, &mut gb);
        vec![ga, gb]
    }
}

impl Graph {
    /// [m,k] · [k,n] -> [m,n].
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape.len(), 2, "matmul lhs must be rank 2, got {:?}", a.shape);
        assert_eq!(b.shape.len(), 2, "matmul rhs must be rank 2, got {:?}", b.shape);
        let (m, k) = (a.shape[0], a.shape[1]);
        let (k2, n) = (b.shape[0], b.shape[1]);
        assert_eq!(k, k2, "matmul dimension mismatch: {:?} vs {:?}", a.shape, b.shape);
        let mut data = vec![0.0f32; m * n];
        sgemm(m, k, n, &a.data, &b.data, &mut data);
        let rule = MatmulRule { a: a.data.clone(), b: b.data.clone(), m, k, n };
        self.custom(&[a, b], data, &[m, n], Box::new(rule))
    }
}

// ── structural ops ──────────────────────────────────────────────────

struct TileRowsRule {
    rows: usize,
    cols: usize,
}

impl Backward for TileRowsRule {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>> {
        let mut g = vec![0.0f32; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                g[c] += grad[r * self.cols + c];
            }
        }
        vec![g]
    }
}

struct ConcatColsRule {
    rows: usize,
    widths: Vec<usize>,
}

impl Backward for ConcatColsRule {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>> {
        let total: usize = self.widths.iter().sum();
        let mut out: Vec<Vec<f32>> = self.widths.iter().map(|w| vec![0.0; w * self.rows]).collect();
        for r in 0..self.rows {
            let mut off = 0;
            for (pi, w) in self.widths.iter().enumerate() {
                out[pi][r * w..(r + 1) * w].copy_from_slice(&grad[r * total + off..r * total + off + w]);
                off += w;
            }
        }
        out
    }
}

struct SliceColsRule {
    rows: usize,
    cols: usize,
    start: usize,
    len: usize,
}

impl Backward for SliceColsRule {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>> {
        let mut g = vec![0.0f32; self.rows * self.cols];
        for r in 0..self.rows {
            g[r * self.cols + self.start..r * self.cols + self.start + self.len]
                .copy_from_slice(&grad[r * self.len..(r + 1) * self.len]);
        }
        vec![g]
    }
}

struct SliceRowsRule {
    rows: usize,
    cols: usize,
    start: usize,
    len: usize,
}

impl Backward for SliceRowsRule {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>> {
        let mut g = vec![0.0f32; self.rows * self.cols];
        g[self.start * self.cols..(self.start + self.len) * self.cols].copy_from_slice(grad);
        vec![g]
    }
}

struct MaxRowsRule {
    argmax: Vec<usize>,
    rows: usize,
    cols: usize,
}

impl Backward for MaxRowsRule {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>> {
        let mut g = vec![0.0f32; self.rows * self.cols];
        for c in 0..self.cols {
            g[self.argmax[c] * self.cols + c] = grad[c];
        }
        vec![g]
    }
}

struct SumRule {
    n: usize,
    scale: f32,
}

impl Backward for SumRule {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>> {
        vec![vec![grad[0] * self.scale; self.n]]
    }
}

struct BceRule {
    logits: Arc<Vec<f32>>,
    targets: Arc<Vec<f32>>,
}

impl Backward for BceRule {
    fn backward(&self, grad: &[f32]) -> Vec<Vec<f32>> {
        let n = self.logits.len() as f32;
        let g = self
            .logits
            .iter()
            .zip(self.targets.iter())
            .map(|(&z, &y)| grad[0] * (sigmoid(z) - y) / n)
            .collect();
        vec![g, Vec::new()]
    }
}

impl Graph {
    /// Repeat a vector (or [1,n] row) `rows` times -> [rows, n].
    /// Gradient sums over rows.
    pub fn tile_rows(&mut self, row: &Tensor, rows: usize) -> Tensor {
        let cols = row.numel();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(&row.data);
        }
        self.custom(&[row], data, &[rows, cols], Box::new(TileRowsRule { rows, cols }))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let rows = parts[0].shape[0];
        for p in parts {
            assert_eq!(p.shape.len(), 2, "concat_cols expects rank-2 tensors");
            assert_eq!(p.shape[0], rows, "concat_cols row mismatch");
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.shape[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0f32; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (p, w) in parts.iter().zip(widths.iter()) {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&p.data[r * w..(r + 1) * w]);
                off += w;
            }
        }
        self.custom(parts, data, &[rows, total], Box::new(ConcatColsRule { rows, widths }))
    }

    /// Column slice [rows, cols] -> [rows, len].
    pub fn slice_cols(&mut self, t: &Tensor, start: usize, len: usize) -> Tensor {
        assert_eq!(t.shape.len(), 2);
        let (rows, cols) = (t.shape[0], t.shape[1]);
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = vec![0.0f32; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&t.data[r * cols + start..r * cols + start + len]);
        }
        self.custom(&[t], data, &[rows, len], Box::new(SliceColsRule { rows, cols, start, len }))
    }

    /// Row slice [rows, cols] -> [len, cols] (contiguous).
    pub fn slice_rows(&mut self, t: &Tensor, start: usize, len: usize) -> Tensor {
        assert_eq!(t.shape.len(), 2);
        let (rows, cols) = (t.shape[0], t.shape[1]);
        assert!(start + len <= rows, "slice_rows out of range");
        let data = t.data[start * cols..(start + len) * cols].to_vec();
        self.custom(&[t], data, &[len, cols], Box::new(SliceRowsRule { rows, cols, start, len }))
    }

    /// Column-wise max over rows [r,c] -> [1,c]. Ties take the lowest row.
    pub fn max_rows(&mut self, t: &Tensor) -> Tensor {
        assert_eq!(t.shape.len(), 2);
        let (rows, cols) = (t.shape[0], t.shape[1]);
        assert!(rows > 0);
        let mut argmax = vec![0usize; cols];
        let mut data = vec![f32::NEG_INFINITY; cols];
        for r in 0..rows {
            for c in 0..cols {
                let v = t.data[r * cols + c];
                if v > data[c] {
                    data[c] = v;
                    argmax[c] = r;
                }
            }
        }
        self.custom(&[t], data, &[1, cols], Box::new(MaxRowsRule { argmax, rows, cols }))
    }

    pub fn sum(&mut self, t: &Tensor) -> Tensor {
        let s: f32 = t.data.iter().sum();
        self.custom(&[t], vec![s], &[1], Box::new(SumRule { n: t.numel(), scale: 1.0 }))
    }

    pub fn mean(&mut self, t: &Tensor) -> Tensor {
        let n = t.numel();
        let s: f32 = t.data.iter().sum::<f32>() / n as f32;
        self.custom(&[t], vec![s], &[1], Box::new(SumRule { n, scale: 1.0 / n as f32 }))
    }

    /// Numerically stable mean binary cross-entropy on logits.
    /// Targets are treated as constants.
    pub fn bce_with_logits(&mut self, logits: &Tensor, targets: &Tensor) -> Tensor {
        assert_eq!(logits.numel(), targets.numel(), "bce length mismatch");
        let n = logits.numel() as f32;
        let loss: f32 = logits
            .data
            .iter()
            .zip(targets.data.iter())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f32>()
            / n;
        let rule = BceRule { logits: logits.data.clone(), targets: targets.data.clone() };
        self.custom(&[logits, targets], vec![loss], &[1], Box::new(rule))
    }

    /// Mean absolute error between two tensors of equal shape.
    pub fn l1_loss(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let d = self.sub(a, b);
        let ad = self.abs(&d);
        self.mean(&ad)
    }

    /// Mean squared error between two tensors of equal shape.
    pub fn mse_loss(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let d = self.sub(a, b);
        let sq = self.powi(&d, 2);
        self.mean(&sq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec(), &[v.len()])
    }

    #[test]
    fn exp_identity_case() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[0.0, 0.0, 0.0]));
        let y = g.exp(&x);
        assert_eq!(y.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_symmetry() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[0.0]));
        let y = g.sigmoid(&x);
        assert_eq!(y.item(), 0.5);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3.0]));
        let y = g.mul(&x, &x);
        g.backward(&y);
        assert_eq!(g.grad(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let v = Tensor::from_vec(vec![2.0, -1.0, 0.5], &[3, 1]);
        let i = g.leaf(&eye);
        let y = g.matmul(&i, &v);
        assert_eq!(y.data(), v.data());
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]));
        let b = g.leaf(&Tensor::from_vec(vec![1.0, 1.0], &[2, 1]));
        let y = g.matmul(&a, &b);
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn binary_shape_mismatch_reports_both() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[1.0, 2.0]));
        let b = g.leaf(&t(&[1.0, 2.0, 3.0]));
        let _ = g.add(&a, &b);
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn matmul_dimension_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]));
        let b = g.leaf(&Tensor::zeros(&[2, 3]));
        let _ = g.matmul(&a, &b);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[4, 5]));
        let s = g.sum(&x);
        g.backward(&s);
        assert!(g.grad(&x).unwrap().iter().all(|&v| v == 1.0));
        assert_eq!(g.grad(&x).unwrap().len(), 20);
    }

    #[test]
    fn leaf_grad_has_leaf_shape() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[3, 2]));
        let y = g.relu(&x);
        let s = g.sum(&y);
        g.backward(&s);
        assert_eq!(g.grad(&x).unwrap().len(), 6);
    }

    #[test]
    fn backward_deterministic_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(&Tensor::from_vec(vec![0.3, -1.2, 0.7, 1.9], &[2, 2]));
            let w = g.leaf(&Tensor::from_vec(vec![0.11, -0.5, 0.23, 0.9], &[2, 2]));
            let h = g.matmul(&x, &w);
            let a = g.tanh(&h);
            let sq = g.powi(&a, 2);
            let loss = g.mean(&sq);
            g.backward(&loss);
            (g.grad(&x).unwrap().to_vec(), g.grad(&w).unwrap().to_vec())
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1.0, 2.0, 3.0]));
        let c = g.leaf(&t(&[2.0]));
        let y = g.mul(&c, &x);
        let s = g.sum(&y);
        g.backward(&s);
        assert_eq!(y.data(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.grad(&c).unwrap(), &[6.0]);
        assert_eq!(g.grad(&x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn bce_balanced_at_half_probability_is_ln2() {
        let mut g = Graph::new();
        let z = g.leaf(&t(&[0.0, 0.0, 0.0, 0.0]));
        let y = t(&[1.0, 0.0, 1.0, 0.0]);
        let loss = g.bce_with_logits(&z, &y);
        assert!((loss.item() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn concat_slice_roundtrip_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]));
        let b = g.leaf(&Tensor::from_vec(vec![5.0, 6.0], &[2, 1]));
        let cat = g.concat_cols(&[&a, &b]);
        assert_eq!(cat.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let right = g.slice_cols(&cat, 2, 1);
        let s = g.sum(&right);
        g.backward(&s);
        assert_eq!(g.grad(&a).unwrap(), &[0.0; 4]);
        assert_eq!(g.grad(&b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn max_rows_routes_gradient_to_argmax() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::from_vec(vec![1.0, 4.0, 2.0, 4.0, 0.0, 3.0], &[3, 2]));
        let m = g.max_rows(&x);
        assert_eq!(m.data(), &[2.0, 4.0]);
        let s = g.sum(&m);
        g.backward(&s);
        // ties (rows 0 and 1 in column 1) resolve to the lowest row
        assert_eq!(g.grad(&x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tile_rows_gradient_sums() {
        let mut g = Graph::new();
        let b = g.leaf(&t(&[1.0, -2.0]));
        let tiled = g.tile_rows(&b, 3);
        assert_eq!(tiled.shape(), &[3, 2]);
        let s = g.sum(&tiled);
        g.backward(&s);
        assert_eq!(g.grad(&b).unwrap(), &[3.0, 3.0]);
    }
}
