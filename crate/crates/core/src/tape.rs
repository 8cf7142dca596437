//! Dense row-major matrices and a reverse-mode tape over the handful of
//! coarse operations the transformer needs.
//!
//! Each forward call records a node holding its value; `Tape::backward`
//! walks the nodes in reverse and accumulates gradients. Parameter leaves
//! borrow their storage from the parameter set instead of copying it.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub trait Scalar: Float + FromPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Mat<F>) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn cast<G: Scalar>(&self) -> Mat<G> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| G::from(*v).expect("finite cast"))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a (m x k) * b (k x n)`
pub fn matmul<F: Scalar>(a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (p, &aip) in a.row(i).iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(p)) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

/// `a (m x k) * b^T` where `b` is `n x k`.
pub fn matmul_t<F: Scalar>(a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    assert_eq!(a.cols, b.cols, "matmul_t inner dims");
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            let mut s = F::zero();
            for (&x, &y) in ar.iter().zip(b.row(j)) {
                s = s + x * y;
            }
            out.data[i * b.rows + j] = s;
        }
    }
    out
}

/// `a^T * b` where `a` is `m x k` and `b` is `m x n`; result `k x n`.
pub fn t_matmul<F: Scalar>(a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    assert_eq!(a.rows, b.rows, "t_matmul outer dims");
    let mut out = Mat::zeros(a.cols, b.cols);
    for i in 0..a.rows {
        let br = b.row(i);
        for (p, &aip) in a.row(i).iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            let orow = &mut out.data[p * b.cols..(p + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<F> {
    Param(usize),
    Const,
    Rows(Vec<(NodeId, usize)>),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, F),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gelu(NodeId),
    Softmax {
        x: NodeId,
    },
    MaskCols {
        x: NodeId,
        keep: Vec<bool>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Dropout {
        x: NodeId,
        mult: Vec<F>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Mat<F>,
        count: usize,
    },
}

struct Node<F> {
    op: Op<F>,
    value: Option<Mat<F>>,
}

pub struct Tape<'a, F: Scalar> {
    params: &'a [Mat<F>],
    param_nodes: Vec<Option<NodeId>>,
    nodes: Vec<Node<F>>,
}

impl<'a, F: Scalar> Tape<'a, F> {
    pub fn new(params: &'a [Mat<F>]) -> Self {
        Self {
            params,
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<F>, value: Mat<F>) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Mat<F> {
        match (&self.nodes[id].op, &self.nodes[id].value) {
            (Op::Param(p), _) => &self.params[*p],
            (_, Some(v)) => v,
            _ => unreachable!("non-parameter nodes own their value"),
        }
    }

    pub fn param(&mut self, pid: usize) -> NodeId {
        if let Some(id) = self.param_nodes[pid] {
            return id;
        }
        self.nodes.push(Node {
            op: Op::Param(pid),
            value: None,
        });
        let id = self.nodes.len() - 1;
        self.param_nodes[pid] = Some(id);
        id
    }

    pub fn constant(&mut self, m: Mat<F>) -> NodeId {
        self.push(Op::Const, m)
    }

    /// Output row `i` is row `sources[i].1` of node `sources[i].0`.
    pub fn rows(&mut self, sources: Vec<(NodeId, usize)>) -> NodeId {
        let cols = self.value(sources[0].0).cols;
        let mut out = Mat::zeros(sources.len(), cols);
        for (i, &(n, r)) in sources.iter().enumerate() {
            let v = self.value(n);
            assert_eq!(v.cols, cols, "rows: column mismatch");
            out.row_mut(i).copy_from_slice(v.row(r));
        }
        self.push(Op::Rows(sources), out)
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        self.rows(ids.iter().map(|&i| (table, i)).collect())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_t(self.value(a), self.value(b));
        self.push(Op::MatMulT(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.len(), v.cols, "bias width");
        for r in 0..v.rows {
            for (x, &bb) in v.row_mut(r).iter_mut().zip(&b.data) {
                *x = *x + bb;
            }
        }
        self.push(Op::AddBias(a, bias), v)
    }

    /// `x * w + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let n = F::from_usize(cols).unwrap();
        let eps = F::c(LN_EPS);
        let mut xhat = vec![F::zero(); rows * cols];
        let mut inv_std = vec![F::zero(); rows];
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = g[c] * h + b[c];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for a in &mut v.data {
            *a = gelu(*a);
        }
        self.push(Op::Gelu(x), v)
    }

    /// Row softmax; entries with `allowed == false` get probability 0.
    /// `allowed` is row-major with the same shape as `x`.
    pub fn masked_softmax(&mut self, x: NodeId, allowed: &[bool]) -> NodeId {
        let xv = self.value(x);
        assert_eq!(allowed.len(), xv.len(), "mask shape");
        let mut out = Mat::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let ok = &allowed[r * xv.cols..(r + 1) * xv.cols];
            let max = row
                .iter()
                .zip(ok)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(F::neg_infinity(), F::max);
            if max == F::neg_infinity() {
                continue;
            }
            let orow = out.row_mut(r);
            let mut sum = F::zero();
            for c in 0..row.len() {
                if ok[c] {
                    let e = (row[c] - max).exp();
                    orow[c] = e;
                    sum = sum + e;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        self.push(Op::Softmax { x }, out)
    }

    /// Sets columns with `keep[c] == false` to negative infinity.
    pub fn mask_cols(&mut self, x: NodeId, keep: Vec<bool>) -> NodeId {
        let mut v = self.value(x).clone();
        assert_eq!(keep.len(), v.cols, "column mask width");
        for r in 0..v.rows {
            for (a, &k) in v.row_mut(r).iter_mut().zip(&keep) {
                if !k {
                    *a = F::neg_infinity();
                }
            }
        }
        self.push(Op::MaskCols { x, keep }, v)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice in range");
        let mut out = Mat::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { x, start }, out)
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat rows");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        self.push(Op::ConcatCols(parts), out)
    }

    /// Inverted dropout with precomputed multipliers (0 or 1/(1-p)).
    pub fn dropout(&mut self, x: NodeId, mult: Vec<F>) -> NodeId {
        let mut v = self.value(x).clone();
        assert_eq!(mult.len(), v.len(), "dropout mask size");
        for (a, &m) in v.data.iter_mut().zip(&mult) {
            *a = *a * m;
        }
        self.push(Op::Dropout { x, mult }, v)
    }

    /// Mean negative log-likelihood over rows with a target; result is 1x1.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<Option<usize>>) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows, "one target slot per row");
        let mut probs = Mat::zeros(lv.rows, lv.cols);
        let mut total = F::zero();
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = lv.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let prow = probs.row_mut(r);
            let mut sum = F::zero();
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - max).exp();
                sum = sum + *p;
            }
            for p in prow.iter_mut() {
                *p = *p / sum;
            }
            total = total + (sum.ln() + max - row[t]);
            count += 1;
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            total / F::from_usize(count).unwrap()
        };
        self.push(
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            Mat::from_vec(1, 1, vec![loss]),
        )
    }

    pub fn scalar(&self, id: NodeId) -> F {
        self.value(id).data[0]
    }

    /// Back-propagates from the scalar node `loss` (seeded with `seed`) and
    /// returns one gradient slot per parameter; untouched parameters get `None`.
    pub fn backward(mut self, loss: NodeId, seed: F) -> Vec<Option<Mat<F>>> {
        let mut grads: Vec<Option<Mat<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Mat::from_vec(1, 1, vec![seed]));
        let mut param_grads: Vec<Option<Mat<F>>> = (0..self.params.len()).map(|_| None).collect();

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Const);
            match op {
                Op::Param(p) => param_grads[p] = Some(g),
                Op::Const => {}
                Op::Rows(sources) => {
                    for (i, (n, r)) in sources.into_iter().enumerate() {
                        let (rows, cols) = {
                            let v = self.value(n);
                            (v.rows, v.cols)
                        };
                        let dst = grads[n].get_or_insert_with(|| Mat::zeros(rows, cols));
                        for (d, &s) in dst.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d = *d + s;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = matmul_t(&g, self.value(b));
                    let db = t_matmul(self.value(a), &g);
                    accumulate(&mut grads[a], da);
                    accumulate(&mut grads[b], db);
                }
                Op::MatMulT(a, b) => {
                    let da = matmul(&g, self.value(b));
                    let db = t_matmul(&g, self.value(a));
                    accumulate(&mut grads[a], da);
                    accumulate(&mut grads[b], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b], g.clone());
                    accumulate(&mut grads[a], g);
                }
                Op::AddBias(a, bias) => {
                    let bv = self.value(bias);
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    for r in 0..g.rows {
                        for (d, &s) in db.data.iter_mut().zip(g.row(r)) {
                            *d = *d + s;
                        }
                    }
                    accumulate(&mut grads[bias], db);
                    accumulate(&mut grads[a], g);
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g.scale(s);
                    accumulate(&mut grads[a], g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let cols = g.cols;
                    let n = F::from_usize(cols).unwrap();
                    let gv = self.value(gain).data.clone();
                    let mut dgain = vec![F::zero(); cols];
                    let mut dbias = vec![F::zero(); cols];
                    let mut dx = Mat::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        let dy = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = F::zero();
                        let mut sum_dx = F::zero();
                        for c in 0..cols {
                            dgain[c] = dgain[c] + dy[c] * xh[c];
                            dbias[c] = dbias[c] + dy[c];
                            let d = dy[c] * gv[c];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xh[c];
                        }
                        let k = inv_std[r] / n;
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let d = dy[c] * gv[c];
                            out[c] = k * (n * d - sum_d - xh[c] * sum_dx);
                        }
                    }
                    let (gr, gc) = (self.value(gain).rows, self.value(gain).cols);
                    accumulate(&mut grads[gain], Mat::from_vec(gr, gc, dgain));
                    accumulate(&mut grads[bias], Mat::from_vec(gr, gc, dbias));
                    accumulate(&mut grads[x], dx);
                }
                Op::Gelu(x) => {
                    let mut g = g;
                    for (d, &v) in g.data.iter_mut().zip(&self.value(x).data) {
                        *d = *d * gelu_grad(v);
                    }
                    accumulate(&mut grads[x], g);
                }
                Op::Softmax { x } => {
                    let p = self.nodes[id].value.as_ref().expect("softmax output");
                    let mut dx = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let dot: F = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = pr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads[x], dx);
                }
                Op::MaskCols { x, keep } => {
                    let mut g = g;
                    for r in 0..g.rows {
                        for (d, &k) in g.row_mut(r).iter_mut().zip(&keep) {
                            if !k {
                                *d = F::zero();
                            }
                        }
                    }
                    accumulate(&mut grads[x], g);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = (self.value(x).rows, self.value(x).cols);
                    let dst = grads[x].get_or_insert_with(|| Mat::zeros(rows, cols));
                    for r in 0..rows {
                        for (d, &s) in dst.row_mut(r)[start..start + g.cols].iter_mut().zip(g.row(r)) {
                            *d = *d + s;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (rows, cols) = (self.value(p).rows, self.value(p).cols);
                        let dst = grads[p].get_or_insert_with(|| Mat::zeros(rows, cols));
                        for r in 0..rows {
                            for (d, &s) in dst.row_mut(r).iter_mut().zip(&g.row(r)[off..off + cols]) {
                                *d = *d + s;
                            }
                        }
                        off += cols;
                    }
                }
                Op::Dropout { x, mult } => {
                    let mut g = g;
                    for (d, &m) in g.data.iter_mut().zip(&mult) {
                        *d = *d * m;
                    }
                    accumulate(&mut grads[x], g);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    if count == 0 {
                        continue;
                    }
                    let upstream = g.data[0] / F::from_usize(count).unwrap();
                    let mut dl = probs;
                    for (r, t) in targets.iter().enumerate() {
                        let row = dl.row_mut(r);
                        match t {
                            Some(t) => {
                                row[*t] = row[*t] - F::one();
                                for d in row.iter_mut() {
                                    *d = *d * upstream;
                                }
                            }
                            None => row.iter_mut().for_each(|d| *d = F::zero()),
                        }
                    }
                    accumulate(&mut grads[logits], dl);
                }
            }
        }
        param_grads
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Mat<F>>, g: Mat<F>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let inner = F::c(SQRT_2_OVER_PI) * (x + F::c(GELU_C) * x * x * x);
    F::c(0.5) * x * (F::one() + inner.tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let inner = F::c(SQRT_2_OVER_PI) * (x + F::c(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = F::c(SQRT_2_OVER_PI) * (F::one() + F::c(3.0 * GELU_C) * x * x);
    F::c(0.5) * (F::one() + t) + F::c(0.5) * x * (F::one() - t * t) * dinner
}
