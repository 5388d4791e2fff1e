//! Reverse-mode gradient tape over [`Mat`] values.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; the reverse pass walks it backwards once. Parameter
//! leaves are cached per tape so repeated uses of a weight share one node
//! and their gradient contributions meet there before reaching the store.

use std::collections::HashMap;

use super::mat::Mat;
use super::store::{ParamId, ParameterStore};
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Inputs to `exp` are clipped here to keep values finite.
pub const EXP_CLIP: f64 = 50.0;

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    /// x·wᵀ + b.
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Sum(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    pub visited: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
    exp_clips: usize,
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

    /// Number of `exp` inputs that were clipped.
    pub fn exp_clips(&self) -> usize {
        self.exp_clips
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, context: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(context, format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// x (n×in) · wᵀ (w is out×in) + b (1×out, broadcast over rows).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.shape(x);
        let (m, k2) = self.shape(w);
        if k != k2 {
            return Err(Error::dim("linear input width", k2, k));
        }
        let mut out = self.value(x).matmul_t(self.value(w));
        if let Some(b) = b {
            if self.shape(b) != (1, m) {
                return Err(Error::dim("linear bias", format!("(1, {m})"), format!("{:?}", self.shape(b))));
            }
            let bias = &self.nodes[b.0].value.data;
            for r in 0..n {
                for c in 0..m {
                    out.data[r * m + c] += bias[c];
                }
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let clipped = self.value(a).data.iter().filter(|x| **x > EXP_CLIP).count();
        self.exp_clips += clipped;
        let v = self.value(a).map(|x| x.min(EXP_CLIP).exp());
        self.push(v, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::dim("column slice", format!("<= {c}"), start + len));
        }
        let src = self.value(a);
        let mut out = Mat::zeros(r, len);
        for i in 0..r {
            out.data[i * len..(i + 1) * len].copy_from_slice(&src.data[i * c + start..i * c + start + len]);
        }
        Ok(self.push(out, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|p| self.shape(*p).0).unwrap_or(0);
        if let Some(p) = parts.iter().find(|p| self.shape(**p).0 != rows) {
            return Err(Error::dim("concat rows", rows, self.shape(*p).0));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let v = self.value(*p);
            for i in 0..rows {
                out.data[i * cols + off..i * cols + off + v.cols].copy_from_slice(v.row(i));
            }
            off += v.cols;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|p| self.shape(*p).1).unwrap_or(0);
        if let Some(p) = parts.iter().find(|p| self.shape(**p).1 != cols) {
            return Err(Error::dim("concat columns", cols, self.shape(*p).1));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.value(*p).data);
        }
        let rows = data.len() / cols.max(1);
        let out = Mat::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Reverse pass from a scalar `loss` seeded with d(loss) = 1.
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore) -> Result<BackwardStats> {
        self.backward_with_seed(loss, 1.0, store)
    }

    /// Reverse pass; parameter gradients are accumulated into `store`. A
    /// tape can be reversed only once.
    pub fn backward_with_seed(&mut self, loss: Var, seed: f64, store: &mut ParameterStore) -> Result<BackwardStats> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::dim("loss", "(1, 1)", format!("{:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(seed));
        let mut visited = 0;
        for idx in (0..self.nodes.len()).rev() {
            visited += 1;
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let dx = g.matmul(wv);
                    let dw = g.transpose().matmul(xv);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        let mut db = Mat::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for c in 0..g.cols {
                                db.data[c] += g.data[r * g.cols + c];
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da = g.zip(bv, |x, y| x * y);
                    let db = g.zip(av, |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.map(|x| x * k)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Sigmoid(a) => accumulate(&mut grads, *a, g.zip(&node.value, |d, y| d * y * (1.0 - y))),
                Op::Tanh(a) => accumulate(&mut grads, *a, g.zip(&node.value, |d, y| d * (1.0 - y * y))),
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, g.zip(av, |d, x| if x > 0.0 { d } else { 0.0 }));
                }
                Op::Exp(a) => {
                    let av = &self.nodes[a.0].value;
                    let mut da = g.zip(&node.value, |d, y| d * y);
                    for (d, x) in da.data.iter_mut().zip(&av.data) {
                        if *x > EXP_CLIP {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Abs(a) => {
                    let av = &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, g.zip(av, |d, x| d * sign(x)));
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    accumulate(&mut grads, *a, Mat::filled(r, c, g.data[0]));
                }
                Op::SliceCols { a, start } => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut da = Mat::zeros(r, c);
                    for i in 0..r {
                        for j in 0..g.cols {
                            da.data[i * c + start + j] = g.data[i * g.cols + j];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.nodes[p.0].value.shape();
                        let mut dp = Mat::zeros(r, c);
                        for i in 0..r {
                            dp.data[i * c..(i + 1) * c].copy_from_slice(&g.data[i * g.cols + off..i * g.cols + off + c]);
                        }
                        off += c;
                        accumulate(&mut grads, *p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.nodes[p.0].value.shape();
                        let dp = Mat::from_vec(r, c, g.data[off..off + r * c].to_vec())?;
                        off += r * c;
                        accumulate(&mut grads, *p, dp);
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
            }
        }
        Ok(BackwardStats { visited })
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
