//! Reverse-mode differentiation over coarse array primitives.
//!
//! Every operation evaluates eagerly and appends one node to the [`Tape`].
//! Nodes only reference earlier nodes, so a single reverse sweep from the
//! root produces gradients for every leaf.

use std::sync::Arc;

use super::array::{self, Array};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    DivScalar(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    AddN(Vec<Var>),
    LogSumExp(Var),
    MatVec(Var, Var),
    MatTVec(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Pick(Var, usize),
    Gather(Var, Vec<usize>),
    Column(Var, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation. Single-threaded; build a fresh
/// tape per example.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.data(a).len() != self.data(b).len() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// A differentiable leaf sharing storage with the caller.
    pub fn param(&mut self, value: Arc<Array>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Array::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let value = Array::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Array::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `v / s` for a scalar node `s`.
    pub fn div_scalar(&mut self, v: Var, s: Var) -> Result<Var> {
        self.expect_scalar("div_scalar", s)?;
        let d = self.data(s)[0];
        let value = self.nodes[v.0].value.map(|x| x / d);
        let rg = self.needs(&[v, s]);
        Ok(self.push(value, Op::DivScalar(v, s), rg))
    }

    /// `v · s` for a scalar node `s`.
    pub fn mul_scalar(&mut self, v: Var, s: Var) -> Result<Var> {
        self.expect_scalar("mul_scalar", s)?;
        let k = self.data(s)[0];
        let value = self.nodes[v.0].value.map(|x| x * k);
        let rg = self.needs(&[v, s]);
        Ok(self.push(value, Op::MulScalar(v, s), rg))
    }

    pub fn scale(&mut self, v: Var, c: f64) -> Var {
        let value = self.nodes[v.0].value.map(|x| x * c);
        let rg = self.needs(&[v]);
        self.push(value, Op::Scale(v, c), rg)
    }

    pub fn add_const(&mut self, v: Var, c: f64) -> Var {
        let value = self.nodes[v.0].value.map(|x| x + c);
        let rg = self.needs(&[v]);
        self.push(value, Op::AddConst(v), rg)
    }

    pub fn neg(&mut self, v: Var) -> Var {
        self.scale(v, -1.0)
    }

    pub fn exp(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.map(f64::exp);
        let rg = self.needs(&[v]);
        self.push(value, Op::Exp(v), rg)
    }

    pub fn log(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.map(f64::ln);
        let rg = self.needs(&[v]);
        self.push(value, Op::Log(v), rg)
    }

    pub fn tanh(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.map(f64::tanh);
        let rg = self.needs(&[v]);
        self.push(value, Op::Tanh(v), rg)
    }

    pub fn sigmoid(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.map(array::sigmoid);
        let rg = self.needs(&[v]);
        self.push(value, Op::Sigmoid(v), rg)
    }

    pub fn softplus(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.map(array::softplus);
        let rg = self.needs(&[v]);
        self.push(value, Op::Softplus(v), rg)
    }

    pub fn square(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.map(|x| x * x);
        let rg = self.needs(&[v]);
        self.push(value, Op::Square(v), rg)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, v: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[v.0].value.map(|x| x.clamp(lo, hi));
        let rg = self.needs(&[v]);
        self.push(value, Op::Clamp(v, lo, hi), rg)
    }

    pub fn sum(&mut self, v: Var) -> Var {
        let total = self.data(v).iter().sum();
        let rg = self.needs(&[v]);
        self.push(Array::scalar(total), Op::Sum(v), rg)
    }

    /// Sum of scalar nodes.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &v in vars {
            self.expect_scalar("add_n", v)?;
            total += self.data(v)[0];
        }
        let rg = self.needs(vars);
        Ok(self.push(Array::scalar(total), Op::AddN(vars.to_vec()), rg))
    }

    pub fn logsumexp(&mut self, v: Var) -> Result<Var> {
        let value = array::logsumexp(self.data(v))?;
        let rg = self.needs(&[v]);
        Ok(self.push(Array::scalar(value), Op::LogSumExp(v), rg))
    }

    /// `w · x` with `w` of shape `[m, n]` and `x` of length `n`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("matvec", w)?;
        if self.data(x).len() != n {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                left: self.shape(w).to_vec(),
                right: self.shape(x).to_vec(),
            });
        }
        let out = array::matvec(self.data(w), m, n, self.data(x));
        let rg = self.needs(&[w, x]);
        Ok(self.push(Array::vector(out), Op::MatVec(w, x), rg))
    }

    /// `wᵀ · x` with `w` of shape `[m, n]` and `x` of length `m`.
    pub fn matvec_t(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("matvec_t", w)?;
        if self.data(x).len() != m {
            return Err(Error::ShapeMismatch {
                op: "matvec_t",
                left: self.shape(w).to_vec(),
                right: self.shape(x).to_vec(),
            });
        }
        let out = array::matvec_t(self.data(w), m, n, self.data(x));
        let rg = self.needs(&[w, x]);
        Ok(self.push(Array::vector(out), Op::MatTVec(w, x), rg))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyReduction);
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let rg = self.needs(parts);
        Ok(self.push(Array::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.data(v);
        if len == 0 || start + len > src.len() {
            return Err(Error::InvalidArray(format!(
                "slice {start}..{} of length {}",
                start + len,
                src.len()
            )));
        }
        let value = Array::vector(src[start..start + len].to_vec());
        let rg = self.needs(&[v]);
        Ok(self.push(value, Op::Slice(v, start), rg))
    }

    /// Scalar taken from flat position `i`.
    pub fn pick(&mut self, v: Var, i: usize) -> Result<Var> {
        let src = self.data(v);
        let x = *src.get(i).ok_or(Error::OutOfVocabulary { id: i, size: src.len() })?;
        let rg = self.needs(&[v]);
        Ok(self.push(Array::scalar(x), Op::Pick(v, i), rg))
    }

    /// Vector of the entries at the given flat positions.
    pub fn gather(&mut self, v: Var, idx: &[usize]) -> Result<Var> {
        let src = self.data(v);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            out.push(*src.get(i).ok_or(Error::OutOfVocabulary { id: i, size: src.len() })?);
        }
        if out.is_empty() {
            return Err(Error::EmptyReduction);
        }
        let rg = self.needs(&[v]);
        Ok(self.push(Array::vector(out), Op::Gather(v, idx.to_vec()), rg))
    }

    /// Column `j` of a matrix, as a vector.
    pub fn column(&mut self, w: Var, j: usize) -> Result<Var> {
        let (_, n) = self.matrix_dims("column", w)?;
        if j >= n {
            return Err(Error::OutOfVocabulary { id: j, size: n });
        }
        let value = Array::vector(self.nodes[w.0].value.column(j));
        let rg = self.needs(&[w]);
        Ok(self.push(value, Op::Column(w, j), rg))
    }

    pub fn reshape(&mut self, v: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.nodes[v.0].value).clone().reshape(shape.to_vec())?;
        let rg = self.needs(&[v]);
        Ok(self.push(value, Op::Reshape(v), rg))
    }

    fn expect_scalar(&self, op: &'static str, v: Var) -> Result<()> {
        if self.data(v).len() != 1 {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(v).to_vec(),
                right: vec![],
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, w: Var) -> Result<(usize, usize)> {
        match self.shape(w) {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::ShapeMismatch {
                op,
                left: other.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, 1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::DivScalar(v, s) => {
                let d = self.data(*s)[0];
                if let Some(gv) = self.slot(grads, *v) {
                    axpy(gv, 1.0 / d, g);
                }
                if let Some(gs) = self.slot(grads, *s) {
                    // d(v/s)/ds = -out/s
                    gs[0] -= array::dot(g, out) / d;
                }
            }
            Op::MulScalar(v, s) => {
                let k = self.data(*s)[0];
                if let Some(gv) = self.slot(grads, *v) {
                    axpy(gv, k, g);
                }
                if let Some(gs) = self.slot(grads, *s) {
                    gs[0] += array::dot(g, self.data(*v));
                }
            }
            Op::Scale(v, c) => {
                if let Some(gv) = self.slot(grads, *v) {
                    axpy(gv, *c, g);
                }
            }
            Op::AddConst(v) => {
                if let Some(gv) = self.slot(grads, *v) {
                    axpy(gv, 1.0, g);
                }
            }
            Op::Exp(v) => {
                if let Some(gv) = self.slot(grads, *v) {
                    for ((o, gi), yi) in gv.iter_mut().zip(g).zip(out) {
                        *o += gi * yi;
                    }
                }
            }
            Op::Log(v) => {
                let x = self.data(*v);
                if let Some(gv) = self.slot(grads, *v) {
                    for ((o, gi), xi) in gv.iter_mut().zip(g).zip(x) {
                        *o += gi / xi;
                    }
                }
            }
            Op::Tanh(v) => {
                if let Some(gv) = self.slot(grads, *v) {
                    for ((o, gi), yi) in gv.iter_mut().zip(g).zip(out) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sigmoid(v) => {
                if let Some(gv) = self.slot(grads, *v) {
                    for ((o, gi), yi) in gv.iter_mut().zip(g).zip(out) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Softplus(v) => {
                let x = self.data(*v);
                if let Some(gv) = self.slot(grads, *v) {
                    for ((o, gi), xi) in gv.iter_mut().zip(g).zip(x) {
                        *o += gi * array::sigmoid(*xi);
                    }
                }
            }
            Op::Square(v) => {
                let x = self.data(*v);
                if let Some(gv) = self.slot(grads, *v) {
                    for ((o, gi), xi) in gv.iter_mut().zip(g).zip(x) {
                        *o += 2.0 * gi * xi;
                    }
                }
            }
            Op::Clamp(v, lo, hi) => {
                let x = self.data(*v);
                if let Some(gv) = self.slot(grads, *v) {
                    for ((o, gi), xi) in gv.iter_mut().zip(g).zip(x) {
                        if *xi >= *lo && *xi <= *hi {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sum(v) => {
                if let Some(gv) = self.slot(grads, *v) {
                    for o in gv.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::AddN(vars) => {
                for v in vars {
                    if let Some(gv) = self.slot(grads, *v) {
                        gv[0] += g[0];
                    }
                }
            }
            Op::LogSumExp(v) => {
                let x = self.data(*v);
                let lse = out[0];
                if let Some(gv) = self.slot(grads, *v) {
                    for (o, xi) in gv.iter_mut().zip(x) {
                        *o += g[0] * (xi - lse).exp();
                    }
                }
            }
            Op::MatVec(w, x) => {
                let (m, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let (wv, xv) = (self.data(*w), self.data(*x));
                if let Some(gw) = self.slot(grads, *w) {
                    for (row, gi) in gw.chunks_exact_mut(n).zip(g) {
                        axpy(row, *gi, xv);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let t = array::matvec_t(wv, m, n, g);
                    axpy(gx, 1.0, &t);
                }
            }
            Op::MatTVec(w, x) => {
                let (m, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let (wv, xv) = (self.data(*w), self.data(*x));
                if let Some(gw) = self.slot(grads, *w) {
                    for (row, xi) in gw.chunks_exact_mut(n).zip(xv) {
                        axpy(row, *xi, g);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let t = array::matvec(wv, m, n, g);
                    axpy(gx, 1.0, &t);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.data(*p).len();
                    if let Some(gp) = self.slot(grads, *p) {
                        axpy(gp, 1.0, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Slice(v, start) => {
                let start = *start;
                if let Some(gv) = self.slot(grads, *v) {
                    axpy(&mut gv[start..start + g.len()], 1.0, g);
                }
            }
            Op::Pick(v, idx) => {
                let idx = *idx;
                if let Some(gv) = self.slot(grads, *v) {
                    gv[idx] += g[0];
                }
            }
            Op::Gather(v, idx) => {
                if let Some(gv) = self.slot(grads, *v) {
                    for (&k, gi) in idx.iter().zip(g) {
                        gv[k] += gi;
                    }
                }
            }
            Op::Column(w, j) => {
                let n = self.shape(*w)[1];
                let j = *j;
                if let Some(gw) = self.slot(grads, *w) {
                    for (r, gi) in g.iter().enumerate() {
                        gw[r * n + j] += gi;
                    }
                }
            }
            Op::Reshape(v) => {
                if let Some(gv) = self.slot(grads, *v) {
                    axpy(gv, 1.0, g);
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Array {
        let shape = self.shapes.get(v.0).cloned().unwrap_or_default();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Array::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Array::zeros(&shape),
        }
    }

    /// Adds the gradient of `v` into `acc` (scaled by `weight`).
    pub fn accumulate_into(&self, v: Var, weight: f64, acc: &mut Array) {
        if let Some(Some(g)) = self.grads.get(v.0) {
            axpy(acc.data_mut(), weight, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 6.0);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![0.3, -1.2]));
        let y = t.logsumexp(x).unwrap();
        let g = t.backward(y).unwrap().get(x);
        let sm = array::softmax(&[0.3, -1.2]).unwrap();
        assert!((g.data()[0] - sm[0]).abs() < 1e-15);
        assert!((g.data()[1] - sm[1]).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![1.0, 2.0]));
        let y = t.exp(x);
        assert!(matches!(t.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(vec![1.0, 2.0]));
        let unused = t.leaf(Array::vector(vec![5.0, 6.0, 7.0]));
        let y = t.sum(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(unused), Array::zeros(&[3]));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Array::vector(vec![1.0, 2.0]));
        let x = t.leaf(Array::vector(vec![3.0, 4.0]));
        let y = t.mul(c, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(c), Array::zeros(&[2]));
        assert_eq!(g.get(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut t = Tape::new();
        let a = t.leaf(Array::vector(vec![1.0, 2.0]));
        let b = t.leaf(Array::vector(vec![1.0]));
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
    }
}
