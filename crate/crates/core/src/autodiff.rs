//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every operation is recorded on a [`Tape`]. [`Tape::grad`] builds the
//! gradient itself out of tape operations, so a gradient can be fed into
//! further computation and differentiated again. The gradient penalty relies
//! on this: it penalizes the norm of a gradient and is then minimized with
//! respect to the encoder parameters.
//!
//! All values are 2-D. Scalars are `1 x 1` matrices.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear gather used for reshapes, permutations and im2col.
///
/// Output element `k` (row-major over `out_shape`) copies input element
/// `src[k]` (row-major over `in_shape`), or is zero when `src[k] == NONE`.
#[derive(Debug)]
pub struct IndexMap {
    pub in_shape: (usize, usize),
    pub out_shape: (usize, usize),
    pub src: Vec<u32>,
}

impl IndexMap {
    pub const NONE: u32 = u32::MAX;
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastScalar(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Sqrt(Var),
    LogSumExpRows(Var),
    Gather(Var, Rc<Vec<usize>>),
    Scatter(Var, Rc<Vec<usize>>),
    Clamp(Var, f64, f64),
    Index(Var, Rc<IndexMap>),
    IndexAdd(Var, Rc<IndexMap>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    PadRows(Var, usize),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | AddScalar(a) | SumAll(a) | SumRows(a) | SumCols(a)
            | BroadcastScalar(a) | BroadcastRows(a) | BroadcastCols(a) | Tanh(a) | Exp(a)
            | Log(a) | Recip(a) | Sqrt(a) | LogSumExpRows(a) | Gather(a, _) | Scatter(a, _)
            | Clamp(a, _, _) | Index(a, _) | IndexAdd(a, _) | SliceRows(a, _) | PadRows(a, _) => {
                vec![*a]
            }
            ConcatRows(vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records values and the operations that produced them.
#[derive(Default)]
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Leaves are differentiable when named in [`Tape::grad`].
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    /// Copies the value of `v` into a fresh leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    /// `a` is `n x m`, `row` is `1 x m`; adds `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `n x m -> 1 x m`
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    /// `n x m -> n x 1`
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    fn broadcast_scalar(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let v = Array2::from_elem(shape, self.scalar(a));
        self.push(v, Op::BroadcastScalar(a))
    }

    fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let row = self.value(a).row(0).to_owned();
        let v = row.broadcast((n, row.len())).unwrap().to_owned();
        self.push(v, Op::BroadcastRows(a))
    }

    /// `n x 1 -> n x m`
    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> Var {
        let col = self.value(a).clone();
        let v = col.broadcast((col.nrows(), m)).unwrap().to_owned();
        self.push(v, Op::BroadcastCols(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    /// Elementwise reciprocal with `1/0 := 0`.
    pub fn recip(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        self.push(v, Op::Recip(a))
    }

    /// Elementwise square root. Its derivative at zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Row-wise `log(sum(exp(x)))`, `n x m -> n x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let s: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            out[[i, 0]] = max + s.ln();
        }
        self.push(out, Op::LogSumExpRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.shape(a).1;
        let lse = self.logsumexp_rows(a);
        let b = self.broadcast_cols(lse, m);
        self.sub(a, b)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ls = self.log_softmax_rows(a);
        self.exp(ls)
    }

    /// Picks column `idx[i]` from row `i`, `n x m -> n x 1`.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), idx.len(), "gather index length");
        let v = Array2::from_shape_fn((idx.len(), 1), |(i, _)| x[[i, idx[i]]]);
        self.push(v, Op::Gather(a, idx))
    }

    fn scatter(&mut self, a: Var, idx: Rc<Vec<usize>>, m: usize) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((idx.len(), m));
        for (i, &j) in idx.iter().enumerate() {
            v[[i, j]] = x[[i, 0]];
        }
        self.push(v, Op::Scatter(a, idx))
    }

    /// Elementwise clamp; gradient passes only where the input is strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn index(&mut self, a: Var, map: Rc<IndexMap>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), map.in_shape, "index map input shape");
        let flat = x.as_standard_layout();
        let flat = flat.as_slice().unwrap();
        let data: Vec<f64> = map
            .src
            .iter()
            .map(|&k| if k == IndexMap::NONE { 0.0 } else { flat[k as usize] })
            .collect();
        let v = Array2::from_shape_vec(map.out_shape, data).unwrap();
        self.push(v, Op::Index(a, map))
    }

    fn index_add(&mut self, a: Var, map: Rc<IndexMap>) -> Var {
        let x = self.value(a);
        let flat = x.as_standard_layout();
        let flat = flat.as_slice().unwrap();
        let mut out = vec![0.0; map.in_shape.0 * map.in_shape.1];
        for (k, &src) in map.src.iter().enumerate() {
            if src != IndexMap::NONE {
                out[src as usize] += flat[k];
            }
        }
        let v = Array2::from_shape_vec(map.in_shape, out).unwrap();
        self.push(v, Op::IndexAdd(a, map))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    fn pad_rows(&mut self, a: Var, start: usize, total: usize) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((total, x.ncols()));
        v.slice_mut(s![start..start + x.nrows(), ..]).assign(x);
        self.push(v, Op::PadRows(a, start))
    }

    /// Gradients of `output` with respect to `wrt`, recorded as new tape nodes.
    ///
    /// `output` is seeded with ones, so for a `1 x 1` output this is the usual
    /// gradient. Any node may appear in `wrt`, not only leaves; propagation
    /// stops at nodes that do not depend on some member of `wrt`. Nodes in
    /// `wrt` that `output` does not depend on get a zero gradient.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        let end = output.0 + 1;
        let start = wrt.iter().map(|w| w.0).min().unwrap_or(end);
        let mut reach = vec![false; end];
        for w in wrt {
            if w.0 < end {
                reach[w.0] = true;
            }
        }
        for i in start..end {
            if !reach[i] && self.nodes[i].op.inputs().iter().any(|v| v.0 >= start && reach[v.0]) {
                reach[i] = true;
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; end];
        if reach[output.0] {
            let ones = Array2::ones(self.shape(output));
            adj[output.0] = Some(self.leaf(ones));
        }
        for i in (start..end).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.vjp(Var(i), &op, g) {
                if input.0 < start || !reach[input.0] {
                    continue;
                }
                adj[input.0] = Some(match adj[input.0] {
                    Some(prev) => self.add(prev, contrib),
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Array2::zeros(self.shape(w));
                    self.leaf(z)
                }
            })
            .collect()
    }

    fn vjp(&mut self, y: Var, op: &Op, g: Var) -> Vec<(Var, Var)> {
        use Op::*;
        match op {
            Leaf => vec![],
            MatMul(a, b) => {
                let bt = self.transpose(*b);
                let ga = self.matmul(g, bt);
                let at = self.transpose(*a);
                let gb = self.matmul(at, g);
                vec![(*a, ga), (*b, gb)]
            }
            Transpose(a) => vec![(*a, self.transpose(g))],
            Add(a, b) => vec![(*a, g), (*b, g)],
            Sub(a, b) => {
                let gb = self.scale(g, -1.0);
                vec![(*a, g), (*b, gb)]
            }
            Mul(a, b) => {
                let ga = self.mul(g, *b);
                let gb = self.mul(g, *a);
                vec![(*a, ga), (*b, gb)]
            }
            Scale(a, c) => vec![(*a, self.scale(g, *c))],
            AddScalar(a) => vec![(*a, g)],
            AddRow(a, r) => {
                let gr = self.sum_rows(g);
                vec![(*a, g), (*r, gr)]
            }
            SumAll(a) => {
                let shape = self.shape(*a);
                vec![(*a, self.broadcast_scalar(g, shape))]
            }
            SumRows(a) => {
                let n = self.shape(*a).0;
                vec![(*a, self.broadcast_rows(g, n))]
            }
            SumCols(a) => {
                let m = self.shape(*a).1;
                vec![(*a, self.broadcast_cols(g, m))]
            }
            BroadcastScalar(a) => vec![(*a, self.sum(g))],
            BroadcastRows(a) => vec![(*a, self.sum_rows(g))],
            BroadcastCols(a) => vec![(*a, self.sum_cols(g))],
            Tanh(a) => {
                let y2 = self.mul(y, y);
                let neg = self.scale(y2, -1.0);
                let d = self.add_scalar(neg, 1.0);
                vec![(*a, self.mul(g, d))]
            }
            Exp(a) => vec![(*a, self.mul(g, y))],
            Log(a) => {
                let r = self.recip(*a);
                vec![(*a, self.mul(g, r))]
            }
            Recip(a) => {
                let y2 = self.mul(y, y);
                let gy = self.mul(g, y2);
                vec![(*a, self.scale(gy, -1.0))]
            }
            Sqrt(a) => {
                let r = self.recip(y);
                let gr = self.mul(g, r);
                vec![(*a, self.scale(gr, 0.5))]
            }
            LogSumExpRows(a) => {
                let m = self.shape(*a).1;
                let yb = self.broadcast_cols(y, m);
                let centered = self.sub(*a, yb);
                let p = self.exp(centered);
                let gb = self.broadcast_cols(g, m);
                vec![(*a, self.mul(gb, p))]
            }
            Gather(a, idx) => {
                let m = self.shape(*a).1;
                vec![(*a, self.scatter(g, idx.clone(), m))]
            }
            Scatter(a, idx) => vec![(*a, self.gather(g, idx.clone()))],
            Clamp(a, lo, hi) => {
                let mask = self
                    .value(*a)
                    .mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                let mask = self.leaf(mask);
                vec![(*a, self.mul(g, mask))]
            }
            Index(a, map) => vec![(*a, self.index_add(g, map.clone()))],
            IndexAdd(a, map) => vec![(*a, self.index(g, map.clone()))],
            ConcatRows(parts) => {
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.shape(p).0;
                    out.push((p, self.slice_rows(g, off, n)));
                    off += n;
                }
                out
            }
            SliceRows(a, start) => {
                let total = self.shape(*a).0;
                vec![(*a, self.pad_rows(g, *start, total))]
            }
            PadRows(a, start) => {
                let n = self.shape(*a).0;
                vec![(*a, self.slice_rows(g, *start, n))]
            }
        }
    }
}
