//! Reverse-mode differentiation over [`Matrix`] operations.
//!
//! The training loss is a fixed computation graph, so a tiny eager tape is
//! enough: every builder computes its value immediately and records which
//! nodes fed it. [`Tape::backward`] then walks the nodes in reverse,
//! accumulating adjoints. Leaves are plain matrices; whether a leaf is a
//! learnable parameter or a constant is the caller's business.

use crate::error::{Error, Result};
use crate::matrix::{relu_scalar, sigmoid_scalar, softplus_scalar, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a * b
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// elementwise product
    Mul(NodeId, NodeId),
    /// elementwise quotient
    Div(NodeId, NodeId),
    /// matrix + row vector, broadcast over rows
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Tanh(NodeId),
    Ln(NodeId),
    Transpose(NodeId),
    /// r×c -> r×1 sums over each row
    RowSum(NodeId),
    /// r×c -> 1×1 sums everything
    Sum(NodeId),
    /// a_ij / col_i, col is r×1
    DivColBroadcast(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Eager forward tape with reverse-mode gradients.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Value of a 1×1 node as a scalar.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!((v.rows(), v.cols()), (1, 1), "node is not scalar");
        v.get(0, 0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).mul_elem(self.value(b));
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    /// `a + row` where `row` is 1×cols, broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let m = self.value(a);
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a 1×c row vector");
        assert_eq!(m.cols(), r.cols(), "add_row width mismatch");
        let mut out = m.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) + r.get(0, j));
            }
        }
        self.push(Op::AddRow(a, row), out)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(relu_scalar);
        self.push(Op::Relu(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus_scalar);
        self.push(Op::Softplus(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), 1);
        for i in 0..m.rows() {
            out.set(i, 0, m.row(i).iter().sum());
        }
        self.push(Op::RowSum(a), out)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push(Op::Sum(a), v)
    }

    /// `a_ij / col_i` where `col` is rows×1.
    pub fn div_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let m = self.value(a);
        let c = self.value(col);
        assert_eq!(c.cols(), 1, "div_col expects a r×1 column");
        assert_eq!(m.rows(), c.rows(), "div_col height mismatch");
        let mut out = m.clone();
        for i in 0..out.rows() {
            let d = c.get(i, 0);
            for j in 0..out.cols() {
                out.set(i, j, out.get(i, j) / d);
            }
        }
        self.push(Op::DivColBroadcast(a, col), out)
    }

    /// Elementwise square, recorded as `a ⊙ a`.
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    /// Reverse pass seeded with d(root)/d(root) = 1. `root` must be 1×1.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let r = self.value(root);
        if (r.rows(), r.cols()) != (1, 1) {
            return Err(Error::InvalidArg(format!(
                "backward root must be a 1x1 scalar, got {}x{}",
                r.rows(),
                r.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let add_into = |grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix| {
            match &mut grads[id.0] {
                Some(acc) => *acc = acc.add(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.value(*b).transpose());
                let db = self.value(*a).transpose().matmul(g);
                add_into(grads, *a, da);
                add_into(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g.clone());
                add_into(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g.clone());
                add_into(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                add_into(grads, *a, g.mul_elem(self.value(*b)));
                add_into(grads, *b, g.mul_elem(self.value(*a)));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                add_into(grads, *a, g.zip_map(bv, |gi, bi| gi / bi));
                let out = &self.nodes[idx].value; // a/b
                let db = g.zip_map(&out.zip_map(bv, |ci, bi| -ci / bi), |gi, s| gi * s);
                add_into(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                add_into(grads, *a, g.clone());
                let mut dr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        dr.set(0, j, dr.get(0, j) + g.get(i, j));
                    }
                }
                add_into(grads, *row, dr);
            }
            Op::Scale(a, s) => add_into(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => add_into(grads, *a, g.clone()),
            Op::Relu(a) => {
                let da = g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                add_into(grads, *a, da);
            }
            Op::Softplus(a) => {
                let da = g.zip_map(self.value(*a), |gi, x| gi * sigmoid_scalar(x));
                add_into(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                add_into(grads, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)));
            }
            Op::Ln(a) => {
                let da = g.zip_map(self.value(*a), |gi, x| gi / x);
                add_into(grads, *a, da);
            }
            Op::Transpose(a) => add_into(grads, *a, g.transpose()),
            Op::RowSum(a) => {
                let src = self.value(*a);
                let mut da = Matrix::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    let gi = g.get(i, 0);
                    for j in 0..src.cols() {
                        da.set(i, j, gi);
                    }
                }
                add_into(grads, *a, da);
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                let gi = g.get(0, 0);
                let da = Matrix::from_vec(src.rows(), src.cols(), vec![gi; src.rows() * src.cols()]);
                add_into(grads, *a, da);
            }
            Op::DivColBroadcast(a, col) => {
                let c = self.value(*col);
                let out = &self.nodes[idx].value; // a_ij / c_i
                let mut da = g.clone();
                let mut dc = Matrix::zeros(c.rows(), 1);
                for i in 0..g.rows() {
                    let ci = c.get(i, 0);
                    let mut acc = 0.0;
                    for j in 0..g.cols() {
                        da.set(i, j, g.get(i, j) / ci);
                        acc -= g.get(i, j) * out.get(i, j) / ci;
                    }
                    dc.set(i, 0, acc);
                }
                add_into(grads, *a, da);
                add_into(grads, *col, dc);
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to `id`; zero matrix if the node never
    /// influenced the root.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let v = tape.value(id);
                Matrix::zeros(v.rows(), v.cols())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference over an arbitrary scalar function of one
    /// matrix entry.
    fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn scalar_chain_matches_closed_form() {
        // d/dx softplus(2x) at x = 1 is 2*sigmoid(2).
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(1, 1, vec![1.0]));
        let sx = t.scale(x, 2.0);
        let y = t.softplus(sx);
        let g = t.backward(y).unwrap();
        let got = g.wrt(&t, x).get(0, 0);
        let want = 2.0 * sigmoid_scalar(2.0);
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        assert!((want - 1.761594).abs() < 1e-6);
    }

    #[test]
    fn quadratic_at_minimum_has_zero_gradient() {
        // loss = 0.5*||Wx - y||^2 with W = I and x = y.
        let mut t = Tape::new();
        let w = t.leaf(Matrix::identity(3));
        let x = t.leaf(Matrix::from_vec(3, 1, vec![1.0, -2.0, 0.5]));
        let y = t.leaf(Matrix::from_vec(3, 1, vec![1.0, -2.0, 0.5]));
        let wx = t.matmul(w, x);
        let r = t.sub(wx, y);
        let sq = t.square(r);
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        let g = t.backward(loss).unwrap();
        assert!(g.wrt(&t, w).as_slice().iter().all(|&v| v == 0.0));
        assert!(g.wrt(&t, x).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Build a scalar loss exercising every op, then compare the gradient
        // of each leaf entry against central differences of a re-run forward.
        let a0 = Matrix::uniform(3, 4, 1.0, &mut rng);
        let b0 = Matrix::uniform(4, 3, 1.0, &mut rng);
        let r0 = Matrix::uniform(1, 3, 1.0, &mut rng);
        // Keep divisors away from zero.
        let c0 = Matrix::uniform(3, 3, 0.4, &mut rng).map(|x| x + 1.5);
        let d0 = Matrix::uniform(3, 1, 0.4, &mut rng).map(|x| x + 1.5);

        let forward = |a: &Matrix, b: &Matrix, r: &Matrix, c: &Matrix, d: &Matrix| {
            let mut t = Tape::new();
            let an = t.leaf(a.clone());
            let bn = t.leaf(b.clone());
            let rn = t.leaf(r.clone());
            let cn = t.leaf(c.clone());
            let dn = t.leaf(d.clone());

            let mm = t.matmul(an, bn); // 3x3
            let mr = t.add_row(mm, rn);
            let th = t.tanh(mr);
            let sp = t.softplus(th);
            let rl = t.relu(mr);
            let mix = t.add(sp, rl);
            let sc = t.scale(mix, 0.7);
            let sh = t.add_scalar(sc, 0.3); // > 0 entries
            let dv = t.div(sh, cn);
            let dc = t.div_col(dv, dn);
            let tp = t.transpose(dc);
            let pr = t.mul(tp, cn);
            let lg = t.ln(cn);
            let df = t.sub(pr, lg);
            let rs = t.row_sum(df);
            let sq = t.square(rs);
            let total = t.sum(sq);
            (t, an, bn, rn, cn, dn, total)
        };

        let (t, an, bn, rn, cn, dn, total) = forward(&a0, &b0, &r0, &c0, &d0);
        let grads = t.backward(total).unwrap();
        let h = 1e-6;

        let leaves: [(&Matrix, usize); 5] =
            [(&a0, 0), (&b0, 1), (&r0, 2), (&c0, 3), (&d0, 4)];
        let ids = [an, bn, rn, cn, dn];
        for (mat, which) in leaves {
            let analytic = grads.wrt(&t, ids[which]);
            for idx in 0..mat.as_slice().len() {
                let numeric = central_diff(
                    |v| {
                        let mut ms = [a0.clone(), b0.clone(), r0.clone(), c0.clone(), d0.clone()];
                        ms[which].as_mut_slice()[idx] = v;
                        let (t2, _, _, _, _, _, tot) =
                            forward(&ms[0], &ms[1], &ms[2], &ms[3], &ms[4]);
                        t2.scalar(tot)
                    },
                    mat.as_slice()[idx],
                    h,
                );
                let a = analytic.as_slice()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel < 1e-6,
                    "leaf {which} entry {idx}: analytic {a} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 2));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn reused_node_accumulates_both_paths() {
        // y = sum(x ⊙ x) has gradient 2x.
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(1, 3, vec![1.0, -2.0, 3.0]));
        let sq = t.square(x);
        let y = t.sum(sq);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(&t, x).as_slice(), &[2.0, -4.0, 6.0]);
    }
}
