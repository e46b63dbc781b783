//! Tape-based reverse-mode differentiation over [`Dense`] values.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's and a single reverse sweep visits the graph in reverse
//! topological order. Shapes must agree exactly; the only implicit shape
//! rules are the matrix product, column concatenation and row-bias add.

use super::{gemm, Dense};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive that produced a node.
#[derive(Clone, Debug)]
pub enum Op {
    /// Trainable input.
    Param,
    /// Input that receives no gradient.
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    /// `N×C` plus a `1×C` row broadcast to every row.
    AddBias,
    Relu,
    Sigmoid,
    ConcatCols,
    SoftmaxRows,
    GatherRows(Vec<usize>),
    Sum,
    /// `scale * x + shift`, elementwise.
    Affine {
        scale: f64,
        shift: f64,
    },
    /// Elementwise Huber with unit threshold.
    SmoothL1,
    /// Fused softmax + CTC over `N×C` logits; holds d(loss)/d(logits).
    CtcLoss(Dense),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddBias => "add_bias",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::ConcatCols => "concat_cols",
            Op::SoftmaxRows => "softmax_rows",
            Op::GatherRows(_) => "gather_rows",
            Op::Sum => "sum",
            Op::Affine { .. } => "affine",
            Op::SmoothL1 => "smooth_l1",
            Op::CtcLoss(_) => "ctc_loss",
        }
    }
}

/// One recorded value together with how it was produced.
#[derive(Clone, Debug)]
pub struct Node {
    pub value: Dense,
    pub op: Op,
    pub parents: Vec<Var>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Dense>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if it was reached.
    pub fn get(&self, var: Var) -> Option<&Dense> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Dense> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
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

    pub fn value(&self, var: Var) -> &Dense {
        &self.nodes[var.0].value
    }

    pub fn node(&self, var: Var) -> &Node {
        &self.nodes[var.0]
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    fn push(&mut self, value: Dense, op: Op, parents: Vec<Var>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{} output", op.name())));
        }
        let requires_grad = match op {
            Op::Param => true,
            Op::Constant => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Dense) -> Result<Var> {
        self.push(value, Op::Param, Vec::new())
    }

    pub fn constant(&mut self, value: Dense) -> Result<Var> {
        self.push(value, Op::Constant, Vec::new())
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = gemm(self.value(a), false, self.value(b), false)?;
        self.push(v, Op::MatMul, vec![a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div, vec![a, b])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c || xv.dims().len() != 2 {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.dims(), bv.dims()),
            ));
        }
        let mut v = xv.clone();
        if c > 0 {
            for row in v.data_mut().chunks_mut(c) {
                for (a, b) in row.iter_mut().zip(bv.data()) {
                    *a += b;
                }
            }
        }
        self.push(v, Op::AddBias, vec![x, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu, vec![x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| {
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        });
        self.push(v, Op::Sigmoid, vec![x])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.dims().len() != 2 || bv.dims().len() != 2 {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} | {:?}", av.dims(), bv.dims()),
            ));
        }
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let v = Dense::new(vec![n, ca + cb], data)?;
        self.push(v, Op::ConcatCols, vec![a, b])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = super::softmax_rows(self.value(x))?;
        self.push(v, Op::SoftmaxRows, vec![x])
    }

    /// Rows of `x` at `indices` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(xv.row(i));
        }
        let v = Dense::new(vec![indices.len(), c], data)?;
        self.push(v, Op::GatherRows(indices.to_vec()), vec![x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Dense::scalar(self.value(x).sum());
        self.push(v, Op::Sum, vec![x])
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let v = self.value(x).map(|a| scale * a + shift);
        self.push(v, Op::Affine { scale, shift }, vec![x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn smooth_l1(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| {
            if a.abs() < 1.0 {
                0.5 * a * a
            } else {
                a.abs() - 0.5
            }
        });
        self.push(v, Op::SmoothL1, vec![x])
    }

    /// Records a fused CTC node whose value and logit-gradient were computed
    /// outside the tape.
    pub(crate) fn ctc_node(&mut self, logits: Var, loss: f64, grad: Dense) -> Result<Var> {
        if grad.dims() != self.value(logits).dims() {
            return Err(Error::shape("ctc", "gradient does not match logits"));
        }
        self.push(Dense::scalar(loss), Op::CtcLoss(grad), vec![logits])
    }

    /// Back-propagates from a scalar root; leaves that the root depends on get
    /// d(root)/d(leaf), accumulated over fan-out.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.value(root).dims()),
            ));
        }
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if node.parents.iter().any(|p| p.0 >= i) {
                return Err(Error::Cycle(i));
            }
        }
        let mut grads: Vec<Option<Dense>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Dense::filled(self.value(root).dims(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_grads(node, &g)?;
            for (parent, pg) in node.parents.iter().zip(contributions) {
                let Some(pg) = pg else { continue };
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node, g: &Dense) -> Result<Vec<Option<Dense>>> {
        let p = &node.parents;
        let val = |k: usize| self.value(p[k]);
        let out = match &node.op {
            Op::Param | Op::Constant => Vec::new(),
            Op::MatMul => {
                let da = if self.wants(p[0]) {
                    Some(gemm(g, false, val(1), true)?)
                } else {
                    None
                };
                let db = if self.wants(p[1]) {
                    Some(gemm(val(0), true, g, false)?)
                } else {
                    None
                };
                vec![da, db]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => vec![
                Some(g.zip_map(val(1), |a, b| a * b)),
                Some(g.zip_map(val(0), |a, b| a * b)),
            ],
            Op::Div => {
                let (a, b) = (val(0), val(1));
                let da = g.zip_map(b, |gv, bv| gv / bv);
                let mut db = g.zip_map(a, |gv, av| -gv * av);
                for (d, bv) in db.data_mut().iter_mut().zip(b.data()) {
                    *d /= bv * bv;
                }
                vec![Some(da), Some(db)]
            }
            Op::AddBias => {
                let c = g.cols();
                let mut db = Dense::zeros(val(1).dims());
                if c > 0 {
                    for row in g.data().chunks(c) {
                        for (d, v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                vec![Some(g.clone()), Some(db)]
            }
            Op::Relu => vec![Some(
                g.zip_map(val(0), |gv, x| if x > 0.0 { gv } else { 0.0 }),
            )],
            Op::Sigmoid => vec![Some(g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)))],
            Op::ConcatCols => {
                let ca = val(0).cols();
                let cb = val(1).cols();
                let n = g.rows();
                let mut da = Vec::with_capacity(n * ca);
                let mut db = Vec::with_capacity(n * cb);
                for r in 0..n {
                    let row = g.row(r);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                vec![
                    Some(Dense::new(vec![n, ca], da)?),
                    Some(Dense::new(vec![n, cb], db)?),
                ]
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = Dense::zeros(y.dims());
                if c > 0 {
                    for ((dxr, yr), gr) in dx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(g.data().chunks(c))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::GatherRows(indices) => {
                let src = val(0);
                let c = src.cols();
                let mut dx = Dense::zeros(src.dims());
                for (k, &i) in indices.iter().enumerate() {
                    let grow = &g.data()[k * c..(k + 1) * c];
                    for (d, v) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(grow) {
                        *d += v;
                    }
                }
                vec![Some(dx)]
            }
            Op::Sum => vec![Some(Dense::filled(val(0).dims(), g.data()[0]))],
            Op::Affine { scale, .. } => vec![Some(g.map(|v| v * scale))],
            Op::SmoothL1 => vec![Some(g.zip_map(val(0), |gv, x| gv * x.clamp(-1.0, 1.0)))],
            Op::CtcLoss(dlogits) => {
                let s = g.data()[0];
                vec![Some(dlogits.map(|v| v * s))]
            }
        };
        Ok(out)
    }

    #[cfg(test)]
    pub(crate) fn corrupt_parent(&mut self, node: Var, parent: usize) {
        self.nodes[node.0].parents[0] = Var(parent);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Dense {
        let n = dims.iter().product();
        Dense::new(
            dims.to_vec(),
            (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_gradient() {
        let mut t = Tape::new();
        let w = t
            .param(Dense::from_rows(&[vec![1.0, 2.0]]).unwrap())
            .unwrap();
        let x = t
            .constant(Dense::from_rows(&[vec![3.0], vec![4.0]]).unwrap())
            .unwrap();
        let y = t.matmul(w, x).unwrap();
        let root = t.sum(y).unwrap();
        assert_eq!(t.scalar(root), 11.0);
        let g = t.backward(root).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn dead_relu() {
        let mut t = Tape::new();
        let x = t.param(Dense::scalar(-5.0)).unwrap();
        let y = t.relu(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn identity_chain_gradient_is_exactly_one() {
        for depth in [0, 1, 7, 50] {
            let mut t = Tape::new();
            let x = t.param(Dense::scalar(0.37)).unwrap();
            let mut y = x;
            for _ in 0..depth {
                y = t.affine(y, 1.0, 0.0).unwrap();
            }
            let g = t.backward(y).unwrap();
            assert_eq!(g.get(x).unwrap().data(), &[1.0]);
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Dense::scalar(3.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.param(Dense::zeros(&[2, 2])).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn cycle_rejected() {
        let mut t = Tape::new();
        let x = t.param(Dense::scalar(1.0)).unwrap();
        let y = t.relu(x).unwrap();
        let z = t.sum(y).unwrap();
        t.corrupt_parent(y, z.index());
        assert!(matches!(t.backward(z), Err(Error::Cycle(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.param(Dense::zeros(&[2, 3])).unwrap();
        let b = t.param(Dense::zeros(&[3, 2])).unwrap();
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, a).is_err());
        assert!(t.gather_rows(a, &[2]).is_err());
    }

    /// Composite covering every registered primitive except the CTC node
    /// (checked in `ctc`).
    fn composite(x: &Dense, w: &Dense, b: &Dense, idx: &[usize]) -> Result<(f64, Dense)> {
        let mut t = Tape::new();
        let xv = t.param(x.clone())?;
        let wv = t.constant(w.clone())?;
        let bv = t.constant(b.clone())?;
        let h = t.matmul(xv, wv)?;
        let h = t.add_bias(h, bv)?;
        let r = t.relu(h)?;
        let s = t.sigmoid(h)?;
        let cat = t.concat_cols(r, s)?;
        let sm = t.softmax_rows(cat)?;
        let gathered = t.gather_rows(sm, idx)?;
        let other = t.gather_rows(cat, idx)?;
        let prod = t.mul(gathered, other)?;
        let diff = t.sub(prod, gathered)?;
        let hub = t.smooth_l1(diff)?;
        let shifted = t.affine(other, 0.5, 2.0)?;
        let q = t.div(hub, shifted)?;
        let added = t.add(q, prod)?;
        let root = t.sum(added)?;
        let grads = t.backward(root)?;
        Ok((
            t.scalar(root),
            grads
                .get(xv)
                .cloned()
                .unwrap_or_else(|| Dense::zeros(x.dims())),
        ))
    }

    #[test]
    fn composite_matches_finite_differences_over_seeds() {
        for seed in 0..120u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=4);
            let k = rng.random_range(1..=4);
            let m = rng.random_range(1..=4);
            let x = random(&mut rng, &[n, k]);
            let w = random(&mut rng, &[k, m]);
            let b = random(&mut rng, &[1, m]);
            let idx: Vec<usize> = (0..rng.random_range(1..=5))
                .map(|_| rng.random_range(0..n))
                .collect();
            let err = finite_diff_check(|v| composite(v, &w, &b, &idx), &x, 1e-5).unwrap();
            assert!(err <= 1e-5, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn matmul_weight_gradient_over_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (n, k, m) = (
                rng.random_range(1..=8),
                rng.random_range(1..=8),
                rng.random_range(1..=8),
            );
            let x = random(&mut rng, &[n, k]);
            let w = random(&mut rng, &[k, m]);
            let f = |wv: &Dense| -> Result<(f64, Dense)> {
                let mut t = Tape::new();
                let xv = t.constant(x.clone())?;
                let wp = t.param(wv.clone())?;
                let y = t.matmul(xv, wp)?;
                let y2 = t.mul(y, y)?;
                let root = t.sum(y2)?;
                let g = t.backward(root)?;
                Ok((t.scalar(root), g.get(wp).unwrap().clone()))
            };
            let err = finite_diff_check(f, &w, 1e-5).unwrap();
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
    }
}
