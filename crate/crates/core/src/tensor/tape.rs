//! Reverse-mode differentiation over dense matrices.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into the
//! [`ParamStore`] entries that were pulled onto the tape with
//! [`Tape::param`].

use super::{Matrix, ParamId, ParamStore, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    /// `lhs` is r×c, `rhs` is 1×c broadcast over rows.
    AddRow(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    RowSoftmax(usize),
    Transpose(usize),
    Mse(usize, usize),
    Bce(usize, usize),
    BceLogits(usize, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    param: Option<ParamId>,
}

#[derive(Clone, Debug, Default)]
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, None)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Leaf, store.value(id).clone(), Some(id))
    }

    fn push(&mut self, op: Op, value: Matrix, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { op, value, param });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, op: Op, value: Matrix) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(op, value, None))
    }

    fn check(&self, v: Var) -> Result<&Matrix, TensorError> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownNode(v.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.check(a)?.matmul(self.check(b)?)?;
        self.push_checked("matmul", Op::MatMul(a.0, b.0), out)
    }

    /// Elementwise sum. A 1×c right operand is broadcast across the rows of
    /// an r×c left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.check(a)?, self.check(b)?);
        if va.shape() == vb.shape() {
            let out = va.add(vb)?;
            return self.push_checked("add", Op::Add(a.0, b.0), out);
        }
        if vb.rows() == 1 && vb.cols() == va.cols() {
            let mut out = va.clone();
            let cols = va.cols();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o += vb.data()[i % cols];
            }
            return self.push_checked("add", Op::AddRow(a.0, b.0), out);
        }
        Err(TensorError::shape("add", va.shape(), vb.shape()))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.check(a)?.hadamard(self.check(b)?)?;
        self.push_checked("hadamard", Op::Hadamard(a.0, b.0), out)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, TensorError> {
        let out = self.check(a)?.scale(k);
        self.push_checked("scale", Op::Scale(a.0, k), out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.check(a)?.map(|v| if v > 0.0 { v } else { 0.0 });
        self.push_checked("relu", Op::Relu(a.0), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.check(a)?.map(sigmoid);
        self.push_checked("sigmoid", Op::Sigmoid(a.0), out)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = row_softmax(self.check(a)?);
        self.push_checked("row_softmax", Op::RowSoftmax(a.0), out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.check(a)?.transpose();
        self.push_checked("transpose", Op::Transpose(a.0), out)
    }

    /// Mean squared error over all entries, as a 1×1 node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.check(a)?, self.check(b)?);
        if va.shape() != vb.shape() {
            return Err(TensorError::shape("mse", va.shape(), vb.shape()));
        }
        let n = va.len() as f64;
        let sum: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push_checked("mse", Op::Mse(a.0, b.0), Matrix::scalar(sum / n))
    }

    /// Mean binary cross-entropy of probabilities `p` against targets `y`.
    pub fn bce(&mut self, p: Var, y: Var) -> Result<Var, TensorError> {
        let (vp, vy) = (self.check(p)?, self.check(y)?);
        if vp.shape() != vy.shape() {
            return Err(TensorError::shape("bce", vp.shape(), vy.shape()));
        }
        let n = vp.len() as f64;
        let sum: f64 = vp
            .data()
            .iter()
            .zip(vy.data())
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum();
        self.push_checked("bce", Op::Bce(p.0, y.0), Matrix::scalar(sum / n))
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against targets `y`,
    /// evaluated from the logits so saturated scores stay finite.
    pub fn bce_logits(&mut self, z: Var, y: Var) -> Result<Var, TensorError> {
        let (vz, vy) = (self.check(z)?, self.check(y)?);
        if vz.shape() != vy.shape() {
            return Err(TensorError::shape("bce_logits", vz.shape(), vy.shape()));
        }
        let n = vz.len() as f64;
        let sum: f64 = vz
            .data()
            .iter()
            .zip(vy.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        self.push_checked("bce_logits", Op::BceLogits(z.0, y.0), Matrix::scalar(sum / n))
    }

    /// Sign pattern (`x > 0`) of every relu input, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.nodes[a].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Gradient of the 1×1 node `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Matrix>>, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let root = self.check(loss)?;
        if root.shape() != (1, 1) {
            return Err(TensorError::NotScalar(root.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let value = &node.value;
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let va = &self.nodes[a].value;
                    let vb = &self.nodes[b].value;
                    accumulate(&mut grads, a, g.matmul(&vb.transpose())?)?;
                    accumulate(&mut grads, b, va.transpose().matmul(&g)?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone())?;
                    accumulate(&mut grads, b, g.clone())?;
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, b, g.sum_rows())?;
                    accumulate(&mut grads, a, g.clone())?;
                }
                Op::Hadamard(a, b) => {
                    let va = &self.nodes[a].value;
                    let vb = &self.nodes[b].value;
                    accumulate(&mut grads, a, g.hadamard(vb)?)?;
                    accumulate(&mut grads, b, g.hadamard(va)?)?;
                }
                Op::Scale(a, k) => accumulate(&mut grads, a, g.scale(k))?,
                Op::Relu(a) => {
                    let x = &self.nodes[a].value;
                    let d = g.zip_with("relu", x, |g, x| if x > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, a, d)?;
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_with("sigmoid", value, |g, s| g * s * (1.0 - s))?;
                    accumulate(&mut grads, a, d)?;
                }
                Op::RowSoftmax(a) => {
                    let mut d = Matrix::zeros(value.rows(), value.cols());
                    for r in 0..value.rows() {
                        let y = value.row(r);
                        let gy = g.row(r);
                        let dot: f64 = y.iter().zip(gy).map(|(y, g)| y * g).sum();
                        for c in 0..value.cols() {
                            d.set(r, c, y[c] * (gy[c] - dot));
                        }
                    }
                    accumulate(&mut grads, a, d)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, a, g.transpose())?,
                Op::Mse(a, b) => {
                    let va = &self.nodes[a].value;
                    let vb = &self.nodes[b].value;
                    let k = 2.0 * g.data()[0] / va.len() as f64;
                    let d = va.sub(vb)?.scale(k);
                    accumulate(&mut grads, b, d.scale(-1.0))?;
                    accumulate(&mut grads, a, d)?;
                }
                Op::Bce(p, y) => {
                    let vp = &self.nodes[p].value;
                    let vy = &self.nodes[y].value;
                    let k = g.data()[0] / vp.len() as f64;
                    let dp = vp.zip_with("bce", vy, |p, y| k * (p - y) / (p * (1.0 - p)))?;
                    let dy = vp.map(|p| -k * (p.ln() - (1.0 - p).ln()));
                    if !dp.is_finite() || !dy.is_finite() {
                        return Err(TensorError::NonFinite { op: "bce backward" });
                    }
                    accumulate(&mut grads, p, dp)?;
                    accumulate(&mut grads, y, dy)?;
                }
                Op::BceLogits(z, y) => {
                    let vz = &self.nodes[z].value;
                    let vy = &self.nodes[y].value;
                    let k = g.data()[0] / vz.len() as f64;
                    let dz = vz.zip_with("bce_logits", vy, |z, y| k * (sigmoid(z) - y))?;
                    accumulate(&mut grads, y, vz.scale(-k))?;
                    accumulate(&mut grads, z, dz)?;
                }
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    /// Runs [`Tape::gradients`] and adds each parameter leaf's gradient into
    /// the store. Frozen parameters receive gradients too; optimizers skip
    /// them.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                store.get_mut(id).grad.add_assign(&g)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, g: Matrix) -> Result<(), TensorError> {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
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

pub fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    let cols = m.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_peaked_row() {
        // e^10 / (e^10 + 2) and 1 / (e^10 + 2), computed independently.
        let denom = 10f64.exp() + 2.0;
        let expected = [10f64.exp() / denom, 1.0 / denom, 1.0 / denom];
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(vec![10.0, 0.0, 0.0]).unwrap());
        let y = tape.row_softmax(x).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((tape.value(y).get(0, 0) - 0.99991).abs() < 1e-5);
        assert!((tape.value(y).get(0, 1) - 0.000045).abs() < 1e-6);
    }

    #[test]
    fn mse_self_distance_is_zero_with_zero_grad() {
        let mut store = ParamStore::new();
        let id = store
            .add("a", Matrix::from_vec(2, 2, vec![1., -2., 3., 0.5]).unwrap(), true)
            .unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.constant(store.value(id).clone());
        let loss = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(loss).item(), Some(0.0));
        tape.backward(loss, &mut store).unwrap();
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn quadratic_gradient_at_zero_weight() {
        // loss = mse(W x, y) with W = 0 gives dL/dW = -2 y x^T / len(y).
        let x = Matrix::from_vec(3, 1, vec![1.0, -2.0, 0.5]).unwrap();
        let y = Matrix::from_vec(2, 1, vec![3.0, -1.0]).unwrap();
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::zeros(2, 3), true).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let pred = tape.matmul(wv, xv).unwrap();
        let loss = tape.mse(pred, yv).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let expected = y.matmul(&x.transpose()).unwrap().scale(-2.0 / 2.0);
        assert!(store.get(w).grad.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::filled(2, 2, 0.3), true).unwrap();
        let mut tape = Tape::new();
        let _unused = tape.param(&store, w);
        let c = tape.constant(Matrix::scalar(4.0));
        let loss = tape.scale(c, 2.0).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(store.get(w).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn errors_are_descriptive() {
        let mut tape = Tape::new();
        let empty = Tape::new();
        assert!(matches!(empty.gradients(Var(0)), Err(TensorError::EmptyTape)));
        let a = tape.constant(Matrix::zeros(2, 3));
        let b = tape.constant(Matrix::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(matches!(tape.gradients(a), Err(TensorError::NotScalar(_))));
        let big = tape.constant(Matrix::scalar(1e308));
        assert!(matches!(tape.scale(big, 10.0), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn row_broadcast_add() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(3, 2));
        let b = tape.constant(Matrix::row_vector(vec![1.0, 2.0]).unwrap());
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).row(2), &[1.0, 2.0]);
        let bad = tape.constant(Matrix::zeros(2, 2));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn bce_from_logits_agrees_and_saturates_safely() {
        let z = Matrix::row_vector(vec![-3.0, 0.2, 4.0]).unwrap();
        let y = Matrix::row_vector(vec![0.0, 1.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let (zv, yv) = (tape.constant(z.clone()), tape.constant(y.clone()));
        let l1 = tape.bce_logits(zv, yv).unwrap();
        let p = tape.sigmoid(zv).unwrap();
        let l2 = tape.bce(p, yv).unwrap();
        assert!((tape.value(l1).data()[0] - tape.value(l2).data()[0]).abs() < 1e-12);
        let g = tape.gradients(l1).unwrap();
        let g2 = tape.gradients(l2).unwrap();
        assert!(g[0].as_ref().unwrap().max_abs_diff(g2[0].as_ref().unwrap()).unwrap() < 1e-12);

        let mut tape = Tape::new();
        let zv = tape.constant(Matrix::scalar(60.0));
        let yv = tape.constant(Matrix::scalar(0.0));
        let l = tape.bce_logits(zv, yv).unwrap();
        assert!((tape.value(l).data()[0] - 60.0).abs() < 1e-12);
        let p = tape.sigmoid(zv).unwrap();
        assert!(tape.bce(p, yv).is_err());
    }
}
