//! Recorded operation sequence with reverse-mode gradient traversal.
//!
//! A `Tape` is built fresh for every forward pass: leaves hold parameter
//! and data matrices, `apply` records one op and eagerly evaluates it.
//! `backward` walks the recorded sequence in reverse, which makes gradient
//! propagation a pure function of the recorded forward. Replaying the same
//! forward produces the same tape. `eval_f64` re-runs any recorded graph in
//! double precision with selected leaves overridden, which is what the
//! finite-difference checks probe.

use super::matrix::{Mat, Matrix};
use super::ops::{self, OpKind};
use crate::error::{Error, Result};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VId(pub usize);

enum Node {
    Leaf,
    Op { kind: OpKind, inputs: Vec<VId> },
}

/// Gradients of one scalar output with respect to every tape value that
/// required them.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: VId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Matrix>,
    needs_grad: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            values: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Push a leaf value. Trainable leaves accumulate gradients; constants
    /// (data, targets, frozen tables) are skipped during backward.
    pub fn leaf(&mut self, value: Matrix, trainable: bool) -> VId {
        let id = VId(self.nodes.len());
        self.nodes.push(Node::Leaf);
        self.values.push(value);
        self.needs_grad.push(trainable);
        id
    }

    pub fn constant(&mut self, value: Matrix) -> VId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: VId) -> &Matrix {
        &self.values[id.0]
    }

    /// Record one op, eagerly evaluating it. Output finiteness is enforced
    /// here, so a diagnostic names the op that produced the first bad value.
    pub fn apply(&mut self, kind: OpKind, inputs: &[VId]) -> Result<VId> {
        let in_mats: Vec<&Matrix> = inputs.iter().map(|&id| &self.values[id.0]).collect();
        let out = ops::forward(&kind, &in_mats)?;
        if !out.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite output of op '{}'",
                kind.name()
            )));
        }
        let needs = inputs.iter().any(|&id| self.needs_grad[id.0]);
        let id = VId(self.nodes.len());
        self.nodes.push(Node::Op {
            kind,
            inputs: inputs.to_vec(),
        });
        self.values.push(out);
        self.needs_grad.push(needs);
        Ok(id)
    }

    /// Reverse traversal from a scalar loss value.
    pub fn backward(&self, loss: VId) -> Result<Gradients> {
        if self.values[loss.0].shape() != (1, 1) {
            return Err(Error::shape(format!(
                "backward target must be 1x1, got {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Node::Op { kind, inputs } = &self.nodes[idx] else {
                continue;
            };
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let in_mats: Vec<&Matrix> = inputs.iter().map(|&id| &self.values[id.0]).collect();
            let in_grads = ops::backward(kind, &in_mats, &self.values[idx], &upstream)?;
            for (&input, grad) in inputs.iter().zip(in_grads) {
                if !self.needs_grad[input.0] {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &g) in acc.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                            *a += g;
                        }
                    }
                    slot => *slot = Some(grad),
                }
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    /// Replay the recorded graph in f64, with the given leaves overridden.
    /// Used by finite-difference verification of composite forwards.
    pub fn eval_f64(&self, overrides: &[(VId, Mat<f64>)], target: VId) -> Result<Mat<f64>> {
        let mut vals: Vec<Option<Mat<f64>>> = vec![None; target.0 + 1];
        for idx in 0..=target.0 {
            let v = match &self.nodes[idx] {
                Node::Leaf => {
                    match overrides.iter().find(|(id, _)| id.0 == idx) {
                        Some((_, m)) => m.clone(),
                        None => self.values[idx].to_f64_mat(),
                    }
                }
                Node::Op { kind, inputs } => {
                    let in_mats: Vec<&Mat<f64>> = inputs
                        .iter()
                        .map(|&id| vals[id.0].as_ref().expect("topological order"))
                        .collect();
                    ops::forward(kind, &in_mats)?
                }
            };
            vals[idx] = Some(v);
        }
        Ok(vals[target.0].take().expect("target evaluated"))
    }

    // -- convenience builders ------------------------------------------------

    pub fn linear(&mut self, x: VId, w: VId, b: VId) -> Result<VId> {
        self.apply(OpKind::Linear, &[x, w, b])
    }

    pub fn matmul(&mut self, a: VId, b: VId) -> Result<VId> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: VId, b: VId) -> Result<VId> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn scale(&mut self, x: VId, c: f64) -> Result<VId> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn gelu(&mut self, x: VId) -> Result<VId> {
        self.apply(OpKind::Gelu, &[x])
    }

    pub fn sigmoid(&mut self, x: VId) -> Result<VId> {
        self.apply(OpKind::Sigmoid, &[x])
    }

    pub fn layer_norm(&mut self, x: VId, gamma: VId, beta: VId, eps: f64) -> Result<VId> {
        self.apply(OpKind::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn row_softmax(&mut self, x: VId) -> Result<VId> {
        self.apply(OpKind::RowSoftmax, &[x])
    }

    pub fn transpose(&mut self, x: VId) -> Result<VId> {
        self.apply(OpKind::Transpose, &[x])
    }

    pub fn slice_cols(&mut self, x: VId, start: usize, len: usize) -> Result<VId> {
        self.apply(OpKind::SliceCols { start, len }, &[x])
    }

    pub fn concat_cols(&mut self, xs: &[VId]) -> Result<VId> {
        self.apply(OpKind::ConcatCols, xs)
    }

    pub fn gather_rows(&mut self, x: VId, indices: Vec<usize>) -> Result<VId> {
        self.apply(OpKind::GatherRows { indices }, &[x])
    }

    pub fn assemble_masked(
        &mut self,
        features: VId,
        mask_token: VId,
        kept: Vec<usize>,
        total: usize,
    ) -> Result<VId> {
        self.apply(OpKind::AssembleMasked { kept, total }, &[features, mask_token])
    }

    pub fn mean_rows(&mut self, x: VId) -> Result<VId> {
        self.apply(OpKind::MeanRows, &[x])
    }

    pub fn mse_loss(&mut self, pred: VId, target: VId) -> Result<VId> {
        self.apply(OpKind::MseLoss, &[pred, target])
    }

    pub fn l1_loss(&mut self, pred: VId, target: VId) -> Result<VId> {
        self.apply(OpKind::L1Loss, &[pred, target])
    }

    pub fn dice_loss(&mut self, probs: VId, target: VId, smooth: f64) -> Result<VId> {
        self.apply(OpKind::DiceLoss { smooth }, &[probs, target])
    }

    pub fn straight_through(&mut self, features: VId, scores: VId) -> Result<VId> {
        self.apply(OpKind::StraightThroughScale, &[features, scores])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_linear_chain() {
        // loss = mse(x·w + b, 0); with 1x1 shapes this is (xw+b)^2.
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::filled(1, 1, 2.0));
        let w = tape.leaf(Matrix::filled(1, 1, 3.0), true);
        let b = tape.leaf(Matrix::filled(1, 1, 1.0), true);
        let y = tape.linear(x, w, b).unwrap();
        let target = tape.constant(Matrix::zeros(1, 1));
        let loss = tape.mse_loss(y, target).unwrap();
        assert_eq!(tape.value(loss).get(0, 0), 49.0);
        let grads = tape.backward(loss).unwrap();
        // d/dw (xw+b)^2 = 2(xw+b)x = 2*7*2 = 28; d/db = 14.
        assert_eq!(grads.get(w).unwrap().get(0, 0), 28.0);
        assert_eq!(grads.get(b).unwrap().get(0, 0), 14.0);
        assert!(grads.get(x).is_none(), "constants get no gradient");
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = mse(x + x, 0) = 4x^2, dloss/dx = 8x.
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::filled(1, 1, 1.5), true);
        let y = tape.add(x, x).unwrap();
        let t = tape.constant(Matrix::zeros(1, 1));
        let loss = tape.mse_loss(y, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().get(0, 0), 12.0);
    }

    #[test]
    fn replay_is_identical() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Matrix::from_rows(&[vec![0.5, -1.0]]).unwrap(), true);
            let g = tape.gelu(x).unwrap();
            let s = tape.row_softmax(g).unwrap();
            (tape.value(s).clone(), tape.len())
        };
        let (a, la) = build();
        let (b, lb) = build();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn f64_replay_matches_f32_closely() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[vec![0.3, -0.7, 1.1]]).unwrap(), true);
        let g = tape.gelu(x).unwrap();
        let s = tape.row_softmax(g).unwrap();
        let replay = tape.eval_f64(&[], s).unwrap();
        for (a, &b) in replay.as_slice().iter().zip(tape.value(s).as_slice()) {
            assert!((a - b as f64).abs() < 1e-6);
        }
    }
}
