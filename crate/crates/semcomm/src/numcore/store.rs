//! Named tensor storage shared by every parameterized network.
//!
//! Keeping parameters in one ordered, named store makes checkpointing,
//! tape binding, and optimizer state alignment mechanical: all three walk
//! the same order.

use super::matrix::Matrix;
use super::rng::RngStream;
use super::tape::{Tape, VId};

/// Index of a tensor inside a [`TensorStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TId(pub usize);

#[derive(Debug, Clone)]
pub struct TensorStore {
    names: Vec<String>,
    mats: Vec<Matrix>,
    trainable: Vec<bool>,
}

impl Default for TensorStore {
    fn default() -> Self {
        Self::new()
    }
}

impl TensorStore {
    pub fn new() -> Self {
        TensorStore {
            names: Vec::new(),
            mats: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, m: Matrix, trainable: bool) -> TId {
        let id = TId(self.mats.len());
        self.names.push(name.into());
        self.mats.push(m);
        self.trainable.push(trainable);
        id
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, id: TId) -> &Matrix {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: TId) -> &mut Matrix {
        &mut self.mats[id.0]
    }

    pub fn name(&self, id: TId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: TId) -> bool {
        self.trainable[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix, bool)> {
        self.names
            .iter()
            .zip(&self.mats)
            .zip(&self.trainable)
            .map(|((n, m), &t)| (n.as_str(), m, t))
    }

    pub fn tensor_mut_by_index(&mut self, i: usize) -> &mut Matrix {
        &mut self.mats[i]
    }

    /// Push every tensor onto a tape as a leaf, in store order. `frozen`
    /// forces every leaf non-trainable (the codec during scorer training).
    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> Vec<VId> {
        self.mats
            .iter()
            .zip(&self.trainable)
            .map(|(m, &t)| tape.leaf(m.clone(), t && !frozen))
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.mats.iter().map(|m| m.len()).sum()
    }
}

/// Matrix with entries drawn from N(0, std^2).
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = (rng.gaussian() * std) as f32;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_respects_freeze() {
        let mut store = TensorStore::new();
        store.add("w", Matrix::filled(1, 1, 1.0), true);
        store.add("pos", Matrix::filled(1, 1, 2.0), false);

        let mut tape = Tape::new();
        let ids = store.bind(&mut tape, false);
        let y = tape.add(ids[0], ids[1]).unwrap();
        let t = tape.constant(Matrix::zeros(1, 1));
        let loss = tape.mse_loss(y, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(ids[0]).is_some());
        assert!(grads.get(ids[1]).is_none(), "frozen tensor has no grad");

        let mut tape = Tape::new();
        let ids = store.bind(&mut tape, true);
        let y = tape.add(ids[0], ids[1]).unwrap();
        let t = tape.constant(Matrix::zeros(1, 1));
        let loss = tape.mse_loss(y, t).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(ids[0]).is_none(), "fully frozen store");
    }
}
