//! Multi-head attention and the pre-norm transformer block, composed from
//! tape ops so gradients come for free.
//!
//! Attention follows the standard scaled dot-product form: per head h,
//! logits L_h = Q_h·K_hᵀ / sqrt(d/H), weights = row-softmax(L_h), output
//! heads are concatenated and projected. The pre-softmax logits of every
//! head are returned as well; the scorer consumes them.

use super::matrix::Matrix;
use super::rng::RngStream;
use super::store::{gaussian_matrix, TensorStore, TId};
use super::tape::{Tape, VId};
use crate::error::{Error, Result};

/// Weight init of all projection matrices: N(0, 0.02^2), zero biases.
pub const INIT_STD: f64 = 0.02;

/// Tape handles for one attention layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub wq: VId,
    pub bq: VId,
    pub wk: VId,
    pub bk: VId,
    pub wv: VId,
    pub bv: VId,
    pub wo: VId,
    pub bo: VId,
}

/// Output of one multi-head attention application.
pub struct MhaOut {
    /// Projected attention output, same shape as the input.
    pub y: VId,
    /// Pre-softmax logits per head, each [N×N].
    pub head_logits: Vec<VId>,
    /// Post-softmax attention weights per head, each [N×N].
    pub head_weights: Vec<VId>,
}

fn head_dim(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "model width {d} not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

/// Q/K logits per head without the value path; the scorer's extraction
/// block needs only these.
pub fn attention_logits(
    tape: &mut Tape,
    x: VId,
    wq: VId,
    bq: VId,
    wk: VId,
    bk: VId,
    heads: usize,
) -> Result<Vec<VId>> {
    let d = tape.value(x).cols();
    let dh = head_dim(d, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.linear(x, wq, bq)?;
    let k = tape.linear(x, wk, bk)?;
    let mut logits = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let kht = tape.transpose(kh)?;
        let raw = tape.matmul(qh, kht)?;
        logits.push(tape.scale(raw, scale)?);
    }
    Ok(logits)
}

/// Full multi-head attention: returns the projected output together with
/// per-head logits and weights.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: VId,
    ids: &AttnIds,
    heads: usize,
) -> Result<MhaOut> {
    let d = tape.value(x).cols();
    let dh = head_dim(d, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.linear(x, ids.wq, ids.bq)?;
    let k = tape.linear(x, ids.wk, ids.bk)?;
    let v = tape.linear(x, ids.wv, ids.bv)?;
    let mut head_logits = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kht = tape.transpose(kh)?;
        let raw = tape.matmul(qh, kht)?;
        let logits = tape.scale(raw, scale)?;
        let weights = tape.row_softmax(logits)?;
        let oh = tape.matmul(weights, vh)?;
        head_logits.push(logits);
        head_weights.push(weights);
        head_outputs.push(oh);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    let y = tape.linear(concat, ids.wo, ids.bo)?;
    Ok(MhaOut {
        y,
        head_logits,
        head_weights,
    })
}

/// Store indices for one transformer block's parameters.
#[derive(Debug, Clone)]
pub struct BlockIx {
    pub ln1_g: TId,
    pub ln1_b: TId,
    pub wq: TId,
    pub bq: TId,
    pub wk: TId,
    pub bk: TId,
    pub wv: TId,
    pub bv: TId,
    pub wo: TId,
    pub bo: TId,
    pub ln2_g: TId,
    pub ln2_b: TId,
    pub mlp_w1: TId,
    pub mlp_b1: TId,
    pub mlp_w2: TId,
    pub mlp_b2: TId,
}

/// Tape handles for one bound transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1_g: VId,
    pub ln1_b: VId,
    pub attn: AttnIds,
    pub ln2_g: VId,
    pub ln2_b: VId,
    pub mlp_w1: VId,
    pub mlp_b1: VId,
    pub mlp_w2: VId,
    pub mlp_b2: VId,
}

/// Allocate one block's tensors in a store, prefixing every name.
pub fn init_block(
    store: &mut TensorStore,
    prefix: &str,
    d: usize,
    mlp_hidden: usize,
    rng: &mut RngStream,
) -> BlockIx {
    let g = |store: &mut TensorStore, name: &str, r: usize, c: usize, rng: &mut RngStream| {
        store.add(format!("{prefix}.{name}"), gaussian_matrix(r, c, INIT_STD, rng), true)
    };
    let z = |store: &mut TensorStore, name: &str, c: usize| {
        store.add(format!("{prefix}.{name}"), Matrix::zeros(1, c), true)
    };
    let ones =
        |store: &mut TensorStore, name: &str, c: usize| {
            store.add(format!("{prefix}.{name}"), Matrix::filled(1, c, 1.0), true)
        };
    BlockIx {
        ln1_g: ones(store, "ln1.g", d),
        ln1_b: z(store, "ln1.b", d),
        wq: g(store, "attn.wq", d, d, rng),
        bq: z(store, "attn.bq", d),
        wk: g(store, "attn.wk", d, d, rng),
        bk: z(store, "attn.bk", d),
        wv: g(store, "attn.wv", d, d, rng),
        bv: z(store, "attn.bv", d),
        wo: g(store, "attn.wo", d, d, rng),
        bo: z(store, "attn.bo", d),
        ln2_g: ones(store, "ln2.g", d),
        ln2_b: z(store, "ln2.b", d),
        mlp_w1: g(store, "mlp.w1", d, mlp_hidden, rng),
        mlp_b1: z(store, "mlp.b1", mlp_hidden),
        mlp_w2: g(store, "mlp.w2", mlp_hidden, d, rng),
        mlp_b2: z(store, "mlp.b2", d),
    }
}

/// Resolve a block's store indices against the VIds from `TensorStore::bind`.
pub fn block_ids(bound: &[VId], ix: &BlockIx) -> BlockIds {
    BlockIds {
        ln1_g: bound[ix.ln1_g.0],
        ln1_b: bound[ix.ln1_b.0],
        attn: AttnIds {
            wq: bound[ix.wq.0],
            bq: bound[ix.bq.0],
            wk: bound[ix.wk.0],
            bk: bound[ix.bk.0],
            wv: bound[ix.wv.0],
            bv: bound[ix.bv.0],
            wo: bound[ix.wo.0],
            bo: bound[ix.bo.0],
        },
        ln2_g: bound[ix.ln2_g.0],
        ln2_b: bound[ix.ln2_b.0],
        mlp_w1: bound[ix.mlp_w1.0],
        mlp_b1: bound[ix.mlp_b1.0],
        mlp_w2: bound[ix.mlp_w2.0],
        mlp_b2: bound[ix.mlp_b2.0],
    }
}

/// Layer-norm epsilon used throughout.
pub const LN_EPS: f64 = 1e-5;

/// Pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x)).
pub fn transformer_block(tape: &mut Tape, x: VId, ids: &BlockIds, heads: usize) -> Result<VId> {
    let n1 = tape.layer_norm(x, ids.ln1_g, ids.ln1_b, LN_EPS)?;
    let attn = multi_head_attention(tape, n1, &ids.attn, heads)?;
    let x = tape.add(x, attn.y)?;
    let n2 = tape.layer_norm(x, ids.ln2_g, ids.ln2_b, LN_EPS)?;
    let h = tape.linear(n2, ids.mlp_w1, ids.mlp_b1)?;
    let h = tape.gelu(h)?;
    let h = tape.linear(h, ids.mlp_w2, ids.mlp_b2)?;
    tape.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bound_attn(tape: &mut Tape, d: usize, rng: &mut RngStream) -> AttnIds {
        let mut make = |r: usize, c: usize, tape: &mut Tape, rng: &mut RngStream| {
            tape.leaf(gaussian_matrix(r, c, 0.5, rng), true)
        };
        AttnIds {
            wq: make(d, d, tape, rng),
            bq: tape.leaf(Matrix::zeros(1, d), true),
            wk: make(d, d, tape, rng),
            bk: tape.leaf(Matrix::zeros(1, d), true),
            wv: make(d, d, tape, rng),
            bv: tape.leaf(Matrix::zeros(1, d), true),
            wo: make(d, d, tape, rng),
            bo: tape.leaf(Matrix::zeros(1, d), true),
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = RngStream::new(5);
        let mut tape = Tape::new();
        let x = tape.constant(gaussian_matrix(1, 4, 1.0, &mut rng));
        let ids = bound_attn(&mut tape, 4, &mut rng);
        let out = multi_head_attention(&mut tape, x, &ids, 2).unwrap();
        for &w in &out.head_weights {
            assert_eq!(tape.value(w).as_slice(), &[1.0f32]);
        }
    }

    #[test]
    fn zero_input_gives_uniform_rows_and_zero_output() {
        let mut rng = RngStream::new(6);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(3, 4));
        let ids = bound_attn(&mut tape, 4, &mut rng);
        let out = multi_head_attention(&mut tape, x, &ids, 2).unwrap();
        for &w in &out.head_weights {
            for v in tape.value(w).as_slice() {
                assert!((v - 1.0 / 3.0).abs() < 1e-6);
            }
        }
        for v in tape.value(out.y).as_slice() {
            assert_eq!(*v, 0.0, "zero input with zero biases must give zero output");
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut rng = RngStream::new(7);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(2, 4));
        let ids = bound_attn(&mut tape, 4, &mut rng);
        assert!(multi_head_attention(&mut tape, x, &ids, 3).is_err());
    }

    /// Straight-line re-evaluation of the attention formula, kept separate
    /// from the tape machinery on purpose.
    fn brute_force_attention(
        x: &Matrix,
        w: &[&Matrix; 4],
        b: &[&Matrix; 4],
        heads: usize,
    ) -> Matrix {
        let n = x.rows();
        let d = x.cols();
        let dh = d / heads;
        let proj = |wi: &Matrix, bi: &Matrix| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| {
                    (0..d)
                        .map(|j| {
                            let mut s = bi.get(0, j) as f64;
                            for k in 0..d {
                                s += x.get(i, k) as f64 * wi.get(k, j) as f64;
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        };
        let q = proj(w[0], b[0]);
        let k = proj(w[1], b[1]);
        let v = proj(w[2], b[2]);
        let mut concat = vec![vec![0.0f64; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let mut logits = vec![0.0f64; n];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q[i][h * dh + c] * k[j][h * dh + c];
                    }
                    *l = s / (dh as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += exps[j] / z * v[j][h * dh + c];
                    }
                    concat[i][h * dh + c] = acc;
                }
            }
        }
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let mut s = b[3].get(0, j) as f64;
                for c in 0..d {
                    s += concat[i][c] * w[3].get(c, j) as f64;
                }
                out.set(i, j, s as f32);
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_evaluation() {
        let mut rng = RngStream::new(404);
        let x = gaussian_matrix(3, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let wq = gaussian_matrix(4, 4, 0.7, &mut rng);
        let wk = gaussian_matrix(4, 4, 0.7, &mut rng);
        let wv = gaussian_matrix(4, 4, 0.7, &mut rng);
        let wo = gaussian_matrix(4, 4, 0.7, &mut rng);
        let bq = gaussian_matrix(1, 4, 0.3, &mut rng);
        let bk = gaussian_matrix(1, 4, 0.3, &mut rng);
        let bv = gaussian_matrix(1, 4, 0.3, &mut rng);
        let bo = gaussian_matrix(1, 4, 0.3, &mut rng);
        let ids = AttnIds {
            wq: tape.leaf(wq.clone(), true),
            bq: tape.leaf(bq.clone(), true),
            wk: tape.leaf(wk.clone(), true),
            bk: tape.leaf(bk.clone(), true),
            wv: tape.leaf(wv.clone(), true),
            bv: tape.leaf(bv.clone(), true),
            wo: tape.leaf(wo.clone(), true),
            bo: tape.leaf(bo.clone(), true),
        };
        let out = multi_head_attention(&mut tape, xid, &ids, 2).unwrap();
        let expected =
            brute_force_attention(&x, &[&wq, &wk, &wv, &wo], &[&bq, &bk, &bv, &bo], 2);
        for (a, b) in tape.value(out.y).as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
