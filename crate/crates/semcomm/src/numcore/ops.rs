//! The differentiable operations the networks are composed of.
//!
//! Each [`OpKind`] realizes the forward/backward contract: `forward` is
//! generic over element precision (f32 for the working path, f64 for
//! finite-difference verification), `backward` maps upstream gradients to
//! input gradients in working precision. Reductions accumulate in f64.

use super::matrix::{Mat, Matrix, Scalar};
use crate::error::{Error, Result};

/// Constants of the tanh GELU approximation:
/// gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608028654;
pub const GELU_CUBIC_COEFF: f64 = 0.044715;

/// One differentiable operation. Attribute fields (indices, constants) are
/// part of the op, not differentiable inputs.
#[derive(Debug, Clone)]
pub enum OpKind {
    /// x[N×din], w[din×dout], b[1×dout] -> x·w + b.
    Linear,
    /// a[m×k], b[k×n] -> a·b.
    MatMul,
    /// a + b, same shape.
    Add,
    /// c·x.
    Scale(f64),
    /// Elementwise tanh-approximation GELU.
    Gelu,
    /// Elementwise logistic sigmoid.
    Sigmoid,
    /// x[N×d], gamma[1×d], beta[1×d]; each row standardized then affine.
    LayerNorm { eps: f64 },
    /// Softmax independently over each row, max-subtracted.
    RowSoftmax,
    /// Matrix transpose.
    Transpose,
    /// Column slice [start, start+len).
    SliceCols { start: usize, len: usize },
    /// Concatenate all inputs along columns.
    ConcatCols,
    /// Select rows by index; out[i] = x[indices[i]].
    GatherRows { indices: Vec<usize> },
    /// Scatter features[k×d] to rows `kept` of a [total×d] output, filling
    /// the remaining rows with the mask token [1×d].
    AssembleMasked { kept: Vec<usize>, total: usize },
    /// Column means: [N×d] -> [1×d].
    MeanRows,
    /// Mean squared difference -> [1×1].
    MseLoss,
    /// Mean absolute difference -> [1×1].
    L1Loss,
    /// 1 - (2·Σpg + s)/(Σp + Σg + s) -> [1×1].
    DiceLoss { smooth: f64 },
    /// features[k×d], scores[k×1]: forward is the identity (each row is
    /// multiplied by s_i/s_i); backward routes ⟨upstream_i, f_i⟩/s_i into
    /// the score gradient, bridging the hard selection.
    StraightThroughScale,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Linear => "linear",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::Transpose => "transpose",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::GatherRows { .. } => "gather_rows",
            OpKind::AssembleMasked { .. } => "assemble_masked",
            OpKind::MeanRows => "mean_rows",
            OpKind::MseLoss => "mse_loss",
            OpKind::L1Loss => "l1_loss",
            OpKind::DiceLoss { .. } => "dice_loss",
            OpKind::StraightThroughScale => "straight_through_scale",
        }
    }

    /// Indices of inputs whose gradients the generic finite-difference
    /// check covers. StraightThroughScale is excluded: its forward is the
    /// identity by construction, so its score gradient is checked against
    /// the relaxed map instead (see gradcheck tests).
    pub fn checked_inputs(&self) -> Vec<usize> {
        match self {
            OpKind::Linear | OpKind::LayerNorm { .. } => vec![0, 1, 2],
            OpKind::MatMul | OpKind::Add | OpKind::MseLoss | OpKind::L1Loss => vec![0, 1],
            OpKind::DiceLoss { .. } => vec![0],
            OpKind::StraightThroughScale => vec![],
            OpKind::ConcatCols => vec![],
            _ => vec![0],
        }
    }

    /// Validates input shapes and returns the output shape.
    pub fn output_shape(&self, shapes: &[(usize, usize)]) -> Result<(usize, usize)> {
        let need = |n: usize| -> Result<()> {
            if shapes.len() != n {
                return Err(Error::shape(format!(
                    "{} expects {} inputs, got {}",
                    self.name(),
                    n,
                    shapes.len()
                )));
            }
            Ok(())
        };
        match self {
            OpKind::Linear => {
                need(3)?;
                let (x, w, b) = (shapes[0], shapes[1], shapes[2]);
                if x.1 != w.0 || b != (1, w.1) {
                    return Err(Error::shape(format!(
                        "linear: x {}x{}, w {}x{}, b {}x{}",
                        x.0, x.1, w.0, w.1, b.0, b.1
                    )));
                }
                Ok((x.0, w.1))
            }
            OpKind::MatMul => {
                need(2)?;
                if shapes[0].1 != shapes[1].0 {
                    return Err(Error::shape(format!(
                        "matmul: {}x{} by {}x{}",
                        shapes[0].0, shapes[0].1, shapes[1].0, shapes[1].1
                    )));
                }
                Ok((shapes[0].0, shapes[1].1))
            }
            OpKind::Add => {
                need(2)?;
                if shapes[0] != shapes[1] {
                    return Err(Error::shape(format!(
                        "add: {:?} vs {:?}",
                        shapes[0], shapes[1]
                    )));
                }
                Ok(shapes[0])
            }
            OpKind::Scale(_) | OpKind::Gelu | OpKind::Sigmoid => {
                need(1)?;
                Ok(shapes[0])
            }
            OpKind::LayerNorm { .. } => {
                need(3)?;
                let d = shapes[0].1;
                if d == 0 || shapes[1] != (1, d) || shapes[2] != (1, d) {
                    return Err(Error::shape(format!(
                        "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                        shapes[0], shapes[1], shapes[2]
                    )));
                }
                Ok(shapes[0])
            }
            OpKind::RowSoftmax => {
                need(1)?;
                if shapes[0].1 == 0 {
                    return Err(Error::shape("row_softmax of empty rows".into()));
                }
                Ok(shapes[0])
            }
            OpKind::Transpose => {
                need(1)?;
                Ok((shapes[0].1, shapes[0].0))
            }
            OpKind::SliceCols { start, len } => {
                need(1)?;
                if *len == 0 || start + len > shapes[0].1 {
                    return Err(Error::shape(format!(
                        "slice_cols [{}, {}) of {} cols",
                        start,
                        start + len,
                        shapes[0].1
                    )));
                }
                Ok((shapes[0].0, *len))
            }
            OpKind::ConcatCols => {
                if shapes.is_empty() {
                    return Err(Error::shape("concat_cols of nothing".into()));
                }
                let rows = shapes[0].0;
                if shapes.iter().any(|s| s.0 != rows) {
                    return Err(Error::shape("concat_cols: row counts differ".into()));
                }
                Ok((rows, shapes.iter().map(|s| s.1).sum()))
            }
            OpKind::GatherRows { indices } => {
                need(1)?;
                if indices.iter().any(|&i| i >= shapes[0].0) {
                    return Err(Error::shape("gather_rows: index out of range".into()));
                }
                Ok((indices.len(), shapes[0].1))
            }
            OpKind::AssembleMasked { kept, total } => {
                need(2)?;
                let d = shapes[0].1;
                if shapes[1] != (1, d) {
                    return Err(Error::shape("assemble_masked: mask token shape".into()));
                }
                if kept.len() != shapes[0].0 {
                    return Err(Error::shape(
                        "assemble_masked: kept count != feature rows".into(),
                    ));
                }
                if !kept.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::shape("assemble_masked: kept not ascending".into()));
                }
                if kept.iter().any(|&i| i >= *total) {
                    return Err(Error::shape("assemble_masked: index out of range".into()));
                }
                Ok((*total, d))
            }
            OpKind::MeanRows => {
                need(1)?;
                if shapes[0].0 == 0 {
                    return Err(Error::shape("mean_rows of zero rows".into()));
                }
                Ok((1, shapes[0].1))
            }
            OpKind::MseLoss | OpKind::L1Loss | OpKind::DiceLoss { .. } => {
                need(2)?;
                if shapes[0] != shapes[1] || shapes[0].0 * shapes[0].1 == 0 {
                    return Err(Error::shape(format!(
                        "{}: {:?} vs {:?}",
                        self.name(),
                        shapes[0],
                        shapes[1]
                    )));
                }
                Ok((1, 1))
            }
            OpKind::StraightThroughScale => {
                need(2)?;
                if shapes[1] != (shapes[0].0, 1) {
                    return Err(Error::shape(
                        "straight_through_scale: scores must be [k×1]".into(),
                    ));
                }
                Ok(shapes[0])
            }
        }
    }
}

#[inline]
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC_COEFF);
    let inner = c * (x + a * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

#[inline]
fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

/// Forward evaluation, generic over element precision.
pub fn forward<T: Scalar>(kind: &OpKind, inputs: &[&Mat<T>]) -> Result<Mat<T>> {
    let shapes: Vec<_> = inputs.iter().map(|m| m.shape()).collect();
    let (orows, ocols) = kind.output_shape(&shapes)?;
    match kind {
        OpKind::Linear => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (n, din, dout) = (x.rows(), x.cols(), w.cols());
            let mut out = Mat::zeros(n, dout);
            let mut acc = vec![0.0f64; dout];
            for i in 0..n {
                for (a, bv) in acc.iter_mut().zip(b.row(0)) {
                    *a = bv.to_f64();
                }
                let xrow = x.row(i);
                for k in 0..din {
                    let xv = xrow[k].to_f64();
                    for (a, wv) in acc.iter_mut().zip(w.row(k)) {
                        *a += xv * wv.to_f64();
                    }
                }
                for (o, &a) in out.row_mut(i).iter_mut().zip(acc.iter()) {
                    *o = T::from_f64(a);
                }
            }
            Ok(out)
        }
        OpKind::MatMul => inputs[0].matmul(inputs[1]),
        OpKind::Add => {
            let mut out = inputs[0].clone();
            for (o, &b) in out.as_mut_slice().iter_mut().zip(inputs[1].as_slice()) {
                *o = *o + b;
            }
            Ok(out)
        }
        OpKind::Scale(c) => {
            let cv = T::from_f64(*c);
            Ok(inputs[0].map(|x| x * cv))
        }
        OpKind::Gelu => Ok(inputs[0].map(gelu_scalar)),
        OpKind::Sigmoid => Ok(inputs[0].map(sigmoid_scalar)),
        OpKind::LayerNorm { eps } => {
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let d = x.cols();
            let mut out = Mat::zeros(orows, ocols);
            for i in 0..x.rows() {
                let row = x.row(i);
                let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
                let var = row
                    .iter()
                    .map(|v| {
                        let c = v.to_f64() - mean;
                        c * c
                    })
                    .sum::<f64>()
                    / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let orow = out.row_mut(i);
                for j in 0..d {
                    let xhat = (row[j].to_f64() - mean) * inv;
                    orow[j] =
                        T::from_f64(gamma.row(0)[j].to_f64() * xhat + beta.row(0)[j].to_f64());
                }
            }
            Ok(out)
        }
        OpKind::RowSoftmax => {
            let x = inputs[0];
            let mut out = Mat::zeros(orows, ocols);
            for i in 0..x.rows() {
                let row = x.row(i);
                let mut m = row[0];
                for &v in row {
                    m = m.maximum(v);
                }
                let mut sum = 0.0f64;
                let orow = out.row_mut(i);
                for (o, &v) in orow.iter_mut().zip(row.iter()) {
                    let e = (v - m).exp();
                    sum += e.to_f64();
                    *o = e;
                }
                for o in orow.iter_mut() {
                    *o = T::from_f64(o.to_f64() / sum);
                }
            }
            Ok(out)
        }
        OpKind::Transpose => Ok(inputs[0].transpose()),
        OpKind::SliceCols { start, len } => {
            let x = inputs[0];
            let mut out = Mat::zeros(orows, ocols);
            for i in 0..x.rows() {
                out.row_mut(i).copy_from_slice(&x.row(i)[*start..start + len]);
            }
            Ok(out)
        }
        OpKind::ConcatCols => {
            let mut out = Mat::zeros(orows, ocols);
            for i in 0..orows {
                let orow = out.row_mut(i);
                let mut at = 0;
                for m in inputs {
                    orow[at..at + m.cols()].copy_from_slice(m.row(i));
                    at += m.cols();
                }
            }
            Ok(out)
        }
        OpKind::GatherRows { indices } => {
            let x = inputs[0];
            let mut out = Mat::zeros(orows, ocols);
            for (i, &src) in indices.iter().enumerate() {
                out.row_mut(i).copy_from_slice(x.row(src));
            }
            Ok(out)
        }
        OpKind::AssembleMasked { kept, total } => {
            let (features, token) = (inputs[0], inputs[1]);
            let mut out = Mat::zeros(*total, ocols);
            for i in 0..*total {
                out.row_mut(i).copy_from_slice(token.row(0));
            }
            for (i, &pos) in kept.iter().enumerate() {
                out.row_mut(pos).copy_from_slice(features.row(i));
            }
            Ok(out)
        }
        OpKind::MeanRows => {
            let x = inputs[0];
            let n = x.rows() as f64;
            let mut acc = vec![0.0f64; x.cols()];
            for i in 0..x.rows() {
                for (a, &v) in acc.iter_mut().zip(x.row(i)) {
                    *a += v.to_f64();
                }
            }
            let mut out = Mat::zeros(1, ocols);
            for (o, &a) in out.row_mut(0).iter_mut().zip(acc.iter()) {
                *o = T::from_f64(a / n);
            }
            Ok(out)
        }
        OpKind::MseLoss => {
            let (p, t) = (inputs[0], inputs[1]);
            let n = p.len() as f64;
            let sum: f64 = p
                .as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(&a, &b)| {
                    let d = a.to_f64() - b.to_f64();
                    d * d
                })
                .sum();
            Mat::new(1, 1, vec![T::from_f64(sum / n)])
        }
        OpKind::L1Loss => {
            let (p, t) = (inputs[0], inputs[1]);
            let n = p.len() as f64;
            let sum: f64 = p
                .as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
                .sum();
            Mat::new(1, 1, vec![T::from_f64(sum / n)])
        }
        OpKind::DiceLoss { smooth } => {
            let (p, g) = (inputs[0], inputs[1]);
            let mut inter = 0.0f64;
            let mut sp = 0.0f64;
            let mut sg = 0.0f64;
            for (&a, &b) in p.as_slice().iter().zip(g.as_slice()) {
                inter += a.to_f64() * b.to_f64();
                sp += a.to_f64();
                sg += b.to_f64();
            }
            let loss = 1.0 - (2.0 * inter + smooth) / (sp + sg + smooth);
            Mat::new(1, 1, vec![T::from_f64(loss)])
        }
        OpKind::StraightThroughScale => {
            let scores = inputs[1];
            for i in 0..scores.rows() {
                if scores.get(i, 0).to_f64() <= 0.0 {
                    return Err(Error::numeric(format!(
                        "straight_through_scale: non-positive score at kept row {i}"
                    )));
                }
            }
            Ok(inputs[0].clone())
        }
    }
}

/// Backward pass in working precision: upstream gradient -> one gradient
/// per input (same order as the inputs).
pub fn backward(
    kind: &OpKind,
    inputs: &[&Matrix],
    output: &Matrix,
    upstream: &Matrix,
) -> Result<Vec<Matrix>> {
    if upstream.shape() != output.shape() {
        return Err(Error::shape(format!(
            "{}: upstream {:?} vs output {:?}",
            kind.name(),
            upstream.shape(),
            output.shape()
        )));
    }
    match kind {
        OpKind::Linear => {
            let (x, w, _b) = (inputs[0], inputs[1], inputs[2]);
            let dx = matmul_abt(upstream, w);
            let dw = matmul_atb(x, upstream);
            let mut db = Matrix::zeros(1, w.cols());
            let mut acc = vec![0.0f64; w.cols()];
            for i in 0..upstream.rows() {
                for (a, &u) in acc.iter_mut().zip(upstream.row(i)) {
                    *a += u as f64;
                }
            }
            for (o, &a) in db.row_mut(0).iter_mut().zip(acc.iter()) {
                *o = a as f32;
            }
            Ok(vec![dx, dw, db])
        }
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            Ok(vec![matmul_abt(upstream, b), matmul_atb(a, upstream)])
        }
        OpKind::Add => Ok(vec![upstream.clone(), upstream.clone()]),
        OpKind::Scale(c) => {
            let cv = *c as f32;
            Ok(vec![upstream.map(|u| u * cv)])
        }
        OpKind::Gelu => {
            let x = inputs[0];
            let mut dx = Matrix::zeros(x.rows(), x.cols());
            for (o, (&xv, &u)) in dx
                .as_mut_slice()
                .iter_mut()
                .zip(x.as_slice().iter().zip(upstream.as_slice()))
            {
                let xd = xv as f64;
                let inner = GELU_SQRT_2_OVER_PI * (xd + GELU_CUBIC_COEFF * xd * xd * xd);
                let t = inner.tanh();
                let dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEFF * xd * xd);
                let deriv = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner;
                *o = (u as f64 * deriv) as f32;
            }
            Ok(vec![dx])
        }
        OpKind::Sigmoid => {
            let mut dx = Matrix::zeros(output.rows(), output.cols());
            for (o, (&y, &u)) in dx
                .as_mut_slice()
                .iter_mut()
                .zip(output.as_slice().iter().zip(upstream.as_slice()))
            {
                *o = u * y * (1.0 - y);
            }
            Ok(vec![dx])
        }
        OpKind::LayerNorm { eps } => {
            let (x, gamma, _beta) = (inputs[0], inputs[1], inputs[2]);
            let d = x.cols();
            let mut dx = Matrix::zeros(x.rows(), d);
            let mut dgamma = vec![0.0f64; d];
            let mut dbeta = vec![0.0f64; d];
            for i in 0..x.rows() {
                let row = x.row(i);
                let urow = upstream.row(i);
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var = row
                    .iter()
                    .map(|&v| {
                        let c = v as f64 - mean;
                        c * c
                    })
                    .sum::<f64>()
                    / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                // dxhat_j = u_j * gamma_j; dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat ⊙ xhat))
                let mut mean_dxhat = 0.0f64;
                let mut mean_dxhat_xhat = 0.0f64;
                let mut xhat = vec![0.0f64; d];
                let mut dxhat = vec![0.0f64; d];
                for j in 0..d {
                    xhat[j] = (row[j] as f64 - mean) * inv;
                    dxhat[j] = urow[j] as f64 * gamma.row(0)[j] as f64;
                    mean_dxhat += dxhat[j];
                    mean_dxhat_xhat += dxhat[j] * xhat[j];
                    dgamma[j] += urow[j] as f64 * xhat[j];
                    dbeta[j] += urow[j] as f64;
                }
                mean_dxhat /= d as f64;
                mean_dxhat_xhat /= d as f64;
                let drow = dx.row_mut(i);
                for j in 0..d {
                    drow[j] = (inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat)) as f32;
                }
            }
            let dg = Matrix::row_vec(dgamma.iter().map(|&v| v as f32).collect());
            let db = Matrix::row_vec(dbeta.iter().map(|&v| v as f32).collect());
            Ok(vec![dx, dg, db])
        }
        OpKind::RowSoftmax => {
            let mut dx = Matrix::zeros(output.rows(), output.cols());
            for i in 0..output.rows() {
                let srow = output.row(i);
                let urow = upstream.row(i);
                let dot: f64 = srow
                    .iter()
                    .zip(urow.iter())
                    .map(|(&s, &u)| s as f64 * u as f64)
                    .sum();
                let drow = dx.row_mut(i);
                for j in 0..srow.len() {
                    drow[j] = (srow[j] as f64 * (urow[j] as f64 - dot)) as f32;
                }
            }
            Ok(vec![dx])
        }
        OpKind::Transpose => Ok(vec![upstream.transpose()]),
        OpKind::SliceCols { start, len } => {
            let x = inputs[0];
            let mut dx = Matrix::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                dx.row_mut(i)[*start..start + len].copy_from_slice(upstream.row(i));
            }
            Ok(vec![dx])
        }
        OpKind::ConcatCols => {
            let mut grads = Vec::with_capacity(inputs.len());
            let mut at = 0;
            for m in inputs {
                let mut g = Matrix::zeros(m.rows(), m.cols());
                for i in 0..m.rows() {
                    g.row_mut(i).copy_from_slice(&upstream.row(i)[at..at + m.cols()]);
                }
                at += m.cols();
                grads.push(g);
            }
            Ok(grads)
        }
        OpKind::GatherRows { indices } => {
            let x = inputs[0];
            let mut dx = Matrix::zeros(x.rows(), x.cols());
            for (i, &src) in indices.iter().enumerate() {
                for (o, &u) in dx.row_mut(src).iter_mut().zip(upstream.row(i)) {
                    *o += u;
                }
            }
            Ok(vec![dx])
        }
        OpKind::AssembleMasked { kept, total } => {
            let features = inputs[0];
            let d = features.cols();
            let mut dfeat = Matrix::zeros(features.rows(), d);
            for (i, &pos) in kept.iter().enumerate() {
                dfeat.row_mut(i).copy_from_slice(upstream.row(pos));
            }
            let mut kept_mark = vec![false; *total];
            for &pos in kept {
                kept_mark[pos] = true;
            }
            let mut acc = vec![0.0f64; d];
            for (pos, &marked) in kept_mark.iter().enumerate() {
                if !marked {
                    for (a, &u) in acc.iter_mut().zip(upstream.row(pos)) {
                        *a += u as f64;
                    }
                }
            }
            let dtok = Matrix::row_vec(acc.iter().map(|&v| v as f32).collect());
            Ok(vec![dfeat, dtok])
        }
        OpKind::MeanRows => {
            let x = inputs[0];
            let n = x.rows() as f32;
            let mut dx = Matrix::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                for (o, &u) in dx.row_mut(i).iter_mut().zip(upstream.row(0)) {
                    *o = u / n;
                }
            }
            Ok(vec![dx])
        }
        OpKind::MseLoss => {
            let (p, t) = (inputs[0], inputs[1]);
            let u = upstream.get(0, 0);
            let scale = 2.0 / p.len() as f32;
            let mut dp = Matrix::zeros(p.rows(), p.cols());
            for (o, (&a, &b)) in dp
                .as_mut_slice()
                .iter_mut()
                .zip(p.as_slice().iter().zip(t.as_slice()))
            {
                *o = u * scale * (a - b);
            }
            let dt = dp.map(|v| -v);
            Ok(vec![dp, dt])
        }
        OpKind::L1Loss => {
            let (p, t) = (inputs[0], inputs[1]);
            let u = upstream.get(0, 0);
            let scale = 1.0 / p.len() as f32;
            let mut dp = Matrix::zeros(p.rows(), p.cols());
            for (o, (&a, &b)) in dp
                .as_mut_slice()
                .iter_mut()
                .zip(p.as_slice().iter().zip(t.as_slice()))
            {
                let s = if a > b {
                    1.0
                } else if a < b {
                    -1.0
                } else {
                    0.0
                };
                *o = u * scale * s;
            }
            let dt = dp.map(|v| -v);
            Ok(vec![dp, dt])
        }
        OpKind::DiceLoss { smooth } => {
            let (p, g) = (inputs[0], inputs[1]);
            let u = upstream.get(0, 0) as f64;
            let mut inter = 0.0f64;
            let mut sp = 0.0f64;
            let mut sg = 0.0f64;
            for (&a, &b) in p.as_slice().iter().zip(g.as_slice()) {
                inter += a as f64 * b as f64;
                sp += a as f64;
                sg += b as f64;
            }
            let den = sp + sg + smooth;
            let num = 2.0 * inter + smooth;
            let mut dp = Matrix::zeros(p.rows(), p.cols());
            let mut dg = Matrix::zeros(g.rows(), g.cols());
            for ((op, og), (&a, &b)) in dp
                .as_mut_slice()
                .iter_mut()
                .zip(dg.as_mut_slice().iter_mut())
                .zip(p.as_slice().iter().zip(g.as_slice()))
            {
                *op = (u * (num / (den * den) - 2.0 * b as f64 / den)) as f32;
                *og = (u * (num / (den * den) - 2.0 * a as f64 / den)) as f32;
            }
            Ok(vec![dp, dg])
        }
        OpKind::StraightThroughScale => {
            let (features, scores) = (inputs[0], inputs[1]);
            let mut dscores = Matrix::zeros(scores.rows(), 1);
            for i in 0..features.rows() {
                let dot: f64 = upstream
                    .row(i)
                    .iter()
                    .zip(features.row(i))
                    .map(|(&u, &f)| u as f64 * f as f64)
                    .sum();
                dscores.set(i, 0, (dot / scores.get(i, 0) as f64) as f32);
            }
            Ok(vec![upstream.clone(), dscores])
        }
    }
}

/// a · bᵀ with f64 accumulation.
fn matmul_abt(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    debug_assert_eq!(b.cols(), k);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..n {
            let mut acc = 0.0f64;
            for (&av, &bv) in arow.iter().zip(b.row(j)) {
                acc += av as f64 * bv as f64;
            }
            orow[j] = acc as f32;
        }
    }
    out
}

/// aᵀ · b with f64 accumulation.
fn matmul_atb(a: &Matrix, b: &Matrix) -> Matrix {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(b.rows(), k);
    let mut acc = vec![0.0f64; m * n];
    for kk in 0..k {
        let arow = a.row(kk);
        let brow = b.row(kk);
        for (i, &av) in arow.iter().enumerate() {
            let av = av as f64;
            let dst = &mut acc[i * n..(i + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += av * bv as f64;
            }
        }
    }
    let mut out = Matrix::zeros(m, n);
    for (o, &v) in out.as_mut_slice().iter_mut().zip(acc.iter()) {
        *o = v as f32;
    }
    out
}

/// Numerically stable softmax of one vector (max-subtracted).
pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::shape("softmax of empty input".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("softmax: non-finite input".into()));
    }
    let m = forward(&OpKind::RowSoftmax, &[&Matrix::row_vec(v.to_vec())])?;
    Ok(m.into_vec())
}

/// Linear layer as a standalone call: x·w + b.
pub fn linear_forward(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    forward(&OpKind::Linear, &[x, w, b])
}

/// Elementwise GELU (tanh approximation) as a standalone call.
pub fn gelu(x: &Matrix) -> Matrix {
    x.map(gelu_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f32>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_identity_weights() {
        let x = mat(&[vec![1.0, 2.0]]);
        let w = mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = Matrix::row_vec(vec![0.0, 0.0]);
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_zero_weights_pass_bias() {
        let x = mat(&[vec![1.0, 2.0]]);
        let w = Matrix::zeros(2, 2);
        let b = Matrix::row_vec(vec![3.0, 4.0]);
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_hand_evaluated_product() {
        // x·W + b with W all ones: [1+2, 1+2+1] = [3, 4]
        let x = mat(&[vec![1.0, 2.0]]);
        let w = mat(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let b = Matrix::row_vec(vec![0.0, 1.0]);
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_shape_mismatch_rejected() {
        let x = mat(&[vec![1.0, 2.0]]);
        let w = Matrix::zeros(3, 2);
        let b = Matrix::row_vec(vec![0.0, 0.0]);
        assert!(linear_forward(&x, &w, &b).is_err());
    }

    #[test]
    fn softmax_symmetry() {
        let s = softmax(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s, vec![0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn softmax_closed_form_ratio() {
        // [0, ln 2] -> [1/3, 2/3]
        let s = softmax(&[0.0, (2.0f32).ln()]).unwrap();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-6, "{s:?}");
        assert!((s[1] - 2.0 / 3.0).abs() < 1e-6, "{s:?}");
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!(s[0].is_finite() && s[1].is_finite());
        assert!(s[0] > 0.999999);
        assert!(s[1] < 1e-6);
    }

    #[test]
    fn softmax_empty_rejected() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let mut rng = crate::numcore::RngStream::new(99);
        for _ in 0..200 {
            let n = 1 + rng.below(12);
            let v: Vec<f32> = (0..n).map(|_| rng.uniform_in(-4.0, 4.0) as f32).collect();
            let s = softmax(&v).unwrap();
            let sum: f64 = s.iter().map(|&x| x as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            let shifted: Vec<f32> = v.iter().map(|x| x + 3.25).collect();
            let s2 = softmax(&shifted).unwrap();
            for (a, b) in s.iter().zip(&s2) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = mat(&[vec![1.0, 1.0, 1.0]]);
        let g = Matrix::filled(1, 3, 1.0);
        let b = Matrix::zeros(1, 3);
        let y = forward(&OpKind::LayerNorm { eps: 1e-5 }, &[&x, &g, &b]).unwrap();
        for &v in y.as_slice() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_unit_variance_row_fixed_point() {
        // [-1, 1] has mean 0 and population variance 1; with eps -> 0 it maps
        // to itself.
        let x = mat(&[vec![-1.0, 1.0]]);
        let g = Matrix::filled(1, 2, 1.0);
        let b = Matrix::zeros(1, 2);
        let y = forward(&OpKind::LayerNorm { eps: 1e-12 }, &[&x, &g, &b]).unwrap();
        assert!((y.get(0, 0) + 1.0).abs() < 1e-5);
        assert!((y.get(0, 1) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_zero_variance_returns_beta() {
        let x = mat(&[vec![0.0, 0.0]]);
        let g = Matrix::filled(1, 2, 7.0);
        let b = Matrix::row_vec(vec![5.0, 6.0]);
        let y = forward(&OpKind::LayerNorm { eps: 1e-5 }, &[&x, &g, &b]).unwrap();
        assert_eq!(y.as_slice(), &[5.0, 6.0]);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(&Matrix::row_vec(vec![0.0])).get(0, 0), 0.0);
        // High-precision evaluation of the tanh approximation at 3.
        let y = gelu(&Matrix::row_vec(vec![3.0])).get(0, 0);
        assert!((y - 2.9963626).abs() < 1e-5, "gelu(3) = {y}");
    }

    #[test]
    fn add_identity() {
        let x = mat(&[vec![1.5, -2.0], vec![0.0, 3.0]]);
        let z = Matrix::zeros(2, 2);
        let y = forward(&OpKind::Add, &[&x, &z]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dice_loss_cases() {
        // Exact match of hard bits: loss ~ 0 within the smoothing slack.
        let p = Matrix::row_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let l = forward(&OpKind::DiceLoss { smooth: 1.0 }, &[&p, &p])
            .unwrap()
            .get(0, 0);
        assert!(l.abs() < 1e-6, "dice {l}");
        // All-zero prediction vs all-one truth over 64 cells: 1 - 1/65.
        let p = Matrix::zeros(64, 1);
        let g = Matrix::filled(64, 1, 1.0);
        let l = forward(&OpKind::DiceLoss { smooth: 1.0 }, &[&p, &g])
            .unwrap()
            .get(0, 0);
        assert!((l - (1.0 - 1.0 / 65.0) as f32).abs() < 1e-6, "dice {l}");
    }

    #[test]
    fn straight_through_forward_is_identity() {
        let f = mat(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let s = mat(&[vec![0.25], vec![0.75]]);
        let y = forward(&OpKind::StraightThroughScale, &[&f, &s]).unwrap();
        assert_eq!(y, f);
    }

    #[test]
    fn straight_through_score_gradient() {
        // For L = sum of outputs, dL/ds_i = (sum of f_i) / s_i.
        let f = mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let s = mat(&[vec![0.5], vec![0.25]]);
        let out = forward(&OpKind::StraightThroughScale, &[&f, &s]).unwrap();
        let up = Matrix::filled(2, 2, 1.0);
        let grads = backward(&OpKind::StraightThroughScale, &[&f, &s], &out, &up).unwrap();
        assert_eq!(grads[0], up);
        assert!((grads[1].get(0, 0) - 3.0 / 0.5).abs() < 1e-6);
        assert!((grads[1].get(1, 0) - 7.0 / 0.25).abs() < 1e-6);
        // Zero upstream -> zero score gradient.
        let zero = Matrix::zeros(2, 2);
        let g0 = backward(&OpKind::StraightThroughScale, &[&f, &s], &out, &zero).unwrap();
        assert!(g0[1].as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn straight_through_rejects_zero_score() {
        let f = mat(&[vec![1.0, 2.0]]);
        let s = mat(&[vec![0.0]]);
        assert!(forward(&OpKind::StraightThroughScale, &[&f, &s]).is_err());
    }

    #[test]
    fn assemble_masked_places_token() {
        let feats = mat(&[vec![1.0, 2.0]]);
        let tok = Matrix::row_vec(vec![9.0, 9.0]);
        let y = forward(
            &OpKind::AssembleMasked {
                kept: vec![1],
                total: 3,
            },
            &[&feats, &tok],
        )
        .unwrap();
        assert_eq!(y.row(0), &[9.0, 9.0]);
        assert_eq!(y.row(1), &[1.0, 2.0]);
        assert_eq!(y.row(2), &[9.0, 9.0]);
    }
}
