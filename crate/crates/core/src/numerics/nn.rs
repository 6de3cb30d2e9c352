//! Layer-level building blocks composed from tape primitives.

use super::{ParameterStore, Real, Tape, Var};
use crate::error::{Error, Result};

/// Plain matrix product `a[m×k] · b[k×n]`.
pub fn matmul<F: Real>(tape: &mut Tape<F>, a: Var, b: Var) -> Result<Var> {
    tape.matmul(a, b)
}

/// Affine layers with a rectifier between consecutive layers; the last layer
/// is affine only. Layers are read from `{prefix}.{i}.weight|bias`.
pub fn mlp_forward<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let depth = store.mlp_depth(prefix);
    if depth == 0 {
        return Err(Error::UnknownParam(format!("{prefix}.0.weight")));
    }
    let mut h = x;
    for i in 0..depth {
        let w = tape.param(store, &format!("{prefix}.{i}.weight"))?;
        let b = tape.param(store, &format!("{prefix}.{i}.bias"))?;
        h = tape.matmul(h, w)?;
        h = tape.add_bias(h, b)?;
        if i + 1 < depth {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Row index map shifting each length-`seq_len` run of rows by `offset`
/// frames, with zeros where the shifted frame falls outside the run.
pub(crate) fn time_shift_index(rows: usize, seq_len: usize, offset: isize) -> Vec<Option<u32>> {
    (0..rows)
        .map(|r| {
            let t = (r % seq_len) as isize + offset;
            (t >= 0 && (t as usize) < seq_len).then(|| (r as isize + offset) as u32)
        })
        .collect()
}

/// Kernel-3 dilated convolution over time for rows laid out as consecutive
/// sequences of `seq_len` frames. `weight` is `[3·C_in × C_out]` with the
/// taps for `t−d`, `t`, `t+d` stacked in that order; padding is zero and
/// symmetric so the length is preserved.
pub fn conv_time<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    seq_len: usize,
    dilation: usize,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    if dilation == 0 {
        return Err(Error::InvalidDilation(dilation));
    }
    let rows = tape.value(x).len() / tape.shape(x).last().copied().unwrap_or(1);
    if seq_len == 0 || !rows.is_multiple_of(seq_len) {
        return Err(Error::ShapeMismatch {
            op: "conv_time",
            left: tape.shape(x).to_vec(),
            right: vec![seq_len],
        });
    }
    let d = dilation as isize;
    let before = tape.gather_rows(x, time_shift_index(rows, seq_len, -d))?;
    let after = tape.gather_rows(x, time_shift_index(rows, seq_len, d))?;
    let cols = tape.concat_cols(&[before, x, after])?;
    let y = tape.matmul(cols, weight)?;
    tape.add_bias(y, bias)
}

/// Dilated kernel-3 convolution of a `[channels × time]` signal using the
/// filter stored at `{filter_path}.weight` (`[3·C_in × C_out]`) and
/// `{filter_path}.bias`. Returns `[C_out × time]`.
pub fn conv1d_dilated<F: Real>(
    tape: &mut Tape<F>,
    store: &ParameterStore<F>,
    x: Var,
    filter_path: &str,
    dilation: usize,
) -> Result<Var> {
    if dilation == 0 {
        return Err(Error::InvalidDilation(dilation));
    }
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "conv1d_dilated",
            left: shape,
            right: vec![],
        });
    }
    let w = tape.param(store, &format!("{filter_path}.weight"))?;
    let b = tape.param(store, &format!("{filter_path}.bias"))?;
    let time_major = tape.transpose(x);
    let y = conv_time(tape, time_major, shape[1], dilation, w, b)?;
    Ok(tape.transpose(y))
}

/// `−log softmax(logits)[target]` for a single logit vector.
pub fn softmax_cross_entropy<F: Real>(tape: &mut Tape<F>, logits: Var, target: usize) -> Result<Var> {
    let classes = tape.value(logits).len();
    if classes < 2 {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: tape.shape(logits).to_vec(),
            right: vec![2],
        });
    }
    let row = tape.reshape(logits, vec![1, classes])?;
    tape.cross_entropy(row, &[target])
}
