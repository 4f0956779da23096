//! Forward pass of the small convolutional classifier.

use rand::Rng;

use super::{Bound, HsCnnConfig, NnError};
use crate::scalar::Scalar;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// conv-relu-conv-relu-pool-dropout three times, then the dense stack.
pub(crate) fn logits<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    c: &HsCnnConfig,
    batch: &Tensor<F>,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var, NnError> {
    let b = batch.shape()[0];
    let mut x = tape.leaf(batch.clone());
    for blk in 0..3 {
        for j in 0..2 {
            let w = bound.var(&format!("block{blk}.conv{j}.weight"));
            let bias = bound.var(&format!("block{blk}.conv{j}.bias"));
            x = tape.conv2d(x, w, bias)?;
            x = tape.relu(x);
        }
        x = tape.maxpool2d(x)?;
        x = tape.dropout(x, c.dropout_rate, mode, rng)?;
    }
    let side = c.input_size / 8;
    let flat = c.block_filters[2].1 * side * side;
    let mut x = tape.reshape(x, vec![b, flat])?;
    for i in 0..c.dense_sizes.len() {
        let w = bound.var(&format!("dense{i}.weight"));
        let bias = bound.var(&format!("dense{i}.bias"));
        x = tape.matmul(x, w)?;
        x = tape.add_row_vec(x, bias)?;
        x = tape.relu(x);
    }
    let x = tape.matmul(x, bound.var("head.weight"))?;
    Ok(tape.add_row_vec(x, bound.var("head.bias"))?)
}
