//! Central-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Largest relative error between analytic and numeric gradients of a
/// scalar-valued function of `x`.
///
/// `f` must be deterministic and must build its output from the supplied
/// tape and input variable alone. The error for each coordinate is
/// `|analytic - numeric| / max(1, |numeric|)`; use `f64` inputs for
/// meaningful thresholds.
pub fn finite_diff_check<F, Build>(
    build: Build,
    x: &Tensor<F>,
    step: F,
) -> Result<F, TensorError>
where
    F: Scalar,
    Build: Fn(&mut Tape<F>, Var) -> Result<Var, TensorError>,
{
    if step <= F::zero() {
        return Err(TensorError::param("finite_diff_check", "step must be positive"));
    }
    let eval = |t: &Tensor<F>| -> Result<F, TensorError> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let out = build(&mut tape, v)?;
        let out_t = tape.value(out);
        if out_t.numel() != 1 {
            return Err(TensorError::NonScalarLoss(out_t.shape().to_vec()));
        }
        Ok(out_t.item())
    };

    // analytic pass
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().requires_grad());
    let out = build(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(v)
        .ok_or_else(|| TensorError::param("finite_diff_check", "no gradient reached the input"))?
        .to_vec();

    let mut worst = F::zero();
    let two = F::from_f64(2.0);
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (two * step);
        let denom = F::one().max(numeric.abs());
        let err = (analytic[i] - numeric).abs() / denom;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Worst relative error seen for one operation across all seeds.
#[derive(Debug, Clone)]
pub struct OpCheckEntry {
    pub op: &'static str,
    pub worst_rel_err: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type CnnCompanions = (
    Tensor<f64>, // conv1 kernels [3,2,3,3]
    Tensor<f64>, // conv1 bias
    Tensor<f64>, // conv2 kernels [3,3,3,3]
    Tensor<f64>, // conv2 bias
    Tensor<f64>, // dense weight [27,5]
    Tensor<f64>, // dense bias
    u64,         // dropout mask seed
);

fn cnn_block_companions(rng: &mut ChaCha8Rng) -> CnnCompanions {
    (
        rand_tensor(rng, &[3, 2, 3, 3], -0.7, 0.7),
        rand_tensor(rng, &[3], -0.3, 0.3),
        rand_tensor(rng, &[3, 3, 3, 3], -0.7, 0.7),
        rand_tensor(rng, &[3], -0.3, 0.3),
        rand_tensor(rng, &[27, 5], -0.7, 0.7),
        rand_tensor(rng, &[5], -0.3, 0.3),
        rng.gen(),
    )
}

/// conv-relu-conv-relu-pool-dropout, then a relu dense head: the mini CNN
/// block shape on a 1x2x6x6 input.
fn cnn_block(
    tape: &mut Tape<f64>,
    x: Var,
    conv1: (&Tensor<f64>, &Tensor<f64>),
    conv2: (&Tensor<f64>, &Tensor<f64>),
    dense: (&Tensor<f64>, &Tensor<f64>),
    mask_seed: u64,
) -> Result<Var, TensorError> {
    let w1 = tape.leaf(conv1.0.clone());
    let b1 = tape.leaf(conv1.1.clone());
    let c1 = tape.conv2d(x, w1, b1)?;
    let r1 = tape.relu(c1);
    let w2 = tape.leaf(conv2.0.clone());
    let b2 = tape.leaf(conv2.1.clone());
    let c2 = tape.conv2d(r1, w2, b2)?;
    let r2 = tape.relu(c2);
    let p = tape.maxpool2d(r2)?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let d = tape.dropout(p, 0.2, Mode::Train, &mut mask_rng)?;
    let flat = tape.reshape(d, vec![1, 27])?;
    let wd = tape.leaf(dense.0.clone());
    let bd = tape.leaf(dense.1.clone());
    let h = tape.matmul(flat, wd)?;
    let h = tape.add_row_vec(h, bd)?;
    Ok(tape.relu(h))
}

struct TransformerCompanions {
    g1: Tensor<f64>,
    b1: Tensor<f64>,
    wq: Tensor<f64>,
    bq: Tensor<f64>,
    wk: Tensor<f64>,
    bk: Tensor<f64>,
    wv: Tensor<f64>,
    bv: Tensor<f64>,
    wo: Tensor<f64>,
    bo: Tensor<f64>,
    g2: Tensor<f64>,
    b2: Tensor<f64>,
    fc1_w: Tensor<f64>,
    fc1_b: Tensor<f64>,
    fc2_w: Tensor<f64>,
    fc2_b: Tensor<f64>,
}

fn transformer_block_companions(rng: &mut ChaCha8Rng) -> TransformerCompanions {
    TransformerCompanions {
        g1: rand_tensor(rng, &[4], 0.5, 1.5),
        b1: rand_tensor(rng, &[4], -0.3, 0.3),
        wq: rand_tensor(rng, &[4, 4], -0.7, 0.7),
        bq: rand_tensor(rng, &[4], -0.3, 0.3),
        wk: rand_tensor(rng, &[4, 4], -0.7, 0.7),
        bk: rand_tensor(rng, &[4], -0.3, 0.3),
        wv: rand_tensor(rng, &[4, 4], -0.7, 0.7),
        bv: rand_tensor(rng, &[4], -0.3, 0.3),
        wo: rand_tensor(rng, &[4, 4], -0.7, 0.7),
        bo: rand_tensor(rng, &[4], -0.3, 0.3),
        g2: rand_tensor(rng, &[4], 0.5, 1.5),
        b2: rand_tensor(rng, &[4], -0.3, 0.3),
        fc1_w: rand_tensor(rng, &[4, 6], -0.7, 0.7),
        fc1_b: rand_tensor(rng, &[6], -0.3, 0.3),
        fc2_w: rand_tensor(rng, &[6, 4], -0.7, 0.7),
        fc2_b: rand_tensor(rng, &[4], -0.3, 0.3),
    }
}

/// Pre-norm two-head attention block with MLP and residuals on a [3,4]
/// token sequence. `wq_override` swaps the query weight for the variable
/// under test.
fn transformer_block(
    tape: &mut Tape<f64>,
    x: Var,
    c: &TransformerCompanions,
    wq_override: Option<Var>,
) -> Result<Var, TensorError> {
    use crate::nn::{multi_head_attention, AttnWeights};
    let g1 = tape.leaf(c.g1.clone());
    let b1 = tape.leaf(c.b1.clone());
    let ln1 = tape.layer_norm(x, g1, b1)?;
    let wq = match wq_override {
        Some(v) => v,
        None => tape.leaf(c.wq.clone()),
    };
    let w = AttnWeights {
        q: (wq, tape.leaf(c.bq.clone())),
        k: (tape.leaf(c.wk.clone()), tape.leaf(c.bk.clone())),
        v: (tape.leaf(c.wv.clone()), tape.leaf(c.bv.clone())),
        out: (tape.leaf(c.wo.clone()), tape.leaf(c.bo.clone())),
    };
    let a = multi_head_attention(tape, ln1, &w, 2, None)?;
    let x1 = tape.add(x, a)?;
    let g2 = tape.leaf(c.g2.clone());
    let b2 = tape.leaf(c.b2.clone());
    let ln2 = tape.layer_norm(x1, g2, b2)?;
    let fc1_w = tape.leaf(c.fc1_w.clone());
    let fc1_b = tape.leaf(c.fc1_b.clone());
    let h = tape.matmul(ln2, fc1_w)?;
    let h = tape.add_row_vec(h, fc1_b)?;
    let h = tape.gelu(h);
    let fc2_w = tape.leaf(c.fc2_w.clone());
    let fc2_b = tape.leaf(c.fc2_b.clone());
    let h = tape.matmul(h, fc2_w)?;
    let h = tape.add_row_vec(h, fc2_b)?;
    tape.add(x1, h)
}

/// Run the built-in gradient suite: every differentiable tape operation,
/// each input route, checked against central differences for
/// `seeds_per_op` random draws. Outputs are reduced through a random probe
/// weighting so cancellation cannot mask a wrong per-element gradient.
pub fn check_all_ops(seeds_per_op: usize) -> Result<Vec<OpCheckEntry>, TensorError> {
    type Case = (
        &'static str,
        fn(&mut ChaCha8Rng) -> Result<f64, TensorError>,
    );

    fn probe_sum(
        tape: &mut Tape<f64>,
        v: Var,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var, TensorError> {
        let shape = tape.value(v).shape().to_vec();
        let probe = tape.leaf(rand_tensor(rng, &shape, -1.0, 1.0));
        let weighted = tape.mul(v, probe)?;
        Ok(tape.sum(weighted))
    }

    // Each case builds a scalar function of one leaf and returns the check's
    // worst relative error. Fixed companions are cloned into every eval.
    let cases: Vec<Case> = vec![
        ("add", |rng| {
            let x = rand_tensor(rng, &[3, 4], -2.0, 2.0);
            let other = rand_tensor(rng, &[3, 4], -2.0, 2.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let o = tape.leaf(other.clone());
                    let y = tape.add(v, o)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("add_row_vec/matrix", |rng| {
            let x = rand_tensor(rng, &[3, 5], -2.0, 2.0);
            let bias = rand_tensor(rng, &[5], -1.0, 1.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let b = tape.leaf(bias.clone());
                    let y = tape.add_row_vec(v, b)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("add_row_vec/vector", |rng| {
            let mat = rand_tensor(rng, &[3, 5], -2.0, 2.0);
            let bias = rand_tensor(rng, &[5], -1.0, 1.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let m = tape.leaf(mat.clone());
                    let y = tape.add_row_vec(m, v)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &bias,
                1e-5,
            )
        }),
        ("mul", |rng| {
            let x = rand_tensor(rng, &[2, 6], -2.0, 2.0);
            let other = rand_tensor(rng, &[2, 6], -2.0, 2.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let o = tape.leaf(other.clone());
                    let y = tape.mul(v, o)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("scale", |rng| {
            let x = rand_tensor(rng, &[7], -2.0, 2.0);
            let c: f64 = rng.gen_range(-3.0..3.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let y = tape.scale(v, c);
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("sum", |rng| {
            let x = rand_tensor(rng, &[4, 3], -2.0, 2.0);
            finite_diff_check(|tape, v| Ok(tape.sum(v)), &x, 1e-5)
        }),
        ("matmul/lhs", |rng| {
            let a = rand_tensor(rng, &[3, 4], -1.5, 1.5);
            let b = rand_tensor(rng, &[4, 2], -1.5, 1.5);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let bv = tape.leaf(b.clone());
                    let y = tape.matmul(v, bv)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &a,
                1e-5,
            )
        }),
        ("matmul/rhs", |rng| {
            let a = rand_tensor(rng, &[3, 4], -1.5, 1.5);
            let b = rand_tensor(rng, &[4, 2], -1.5, 1.5);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let av = tape.leaf(a.clone());
                    let y = tape.matmul(av, v)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &b,
                1e-5,
            )
        }),
        ("transpose", |rng| {
            let x = rand_tensor(rng, &[3, 5], -2.0, 2.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let y = tape.transpose(v)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("slice_rows", |rng| {
            let x = rand_tensor(rng, &[5, 3], -2.0, 2.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let y = tape.slice_rows(v, 1, 3)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("slice_cols", |rng| {
            let x = rand_tensor(rng, &[3, 6], -2.0, 2.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let y = tape.slice_cols(v, 2, 3)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("concat_rows", |rng| {
            let x = rand_tensor(rng, &[2, 4], -2.0, 2.0);
            let other = rand_tensor(rng, &[3, 4], -2.0, 2.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let o = tape.leaf(other.clone());
                    // the leaf appears twice to exercise repeated parts
                    let y = tape.concat_rows(&[v, o, v])?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("concat_cols", |rng| {
            let x = rand_tensor(rng, &[3, 2], -2.0, 2.0);
            let other = rand_tensor(rng, &[3, 4], -2.0, 2.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let o = tape.leaf(other.clone());
                    let y = tape.concat_cols(&[v, o])?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("tile_rows", |rng| {
            let x = rand_tensor(rng, &[2, 3], -2.0, 2.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let y = tape.tile_rows(v, 4)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("reshape", |rng| {
            let x = rand_tensor(rng, &[2, 6], -2.0, 2.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let y = tape.reshape(v, vec![3, 4])?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("conv2d/input", |rng| {
            let x = rand_tensor(rng, &[2, 2, 4, 4], -1.5, 1.5);
            let w = rand_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0);
            let b = rand_tensor(rng, &[2], -0.5, 0.5);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let wv = tape.leaf(w.clone());
                    let bv = tape.leaf(b.clone());
                    let y = tape.conv2d(v, wv, bv)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("conv2d/kernels", |rng| {
            let x = rand_tensor(rng, &[2, 2, 4, 4], -1.5, 1.5);
            let w = rand_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0);
            let b = rand_tensor(rng, &[2], -0.5, 0.5);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let xv = tape.leaf(x.clone());
                    let bv = tape.leaf(b.clone());
                    let y = tape.conv2d(xv, v, bv)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &w,
                1e-5,
            )
        }),
        ("conv2d/bias", |rng| {
            let x = rand_tensor(rng, &[2, 2, 4, 4], -1.5, 1.5);
            let w = rand_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0);
            let b = rand_tensor(rng, &[2], -0.5, 0.5);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let xv = tape.leaf(x.clone());
                    let wv = tape.leaf(w.clone());
                    let y = tape.conv2d(xv, wv, v)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &b,
                1e-5,
            )
        }),
        ("maxpool2d", |rng| {
            let x = rand_tensor(rng, &[2, 4, 4], -2.0, 2.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let y = tape.maxpool2d(v)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("relu", |rng| {
            let x = rand_tensor(rng, &[3, 4], -2.0, 2.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let y = tape.relu(v);
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("gelu", |rng| {
            let x = rand_tensor(rng, &[3, 4], -3.0, 3.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let y = tape.gelu(v);
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("softmax", |rng| {
            let x = rand_tensor(rng, &[3, 5], -2.0, 2.0);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let y = tape.softmax(v);
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("layer_norm/x", |rng| {
            let x = rand_tensor(rng, &[3, 8], -2.0, 2.0);
            let g = rand_tensor(rng, &[8], 0.5, 1.5);
            let b = rand_tensor(rng, &[8], -0.5, 0.5);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let gv = tape.leaf(g.clone());
                    let bv = tape.leaf(b.clone());
                    let y = tape.layer_norm(v, gv, bv)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("layer_norm/gamma", |rng| {
            let x = rand_tensor(rng, &[3, 8], -2.0, 2.0);
            let g = rand_tensor(rng, &[8], 0.5, 1.5);
            let b = rand_tensor(rng, &[8], -0.5, 0.5);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let xv = tape.leaf(x.clone());
                    let bv = tape.leaf(b.clone());
                    let y = tape.layer_norm(xv, v, bv)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &g,
                1e-5,
            )
        }),
        ("layer_norm/beta", |rng| {
            let x = rand_tensor(rng, &[3, 8], -2.0, 2.0);
            let g = rand_tensor(rng, &[8], 0.5, 1.5);
            let b = rand_tensor(rng, &[8], -0.5, 0.5);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let xv = tape.leaf(x.clone());
                    let gv = tape.leaf(g.clone());
                    let y = tape.layer_norm(xv, gv, v)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &b,
                1e-5,
            )
        }),
        ("dropout", |rng| {
            let x = rand_tensor(rng, &[4, 5], -2.0, 2.0);
            let mask_seed: u64 = rng.gen();
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    // reseeding inside the closure keeps the mask identical
                    // across the perturbed evaluations
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                    let y = tape.dropout(v, 0.4, Mode::Train, &mut mask_rng)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("cross_entropy", |rng| {
            let x = rand_tensor(rng, &[4, 6], -2.0, 2.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
            finite_diff_check(
                move |tape, v| tape.cross_entropy(v, &labels),
                &x,
                1e-5,
            )
        }),
        // Composed routes: whole network blocks, not single ops, so the
        // chained rules are verified end to end.
        ("composed/cnn_block/input", |rng| {
            let x = rand_tensor(rng, &[1, 2, 6, 6], -1.0, 1.0);
            let (w1, b1, w2, b2, wd, bd, mask_seed) = cnn_block_companions(rng);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let y = cnn_block(
                        tape,
                        v,
                        (&w1, &b1),
                        (&w2, &b2),
                        (&wd, &bd),
                        mask_seed,
                    )?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("composed/cnn_block/kernels", |rng| {
            let x = rand_tensor(rng, &[1, 2, 6, 6], -1.0, 1.0);
            let (w1, b1, w2, b2, wd, bd, mask_seed) = cnn_block_companions(rng);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let xv = tape.leaf(x.clone());
                    let b1v = tape.leaf(b1.clone());
                    let c1 = tape.conv2d(xv, v, b1v)?;
                    let r1 = tape.relu(c1);
                    let w2v = tape.leaf(w2.clone());
                    let b2v = tape.leaf(b2.clone());
                    let c2 = tape.conv2d(r1, w2v, b2v)?;
                    let r2 = tape.relu(c2);
                    let p = tape.maxpool2d(r2)?;
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                    let d = tape.dropout(p, 0.2, Mode::Train, &mut mask_rng)?;
                    let flat = tape.reshape(d, vec![1, 27])?;
                    let wdv = tape.leaf(wd.clone());
                    let bdv = tape.leaf(bd.clone());
                    let h = tape.matmul(flat, wdv)?;
                    let h = tape.add_row_vec(h, bdv)?;
                    let y = tape.relu(h);
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &w1,
                1e-5,
            )
        }),
        ("composed/transformer_block/input", |rng| {
            let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
            let c = transformer_block_companions(rng);
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let y = transformer_block(tape, v, &c, None)?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &x,
                1e-5,
            )
        }),
        ("composed/transformer_block/weights", |rng| {
            let x = rand_tensor(rng, &[3, 4], -1.0, 1.0);
            let c = transformer_block_companions(rng);
            let wq = c.wq.clone();
            let probe_rng = rng.clone();
            finite_diff_check(
                move |tape, v| {
                    let xv = tape.leaf(x.clone());
                    let y = transformer_block(tape, xv, &c, Some(v))?;
                    probe_sum(tape, y, &mut probe_rng.clone())
                },
                &wq,
                1e-5,
            )
        }),
    ];

    let mut report = Vec::with_capacity(cases.len());
    for (op, run) in cases {
        let mut worst = 0.0f64;
        for seed in 0..seeds_per_op as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 17);
            let err = run(&mut rng)?;
            worst = worst.max(err);
        }
        report.push(OpCheckEntry {
            op,
            worst_rel_err: worst,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_quadratic_match_closed_forms() {
        let x = Tensor::new(vec![3], vec![0.4, -1.1, 2.0]).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let s = tape.scale(v, 3.0);
                Ok(tape.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "linear err {err}");

        let err = finite_diff_check(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "quadratic err {err}");
    }

    #[test]
    fn composed_nonlinearities_pass_at_1e4() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let x = Tensor::new(vec![3, 4], data).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let g = tape.gelu(v);
                let s = tape.softmax(g);
                let r = tape.relu(s);
                Ok(tape.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "composed err {err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        assert!(finite_diff_check(|tape, v| Ok(tape.sum(v)), &x, 0.0).is_err());
    }

    #[test]
    fn every_op_passes_randomized_checks() {
        let report = check_all_ops(20).unwrap();
        assert!(report.len() >= 25);
        for entry in &report {
            assert!(
                entry.worst_rel_err < 1e-4,
                "{}: worst rel err {}",
                entry.op,
                entry.worst_rel_err
            );
        }
    }
}
