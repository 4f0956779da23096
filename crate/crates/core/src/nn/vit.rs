//! Patch transformer: tokenization, attention, and the encoder stack.

use rand::{Rng, SeedableRng};

use super::{Bound, Model, ModelConfig, NnError, VitConfig};
use crate::scalar::Scalar;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Cut one `[3, H, W]` image into non-overlapping `patch x patch` squares,
/// row-major over the patch grid, each flattened channel-major. The result
/// is `[num_patches, 3*patch*patch]`.
pub fn patchify<F: Scalar>(image: &Tensor<F>, patch: usize) -> Result<Tensor<F>, NnError> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(NnError::Input(format!("expected [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(NnError::Input(format!(
            "patch size {patch} does not tile {h}x{w}"
        )));
    }
    let np = (h / patch) * (w / patch);
    let mut out = Vec::with_capacity(np * 3 * patch * patch);
    patchify_into(&mut out, image.data(), h, w, patch);
    Ok(Tensor::new(vec![np, 3 * patch * patch], out)?)
}

/// Inverse of `patchify`.
pub fn unpatchify<F: Scalar>(
    patches: &Tensor<F>,
    patch: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<F>, NnError> {
    let s = patches.shape();
    let np = (h / patch) * (w / patch);
    if s.len() != 2 || s[0] != np || s[1] != 3 * patch * patch {
        return Err(NnError::Input(format!(
            "expected [{np}, {}] patches for {h}x{w}, got {s:?}",
            3 * patch * patch
        )));
    }
    let grid_w = w / patch;
    let mut out = vec![F::zero(); 3 * h * w];
    for (p, row) in patches.data().chunks_exact(s[1]).enumerate() {
        let (py, px) = (p / grid_w, p % grid_w);
        let mut k = 0;
        for c in 0..3 {
            for dy in 0..patch {
                for dx in 0..patch {
                    out[c * h * w + (py * patch + dy) * w + px * patch + dx] = row[k];
                    k += 1;
                }
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], out)?)
}

fn patchify_into<F: Scalar>(out: &mut Vec<F>, img: &[F], h: usize, w: usize, patch: usize) {
    let grid_w = w / patch;
    let grid_h = h / patch;
    for py in 0..grid_h {
        for px in 0..grid_w {
            for c in 0..3 {
                for dy in 0..patch {
                    let base = c * h * w + (py * patch + dy) * w + px * patch;
                    out.extend_from_slice(&img[base..base + patch]);
                }
            }
        }
    }
}

/// Projection parameters for one attention layer, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub out: (Var, Var),
}

/// Scaled dot-product attention over one `[T, D]` sequence with `num_heads`
/// parallel heads. When `capture` is given, the head-averaged post-softmax
/// `[T, T]` matrix is pushed onto it.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    w: &AttnWeights,
    num_heads: usize,
    capture: Option<&mut Vec<Tensor<F>>>,
) -> Result<Var, TensorError> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 2 {
        return Err(TensorError::shape("attention", format!("{s:?}")));
    }
    let (t, d) = (s[0], s[1]);
    if num_heads == 0 || d % num_heads != 0 {
        return Err(TensorError::param(
            "attention",
            format!("width {d} not divisible by {num_heads} heads"),
        ));
    }
    let dh = d / num_heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());

    let q = tape.matmul(x, w.q.0)?;
    let q = tape.add_row_vec(q, w.q.1)?;
    let k = tape.matmul(x, w.k.0)?;
    let k = tape.add_row_vec(k, w.k.1)?;
    let v = tape.matmul(x, w.v.0)?;
    let v = tape.add_row_vec(v, w.v.1)?;

    let mut head_ctx = Vec::with_capacity(num_heads);
    let mut attn_sum: Option<Vec<F>> = capture.as_ref().map(|_| vec![F::zero(); t * t]);
    for h in 0..num_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores);
        if let Some(acc) = attn_sum.as_mut() {
            for (a, &p) in acc.iter_mut().zip(tape.value(attn).data()) {
                *a += p;
            }
        }
        head_ctx.push(tape.matmul(attn, vh)?);
    }
    if let (Some(dst), Some(acc)) = (capture, attn_sum) {
        let inv = F::from_f64(1.0 / num_heads as f64);
        let avg: Vec<F> = acc.into_iter().map(|a| a * inv).collect();
        dst.push(Tensor::new(vec![t, t], avg).expect("square attention"));
    }
    let ctx = tape.concat_cols(&head_ctx)?;
    let out = tape.matmul(ctx, w.out.0)?;
    tape.add_row_vec(out, w.out.1)
}

fn attn_weights(bound: &Bound, layer: usize) -> AttnWeights {
    let get = |proj: &str, part: &str| bound.var(&format!("layer{layer}.attn.{proj}.{part}"));
    AttnWeights {
        q: (get("q", "weight"), get("q", "bias")),
        k: (get("k", "weight"), get("k", "bias")),
        v: (get("v", "weight"), get("v", "bias")),
        out: (get("out", "weight"), get("out", "bias")),
    }
}

/// Encoder forward over a `[B, 3, S, S]` batch; pre-norm blocks with
/// residual connections, class-token readout. When `capture` is given, the
/// head-averaged attention of the batch's first image is pushed per layer.
pub(crate) fn logits<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    c: &VitConfig,
    batch: &Tensor<F>,
    mode: Mode,
    rng: &mut impl Rng,
    mut capture: Option<&mut Vec<Tensor<F>>>,
) -> Result<Var, NnError> {
    let b = batch.shape()[0];
    let (s, p) = (c.image_size, c.patch_size);
    let (np, t) = (c.num_patches(), c.tokens());

    let mut tokens = Vec::with_capacity(b * np * c.patch_dim());
    for img in batch.data().chunks_exact(3 * s * s) {
        patchify_into(&mut tokens, img, s, s, p);
    }
    let tokens = tape.leaf(Tensor::new(vec![b * np, c.patch_dim()], tokens)?);
    let proj = tape.matmul(tokens, bound.var("patch_embed.weight"))?;
    let proj = tape.add_row_vec(proj, bound.var("patch_embed.bias"))?;

    let cls = bound.var("cls_token");
    let pos = bound.var("pos_embed");
    let mut seqs = Vec::with_capacity(b);
    for i in 0..b {
        let rows = tape.slice_rows(proj, i * np, np)?;
        let seq = tape.concat_rows(&[cls, rows])?;
        seqs.push(tape.add(seq, pos)?);
    }
    let mut x = tape.concat_rows(&seqs)?;
    x = tape.dropout(x, c.dropout_rate, mode, rng)?;

    for l in 0..c.num_layers {
        let w = attn_weights(bound, l);
        let ln1 = tape.layer_norm(
            x,
            bound.var(&format!("layer{l}.ln1.gamma")),
            bound.var(&format!("layer{l}.ln1.beta")),
        )?;
        let mut outs = Vec::with_capacity(b);
        for i in 0..b {
            let xi = tape.slice_rows(ln1, i * t, t)?;
            let cap = if i == 0 { capture.as_deref_mut() } else { None };
            outs.push(multi_head_attention(tape, xi, &w, c.num_heads, cap)?);
        }
        let attn = tape.concat_rows(&outs)?;
        let attn = tape.dropout(attn, c.dropout_rate, mode, rng)?;
        x = tape.add(x, attn)?;

        let ln2 = tape.layer_norm(
            x,
            bound.var(&format!("layer{l}.ln2.gamma")),
            bound.var(&format!("layer{l}.ln2.beta")),
        )?;
        let h = tape.matmul(ln2, bound.var(&format!("layer{l}.mlp.fc1.weight")))?;
        let h = tape.add_row_vec(h, bound.var(&format!("layer{l}.mlp.fc1.bias")))?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, c.dropout_rate, mode, rng)?;
        let h = tape.matmul(h, bound.var(&format!("layer{l}.mlp.fc2.weight")))?;
        let h = tape.add_row_vec(h, bound.var(&format!("layer{l}.mlp.fc2.bias")))?;
        x = tape.add(x, h)?;
    }

    let x = tape.layer_norm(x, bound.var("final_ln.gamma"), bound.var("final_ln.beta"))?;
    let mut cls_rows = Vec::with_capacity(b);
    for i in 0..b {
        cls_rows.push(tape.slice_rows(x, i * t, 1)?);
    }
    let pooled = tape.concat_rows(&cls_rows)?;
    let out = tape.matmul(pooled, bound.var("head.weight"))?;
    Ok(tape.add_row_vec(out, bound.var("head.bias"))?)
}

/// Head-averaged post-softmax attention per layer for a single chip,
/// computed in eval mode. Each matrix is `[T, T]` with the class token first.
pub fn attention_matrices<F: Scalar>(
    model: &Model<F>,
    chip: &Tensor<F>,
) -> Result<Vec<Tensor<F>>, NnError> {
    let ModelConfig::Vit(_) = model.config() else {
        return Err(NnError::Input(
            "attention matrices require a transformer model".into(),
        ));
    };
    let s = chip.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(NnError::Input(format!(
            "expected a [1, 3, S, S] chip batch, got {s:?}"
        )));
    }
    let mut tape = Tape::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let bound = model.bind(&mut tape, Mode::Eval);
    let mut maps = Vec::new();
    model.logits(&mut tape, &bound, chip, Mode::Eval, &mut rng, Some(&mut maps))?;
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{HsCnnConfig, Model, ModelConfig};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(classes: usize) -> Model<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        Model::build(ModelConfig::Vit(VitConfig::tiny(classes)), &mut rng).unwrap()
    }

    #[test]
    fn patchify_then_unpatchify_is_identity() {
        let data: Vec<f32> = (0..3 * 32 * 32).map(|i| i as f32 * 0.001).collect();
        let img = Tensor::new(vec![3, 32, 32], data).unwrap();
        let patches = patchify(&img, 8).unwrap();
        assert_eq!(patches.shape(), [16, 192]);
        let back = unpatchify(&patches, 8, 32, 32).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn patchify_layout_is_rowmajor_grid_channelmajor_pixels() {
        // image value encodes (channel, y, x); check a specific patch cell
        let mut data = vec![0.0f32; 3 * 32 * 32];
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    data[c * 1024 + y * 32 + x] = (c * 10000 + y * 100 + x) as f32;
                }
            }
        }
        let img = Tensor::new(vec![3, 32, 32], data).unwrap();
        let patches = patchify(&img, 8).unwrap();
        // patch index 5 = grid row 1, col 1 -> pixels y in 8..16, x in 8..16
        let row = &patches.data()[5 * 192..6 * 192];
        assert_eq!(row[0], 800.0 + 8.0); // c=0, y=8, x=8
        assert_eq!(row[7], 800.0 + 15.0); // c=0, y=8, x=15
        assert_eq!(row[8], 900.0 + 8.0); // c=0, y=9, x=8
        assert_eq!(row[64], 10000.0 + 808.0); // c=1, y=8, x=8
    }

    #[test]
    fn forward_rows_are_probability_vectors() {
        let model = tiny_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..2 * 3072).map(|_| rng.gen_range(0.0..1.0)).collect();
        let batch = Tensor::new(vec![2, 3, 32, 32], data).unwrap();
        let probs = model.forward(&batch).unwrap();
        assert_eq!(probs.shape(), [2, 6]);
        for row in probs.data().chunks_exact(6) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn fresh_models_mean_output_near_uniform() {
        // Monte Carlo over random init: 32 fresh models x 8 random inputs
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut sums = [0.0f64; 6];
        for init in 0..32 {
            let mut init_rng = ChaCha8Rng::seed_from_u64(200 + init);
            let model: Model<f32> =
                Model::build(ModelConfig::Vit(VitConfig::tiny(6)), &mut init_rng).unwrap();
            let data: Vec<f32> = (0..8 * 3072).map(|_| rng.gen_range(0.0..1.0)).collect();
            let batch = Tensor::new(vec![8, 3, 32, 32], data).unwrap();
            let probs = model.forward(&batch).unwrap();
            for row in probs.data().chunks_exact(6) {
                for (s, &p) in sums.iter_mut().zip(row) {
                    *s += p as f64;
                }
            }
        }
        for s in sums {
            let mean = s / 256.0;
            assert!((mean - 1.0 / 6.0).abs() < 0.1, "class mean = {mean}");
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_one_per_layer() {
        let model = tiny_model(6);
        let batch = Tensor::filled(vec![1, 3, 32, 32], 0.4f32);
        let maps = attention_matrices(&model, &batch).unwrap();
        assert_eq!(maps.len(), 2);
        for m in &maps {
            assert_eq!(m.shape(), [17, 17]);
            for row in m.data().chunks_exact(17) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-4, "row sum {s}");
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn attention_capture_rejects_cnn_and_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cnn: Model<f32> =
            Model::build(ModelConfig::HsCnn(HsCnnConfig::mini(6)), &mut rng).unwrap();
        let one = Tensor::filled(vec![1, 3, 32, 32], 0.5f32);
        assert!(attention_matrices(&cnn, &one).is_err());
        let vit = tiny_model(6);
        let two = Tensor::filled(vec![2, 3, 32, 32], 0.5f32);
        assert!(attention_matrices(&vit, &two).is_err());
    }

    #[test]
    fn batch_forward_matches_single_image_forward() {
        let model = tiny_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let a: Vec<f32> = (0..3072).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f32> = (0..3072).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut both = a.clone();
        both.extend_from_slice(&b);
        let batch = Tensor::new(vec![2, 3, 32, 32], both).unwrap();
        let pair = model.forward(&batch).unwrap();
        let pa = model
            .forward(&Tensor::new(vec![1, 3, 32, 32], a).unwrap())
            .unwrap();
        let pb = model
            .forward(&Tensor::new(vec![1, 3, 32, 32], b).unwrap())
            .unwrap();
        for (x, y) in pair.data()[..6].iter().zip(pa.data()) {
            assert!((x - y).abs() < 1e-5);
        }
        for (x, y) in pair.data()[6..].iter().zip(pb.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
