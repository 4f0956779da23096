//! Per-chip attribution maps: occlusion sensitivity for any probabilistic
//! classifier, attention rollout for transformer models.

use std::path::Path;

use thiserror::Error;

use crate::data::{bytes_to_batch, CHIP_BYTES, CHIP_CHANNELS, CHIP_SIDE};
use crate::ensemble::ProbClassifier;
use crate::imgio::{self, ImageError};
use crate::nn::{Model, ModelConfig, NnError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const OCCLUSION_PATCH: usize = 4;
pub const OCCLUSION_STRIDE: usize = 2;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("bad saliency input: {0}")]
    Input(String),
    #[error("wrong model kind: {0}")]
    Kind(String),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyMethod {
    Occlusion,
    AttentionRollout,
}

/// Nonnegative attribution per pixel, max-normalized to 1 (an all-zero map
/// stays all zero).
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    values: Vec<f64>,
    height: usize,
    width: usize,
    pub target_class: usize,
    pub method: SaliencyMethod,
}

impl SaliencyMap {
    fn from_raw(
        mut values: Vec<f64>,
        height: usize,
        width: usize,
        target_class: usize,
        method: SaliencyMethod,
    ) -> Self {
        assert_eq!(values.len(), height * width);
        let max = values.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            for v in &mut values {
                *v /= max;
            }
        }
        SaliencyMap {
            values,
            height,
            width,
            target_class,
            method,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mean over pixels selected by `mask` (true) vs the rest; used to
    /// probe whether attribution concentrates on a known structure.
    pub fn masked_means(&self, mask: &[bool]) -> Result<(f64, f64), SaliencyError> {
        if mask.len() != self.values.len() {
            return Err(SaliencyError::Input(format!(
                "mask has {} entries for a {}x{} map",
                mask.len(),
                self.height,
                self.width
            )));
        }
        let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in self.values.iter().zip(mask) {
            if m {
                on += v;
                n_on += 1;
            } else {
                off += v;
                n_off += 1;
            }
        }
        if n_on == 0 || n_off == 0 {
            return Err(SaliencyError::Input("mask is constant".into()));
        }
        Ok((on / n_on as f64, off / n_off as f64))
    }

    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

fn occlusion_windows(side: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut r = 0;
    while r + OCCLUSION_PATCH <= side {
        let mut c = 0;
        while c + OCCLUSION_PATCH <= side {
            out.push((r, c));
            c += OCCLUSION_STRIDE;
        }
        r += OCCLUSION_STRIDE;
    }
    out
}

/// Per-pixel average of the window drops covering it, then max-normalize.
/// Contributions are summed in canonical grid order, so the result is
/// bit-identical under any window enumeration order.
fn aggregate_window_drops(
    windows: &[(usize, usize)],
    drops: &[f64],
    side: usize,
    target_class: usize,
) -> SaliencyMap {
    let per_side = (side - OCCLUSION_PATCH) / OCCLUSION_STRIDE + 1;
    let mut grid = vec![0.0f64; per_side * per_side];
    for (&(r0, c0), &d) in windows.iter().zip(drops) {
        grid[(r0 / OCCLUSION_STRIDE) * per_side + c0 / OCCLUSION_STRIDE] = d;
    }
    let mut sums = vec![0.0f64; side * side];
    for r in 0..side {
        for c in 0..side {
            let (mut acc, mut n) = (0.0f64, 0u32);
            for wr in 0..per_side {
                let r0 = wr * OCCLUSION_STRIDE;
                if r < r0 || r >= r0 + OCCLUSION_PATCH {
                    continue;
                }
                for wc in 0..per_side {
                    let c0 = wc * OCCLUSION_STRIDE;
                    if c >= c0 && c < c0 + OCCLUSION_PATCH {
                        acc += grid[wr * per_side + wc];
                        n += 1;
                    }
                }
            }
            if n > 0 {
                sums[r * side + c] = acc / n as f64;
            }
        }
    }
    SaliencyMap::from_raw(sums, side, side, target_class, SaliencyMethod::Occlusion)
}

/// Occlusion sensitivity: slide a 4x4 window at stride 2, replace the
/// covered region with the baseline color, and record the drop in the
/// target-class probability. Negative drops clamp to zero.
pub fn occlusion_map<F: Scalar>(
    model: &dyn ProbClassifier<F>,
    chip: &[u8],
    target_class: usize,
    baseline: [F; CHIP_CHANNELS],
) -> Result<SaliencyMap, SaliencyError> {
    if chip.len() != CHIP_BYTES {
        return Err(SaliencyError::Input(format!(
            "chip has {} bytes, expected {CHIP_BYTES}",
            chip.len()
        )));
    }
    if target_class >= model.num_classes() {
        return Err(SaliencyError::Input(format!(
            "target class {target_class} out of range for {} classes",
            model.num_classes()
        )));
    }
    let baseline_px: Vec<u8> = baseline
        .iter()
        .map(|&b| {
            let v = Scalar::to_f64(b);
            if !(0.0..=1.0).contains(&v) {
                return Err(SaliencyError::Input(format!(
                    "baseline channel {v} outside [0, 1]"
                )));
            }
            Ok((v * 255.0).round() as u8)
        })
        .collect::<Result<_, _>>()?;

    let base_probs = model.predict_probs(&bytes_to_batch::<F>(chip, 1))?;
    let p0 = base_probs.data()[target_class].to_f64();

    let windows = occlusion_windows(CHIP_SIDE);
    let mut occluded = Vec::with_capacity(windows.len() * CHIP_BYTES);
    for &(r0, c0) in &windows {
        let start = occluded.len();
        occluded.extend_from_slice(chip);
        for r in r0..r0 + OCCLUSION_PATCH {
            for c in c0..c0 + OCCLUSION_PATCH {
                let px = start + (r * CHIP_SIDE + c) * CHIP_CHANNELS;
                occluded[px..px + CHIP_CHANNELS].copy_from_slice(&baseline_px);
            }
        }
    }
    let probs = model.predict_probs(&bytes_to_batch::<F>(&occluded, windows.len()))?;
    let n_classes = model.num_classes();
    let drops: Vec<f64> = (0..windows.len())
        .map(|w| (p0 - probs.data()[w * n_classes + target_class].to_f64()).max(0.0))
        .collect();
    Ok(aggregate_window_drops(
        &windows,
        &drops,
        CHIP_SIDE,
        target_class,
    ))
}

/// Compose head-averaged attention matrices (each mixed half-and-half with
/// the identity for the residual path), take the class-token row, map patch
/// scores onto the pixel grid by nearest neighbor, and max-normalize.
pub fn rollout_map<F: Scalar>(
    mats: &[Tensor<F>],
    patch_size: usize,
    image_size: usize,
    target_class: usize,
) -> Result<SaliencyMap, SaliencyError> {
    if mats.is_empty() {
        return Err(SaliencyError::Input("no attention matrices".into()));
    }
    let pps = image_size / patch_size;
    let tokens = pps * pps + 1;
    for (l, m) in mats.iter().enumerate() {
        if m.shape() != [tokens, tokens] {
            return Err(SaliencyError::Input(format!(
                "layer {l} attention is {:?}, expected [{tokens}, {tokens}]",
                m.shape()
            )));
        }
    }
    // rollout starts at the identity; each layer left-multiplies
    let mut roll = vec![0.0f64; tokens * tokens];
    for t in 0..tokens {
        roll[t * tokens + t] = 1.0;
    }
    let mut next = vec![0.0f64; tokens * tokens];
    for m in mats {
        let a = m.data();
        for i in 0..tokens {
            for j in 0..tokens {
                let mixed_row_i = |k: usize| {
                    0.5 * a[i * tokens + k].to_f64() + if i == k { 0.5 } else { 0.0 }
                };
                next[i * tokens + j] =
                    (0..tokens).map(|k| mixed_row_i(k) * roll[k * tokens + j]).sum();
            }
        }
        std::mem::swap(&mut roll, &mut next);
    }
    let cls_row = &roll[..tokens];
    let mut pixels = vec![0.0f64; image_size * image_size];
    for pr in 0..pps {
        for pc in 0..pps {
            let score = cls_row[1 + pr * pps + pc];
            for r in pr * patch_size..(pr + 1) * patch_size {
                for c in pc * patch_size..(pc + 1) * patch_size {
                    pixels[r * image_size + c] = score;
                }
            }
        }
    }
    Ok(SaliencyMap::from_raw(
        pixels,
        image_size,
        image_size,
        target_class,
        SaliencyMethod::AttentionRollout,
    ))
}

/// Attention rollout for a transformer model on one chip. The recorded
/// class is the model's prediction (rollout itself is class-agnostic).
pub fn attention_rollout<F: Scalar>(
    model: &Model<F>,
    chip: &[u8],
) -> Result<SaliencyMap, SaliencyError> {
    let ModelConfig::Vit(cfg) = model.config() else {
        return Err(SaliencyError::Kind(
            "attention rollout requires a transformer model".into(),
        ));
    };
    if chip.len() != CHIP_BYTES {
        return Err(SaliencyError::Input(format!(
            "chip has {} bytes, expected {CHIP_BYTES}",
            chip.len()
        )));
    }
    let batch = bytes_to_batch::<F>(chip, 1);
    let probs = model.forward(&batch)?;
    let predicted = crate::nn::argmax_rows(&probs)[0];
    let mats = crate::nn::attention_matrices(model, &batch)?;
    rollout_map(&mats, cfg.patch_size, cfg.image_size, predicted)
}

/// Binary P5 graymap with values `round(255 * map)`.
pub fn write_map_image(map: &SaliencyMap, path: &Path) -> Result<(), SaliencyError> {
    imgio::write_pgm(path, map.width, map.height, &map.to_gray_bytes())?;
    Ok(())
}

/// Side-by-side P6 montage: source chip on the left, map on the right.
pub fn write_montage(chip: &[u8], map: &SaliencyMap, path: &Path) -> Result<(), SaliencyError> {
    if chip.len() != CHIP_BYTES {
        return Err(SaliencyError::Input(format!(
            "chip has {} bytes, expected {CHIP_BYTES}",
            chip.len()
        )));
    }
    if map.width != CHIP_SIDE || map.height != CHIP_SIDE {
        return Err(SaliencyError::Input(format!(
            "map is {}x{}, montage needs {CHIP_SIDE}x{CHIP_SIDE}",
            map.width, map.height
        )));
    }
    let gray = map.to_gray_bytes();
    let mut rgb = Vec::with_capacity(CHIP_SIDE * CHIP_SIDE * 2 * 3);
    for r in 0..CHIP_SIDE {
        let row = &chip[r * CHIP_SIDE * 3..(r + 1) * CHIP_SIDE * 3];
        rgb.extend_from_slice(row);
        for c in 0..CHIP_SIDE {
            let g = gray[r * CHIP_SIDE + c];
            rgb.extend_from_slice(&[g, g, g]);
        }
    }
    imgio::write_ppm(path, CHIP_SIDE * 2, CHIP_SIDE, &rgb)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ConstantModel;

    impl ProbClassifier<f64> for ConstantModel {
        fn num_classes(&self) -> usize {
            3
        }

        fn predict_probs(&self, batch: &Tensor<f64>) -> Result<Tensor<f64>, NnError> {
            let n = batch.shape()[0];
            Ok(Tensor::filled(vec![n, 3], 1.0 / 3.0))
        }

        fn label(&self) -> String {
            "constant".into()
        }
    }

    /// p(class 1) follows the red value of one pixel, everything else flat.
    struct PixelProbe {
        row: usize,
        col: usize,
    }

    impl ProbClassifier<f64> for PixelProbe {
        fn num_classes(&self) -> usize {
            2
        }

        fn predict_probs(&self, batch: &Tensor<f64>) -> Result<Tensor<f64>, NnError> {
            let n = batch.shape()[0];
            let plane = CHIP_SIDE * CHIP_SIDE;
            let mut out = Vec::with_capacity(n * 2);
            for i in 0..n {
                let v = batch.data()[i * 3 * plane + self.row * CHIP_SIDE + self.col];
                out.push(1.0 - v);
                out.push(v);
            }
            Ok(Tensor::new(vec![n, 2], out).unwrap())
        }

        fn label(&self) -> String {
            "pixel-probe".into()
        }
    }

    #[test]
    fn constant_model_gives_zero_map() {
        let chip = vec![128u8; CHIP_BYTES];
        let map = occlusion_map(&ConstantModel, &chip, 0, [0.5, 0.5, 0.5]).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.0));
        assert_eq!(map.height(), CHIP_SIDE);
        assert_eq!(map.width(), CHIP_SIDE);
    }

    #[test]
    fn pixel_probe_map_matches_window_enumeration() {
        let (pr, pc) = (10usize, 21usize);
        let mut chip = vec![0u8; CHIP_BYTES];
        chip[(pr * CHIP_SIDE + pc) * 3] = 255; // red channel read by the probe
        let model = PixelProbe { row: pr, col: pc };
        let map = occlusion_map(&model, &chip, 1, [0.0, 0.0, 0.0]).unwrap();

        // oracle: drop is 1 exactly for windows covering the probe pixel,
        // 0 otherwise; each pixel averages the drops of its windows
        let windows = occlusion_windows(CHIP_SIDE);
        let covers = |r0: usize, c0: usize, r: usize, c: usize| {
            r >= r0 && r < r0 + OCCLUSION_PATCH && c >= c0 && c < c0 + OCCLUSION_PATCH
        };
        let mut expect = vec![0.0f64; CHIP_SIDE * CHIP_SIDE];
        for r in 0..CHIP_SIDE {
            for c in 0..CHIP_SIDE {
                let mine: Vec<_> = windows
                    .iter()
                    .filter(|&&(r0, c0)| covers(r0, c0, r, c))
                    .collect();
                let hits = mine
                    .iter()
                    .filter(|&&&(r0, c0)| covers(r0, c0, pr, pc))
                    .count();
                expect[r * CHIP_SIDE + c] = hits as f64 / mine.len() as f64;
            }
        }
        let peak = expect.iter().cloned().fold(0.0, f64::max);
        assert!(peak > 0.0);
        for v in &mut expect {
            *v /= peak;
        }
        for (got, want) in map.values().iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        }
        assert_eq!(map.value(pr, pc), 1.0);
        // far corner untouched by any covering window
        assert_eq!(map.value(0, 0), 0.0);
    }

    #[test]
    fn aggregation_is_window_order_invariant() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let windows = occlusion_windows(CHIP_SIDE);
        let drops: Vec<f64> = (0..windows.len()).map(|i| (i % 7) as f64 * 0.01).collect();
        let a = aggregate_window_drops(&windows, &drops, CHIP_SIDE, 0);
        let mut paired: Vec<(_, _)> = windows.iter().cloned().zip(drops).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        paired.shuffle(&mut rng);
        let (w2, d2): (Vec<_>, Vec<_>) = paired.into_iter().unzip();
        let b = aggregate_window_drops(&w2, &d2, CHIP_SIDE, 0);
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn occlusion_rejects_bad_inputs() {
        let chip = vec![0u8; CHIP_BYTES];
        assert!(occlusion_map(&ConstantModel, &chip[1..], 0, [0.0; 3]).is_err());
        assert!(occlusion_map(&ConstantModel, &chip, 3, [0.0; 3]).is_err());
        assert!(occlusion_map(&ConstantModel, &chip, 0, [1.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn uniform_attention_gives_uniform_map() {
        let tokens = 17;
        let a = Tensor::<f64>::filled(vec![tokens, tokens], 1.0 / tokens as f64);
        let map = rollout_map(&[a], 8, 32, 0).unwrap();
        assert!(map.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn identity_layers_pass_first_layer_attention_through() {
        let tokens = 17;
        let mut first = vec![0.0f64; tokens * tokens];
        // a spiky but row-stochastic class-token row
        for j in 0..tokens {
            first[j] = if j == 5 { 0.9 } else { 0.1 / 16.0 };
        }
        for i in 1..tokens {
            first[i * tokens + i] = 1.0;
        }
        let mut eye = vec![0.0f64; tokens * tokens];
        for i in 0..tokens {
            eye[i * tokens + i] = 1.0;
        }
        let a1 = Tensor::new(vec![tokens, tokens], first.clone()).unwrap();
        let a2 = Tensor::new(vec![tokens, tokens], eye).unwrap();
        let map = rollout_map(&[a1, a2], 8, 32, 0).unwrap();
        // patch scores proportional to 0.5 * first[0, 1..]; patch 4 peaks
        let pps = 4;
        let peak_patch = 4usize; // token 5 = patch index 4
        let (pr, pc) = (peak_patch / pps, peak_patch % pps);
        assert_eq!(map.value(pr * 8, pc * 8), 1.0);
        let expect_ratio = (0.1 / 16.0) / 0.9;
        let other = map.value(0, 0);
        assert!((other - expect_ratio).abs() < 1e-12);
    }

    #[test]
    fn rollout_on_real_vit_is_row_stochastic_and_chip_shaped() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let cfg = crate::nn::VitConfig::tiny(4);
        let model =
            Model::<f64>::build(ModelConfig::Vit(cfg.clone()), &mut rng).unwrap();
        let chip: Vec<u8> = (0..CHIP_BYTES).map(|i| (i * 31 % 251) as u8).collect();
        let mats =
            crate::nn::attention_matrices(&model, &bytes_to_batch::<f64>(&chip, 1)).unwrap();
        assert_eq!(mats.len(), cfg.num_layers);
        let tokens = cfg.tokens();
        // every composition step stays row-stochastic
        let mut roll = Tensor::<f64>::filled(vec![tokens, tokens], 0.0);
        for t in 0..tokens {
            roll.data_mut()[t * tokens + t] = 1.0;
        }
        for m in &mats {
            let mut next = vec![0.0f64; tokens * tokens];
            for i in 0..tokens {
                for j in 0..tokens {
                    let mut acc = 0.0;
                    for k in 0..tokens {
                        let mixed =
                            0.5 * m.data()[i * tokens + k] + if i == k { 0.5 } else { 0.0 };
                        acc += mixed * roll.data()[k * tokens + j];
                    }
                    next[i * tokens + j] = acc;
                }
            }
            roll = Tensor::new(vec![tokens, tokens], next).unwrap();
            for i in 0..tokens {
                let s: f64 = roll.data()[i * tokens..(i + 1) * tokens].iter().sum();
                assert!((s - 1.0).abs() <= 1e-6, "row {i} sums to {s}");
            }
        }

        let map = attention_rollout(&model, &chip).unwrap();
        assert_eq!(map.height(), CHIP_SIDE);
        assert_eq!(map.width(), CHIP_SIDE);
        assert!(map.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(map.method, SaliencyMethod::AttentionRollout);
        // nearest-neighbor upsampling: constant within each 8x8 patch
        for pr in 0..4 {
            for pc in 0..4 {
                let v = map.value(pr * 8, pc * 8);
                assert_eq!(map.value(pr * 8 + 7, pc * 8 + 7), v);
            }
        }
    }

    #[test]
    fn rollout_rejects_cnn() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let model = Model::<f64>::build(
            ModelConfig::HsCnn(crate::nn::HsCnnConfig::mini(4)),
            &mut rng,
        )
        .unwrap();
        let chip = vec![0u8; CHIP_BYTES];
        match attention_rollout(&model, &chip) {
            Err(SaliencyError::Kind(_)) => {}
            other => panic!("expected kind error, got {other:?}"),
        }
    }

    #[test]
    fn pgm_output_has_exact_header_and_quantized_payload() {
        let mut values = vec![0.0f64; CHIP_SIDE * CHIP_SIDE];
        values[0] = 1.0;
        values[1] = 0.5;
        let map = SaliencyMap::from_raw(
            values,
            CHIP_SIDE,
            CHIP_SIDE,
            0,
            SaliencyMethod::Occlusion,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        write_map_image(&map, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
        let payload = &bytes[b"P5\n32 32\n255\n".len()..];
        assert_eq!(payload.len(), CHIP_SIDE * CHIP_SIDE);
        assert_eq!(payload[0], 255);
        assert_eq!(payload[1], 128); // round(0.5 * 255)
        assert!(payload[2..].iter().all(|&b| b == 0));
        // round trip within quantization
        for (i, &b) in payload.iter().enumerate() {
            assert!((b as f64 / 255.0 - map.values()[i]).abs() <= 0.5 / 255.0 + 1e-12);
        }

        let chip = vec![7u8; CHIP_BYTES];
        let montage = dir.path().join("montage.ppm");
        write_montage(&chip, &map, &montage).unwrap();
        let m = std::fs::read(&montage).unwrap();
        assert!(m.starts_with(b"P6\n64 32\n255\n"));
    }

    #[test]
    fn masked_means_splits_on_and_off() {
        let mut values = vec![0.0f64; CHIP_SIDE * CHIP_SIDE];
        let mut mask = vec![false; CHIP_SIDE * CHIP_SIDE];
        for i in 0..100 {
            values[i] = 1.0;
            mask[i] = true;
        }
        let map = SaliencyMap::from_raw(
            values,
            CHIP_SIDE,
            CHIP_SIDE,
            0,
            SaliencyMethod::Occlusion,
        );
        let (on, off) = map.masked_means(&mask).unwrap();
        assert_eq!(on, 1.0);
        assert_eq!(off, 0.0);
        assert!(map.masked_means(&vec![true; 10]).is_err());
        assert!(map.masked_means(&vec![true; CHIP_SIDE * CHIP_SIDE]).is_err());
    }
}
