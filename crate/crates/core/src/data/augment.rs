//! Label-preserving photometric and geometric chip augmentation.

use rand::Rng;

use super::{DataError, CHIP_BYTES, CHIP_CHANNELS, CHIP_SIDE};

/// Per-image augmentation parameters. Factor ranges must contain 1.0 so the
/// identity transform stays reachable.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentPolicy {
    pub flip_lr: f64,
    pub flip_ud: f64,
    pub brightness_delta_max: f64,
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
}

impl AugmentPolicy {
    /// Bit-exact no-op policy.
    pub fn identity() -> Self {
        AugmentPolicy {
            flip_lr: 0.0,
            flip_ud: 0.0,
            brightness_delta_max: 0.0,
            contrast_range: (1.0, 1.0),
            saturation_range: (1.0, 1.0),
        }
    }

    /// Mild photometric jitter without flips; safe for orientation-bearing
    /// classes.
    pub fn photometric() -> Self {
        AugmentPolicy {
            flip_lr: 0.0,
            flip_ud: 0.0,
            brightness_delta_max: 25.0,
            contrast_range: (0.8, 1.2),
            saturation_range: (0.7, 1.3),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (name, p) in [("flip_lr", self.flip_lr), ("flip_ud", self.flip_ud)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::param(
                    "augment",
                    format!("{name} probability {p} not in [0,1]"),
                ));
            }
        }
        if self.brightness_delta_max < 0.0 {
            return Err(DataError::param("augment", "negative brightness delta"));
        }
        for (name, (lo, hi)) in [
            ("contrast_range", self.contrast_range),
            ("saturation_range", self.saturation_range),
        ] {
            if !(lo <= 1.0 && 1.0 <= hi) {
                return Err(DataError::param(
                    "augment",
                    format!("{name} [{lo}, {hi}] must contain 1.0"),
                ));
            }
        }
        Ok(())
    }
}

/// Augment `n` interleaved RGB chips. Each image independently draws flip
/// decisions, a brightness shift, a contrast factor and a saturation factor
/// (five uniform draws per image, consumed regardless of the policy so RNG
/// streams do not depend on policy values). Arithmetic runs in f64 with a
/// clamp after every stage; the result is rounded back to bytes.
pub fn augment_batch(
    images: &[u8],
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<u8>, DataError> {
    policy.validate()?;
    if images.len() % CHIP_BYTES != 0 {
        return Err(DataError::param(
            "augment",
            format!("{} bytes is not a whole number of chips", images.len()),
        ));
    }
    let mut out = Vec::with_capacity(images.len());
    let mut buf = [0.0f64; CHIP_BYTES];
    for chip in images.chunks_exact(CHIP_BYTES) {
        let do_lr = rng.gen::<f64>() < policy.flip_lr;
        let do_ud = rng.gen::<f64>() < policy.flip_ud;
        let delta = (2.0 * rng.gen::<f64>() - 1.0) * policy.brightness_delta_max;
        let contrast = uniform_in(rng, policy.contrast_range);
        let saturation = uniform_in(rng, policy.saturation_range);

        for (b, &v) in buf.iter_mut().zip(chip) {
            *b = v as f64;
        }
        if do_lr {
            flip_lr(&mut buf);
        }
        if do_ud {
            flip_ud(&mut buf);
        }
        if delta != 0.0 {
            for v in buf.iter_mut() {
                *v = clamp(*v + delta);
            }
        }
        if contrast != 1.0 {
            apply_contrast(&mut buf, contrast);
        }
        if saturation != 1.0 {
            apply_saturation(&mut buf, saturation);
        }
        out.extend(buf.iter().map(|&v| clamp(v).round() as u8));
    }
    Ok(out)
}

fn uniform_in(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + rng.gen::<f64>() * (hi - lo)
}

fn clamp(v: f64) -> f64 {
    v.clamp(0.0, 255.0)
}

fn flip_lr(buf: &mut [f64; CHIP_BYTES]) {
    for y in 0..CHIP_SIDE {
        let row = y * CHIP_SIDE * CHIP_CHANNELS;
        for x in 0..CHIP_SIDE / 2 {
            let a = row + x * CHIP_CHANNELS;
            let b = row + (CHIP_SIDE - 1 - x) * CHIP_CHANNELS;
            for c in 0..CHIP_CHANNELS {
                buf.swap(a + c, b + c);
            }
        }
    }
}

fn flip_ud(buf: &mut [f64; CHIP_BYTES]) {
    let stride = CHIP_SIDE * CHIP_CHANNELS;
    for y in 0..CHIP_SIDE / 2 {
        let (a, b) = (y * stride, (CHIP_SIDE - 1 - y) * stride);
        for i in 0..stride {
            buf.swap(a + i, b + i);
        }
    }
}

/// `(x - mean) * f + mean` with a per-channel image mean, clamped.
fn apply_contrast(buf: &mut [f64; CHIP_BYTES], f: f64) {
    let mut means = [0.0f64; CHIP_CHANNELS];
    for px in buf.chunks_exact(CHIP_CHANNELS) {
        for (m, &v) in means.iter_mut().zip(px) {
            *m += v;
        }
    }
    let n = (CHIP_SIDE * CHIP_SIDE) as f64;
    for m in &mut means {
        *m /= n;
    }
    for px in buf.chunks_exact_mut(CHIP_CHANNELS) {
        for (v, &m) in px.iter_mut().zip(&means) {
            *v = clamp((*v - m) * f + m);
        }
    }
}

/// Blend each pixel toward its luma: `luma + (x - luma) * s`, clamped.
/// At s = 0 every channel lands exactly on the luma value.
fn apply_saturation(buf: &mut [f64; CHIP_BYTES], s: f64) {
    for px in buf.chunks_exact_mut(CHIP_CHANNELS) {
        let luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            *v = clamp(luma + (*v - luma) * s);
        }
    }
}
