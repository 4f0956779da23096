//! Procedural chip classes with controllable local vs long-range structure.
//!
//! Local-texture classes are tile checkerboards: any small window betrays
//! the class. Stripe classes are global sinusoids whose per-chip phase is
//! jittered, so no single window carries a stable signature — the
//! orientation only emerges at chip scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ChipDataset, DataError, CHIP_BYTES, CHIP_CHANNELS, CHIP_SIDE};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassKind {
    LocalTexture { tile: usize, noise: f64 },
    LongRangeStripes { orientation_deg: f64, period: f64 },
    Blank { noise: f64 },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub kind: ClassKind,
}

const MID_GRAY: f64 = 128.0;
const CHECKER_AMP: f64 = 60.0;
const STRIPE_AMP: f64 = 25.0;
const STRIPE_NOISE: f64 = 20.0;
/// Per-chip stripe phase is drawn from [0, PHASE_JITTER). A full 2π would
/// erase the class centroid entirely; π keeps a usable chip-scale centroid
/// while leaving individual windows without a stable phase reference.
const PHASE_JITTER: f64 = 1.0 * std::f64::consts::PI;

/// The six-class layout used by the end-to-end experiment: three tile
/// checkerboards and three stripe orientations 30° apart.
pub fn default6_classes() -> Vec<ClassSpec> {
    let local = |name: &str, tile| ClassSpec {
        name: name.into(),
        kind: ClassKind::LocalTexture { tile, noise: 10.0 },
    };
    let stripes = |name: &str, orientation_deg| ClassSpec {
        name: name.into(),
        kind: ClassKind::LongRangeStripes {
            orientation_deg,
            period: 20.0,
        },
    };
    vec![
        local("checker1", 1),
        local("checker2", 2),
        local("checker4", 4),
        stripes("stripes0", 0.0),
        stripes("stripes30", 30.0),
        stripes("stripes60", 60.0),
    ]
}

pub fn generate_synthetic(
    classes: &[ClassSpec],
    n_per_class: usize,
    seed: u64,
) -> Result<ChipDataset, DataError> {
    if classes.len() < 2 {
        return Err(DataError::param("classes", "at least 2 classes required"));
    }
    if n_per_class == 0 {
        return Err(DataError::param("n_per_class", "must be positive"));
    }
    for spec in classes {
        validate_kind(&spec.kind)?;
    }
    let n = classes.len() * n_per_class;
    let mut images = Vec::with_capacity(n * CHIP_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (class_idx, spec) in classes.iter().enumerate() {
        for chip_idx in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(chip_seed(seed, class_idx, chip_idx));
            let chip = render_chip(&spec.kind, &mut rng);
            images.extend_from_slice(&chip);
            labels.push(class_idx as u16);
        }
    }
    ChipDataset::new(
        images,
        labels,
        classes.iter().map(|c| c.name.clone()).collect(),
        format!("synthetic seed={seed}"),
    )
}

fn validate_kind(kind: &ClassKind) -> Result<(), DataError> {
    match *kind {
        ClassKind::LocalTexture { tile, noise } => {
            if tile == 0 || tile > CHIP_SIDE / 2 {
                return Err(DataError::param("local_texture", format!("tile {tile}")));
            }
            if noise < 0.0 {
                return Err(DataError::param("local_texture", "negative noise"));
            }
        }
        ClassKind::LongRangeStripes { period, .. } => {
            if !(period > 1.0) {
                return Err(DataError::param(
                    "long_range_stripes",
                    format!("period {period} must exceed 1"),
                ));
            }
        }
        ClassKind::Blank { noise } => {
            if noise < 0.0 {
                return Err(DataError::param("blank", "negative noise"));
            }
        }
    }
    Ok(())
}

/// Pixels where the noiseless stripe pattern deviates from mid-gray by at
/// least half its amplitude, for the chip the generator produced at this
/// (seed, class, index) coordinate. `None` for non-stripe classes.
pub fn stripe_mask(
    spec: &ClassSpec,
    dataset_seed: u64,
    class_idx: usize,
    chip_idx: usize,
) -> Option<Vec<bool>> {
    let ClassKind::LongRangeStripes {
        orientation_deg,
        period,
    } = spec.kind
    else {
        return None;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(chip_seed(dataset_seed, class_idx, chip_idx));
    let phase = rng.gen::<f64>() * PHASE_JITTER;
    let mut mask = Vec::with_capacity(CHIP_SIDE * CHIP_SIDE);
    for y in 0..CHIP_SIDE {
        for x in 0..CHIP_SIDE {
            let s = stripe_wave(orientation_deg, period, phase, x, y);
            mask.push(s.abs() >= 0.5);
        }
    }
    Some(mask)
}

fn chip_seed(seed: u64, class_idx: usize, chip_idx: usize) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(class_idx as u64 + 1))
        .wrapping_add(0x517C_C1B7_2722_0A95u64.wrapping_mul(chip_idx as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unit-amplitude sinusoid at the class orientation. 0° varies along y
/// (rows constant), 90° along x.
fn stripe_wave(orientation_deg: f64, period: f64, phase: f64, x: usize, y: usize) -> f64 {
    let theta = orientation_deg.to_radians();
    let arg = 2.0 * std::f64::consts::PI * (x as f64 * theta.sin() + y as f64 * theta.cos())
        / period
        + phase;
    arg.sin()
}

fn render_chip(kind: &ClassKind, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut gray = [0.0f64; CHIP_SIDE * CHIP_SIDE];
    match *kind {
        ClassKind::LocalTexture { tile, noise } => {
            let sx = rng.gen_range(0..2 * tile);
            let sy = rng.gen_range(0..2 * tile);
            for y in 0..CHIP_SIDE {
                for x in 0..CHIP_SIDE {
                    let parity = ((x + sx) / tile + (y + sy) / tile) % 2;
                    let v = if parity == 0 {
                        MID_GRAY + CHECKER_AMP
                    } else {
                        MID_GRAY - CHECKER_AMP
                    };
                    gray[y * CHIP_SIDE + x] = v;
                }
            }
            add_noise(&mut gray, noise, rng);
        }
        ClassKind::LongRangeStripes {
            orientation_deg,
            period,
        } => {
            let phase = rng.gen::<f64>() * PHASE_JITTER;
            for y in 0..CHIP_SIDE {
                for x in 0..CHIP_SIDE {
                    gray[y * CHIP_SIDE + x] =
                        MID_GRAY + STRIPE_AMP * stripe_wave(orientation_deg, period, phase, x, y);
                }
            }
            add_noise(&mut gray, STRIPE_NOISE, rng);
        }
        ClassKind::Blank { noise } => {
            gray.fill(MID_GRAY);
            add_noise(&mut gray, noise, rng);
        }
    }
    let mut chip = Vec::with_capacity(CHIP_BYTES);
    for &v in &gray {
        let byte = v.clamp(0.0, 255.0).round() as u8;
        for _ in 0..CHIP_CHANNELS {
            chip.push(byte);
        }
    }
    chip
}

fn add_noise(gray: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    for v in gray.iter_mut() {
        *v += normal.sample(rng);
    }
}
