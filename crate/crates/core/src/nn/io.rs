//! TSPD model files: magic, version, kind tag, config block, named tensors.

use std::path::Path;

use super::{param_specs, Model, ModelConfig, ModelKind, NnError, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TSPD";
const FORMAT_VERSION: u16 = 1;

/// Serialize a model. Layout, all integers little-endian:
/// magic "TSPD", version u16, scalar width u8, kind tag u8, config JSON
/// (u32 length + bytes), tensor count u32, then per tensor: name (u16
/// length + UTF-8), rank u8, dims (u32 each), IEEE-754 payload.
pub fn save_model<F: Scalar>(model: &Model<F>) -> Vec<u8> {
    let config_json = serde_json::to_vec(model.config()).expect("config serializes");
    let mut out = Vec::with_capacity(64 + config_json.len() + model.param_count() * F::WIDTH);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(F::WIDTH as u8);
    out.push(match model.kind() {
        ModelKind::HsCnn => 0,
        ModelKind::Vit => 1,
    });
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        if self.bytes.len() - self.pos < n {
            return Err(NnError::Format(format!(
                "truncated while reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, NnError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parse a TSPD byte stream. Any corruption — bad magic, unknown version,
/// wrong scalar width, config/tensor disagreement, truncation, trailing
/// bytes — fails the whole load; no partial model is produced.
pub fn load_model<F: Scalar>(bytes: &[u8]) -> Result<Model<F>, NnError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(NnError::Format("bad magic, not a TSPD file".into()));
    }
    let version = c.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(NnError::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let width = c.u8("scalar width")? as usize;
    if width != F::WIDTH {
        return Err(NnError::Format(format!(
            "scalar width {width} does not match expected {}",
            F::WIDTH
        )));
    }
    let kind_tag = c.u8("kind tag")?;
    let config_len = c.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(config_len, "config block")?)
        .map_err(|e| NnError::Format(format!("config block: {e}")))?;
    config.validate()?;
    let tagged_kind = match kind_tag {
        0 => ModelKind::HsCnn,
        1 => ModelKind::Vit,
        t => return Err(NnError::Format(format!("unknown kind tag {t}"))),
    };
    if tagged_kind != config.kind() {
        return Err(NnError::Format(format!(
            "kind tag {tagged_kind} disagrees with config {}",
            config.kind()
        )));
    }

    let specs = param_specs(&config);
    let count = c.u32("tensor count")? as usize;
    if count != specs.len() {
        return Err(NnError::Format(format!(
            "config expects {} tensors, file has {count}",
            specs.len()
        )));
    }
    let mut params = Vec::with_capacity(specs.len());
    for spec in &specs {
        let name_len = c.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|e| NnError::Format(format!("tensor name: {e}")))?;
        if name != spec.name {
            return Err(NnError::Format(format!(
                "expected tensor {:?}, found {name:?}",
                spec.name
            )));
        }
        let rank = c.u8("tensor rank")? as usize;
        if rank != spec.shape.len() {
            return Err(NnError::Format(format!(
                "tensor {name}: rank {rank} does not match config rank {}",
                spec.shape.len()
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32("tensor dim")? as usize);
        }
        if dims != spec.shape {
            return Err(NnError::Format(format!(
                "tensor {name}: dims {dims:?} do not match config {:?}",
                spec.shape
            )));
        }
        let numel: usize = dims.iter().product();
        let payload = c.take(numel * F::WIDTH, "tensor payload")?;
        let data: Vec<F> = payload.chunks_exact(F::WIDTH).map(F::read_le).collect();
        params.push(Param {
            name: spec.name.clone(),
            tensor: Tensor::new(dims, data)?,
            decay: spec.decay,
        });
    }
    if c.pos != bytes.len() {
        return Err(NnError::Format(format!(
            "{} trailing bytes after model payload",
            bytes.len() - c.pos
        )));
    }
    Ok(Model::from_parts(config, params))
}

/// Atomic save: write to a sibling temp file, then rename into place.
pub fn write_model_file<F: Scalar>(model: &Model<F>, path: &Path) -> Result<(), NnError> {
    let bytes = save_model(model);
    let err = |source: std::io::Error| NnError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = path.with_extension("tspd.tmp");
    std::fs::write(&tmp, &bytes).map_err(err)?;
    std::fs::rename(&tmp, path).map_err(err)?;
    if let Some(d) = dir {
        // best-effort directory sync so the rename is durable
        if let Ok(f) = std::fs::File::open(d) {
            let _ = f.sync_all();
        }
    }
    Ok(())
}

pub fn read_model_file<F: Scalar>(path: &Path) -> Result<Model<F>, NnError> {
    let bytes = std::fs::read(path).map_err(|source| NnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{HsCnnConfig, VitConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_models() -> Vec<Model<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        vec![
            Model::build(ModelConfig::HsCnn(HsCnnConfig::mini(6)), &mut rng).unwrap(),
            Model::build(ModelConfig::Vit(VitConfig::tiny(6)), &mut rng).unwrap(),
        ]
    }

    #[test]
    fn round_trip_is_byte_identical_and_forward_exact() {
        for model in sample_models() {
            let bytes = save_model(&model);
            let back: Model<f32> = load_model(&bytes).unwrap();
            assert_eq!(save_model(&back), bytes);
            assert_eq!(back.config(), model.config());
            let batch = Tensor::filled(vec![2, 3, 32, 32], 0.3f32);
            let a = model.forward(&batch).unwrap();
            let b = back.forward(&batch).unwrap();
            assert_eq!(
                a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let model = &sample_models()[1];
        let bytes = save_model(model);
        // probe a spread of cut points, including header and payload
        for cut in [0, 3, 4, 5, 6, 7, 8, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                load_model::<f32>(&bytes[..cut]).is_err(),
                "truncation at {cut} accepted"
            );
        }
    }

    #[test]
    fn corrupted_headers_are_rejected() {
        let model = &sample_models()[0];
        let good = save_model(model);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(load_model::<f32>(&bad).is_err(), "bad magic accepted");

        let mut bad = good.clone();
        bad[4] = 0xEE; // version
        assert!(load_model::<f32>(&bad).is_err(), "bad version accepted");

        let mut bad = good.clone();
        bad[6] = 8; // scalar width claims f64
        assert!(load_model::<f32>(&bad).is_err(), "bad width accepted");

        let mut bad = good.clone();
        bad[7] = 1; // kind tag flipped to vit against a cnn config
        assert!(load_model::<f32>(&bad).is_err(), "kind mismatch accepted");

        let mut bad = good.clone();
        bad.push(0); // trailing byte
        assert!(load_model::<f32>(&bad).is_err(), "trailing bytes accepted");
    }

    #[test]
    fn config_payload_disagreement_is_rejected() {
        // swap the config block for a wider model; tensors no longer match
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let small: Model<f32> =
            Model::build(ModelConfig::HsCnn(HsCnnConfig::mini(6)), &mut rng).unwrap();
        let wide_cfg = ModelConfig::HsCnn(HsCnnConfig::mini(9));
        let bytes = save_model(&small);
        let old_json = serde_json::to_vec(small.config()).unwrap();
        let new_json = serde_json::to_vec(&wide_cfg).unwrap();
        let mut forged = Vec::new();
        forged.extend_from_slice(&bytes[..8]);
        forged.extend_from_slice(&(new_json.len() as u32).to_le_bytes());
        forged.extend_from_slice(&new_json);
        forged.extend_from_slice(&bytes[12 + old_json.len()..]);
        assert!(load_model::<f32>(&forged).is_err());
    }

    #[test]
    fn file_round_trip_via_temp_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tspd");
        let model = &sample_models()[0];
        write_model_file(model, &path).unwrap();
        let back: Model<f32> = read_model_file(&path).unwrap();
        assert_eq!(save_model(&back), save_model(model));
        assert!(!path.with_extension("tspd.tmp").exists());
    }
}
