//! Checkpoints: named tensors plus run metadata in one safetensors file.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// Backbone name of the model the tensors belong to (the student for
    /// distillation checkpoints).
    pub model: String,
    pub num_classes: usize,
    pub input_size: usize,
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
    pub config_digest: String,
    pub dtype: String,
    /// `backbone` or `session`.
    pub kind: String,
}

impl CheckpointMeta {
    fn to_map(&self) -> HashMap<String, String> {
        HashMap::from([
            ("model".into(), self.model.clone()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("input_size".into(), self.input_size.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("epoch".into(), self.epoch.to_string()),
            ("step".into(), self.step.to_string()),
            ("config_digest".into(), self.config_digest.clone()),
            ("dtype".into(), self.dtype.clone()),
            ("kind".into(), self.kind.clone()),
        ])
    }

    fn from_map(map: &HashMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata field `{k}` missing")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata field `{k}` is not a number")))
        };
        Ok(Self {
            model: get("model")?,
            num_classes: num("num_classes")? as usize,
            input_size: num("input_size")? as usize,
            seed: num("seed")?,
            epoch: num("epoch")?,
            step: num("step")?,
            config_digest: get("config_digest")?,
            dtype: get("dtype")?,
            kind: get("kind")?,
        })
    }
}

pub fn dtype_tag(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        DType::F32 => "f32",
        DType::F16 => "f16",
        DType::BF16 => "bf16",
        _ => "other",
    }
}

pub fn parse_dtype_tag(tag: &str) -> Result<DType> {
    match tag {
        "f64" => Ok(DType::F64),
        "f32" => Ok(DType::F32),
        _ => Err(Error::Checkpoint(format!("unsupported dtype `{tag}`"))),
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let contiguous = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
            .collect::<Result<Vec<_>>>()?;
        let tmp = path.with_extension("tmp");
        safetensors::serialize_to_file(contiguous, Some(self.meta.to_map()), &tmp)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint(format!("{}: no metadata", path.display())))?;
        let meta = CheckpointMeta::from_map(meta)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Self { meta, tensors })
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let a = Tensor::new(&[1.0f32, -0.0, f32::MIN_POSITIVE, 1e-30], &Device::Cpu).unwrap();
        let b = Tensor::new(&[[0.1f64, 0.2], [0.3, 0.4]], &Device::Cpu).unwrap();
        let meta = CheckpointMeta {
            model: "tiny_cnn".into(),
            num_classes: 10,
            input_size: 32,
            seed: 7,
            epoch: 3,
            step: 42,
            config_digest: "0123456789abcdef".into(),
            dtype: "f32".into(),
            kind: "backbone".into(),
        };
        let ck = Checkpoint {
            meta: meta.clone(),
            tensors: BTreeMap::from([("x.a".into(), a.clone()), ("y.b".into(), b.clone())]),
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, meta);
        let bits = |t: &Tensor| -> Vec<u64> {
            t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
                .into_iter().map(f64::to_bits).collect()
        };
        assert_eq!(bits(&back.tensors["x.a"]), bits(&a));
        assert_eq!(back.tensors["y.b"].dtype(), DType::F64);
        assert_eq!(bits(&back.tensors["y.b"]), bits(&b));
        assert_eq!(back.group("x.").len(), 1);
        assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
    }
}
