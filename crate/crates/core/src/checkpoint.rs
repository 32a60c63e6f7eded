//! Model checkpoints: the bundle container with magic `b"CIRM"`, a JSON
//! header carrying the [`ModelConfig`] and the name and shape of each
//! parameter block, and an `f64` LE payload in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::{read_container, write_container, PayloadReader};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CIRM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Block {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    params: Vec<Block>,
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let params = model.params();
    let header = Header {
        config: model.config().clone(),
        params: params
            .iter()
            .map(|(name, t)| Block {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut payload = Vec::with_capacity(params.num_values());
    for t in params.tensors() {
        payload.extend_from_slice(t.data());
    }
    write_container(path.as_ref(), CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &payload)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let c = read_container(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    let header: Header = serde_json::from_slice(c.header)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut r = PayloadReader::new(c.payload);
    let mut store = ParamStore::new();
    for b in header.params {
        let n = b
            .shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| Error::Corruption(format!("parameter {:?}: shape overflows", b.name)))?;
        let data = r.take(n, &format!("parameter {:?}", b.name))?;
        let t = Tensor::new(b.shape, data)?;
        store
            .insert(b.name, t)
            .map_err(|e| Error::Corruption(e.to_string()))?;
    }
    r.finish()?;
    Model::from_params(header.config, store).map_err(|e| Error::Corruption(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::LevelDims;

    fn model() -> Model {
        let dims = [LevelDims::new(2, 2, 4), LevelDims::new(2, 2, 6), LevelDims::new(1, 1, 8)];
        let mut cfg = ModelConfig::new(dims, 5);
        cfg.seed = 42;
        Model::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.cirm");
        let m = model();
        save_checkpoint(&m, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), m);
    }

    #[test]
    fn rejects_damage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.cirm");
        save_checkpoint(&model(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();

        let mut z = bytes.clone();
        z[..4].copy_from_slice(b"CIRB");
        assert!(matches!(decode_checkpoint(&z), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Corruption(_))));

        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_checkpoint(&nan), Err(Error::Corruption(_))));
    }
}
