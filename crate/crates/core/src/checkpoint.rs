//! Checkpoints: parameter store + optimizer state + run metadata in one
//! tensor container. Round-trips are bit-exact (tensors are stored f64).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use stylesplat_grad::{DType, ParamStore, Tensor};

use crate::error::Result;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub iteration: usize,
    pub seed: u64,
    /// ChaCha word position of the training stream, for exact resume.
    pub rng_word_pos: String,
    /// TOML snapshot of the config that produced this checkpoint.
    pub config: String,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub opt_state: BTreeMap<String, Tensor>,
}

const OPT_PREFIX: &str = "__opt.";

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, &Tensor, DType)> = Vec::new();
        for (name, t) in self.params.iter() {
            entries.push((name.to_string(), t, DType::F64));
        }
        for (name, t) in &self.opt_state {
            entries.push((format!("{OPT_PREFIX}{name}"), t, DType::F64));
        }
        let meta = serde_json::to_string(&self.meta)?;
        stylesplat_grad::write_container(path, &meta, &entries)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = stylesplat_grad::read_container(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&c.meta_json)?;
        let mut params = ParamStore::new();
        let mut opt_state = BTreeMap::new();
        for (name, t) in c.tensors {
            match name.strip_prefix(OPT_PREFIX) {
                Some(opt_name) => {
                    opt_state.insert(opt_name.to_string(), t);
                }
                None => params.insert(name, t),
            }
        }
        Ok(Self { meta, params, opt_state })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = ParamStore::new();
        params.insert("cloud.positions", Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.7).sin()));
        params.insert("a.weird/value", Tensor::new(vec![3], vec![1.0e-300, -0.0, f64::MAX]));
        let mut opt = BTreeMap::new();
        opt.insert("adam.m.cloud.positions".to_string(), Tensor::zeros(&[5, 3]));
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                stage: 2,
                iteration: 123,
                seed: 9,
                rng_word_pos: "456".into(),
                config: "x = 1".into(),
            },
            params,
            opt_state: opt,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta.stage, 2);
        assert_eq!(back.meta.iteration, 123);
        for (name, t) in ckpt.params.iter() {
            assert_eq!(back.params.get(name), t, "tensor {name}");
        }
        assert_eq!(back.opt_state.len(), 1);
        assert_eq!(
            back.params.get("a.weird/value").data(),
            &[1.0e-300, -0.0, f64::MAX]
        );
    }
}
