//! Parameter checkpoints: an SPNT tensor file plus a sidecar manifest with
//! the config hash, epoch and dev score.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use spen_core::spnt;
use spen_core::tasks::dataset::Manifest;
use spen_core::{ParamSet, Result, SpenError, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub config_hash: String,
    pub epoch: usize,
    pub dev_score: f64,
}

/// Manifest path belonging to a checkpoint's tensor file.
pub fn manifest_path(spnt_path: &Path) -> PathBuf {
    spnt_path.with_extension("txt")
}

impl Checkpoint {
    pub fn new(params: &ParamSet, config_hash: &str, epoch: usize, dev_score: f64) -> Self {
        Checkpoint {
            params: params.values(),
            config_hash: config_hash.to_string(),
            epoch,
            dev_score,
        }
    }

    pub fn tensor_bytes(&self) -> Result<Vec<u8>> {
        spnt::encode(self.params.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::default();
        m.set("config_hash", &self.config_hash);
        m.set("epoch", self.epoch);
        m.set("dev_score", format!("{:?}", self.dev_score));
        m
    }

    /// Write `path` and its manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tensor_bytes()?)?;
        self.manifest().write(&manifest_path(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = spnt::read_file(path)?;
        let mut params = BTreeMap::new();
        for (name, t) in tensors {
            if params.insert(name.clone(), t).is_some() {
                return Err(SpenError::Format {
                    offset: 0,
                    msg: format!("duplicate tensor `{name}` in checkpoint"),
                });
            }
        }
        let m = Manifest::read(&manifest_path(path))?;
        Ok(Checkpoint {
            params,
            config_hash: m.get("config_hash")?.to_string(),
            epoch: m.parse("epoch")?,
            dev_score: m.parse("dev_score")?,
        })
    }

    /// Copy the stored values into `params`, which must hold exactly the
    /// same names and shapes.
    pub fn apply(&self, params: &mut ParamSet) -> Result<()> {
        let want: Vec<&str> = params.names().collect();
        let have: Vec<&str> = self.params.keys().map(String::as_str).collect();
        if want != have {
            return Err(SpenError::Config(format!(
                "checkpoint parameters {have:?} do not match the model's {want:?}"
            )));
        }
        params.load_values(&self.params)
    }
}
