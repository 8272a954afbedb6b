//! JSON checkpoints: model config, init seed and all named parameters.
//!
//! The seed is stored because random grouping draws its fixed assignment
//! from it; everything learnable is in `params`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{ensure, Context, Result};
use mtmixatt_core::config::ModelConfig;
use mtmixatt_core::model::Model;
use mtmixatt_core::params::ParamStore;
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "mtmixatt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    /// Optimizer step the parameters were taken at.
    pub step: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &ModelConfig, seed: u64, step: usize, params: &ParamStore) -> Self {
        Self { format: FORMAT.to_string(), version: VERSION, model: model.clone(), seed, step, params: params.clone() }
    }

    pub fn scalar_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Rebuild the model and load the stored parameters by name and shape.
    pub fn to_model(&self) -> Result<Model> {
        ensure!(self.format == FORMAT, "not a checkpoint (format {:?})", self.format);
        ensure!(self.version == VERSION, "unsupported checkpoint version {}", self.version);
        let mut model = Model::new(&self.model, self.seed)?;
        model.store.load_from(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let ck: Self = serde_json::from_reader(BufReader::new(f)).with_context(|| format!("in checkpoint {}", path.display()))?;
        ensure!(ck.format == FORMAT, "not a checkpoint (format {:?})", ck.format);
        Ok(ck)
    }
}
