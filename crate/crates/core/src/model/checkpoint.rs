//! JSON checkpoints. Floats are written in shortest round-trip form and
//! parsed with exact rounding, so write → read → write is byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CovarianceBank, GeneratorParams, ModelError, Navigator};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Named seeds from which every stream of a run was derived.
pub type SeedLineage = BTreeMap<String, u64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub dims: Vec<usize>,
    pub num_classes: usize,
    pub generator: GeneratorParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub navigator: Option<Navigator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<CovarianceBank>,
    pub seed_lineage: SeedLineage,
}

impl Checkpoint {
    pub fn new(
        generator: GeneratorParams,
        navigator: Option<Navigator>,
        covariance: Option<CovarianceBank>,
        num_classes: usize,
        seed_lineage: SeedLineage,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT,
            dims: generator.dims(),
            num_classes,
            generator,
            navigator,
            covariance,
            seed_lineage,
        }
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.dims != ck.generator.dims() {
            return Err(ModelError::InvalidDims(ck.dims));
        }
        Ok(ck)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
