//! Parameter checkpoints.
//!
//! A checkpoint is one JSON object:
//!
//! ```text
//! {
//!   "magic": "BMLR-CKPT-1",
//!   "architecture": { "input_dims": [..], "hidden": [..], "classes": C, "fusion": "concat" },
//!   "blocks": [ { "name": "encoder0.layer0.weight", "shape": [rows, cols], "data": [..] }, .. ]
//! }
//! ```
//!
//! Weight matrices are row-major. Vectors have a one-element shape. Floats
//! are written with shortest round-trip formatting, so a load reproduces the
//! saved parameters bit for bit.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, Model};

pub const CHECKPOINT_MAGIC: &str = "BMLR-CKPT-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub magic: String,
    pub architecture: Architecture,
    pub blocks: Vec<NamedBlock>,
}

pub fn architecture_of(model: &Model) -> Architecture {
    let hidden = model.params().encoders[0]
        .layers
        .iter()
        .map(|l| l.weight.rows())
        .collect();
    Architecture {
        input_dims: model.input_dims(),
        hidden,
        classes: model.classes(),
        fusion: model.fusion(),
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            magic: CHECKPOINT_MAGIC.to_string(),
            architecture: architecture_of(model),
            blocks: model
                .params()
                .blocks()
                .into_iter()
                .map(|b| NamedBlock {
                    name: b.name,
                    shape: b.shape,
                    data: b.data.to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.magic != CHECKPOINT_MAGIC {
            return Err(Error::Invalid(format!(
                "checkpoint magic `{}`, expected `{CHECKPOINT_MAGIC}`",
                self.magic
            )));
        }
        // Any seed works; every block is overwritten below.
        let mut model = Model::new(&self.architecture, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params()
            .blocks()
            .into_iter()
            .map(|b| (b.name, b.shape))
            .collect();
        if expected.len() != self.blocks.len() {
            return Err(Error::shape("checkpoint block count", expected.len(), self.blocks.len()));
        }
        for ((name, shape), block) in expected.iter().zip(&self.blocks) {
            if *name != block.name || *shape != block.shape {
                return Err(Error::shape(
                    "checkpoint block",
                    format!("{name} {shape:?}"),
                    format!("{} {:?}", block.name, block.shape),
                ));
            }
            if let Some(i) = block.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "checkpoint block",
                    index: i,
                });
            }
        }
        for (dst, src) in model.params_mut().blocks_mut().into_iter().zip(&self.blocks) {
            if dst.data.len() != src.data.len() {
                return Err(Error::shape(
                    "checkpoint block data",
                    format!("{} values for {}", dst.data.len(), src.name),
                    src.data.len(),
                ));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Model::from_params(model.params().clone())
    }
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::from_model(model)).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    ckpt.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionKind;

    fn model(fusion: FusionKind, seed: u64) -> Model {
        let arch = Architecture {
            input_dims: vec![5, 5],
            hidden: vec![4, 3],
            classes: 3,
            fusion,
        };
        Model::new(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_for_every_fusion() {
        let dir = tempfile::tempdir().unwrap();
        for fusion in FusionKind::ALL {
            let m = model(fusion, 11);
            let path = dir.path().join(format!("{fusion}.json"));
            save(&m, &path).unwrap();
            let back = load(&path).unwrap();
            assert_eq!(back.params(), m.params(), "{fusion}");
        }
    }

    #[test]
    fn rejects_wrong_magic_and_renamed_blocks() {
        let m = model(FusionKind::Concat, 1);
        let mut c = Checkpoint::from_model(&m);
        c.magic = "BMLR-CKPT-0".into();
        assert!(c.into_model().is_err());

        let mut c = Checkpoint::from_model(&m);
        c.blocks[0].name = "encoder9.layer0.weight".into();
        assert!(c.into_model().is_err());

        let mut c = Checkpoint::from_model(&m);
        c.blocks[1].data.pop();
        assert!(c.into_model().is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load(Path::new("/nonexistent/ckpt.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ckpt.json"));
    }
}
