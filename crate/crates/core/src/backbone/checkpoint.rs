use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::ModelParams;
use crate::error::{Error, Result};
use crate::route::FEATURE_DIM;

pub const CHECKPOINT_FORMAT: &str = "enroute-mlp/1";

/// On-disk model container. Floats round-trip exactly through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub feature_dim: usize,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint { format: CHECKPOINT_FORMAT.to_string(), feature_dim: FEATURE_DIM, params }
    }
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut w, &Checkpoint::new(params.clone()))?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Config(format!("unsupported checkpoint format {:?}", ckpt.format)));
    }
    if ckpt.feature_dim != FEATURE_DIM {
        return Err(Error::Shape { expected: FEATURE_DIM, actual: ckpt.feature_dim });
    }
    ckpt.params.validate()?;
    Ok(ckpt.params)
}
