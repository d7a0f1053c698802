//! Checkpoints are safetensors files. Header metadata carries the format tag,
//! version, the run configuration as JSON, the step counter and the stage;
//! tensors are stored as `model.<name>` and `disc.<name>`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{Discriminator, SegModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "personaseg";
pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub config: String,
    pub step: u64,
    pub stage: String,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: BTreeMap<String, Tensor>,
    pub disc: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Copies stored values into the given networks (every tensor must be present).
    pub fn restore(&self, model: &SegModel, disc: Option<&Discriminator>) -> Result<()> {
        model.store().load(&self.model, true)?;
        if let Some(d) = disc {
            if self.disc.is_empty() {
                return Err(Error::Checkpoint("checkpoint has no discriminator".into()));
            }
            d.store().load(&self.disc, true)?;
        }
        Ok(())
    }
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
    })
}

fn from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let bytes = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported tensor type {other:?}"))),
    };
    Ok(t)
}

pub fn save_checkpoint(path: &Path, model: &SegModel, disc: Option<&Discriminator>, meta: &CheckpointMeta) -> Result<()> {
    let mut buffers: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut push = |prefix: &str, tensors: BTreeMap<String, Tensor>| -> Result<()> {
        for (name, t) in tensors {
            let (dtype, bytes) = to_bytes(&t)?;
            buffers.push((format!("{prefix}.{name}"), dtype, t.dims().to_vec(), bytes));
        }
        Ok(())
    };
    push("model", model.store().named_tensors())?;
    if let Some(d) = disc {
        push("disc", d.store().named_tensors())?;
    }
    let views = buffers
        .iter()
        .map(|(name, dtype, shape, bytes)| Ok((name.clone(), TensorView::new(*dtype, shape.clone(), bytes)?)))
        .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let info = HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("version".to_string(), CHECKPOINT_VERSION.to_string()),
        ("config".to_string(), meta.config.clone()),
        ("step".to_string(), meta.step.to_string()),
        ("stage".to_string(), meta.stage.clone()),
    ]);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let info = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| info.get(k).cloned().ok_or_else(|| bad(format!("missing header field `{k}`")));
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(bad("not a checkpoint of this tool".into()));
    }
    let version = field("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let meta = CheckpointMeta {
        config: field("config")?,
        step: field("step")?.parse().map_err(|_| bad("bad step".into()))?,
        stage: field("stage")?,
    };
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut model = BTreeMap::new();
    let mut disc = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = from_view(&view)?;
        if let Some(rest) = name.strip_prefix("model.") {
            model.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("disc.") {
            disc.insert(rest.to_string(), t);
        } else {
            return Err(bad(format!("unexpected tensor `{name}`")));
        }
    }
    Ok(Checkpoint { meta, model, disc })
}
