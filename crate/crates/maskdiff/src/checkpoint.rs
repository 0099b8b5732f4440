//! Named-tensor archive with an embedded JSON config header.
//!
//! Layout:
//! ```text
//! bytes 0..8   magic "MDARCHV1"
//! bytes 8..16  header length (u64 little-endian)
//! header       UTF-8 JSON: {"config": <value>,
//!                           "tensors": [{"name", "shape", "offset", "len"}]}
//! data         f32 little-endian, tensor payloads at the listed offsets
//! ```
//! Offsets and lengths count f32 elements from the start of the data block.
//! Files are written to a temporary sibling and renamed into place.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, LightVae};
use crate::denoiser::{ConditionEncoder, DenoiserConfig, DenoiserUnet};
use crate::edges::EdgeConfig;
use crate::error::{Error, Result};
use crate::params::{ParamStore, Params};
use crate::sampling::InferModel;
use crate::schedule::ScheduleConfig;
use crate::training::TrainConfig;

const MAGIC: &[u8; 8] = b"MDARCHV1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

/// Write a named-tensor archive atomically.
pub fn save<P: AsRef<Path>>(
    path: P,
    config: &serde_json::Value,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let path = path.as_ref();
    let mut metas = Vec::with_capacity(tensors.len());
    let mut data: Vec<f32> = Vec::new();
    for (name, t) in tensors {
        if t.dtype() != DType::F32 {
            return Err(Error::Checkpoint(format!("tensor {name} is not f32")));
        }
        let values = t.flatten_all()?.to_vec1::<f32>()?;
        metas.push(TensorMeta {
            name: name.clone(),
            shape: t.dims().to_vec(),
            offset: data.len(),
            len: values.len(),
        });
        data.extend_from_slice(&values);
    }
    let header =
        serde_json::to_vec(&Header { config: config.clone(), tensors: metas })?;

    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in &data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read an archive back into (config, named tensors).
pub fn load<P: AsRef<Path>>(path: P) -> Result<(serde_json::Value, HashMap<String, Tensor>)> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a tensor archive", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() % 4 != 0 {
        return Err(Error::Checkpoint("truncated tensor payload".into()));
    }
    let data: Vec<f32> =
        payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();

    let mut tensors = HashMap::with_capacity(header.tensors.len());
    for meta in header.tensors {
        let expected: usize = meta.shape.iter().product();
        if expected != meta.len || meta.offset + meta.len > data.len() {
            return Err(Error::Checkpoint(format!("tensor {} has inconsistent metadata", meta.name)));
        }
        let slice = data[meta.offset..meta.offset + meta.len].to_vec();
        let t = Tensor::from_vec(slice, meta.shape.as_slice(), &Device::Cpu)?;
        tensors.insert(meta.name, t);
    }
    Ok((header.config, tensors))
}

/// Metadata block of a codec checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecMeta {
    pub kind: String,
    pub codec: CodecConfig,
    /// Held-out round-trip F1 measured right after distillation.
    pub reconstruction_f1: f64,
}

pub fn save_codec<P: AsRef<Path>>(
    path: P,
    codec_cfg: &CodecConfig,
    student: &ParamStore,
    reconstruction_f1: f64,
) -> Result<()> {
    let meta = CodecMeta {
        kind: "codec".into(),
        codec: codec_cfg.clone(),
        reconstruction_f1,
    };
    save(path, &serde_json::to_value(&meta)?, &student.tensors()?)
}

/// Rebuild the frozen student codec from a codec checkpoint. Also returns the
/// raw tensor map so callers can embed the codec in later model checkpoints.
pub fn load_codec<P: AsRef<Path>>(
    path: P,
) -> Result<(CodecMeta, LightVae, BTreeMap<String, Tensor>)> {
    let (config, tensors) = load(path)?;
    let meta: CodecMeta = serde_json::from_value(config)?;
    if meta.kind != "codec" {
        return Err(Error::Checkpoint(format!("expected a codec archive, got kind {}", meta.kind)));
    }
    let student = {
        let mut p = Params::frozen(&tensors);
        LightVae::new(&mut p, &meta.codec)?
    };
    let map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    Ok((meta, student, map))
}

/// Metadata block of a trained-model checkpoint: the full configuration the
/// run resolved to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub schedule: ScheduleConfig,
    pub codec: CodecConfig,
    pub denoiser: DenoiserConfig,
    pub edges: EdgeConfig,
    pub train: TrainConfig,
}

/// Save denoiser + condition-encoder weights together with the frozen codec
/// tensors and the full config, so one file suffices for inference.
pub fn save_model<P: AsRef<Path>>(
    path: P,
    meta: &ModelMeta,
    model_store: &ParamStore,
    codec_tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut tensors = model_store.tensors()?;
    for (k, v) in codec_tensors {
        if tensors.contains_key(k) {
            return Err(Error::Checkpoint(format!("codec tensor {k} collides with model tensor")));
        }
        tensors.insert(k.clone(), v.clone());
    }
    save(path, &serde_json::to_value(meta)?, &tensors)
}

/// Rebuild a frozen inference model from a model checkpoint.
pub fn load_model<P: AsRef<Path>>(path: P) -> Result<(ModelMeta, InferModel)> {
    let (config, tensors) = load(path)?;
    let meta: ModelMeta = serde_json::from_value(config)?;
    if meta.kind != "model" {
        return Err(Error::Checkpoint(format!("expected a model archive, got kind {}", meta.kind)));
    }
    let schedule = meta.schedule.build()?;
    let latent_c = meta.codec.latent_channels;
    let io_channels = if meta.train.edge_supervision { 2 * latent_c } else { latent_c };
    let mut p = Params::frozen(&tensors);
    let codec = LightVae::new(&mut p, &meta.codec)?;
    let cond = ConditionEncoder::new(&mut p.sub("cond"), &meta.denoiser)?;
    let unet = DenoiserUnet::new(&mut p.sub("unet"), io_channels, schedule.steps(), &meta.denoiser)?;
    let model = InferModel {
        cond,
        unet,
        codec,
        schedule,
        edge_supervision: meta.train.edge_supervision,
    };
    Ok((meta, model))
}
