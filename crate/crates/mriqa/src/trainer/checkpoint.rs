//! Versioned model serialization: a magic tag, a JSON header carrying the
//! configs and the parameter manifest, then the raw little-endian f32 blob.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::model::QualityModel;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 5] = b"MRIQ1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub input_size: usize,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub params: Vec<ParamInfo>,
}

pub fn save_checkpoint(
    model: &QualityModel<f32>,
    train: &TrainConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        version: VERSION,
        input_size: model.input_size,
        backbone: model.backbone.cfg.clone(),
        head: model.head.cfg.clone(),
        train: train.clone(),
        params: model
            .params
            .entries()
            .iter()
            .map(|e| ParamInfo {
                name: e.name.clone(),
                shape: e.value.shape.clone(),
            })
            .collect(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;
    for entry in model.params.entries() {
        for &v in entry.value.data.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Read only the header (cheap inspection).
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_header_from(&mut r, path)
}

fn read_header_from(r: &mut impl Read, path: &Path) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: truncated before magic", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| Error::Format(format!("{}: truncated header length", path.display())))?;
    let len = u32::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&header)
        .map_err(|e| Error::Format(format!("{}: header: {e}", path.display())))?;
    if header.version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {}",
            path.display(),
            header.version
        )));
    }
    Ok(header)
}

/// Load a checkpoint: rebuild the model from the stored configs and fill in
/// the parameter blob, verifying the stored manifest against the rebuilt
/// registry name by name.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(QualityModel<f32>, TrainConfig)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_header_from(&mut r, path)?;

    let mut model = QualityModel::<f32>::new(
        header.backbone.clone(),
        header.head.clone(),
        header.input_size,
    )?;
    if header.params.len() != model.params.len() {
        return Err(Error::Format(format!(
            "{}: parameter manifest has {} tensors, configs produce {}",
            path.display(),
            header.params.len(),
            model.params.len()
        )));
    }
    for (i, info) in header.params.iter().enumerate() {
        let entry = model.params.entry(i);
        if info.name != entry.name || info.shape != entry.value.shape {
            return Err(Error::Format(format!(
                "{}: parameter {i} is {} {:?} in the file but {} {:?} per config",
                path.display(),
                info.name,
                info.shape,
                entry.name,
                entry.value.shape
            )));
        }
    }

    for i in 0..model.params.len() {
        let n = model.params.entry(i).value.numel();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|_| {
            Error::Format(format!(
                "{}: blob truncated at parameter {}",
                path.display(),
                model.params.entry(i).name
            ))
        })?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        model.params.set_values(i, values);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after parameter blob",
            path.display()
        )));
    }
    Ok((model, header.train))
}

/// Compare a stored header against expected configs, naming the first
/// mismatched field.
pub fn verify_config(
    header: &CheckpointHeader,
    backbone: &BackboneConfig,
    head: &HeadConfig,
) -> Result<()> {
    let diff = |label: &str, stored: serde_json::Value, expected: serde_json::Value| -> Result<()> {
        let (serde_json::Value::Object(a), serde_json::Value::Object(b)) = (&stored, &expected)
        else {
            return Ok(());
        };
        for (key, va) in a {
            if let Some(vb) = b.get(key) {
                if va != vb {
                    return Err(Error::Format(format!(
                        "config mismatch at {label}.{key}: checkpoint has {va}, expected {vb}"
                    )));
                }
            }
        }
        Ok(())
    };
    diff(
        "backbone",
        serde_json::to_value(&header.backbone).unwrap(),
        serde_json::to_value(backbone).unwrap(),
    )?;
    diff(
        "head",
        serde_json::to_value(&header.head).unwrap(),
        serde_json::to_value(head).unwrap(),
    )?;
    Ok(())
}
