//! Repo-wide checkpoint format: magic bytes "GWCKPT1\0", a length-prefixed
//! UTF-8 metadata block (text key=value lines: config fields, tensor
//! names/shapes/offsets, seed, format version), then raw little-endian
//! 32-bit float blocks per tensor in declared order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"GWCKPT1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Param,
    Buffer,
}

impl TensorRole {
    fn name(self) -> &'static str {
        match self {
            TensorRole::Param => "param",
            TensorRole::Buffer => "buffer",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CheckpointData {
    pub kind: String,
    pub seed: u64,
    pub frozen: bool,
    /// Ordered config key=value pairs, under the model's own key names.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointData {
    pub fn config_value(&self, key: &str) -> Result<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing config key `{key}`")))
    }

    /// Collects params and buffers of a `ParamSet` in declaration order.
    pub fn tensors_from(params: &ParamSet) -> Vec<TensorEntry> {
        let mut tensors = Vec::with_capacity(params.num_params());
        for (name, p) in params.iter_params() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                role: TensorRole::Param,
                shape: p.shape().to_vec(),
                values: p.values().to_vec(),
            });
        }
        for (name, b) in params.iter_buffers() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                role: TensorRole::Buffer,
                shape: b.shape().to_vec(),
                values: b.values().to_vec(),
            });
        }
        tensors
    }

    /// Writes the stored tensors back into a (not yet frozen) `ParamSet`,
    /// validating names and shapes.
    pub fn restore_into(&self, params: &mut ParamSet) -> Result<()> {
        for entry in &self.tensors {
            let existing = match entry.role {
                TensorRole::Param => params.param(&entry.name)?,
                TensorRole::Buffer => params.buffer(&entry.name)?,
            };
            if existing.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}`: shape {:?} does not match model {:?}",
                    entry.name,
                    entry.shape,
                    existing.shape()
                )));
            }
            match entry.role {
                TensorRole::Param => params.set_param_values(&entry.name, entry.values.clone())?,
                TensorRole::Buffer => params.set_buffer_values(&entry.name, entry.values.clone())?,
            }
        }
        Ok(())
    }
}

pub fn encode(data: &CheckpointData) -> Vec<u8> {
    let mut meta = String::new();
    meta.push_str(&format!("format_version={FORMAT_VERSION}\n"));
    meta.push_str(&format!("kind={}\n", data.kind));
    meta.push_str(&format!("seed={}\n", data.seed));
    meta.push_str(&format!("frozen={}\n", data.frozen));
    for (k, v) in &data.config {
        meta.push_str(&format!("config.{k}={v}\n"));
    }
    meta.push_str(&format!("tensor_count={}\n", data.tensors.len()));
    let mut offset = 0usize;
    for (i, t) in data.tensors.iter().enumerate() {
        let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        meta.push_str(&format!("tensor.{i}.name={}\n", t.name));
        meta.push_str(&format!("tensor.{i}.role={}\n", t.role.name()));
        meta.push_str(&format!("tensor.{i}.shape={}\n", shape.join(",")));
        meta.push_str(&format!("tensor.{i}.offset={offset}\n"));
        offset += t.values.len() * 4;
    }
    let mut bytes = Vec::with_capacity(12 + meta.len() + offset);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(meta.as_bytes());
    for t in &data.tensors {
        for v in &t.values {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointData> {
    let fail = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(fail("missing GWCKPT1 magic"));
    }
    let meta_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + meta_len {
        return Err(fail("truncated metadata block"));
    }
    let meta = std::str::from_utf8(&bytes[12..12 + meta_len])
        .map_err(|_| fail("metadata is not UTF-8"))?;
    let data_region = &bytes[12 + meta_len..];

    let mut fields = Vec::new();
    for line in meta.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fail(&format!("malformed metadata line `{line}`")))?;
        fields.push((k.to_string(), v.to_string()));
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| fail(&format!("missing metadata key `{key}`")))
    };
    let version: u32 = get("format_version")?
        .parse()
        .map_err(|_| fail("bad format_version"))?;
    if version != FORMAT_VERSION {
        return Err(fail(&format!("unsupported format version {version}")));
    }
    let kind = get("kind")?.to_string();
    let seed: u64 = get("seed")?.parse().map_err(|_| fail("bad seed"))?;
    let frozen: bool = get("frozen")?.parse().map_err(|_| fail("bad frozen flag"))?;
    let config: Vec<(String, String)> = fields
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix("config.")
                .map(|name| (name.to_string(), v.clone()))
        })
        .collect();
    let count: usize = get("tensor_count")?
        .parse()
        .map_err(|_| fail("bad tensor_count"))?;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name = get(&format!("tensor.{i}.name"))?.to_string();
        let role = match get(&format!("tensor.{i}.role"))? {
            "param" => TensorRole::Param,
            "buffer" => TensorRole::Buffer,
            other => return Err(fail(&format!("unknown tensor role `{other}`"))),
        };
        let shape: Vec<usize> = get(&format!("tensor.{i}.shape"))?
            .split(',')
            .map(|s| s.parse().map_err(|_| fail("bad shape entry")))
            .collect::<Result<_>>()?;
        let offset: usize = get(&format!("tensor.{i}.offset"))?
            .parse()
            .map_err(|_| fail("bad offset"))?;
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > data_region.len() {
            return Err(fail(&format!("tensor `{name}` overruns the data region")));
        }
        let values: Vec<f64> = data_region[offset..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        tensors.push(TensorEntry {
            name,
            role,
            shape,
            values,
        });
    }
    Ok(CheckpointData {
        kind,
        seed,
        frozen,
        config,
        tensors,
    })
}

pub fn write_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    fs::write(path, encode(data)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
