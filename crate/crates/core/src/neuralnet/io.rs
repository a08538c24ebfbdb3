//! Model files: the OSSR1 magic, a zero rank marker (which plain raw
//! readers reject), a UTF-8 `key=value` manifest, then every named tensor
//! in sorted name order as a raw record.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::models::Network;
use super::tensor::Scalar;
use crate::error::{Error, Result};
use crate::imagecore::{encode_raw_record, ByteReader, RawArray, RAW_MAGIC};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Manifest of a model file in the order it is written.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelManifest {
    pub arch: String,
    pub version: u32,
    pub hyperparameters: BTreeMap<String, String>,
    /// Tensor names, sorted.
    pub tensors: Vec<String>,
}

impl ModelManifest {
    fn to_text(&self) -> String {
        let mut s = format!("arch={}\nversion={}\n", self.arch, self.version);
        for (k, v) in &self.hyperparameters {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&format!("tensors={}\n", self.tensors.join(",")));
        s
    }

    fn parse(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad manifest line `{line}`")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let take = |fields: &mut BTreeMap<String, String>, key: &str| {
            fields
                .remove(key)
                .ok_or_else(|| Error::Format(format!("model manifest lacks `{key}`")))
        };
        let arch = take(&mut fields, "arch")?;
        let version = take(&mut fields, "version")?
            .parse()
            .map_err(|_| Error::Format("model manifest version is not a number".into()))?;
        let tensors = take(&mut fields, "tensors")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        Ok(ModelManifest {
            arch,
            version,
            hyperparameters: fields,
            tensors,
        })
    }
}

pub fn manifest_of<T: Scalar, N: Network<T>>(net: &N) -> ModelManifest {
    let mut tensors: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
    tensors.sort();
    ModelManifest {
        arch: N::ARCH.to_string(),
        version: MODEL_FORMAT_VERSION,
        hyperparameters: net
            .hyperparameters()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        tensors,
    }
}

pub fn encode_model<T: Scalar, N: Network<T>>(net: &N) -> Vec<u8> {
    let manifest = manifest_of(net);
    let text = manifest.to_text();
    let mut out = RAW_MAGIC.to_vec();
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let mut params = net.params();
    params.sort_by(|a, b| a.name.cmp(&b.name));
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let arr = RawArray {
            dims: p.dims.clone(),
            values: p.value.iter().map(|v| v.f64() as f32).collect(),
        };
        encode_raw_record(&arr, &mut out);
    }
    out
}

fn read_header<'a>(reader: &mut ByteReader<'a>) -> Result<ModelManifest> {
    reader.expect_magic()?;
    if reader.u32()? != 0 {
        return Err(Error::Format("not a model file (plain raw array?)".into()));
    }
    let len = reader.u32()? as usize;
    let text = std::str::from_utf8(reader.take(len)?)
        .map_err(|_| Error::Format("model manifest is not UTF-8".into()))?;
    let manifest = ModelManifest::parse(text)?;
    if manifest.version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "model format version {} unsupported (expected {MODEL_FORMAT_VERSION})",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Reads only the manifest.
pub fn peek_manifest(bytes: &[u8]) -> Result<ModelManifest> {
    read_header(&mut ByteReader::new(bytes))
}

pub fn decode_model<T: Scalar, N: Network<T>>(bytes: &[u8]) -> Result<N> {
    let mut reader = ByteReader::new(bytes);
    let manifest = read_header(&mut reader)?;
    if manifest.arch != N::ARCH {
        return Err(Error::Architecture {
            expected: N::ARCH.to_string(),
            found: manifest.arch,
        });
    }
    let mut net = N::from_hyperparameters(&manifest.hyperparameters)?;
    let count = reader.u32()? as usize;
    let mut stored = BTreeMap::new();
    for _ in 0..count {
        let len = reader.u32()? as usize;
        let name = std::str::from_utf8(reader.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let arr = reader.raw_record()?;
        if stored.insert(name.clone(), arr).is_some() {
            return Err(Error::Format(format!("tensor `{name}` stored twice")));
        }
    }
    if !reader.is_done() {
        return Err(Error::Format("trailing bytes after model tensors".into()));
    }
    for p in net.params_mut() {
        let arr = stored
            .remove(&p.name)
            .ok_or_else(|| Error::Format(format!("model file lacks tensor `{}`", p.name)))?;
        if arr.dims != p.dims {
            return Err(Error::Shape(format!(
                "tensor `{}` stored as {:?}, expected {:?}",
                p.name, arr.dims, p.dims
            )));
        }
        p.value = arr.values.iter().map(|&v| T::of(v as f64)).collect();
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}` in model file")));
    }
    Ok(net)
}

pub fn save_model<T: Scalar, N: Network<T>>(net: &N, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(net)).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar, N: Network<T>>(path: impl AsRef<Path>) -> Result<N> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
