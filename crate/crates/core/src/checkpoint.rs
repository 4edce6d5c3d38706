//! Single-file tensor archives (safetensors) with a JSON metadata blob.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::{Dtype, SafeTensors, View};

use crate::error::{Error, Result};

/// A named `f32` array in host memory.
#[derive(Debug, Clone, PartialEq)]
pub struct HostTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

struct F32View<'a> {
    shape: &'a [usize],
    data: &'a [f32],
}

impl View for F32View<'_> {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    fn shape(&self) -> &[usize] {
        self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Owned(self.data.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    fn data_len(&self) -> usize {
        self.data.len() * 4
    }
}

const METADATA_KEY: &str = "state";

fn err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `tensors` plus `metadata` atomically (temporary file, then rename).
pub fn save(path: &Path, tensors: &BTreeMap<String, HostTensor>, metadata: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let views = tensors.iter().map(|(k, t)| {
        (
            k.clone(),
            F32View {
                shape: &t.shape,
                data: &t.data,
            },
        )
    });
    let meta = HashMap::from([(METADATA_KEY.to_string(), metadata.to_string())]);
    let tmp = path.with_extension("partial");
    safetensors::serialize_to_file(views, Some(meta), &tmp).map_err(|e| err(path, e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads every tensor (converted to `f32`) and the metadata blob.
pub fn load(path: &Path) -> Result<(BTreeMap<String, HostTensor>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| err(path, e.to_string()))?;
    let metadata = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY).cloned())
        .ok_or_else(|| err(path, "missing state metadata"))?;
    let archive = SafeTensors::deserialize(&bytes).map_err(|e| err(path, e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in archive.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(err(path, format!("{name}: unsupported dtype {:?}", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.insert(
            name,
            HostTensor {
                shape: view.shape().to_vec(),
                data,
            },
        );
    }
    Ok((out, metadata))
}
