//! Checkpoint container: `u32` entry count, then per entry a `u16` name
//! length, the UTF-8 name, and a `TNSR` blob. All integers little-endian.
//! Adapter entries use the `lora.{block}.{target}.` prefix.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::model::{ModelState, ViTConfig};
use crate::tensor::{Cursor, Scalar, Tensor};

pub fn encode_entries<T: Scalar>(entries: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Contract("too many checkpoint entries".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("entry name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&t.to_tnsr());
    }
    Ok(out)
}

pub fn decode_entries<T: Scalar>(bytes: &[u8]) -> Result<IndexMap<String, Tensor<T>>> {
    let mut cur = Cursor::new(bytes, 0);
    let count = cur.u32("entry count")?;
    let mut out = IndexMap::new();
    for _ in 0..count {
        let len = cur.u16("name length")? as usize;
        let name_at = cur.abs_pos();
        let name = std::str::from_utf8(cur.take(len, "entry name")?)
            .map_err(|_| Error::Parse {
                offset: name_at,
                msg: "entry name is not UTF-8".into(),
            })?
            .to_string();
        let (t, used) = Tensor::from_tnsr(cur.rest(), cur.abs_pos())?;
        cur.advance(used);
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Parse {
                offset: name_at,
                msg: format!("duplicate entry {name}"),
            });
        }
    }
    if cur.remaining() != 0 {
        return Err(cur.error_here("trailing bytes after last entry"));
    }
    Ok(out)
}

/// Model tensors (registry order) followed by adapter tensors.
pub fn checkpoint_entries<T: Scalar>(
    model: &ModelState<T>,
    adapters: Option<&AdapterSet<T>>,
) -> Vec<(String, Tensor<T>)> {
    let mut entries: Vec<(String, Tensor<T>)> =
        model.params().map(|p| (p.name.clone(), p.tensor.clone())).collect();
    if let Some(a) = adapters {
        entries.extend(a.named_tensors());
    }
    entries
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    model: &ModelState<T>,
    adapters: Option<&AdapterSet<T>>,
) -> Result<()> {
    let bytes = encode_entries(&checkpoint_entries(model, adapters))?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written for `cfg`. The model part must carry exactly
/// the parameter names `cfg` implies; adapters are optional.
pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    cfg: &ViTConfig,
) -> Result<(ModelState<T>, Option<AdapterSet<T>>)> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode_checkpoint(&bytes, cfg)
}

pub fn decode_checkpoint<T: Scalar>(
    bytes: &[u8],
    cfg: &ViTConfig,
) -> Result<(ModelState<T>, Option<AdapterSet<T>>)> {
    let mut entries = decode_entries::<T>(bytes)?;
    let adapters = AdapterSet::from_named_tensors(&mut entries)?;
    let model = ModelState::from_tensors(cfg.clone(), entries)?;
    Ok((model, (!adapters.is_empty()).then_some(adapters)))
}
