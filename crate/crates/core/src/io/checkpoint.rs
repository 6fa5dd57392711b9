//! Checkpoint container.
//!
//! ```text
//! "DPLD" | u32 version | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 dtype | u8 ndim | u32 dims[ndim] | payload
//! u32 crc32 of everything above
//! ```
//!
//! dtype 0 is f32 and 1 is f64. dtype 2 is a single u64 metadata value
//! (ndim 0), used for counters such as completed DP-SGD steps.

use std::collections::BTreeMap;
use std::path::Path;

use super::{check_crc, payload_len, push_crc, read_file, write_file, Reader};
use crate::adapters::adapter_layer;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPLD";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_META: u8 = 2;

/// Tensors plus integer metadata. Loaded tensors are all trainable; the
/// caller re-applies its freeze policy.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint<T> {
    pub store: ParamStore<T>,
    pub meta: BTreeMap<String, u64>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(store: ParamStore<T>) -> Self {
        Checkpoint {
            store,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: u64) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    /// Copies every tensor of this (adapter or trainable-only) checkpoint
    /// onto `base`. Adapter tensors require their base layer's weight;
    /// other tensors must already exist in `base` with the same shape.
    pub fn apply_to(&self, base: &mut ParamStore<T>) -> Result<()> {
        for (name, p) in self.store.iter() {
            match adapter_layer(name) {
                Some(layer) => {
                    let w = format!("{layer}.weight");
                    if !base.contains(&w) {
                        return Err(Error::MissingTensor(w));
                    }
                }
                None => {
                    let have = base.tensor(name)?;
                    if have.shape() != p.tensor.shape() {
                        return Err(Error::shape(
                            "checkpoint",
                            format!(
                                "`{name}` is {:?} in the base but {:?} here",
                                have.shape(),
                                p.tensor.shape()
                            ),
                        ));
                    }
                }
            }
            base.set(name, p.tensor.clone(), true);
        }
        Ok(())
    }
}

fn push_header(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize]) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(u8::try_from(dims.len()).map_err(|_| Error::invalid(format!("`{name}` has too many dimensions")))?);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("`{name}` dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

/// Serializes `store` (only trainable tensors when `trainable_only`) and
/// `meta`. Entries appear in name order, tensors first.
pub fn encode_checkpoint<T: Scalar>(
    store: &ParamStore<T>,
    meta: &BTreeMap<String, u64>,
    trainable_only: bool,
) -> Result<Vec<u8>> {
    let entries: Vec<_> = store.iter().filter(|(_, p)| p.trainable || !trainable_only).collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(entries.len() + meta.len()).map_err(|_| Error::invalid("too many entries"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, p) in entries {
        push_header(&mut out, name, T::DTYPE, p.tensor.shape())?;
        for &v in p.tensor.data() {
            v.write_le(&mut out);
        }
    }
    for (name, &v) in meta {
        push_header(&mut out, name, DTYPE_META, &[])?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    push_crc(&mut out);
    Ok(out)
}

fn read_values<T: Scalar, S: Scalar>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(S::BYTES)
        .map(|c| T::lit(S::read_le(c).to_f64_lossy()))
        .collect()
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let body = check_crc(bytes)?;
    let mut r = Reader::new(body);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("entry count")?;
    let mut ck = Checkpoint::<T>::default();
    for _ in 0..count {
        let at = r.offset();
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let at = r.offset();
        let dtype = r.u8("dtype")?;
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dimension")? as usize);
        }
        if ck.store.contains(&name) || ck.meta.contains_key(&name) {
            return Err(Error::format(at, format!("duplicate entry `{name}`")));
        }
        match dtype {
            0 | 1 => {
                if ndim == 0 || dims.contains(&0) {
                    return Err(Error::format(at, format!("`{name}` has empty shape {dims:?}")));
                }
                let elem = if dtype == 0 { 4 } else { 8 };
                let n = payload_len(&dims, elem, at)?;
                let raw = r.take(n, "tensor payload")?;
                let data = if dtype == 0 {
                    read_values::<T, f32>(raw)
                } else {
                    read_values::<T, f64>(raw)
                };
                ck.store.insert(name, Tensor::new(dims, data)?, true)?;
            }
            DTYPE_META => {
                if ndim != 0 {
                    return Err(Error::format(at, format!("metadata `{name}` must be a scalar")));
                }
                let raw = r.take(8, "metadata value")?;
                ck.meta
                    .insert(name, u64::from_le_bytes(raw.try_into().expect("8 bytes")));
            }
            other => return Err(Error::format(at, format!("unknown dtype code {other}"))),
        }
    }
    r.finish()?;
    Ok(ck)
}

pub fn save_checkpoint<T: Scalar>(
    store: &ParamStore<T>,
    meta: &BTreeMap<String, u64>,
    path: &Path,
    trainable_only: bool,
) -> Result<u64> {
    let bytes = encode_checkpoint(store, meta, trainable_only)?;
    write_file(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&read_file(path)?)
}
