//! Labeled dataset container.
//!
//! ```text
//! u32 0x00000D04  images magic
//! u32 version
//! u32 N, C, H, W
//! u8  pixels[N*C*H*W]      value = round((x + 1) / 2 * 255)
//! u32 0x00000C01  labels magic
//! u32 N
//! u32 num_classes
//! i32 labels[N]
//! u32 crc32 of everything above
//! ```

use std::path::Path;

use super::{check_crc, payload_len, push_crc, read_file, write_file, Reader};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::io::pgm::pixel_to_u8;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0D04;
pub const LABELS_MAGIC: u32 = 0x0000_0C01;
const VERSION: u32 = 1;

pub fn encode_dataset(d: &LabeledDataset) -> Vec<u8> {
    let shape = d.images.shape();
    let mut out = Vec::with_capacity(d.images.numel() + 4 * d.len() + 48);
    out.extend_from_slice(&IMAGES_MAGIC.to_le_bytes());
    out.extend_from_slice(&VERSION.to_le_bytes());
    for &s in shape {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    out.extend(d.images.data().iter().map(|&v| pixel_to_u8(v as f64)));
    out.extend_from_slice(&LABELS_MAGIC.to_le_bytes());
    out.extend_from_slice(&(d.len() as u32).to_le_bytes());
    out.extend_from_slice(&(d.num_classes as u32).to_le_bytes());
    for &l in &d.labels {
        out.extend_from_slice(&(l as i32).to_le_bytes());
    }
    push_crc(&mut out);
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    let body = check_crc(bytes)?;
    let mut r = Reader::new(body);
    let magic = r.u32("images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad images magic {magic:#010x}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = r.u32("image dimension")? as usize;
    }
    if dims.contains(&0) {
        return Err(Error::format(r.offset(), format!("zero image dimension in {dims:?}")));
    }
    let n = payload_len(&dims, 1, r.offset())?;
    let pixels = r.take(n, "pixels")?;
    let images = Tensor::new(
        dims.to_vec(),
        pixels.iter().map(|&p| (p as f32) / 255.0 * 2.0 - 1.0).collect(),
    )?;
    let at = r.offset();
    let magic = r.u32("labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(at, format!("bad labels magic {magic:#010x}")));
    }
    let at = r.offset();
    let count = r.u32("label count")? as usize;
    if count != dims[0] {
        return Err(Error::format(at, format!("{count} labels for {} images", dims[0])));
    }
    let num_classes = r.u32("class count")? as usize;
    let mut labels = Vec::with_capacity(count.min(r.remaining() / 4));
    for _ in 0..count {
        let at = r.offset();
        let l = r.i32("label")?;
        if l < 0 || l as usize >= num_classes {
            return Err(Error::format(at, format!("label {l} outside [0, {num_classes})")));
        }
        labels.push(l as usize);
    }
    r.finish()?;
    LabeledDataset::new(images, labels, num_classes)
}

pub fn write_dataset(d: &LabeledDataset, path: &Path) -> Result<()> {
    write_file(path, &encode_dataset(d))
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    decode_dataset(&read_file(path)?)
}
