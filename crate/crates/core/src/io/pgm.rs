//! Binary PGM export of image grids.

use std::path::Path;

use super::write_file;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Maps `[-1, 1]` to `[0, 255]`, clamping outside values.
pub fn pixel_to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Tiles `[N, 1, H, W]` samples row-major, `per_row` images per grid row,
/// under a one-line `P5 <w> <h> 255` header.
pub fn encode_image_grid<T: Scalar>(samples: &Tensor<T>, per_row: usize) -> Result<Vec<u8>> {
    let s = samples.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("image grid", format!("expected [N, 1, H, W], got {s:?}")));
    }
    if per_row == 0 {
        return Err(Error::invalid("image grid needs at least one column"));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let cols = per_row.min(n);
    let rows = n.div_ceil(per_row);
    let (gw, gh) = (cols * w, rows * h);
    let mut pixels = vec![0u8; gw * gh];
    for (i, img) in samples.data().chunks(h * w).enumerate() {
        let (gr, gc) = (i / per_row, i % per_row);
        for y in 0..h {
            for x in 0..w {
                pixels[(gr * h + y) * gw + gc * w + x] = pixel_to_u8(img[y * w + x].to_f64_lossy());
            }
        }
    }
    let mut out = format!("P5 {gw} {gh} 255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn export_image_grid<T: Scalar>(samples: &Tensor<T>, per_row: usize, path: &Path) -> Result<()> {
    write_file(path, &encode_image_grid(samples, per_row)?)
}
