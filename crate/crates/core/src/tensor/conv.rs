//! im2col convolution kernels. One gemm per batch entry, in batch order.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatView, Scalar};

pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel > size + 2 * padding {
        return None;
    }
    Some((size + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and kernel, got {x:?} and {w:?}"),
            ));
        }
        if x[1] != w[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but kernel {w:?} expects {}", x[1], w[1]),
            ));
        }
        if w[2] != w[3] {
            return Err(Error::shape("conv2d", format!("non-square kernel {w:?}")));
        }
        let k = w[2];
        let ho = conv_output_size(x[2], k, stride, pad);
        let wo = conv_output_size(x[3], k, stride, pad);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok(ConvGeom {
                n: x[0],
                cin: x[1],
                h: x[2],
                w: x[3],
                cout: w[0],
                k,
                stride,
                pad,
                ho,
                wo,
            }),
            _ => Err(Error::shape(
                "conv2d",
                format!("kernel {k} stride {stride} padding {pad} does not fit input {x:?}"),
            )),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad`
/// falls inside the image.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kj {
        (g.w + g.pad - kj - 1) / g.stride + 1
    } else {
        0
    };
    (lo.min(g.wo), hi.min(g.wo))
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw = g.out_hw();
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let ix0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (i, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[ix0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let hw = g.out_hw();
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kj - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w + ix0;
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dx[base..base + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in line.iter().enumerate() {
                            dx[base + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w) + b` with square kernels, symmetric zero padding.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d_forward_cols(x, w, b, stride, padding, false).map(|(y, _)| y)
}

/// Forward pass that optionally keeps the unfolded input of every batch
/// entry (`[N, Cin*k*k, Ho*Wo]`) for reuse by the kernel gradient.
pub(crate) fn conv2d_forward_cols<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    keep_cols: bool,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, padding)?;
    if let Some(b) = b {
        if b.shape() != [g.cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} for {} output channels", b.shape(), g.cout),
            ));
        }
    }
    let hw = g.out_hw();
    let patch = g.patch();
    let keep = keep_cols && !g.is_pointwise();
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    let per = if g.is_pointwise() { 0 } else { patch * hw };
    let mut cols = vec![T::zero(); if keep { g.n * per } else { per }];
    for n in 0..g.n {
        let xn = &x.data()[n * g.in_len()..(n + 1) * g.in_len()];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            let buf = if keep {
                &mut cols[n * per..(n + 1) * per]
            } else {
                &mut cols[..]
            };
            im2col(&g, xn, buf);
            buf
        };
        let yn = &mut out[n * g.cout * hw..(n + 1) * g.cout * hw];
        if let Some(b) = b {
            for (co, chunk) in yn.chunks_mut(hw).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        gemm(
            w.data(),
            MatView::row_major(g.cout, patch),
            src,
            MatView::row_major(patch, hw),
            T::one(),
            yn,
            MatView::row_major(g.cout, hw),
        );
    }
    let y = Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)?;
    Ok((y, keep.then_some(cols)))
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
    dy: &Tensor<T>,
    saved_cols: Option<&[T]>,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, padding)?;
    let hw = g.out_hw();
    let patch = g.patch();
    let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.numel()]);
    if let Some(saved) = saved_cols {
        if saved.len() != g.n * patch * hw {
            return Err(Error::shape("conv2d", "saved columns do not match the geometry"));
        }
    }
    let fresh = need_dw && saved_cols.is_none() && !g.is_pointwise();
    let mut cols = vec![T::zero(); if fresh { patch * hw } else { 0 }];
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { patch * hw } else { 0 }];
    for n in 0..g.n {
        let dyn_ = &dy.data()[n * g.cout * hw..(n + 1) * g.cout * hw];
        if let Some(dw) = dw.as_mut() {
            let xn = &x.data()[n * g.in_len()..(n + 1) * g.in_len()];
            let src: &[T] = if g.is_pointwise() {
                xn
            } else if let Some(saved) = saved_cols {
                &saved[n * patch * hw..(n + 1) * patch * hw]
            } else {
                im2col(&g, xn, &mut cols);
                &cols
            };
            // dW += dY_n * cols^T
            gemm(
                dyn_,
                MatView::row_major(g.cout, hw),
                src,
                MatView::transposed(patch, hw),
                T::one(),
                dw,
                MatView::row_major(g.cout, patch),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * g.in_len()..(n + 1) * g.in_len()];
            if g.is_pointwise() {
                gemm(
                    w.data(),
                    MatView::transposed(g.cout, patch),
                    dyn_,
                    MatView::row_major(g.cout, hw),
                    T::one(),
                    dxn,
                    MatView::row_major(patch, hw),
                );
            } else {
                gemm(
                    w.data(),
                    MatView::transposed(g.cout, patch),
                    dyn_,
                    MatView::row_major(g.cout, hw),
                    T::zero(),
                    &mut dcols,
                    MatView::row_major(patch, hw),
                );
                col2im_add(&g, &dcols, dxn);
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = (n * g.cout + co) * hw;
                for &v in &dy.data()[off..off + hw] {
                    *acc += v;
                }
            }
        }
        db
    });
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        dw: dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
        db: db.map(|d| Tensor::new(vec![g.cout], d)).transpose()?,
    })
}
