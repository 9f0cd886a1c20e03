//! Convolution and transposed convolution through im2col / col2im.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{config_err, Result};
use crate::{Element, Tensor};

/// Geometry of a strided, zero-padded 2-D correlation over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        channels: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(config_err(op, "stride must be at least 1"));
        }
        let out_h = conv_out_extent(h, kh, stride, pad)
            .ok_or_else(|| config_err(op, format!("non-positive output height: H={h} k={kh} s={stride} p={pad}")))?;
        let out_w = conv_out_extent(w, kw, stride, pad)
            .ok_or_else(|| config_err(op, format!("non-positive output width: W={w} k={kw} s={stride} p={pad}")))?;
        Ok(Self {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// floor((size + 2p − k)/s) + 1, or `None` when that is not positive.
pub fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// (size − 1)·s − 2p + k, or `None` when that is not positive.
pub fn conv_transpose_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let grown = (size.checked_sub(1)?) * stride + k;
    grown.checked_sub(2 * pad).filter(|&e| e >= 1)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii as usize >= g.h {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj as usize >= g.w {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[jj as usize] = dst[jj as usize] + src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(config_err(
                op,
                format!("bias shape {:?} does not match {channels} output channels", b.shape()),
            ));
        }
    }
    Ok(())
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

/// Validated shapes for `conv2d`: (N, geometry, C_out).
pub fn conv2d_geom<T: Element>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<(usize, ConvGeom, usize)> {
    const OP: &str = "conv2d";
    let (n, c, h, wd) = x.dims4(OP)?;
    let (co, ci, kh, kw) = w.dims4(OP)?;
    if ci != c {
        return Err(config_err(
            OP,
            format!("input has {c} channels but weight expects {ci} (weight shape {:?})", w.shape()),
        ));
    }
    let g = ConvGeom::new(OP, c, (h, wd), (kh, kw), stride, pad)?;
    Ok((n, g, co))
}

pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, g, co) = conv2d_geom(x, w, stride, pad)?;
    check_bias("conv2d", bias, co)?;
    let in_sz = g.channels * g.h * g.w;
    let out_plane = g.col_cols();
    let mut out = vec![T::zero(); n * co * out_plane];
    let mut col = vec![T::zero(); g.col_rows() * out_plane];
    for s in 0..n {
        im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &g, &mut col);
        let dst = &mut out[s * co * out_plane..(s + 1) * co * out_plane];
        gemm_nn(co, g.col_rows(), out_plane, w.data(), &col, dst);
        if let Some(b) = bias {
            add_bias(dst, b.data(), out_plane);
        }
    }
    Tensor::new([n, co, g.out_h, g.out_w], out)
}

/// Gradient of `conv2d` with respect to its input, i.e. the adjoint map.
pub fn conv2d_input_grad<T: Element>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, wd) = match *input_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(config_err("conv2d", "input shape must be 4-D")),
    };
    let (co, _, kh, kw) = w.dims4("conv2d")?;
    let g = ConvGeom::new("conv2d", c, (h, wd), (kh, kw), stride, pad)?;
    let out_plane = g.col_cols();
    let in_sz = c * h * wd;
    let mut gx = vec![T::zero(); n * in_sz];
    let mut col = vec![T::zero(); g.col_rows() * out_plane];
    for s in 0..n {
        col.fill(T::zero());
        gemm_tn(
            g.col_rows(),
            co,
            out_plane,
            w.data(),
            &gy.data()[s * co * out_plane..(s + 1) * co * out_plane],
            &mut col,
        );
        col2im(&col, &g, &mut gx[s * in_sz..(s + 1) * in_sz]);
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Gradient of `conv2d` with respect to its weight.
pub fn conv2d_weight_grad<T: Element>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    weight_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, wd) = x.dims4("conv2d")?;
    let (co, kh, kw) = match *weight_shape {
        [co, _, kh, kw] => (co, kh, kw),
        _ => return Err(config_err("conv2d", "weight shape must be 4-D")),
    };
    let g = ConvGeom::new("conv2d", c, (h, wd), (kh, kw), stride, pad)?;
    let out_plane = g.col_cols();
    let in_sz = c * h * wd;
    let mut gw = vec![T::zero(); co * g.col_rows()];
    let mut col = vec![T::zero(); g.col_rows() * out_plane];
    for s in 0..n {
        im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &g, &mut col);
        gemm_nt(
            co,
            out_plane,
            g.col_rows(),
            &gy.data()[s * co * out_plane..(s + 1) * co * out_plane],
            &col,
            &mut gw,
        );
    }
    Tensor::new(weight_shape.to_vec(), gw)
}

/// Per-channel sum over batch and spatial axes (bias gradient).
pub fn channel_sums<T: Element>(gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = gy.dims4("bias-grad")?;
    let plane = h * w;
    let mut out = vec![T::zero(); c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let start = (s * c + ch) * plane;
            *o = *o + gy.data()[start..start + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::new([c], out)
}

/// Shapes for `conv_transpose2d`: (N, geometry of the adjoint conv, C_in, C_out).
///
/// The returned geometry describes the ordinary convolution whose adjoint
/// this is: its input is the transposed-conv output.
pub fn conv_transpose2d_geom<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, ConvGeom, usize, usize)> {
    const OP: &str = "conv_transpose2d";
    let (n, c, h, wd) = x.dims4(OP)?;
    let (ci, co, kh, kw) = w.dims4(OP)?;
    if ci != c {
        return Err(config_err(
            OP,
            format!("input has {c} channels but weight expects {ci} (weight shape {:?})", w.shape()),
        ));
    }
    if stride == 0 {
        return Err(config_err(OP, "stride must be at least 1"));
    }
    let oh = conv_transpose_out_extent(h, kh, stride, pad)
        .ok_or_else(|| config_err(OP, format!("non-positive output height: H={h} k={kh} s={stride} p={pad}")))?;
    let ow = conv_transpose_out_extent(wd, kw, stride, pad)
        .ok_or_else(|| config_err(OP, format!("non-positive output width: W={wd} k={kw} s={stride} p={pad}")))?;
    let g = ConvGeom::new(OP, co, (oh, ow), (kh, kw), stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, wd));
    Ok((n, g, ci, co))
}

pub fn conv_transpose2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, g, ci, co) = conv_transpose2d_geom(x, w, stride, pad)?;
    check_bias("conv_transpose2d", bias, co)?;
    let in_plane = g.col_cols();
    let out_sz = co * g.h * g.w;
    let mut out = vec![T::zero(); n * out_sz];
    let mut col = vec![T::zero(); g.col_rows() * in_plane];
    for s in 0..n {
        col.fill(T::zero());
        gemm_tn(
            g.col_rows(),
            ci,
            in_plane,
            w.data(),
            &x.data()[s * ci * in_plane..(s + 1) * ci * in_plane],
            &mut col,
        );
        let dst = &mut out[s * out_sz..(s + 1) * out_sz];
        col2im(&col, &g, dst);
        if let Some(b) = bias {
            add_bias(dst, b.data(), g.h * g.w);
        }
    }
    Tensor::new([n, co, g.h, g.w], out)
}

/// Gradient of `conv_transpose2d` with respect to its input: a plain
/// strided convolution of the upstream gradient with the same weight.
pub fn conv_transpose2d_input_grad<T: Element>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d(gy, w, None, stride, pad)
}

pub fn conv_transpose2d_weight_grad<T: Element>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    weight_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, ci, h, wd) = x.dims4("conv_transpose2d")?;
    let (_, co, oh, ow) = gy.dims4("conv_transpose2d")?;
    let (kh, kw) = match *weight_shape {
        [_, _, kh, kw] => (kh, kw),
        _ => return Err(config_err("conv_transpose2d", "weight shape must be 4-D")),
    };
    let g = ConvGeom::new("conv_transpose2d", co, (oh, ow), (kh, kw), stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, wd));
    let in_plane = h * wd;
    let out_sz = co * oh * ow;
    let mut gw = vec![T::zero(); ci * g.col_rows()];
    let mut col = vec![T::zero(); g.col_rows() * in_plane];
    for s in 0..n {
        im2col(&gy.data()[s * out_sz..(s + 1) * out_sz], &g, &mut col);
        gemm_nt(
            ci,
            in_plane,
            g.col_rows(),
            &x.data()[s * ci * in_plane..(s + 1) * ci * in_plane],
            &col,
            &mut gw,
        );
    }
    Tensor::new(weight_shape.to_vec(), gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop correlation used as an independent reference.
    fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4("t").unwrap();
        let (co, _, kh, kw) = w.dims4("t").unwrap();
        let oh = conv_out_extent(h, kh, stride, pad).unwrap();
        let ow = conv_out_extent(wd, kw, stride, pad).unwrap();
        let mut out = vec![0.0; n * co * oh * ow];
        for s in 0..n {
            for o in 0..co {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for a in 0..kh {
                                for b in 0..kw {
                                    let ii = (i * stride + a) as isize - pad as isize;
                                    let jj = (j * stride + b) as isize - pad as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                        acc += x.data()[((s * c + ch) * h + ii as usize) * wd + jj as usize]
                                            * w.data()[((o * c + ch) * kh + a) * kw + b];
                                    }
                                }
                            }
                        }
                        out[((s * co + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        Tensor::new([n, co, oh, ow], out).unwrap()
    }

    fn wave(shape: &[usize], phase: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + phase) * 0.731).sin())
    }

    #[test]
    fn im2col_matches_direct_loops() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (4, 2, 0), (1, 1, 0), (5, 3, 2)] {
            let x = wave(&[2, 3, 7, 6], 0.3);
            let w = wave(&[4, 3, k, k], 1.7);
            let got = conv2d(&x, &w, None, s, p).unwrap();
            let want = direct_conv(&x, &w, s, p);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn transposed_extent_formula() {
        assert_eq!(conv_transpose_out_extent(4, 3, 2, 1), Some(7));
        assert_eq!(conv_transpose_out_extent(13, 4, 2, 0), Some(28));
        assert_eq!(conv_transpose_out_extent(1, 1, 1, 1), None);
    }

    #[test]
    fn mismatched_channels_name_the_dims() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros([2, 5, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("3 channels") && err.contains("expects 5"), "{err}");
    }

    #[test]
    fn oversize_kernel_is_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros([1, 1, 5, 5]);
        assert!(conv2d(&x, &w, None, 1, 0).is_err());
    }
}
