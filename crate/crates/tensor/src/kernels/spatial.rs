//! Layout operators: bilinear resize, channel concatenation, 2×2 tiling.

use crate::error::{config_err, Result};
use crate::{Element, Tensor};

/// Source taps for one output coordinate: (low index, high index, weight of high).
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

/// Half-pixel centres (no corner alignment); sources left of the first
/// centre clamp to it.
fn taps<T: Element>(input: usize, output: usize) -> Vec<Tap<T>> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: T::lit(src - lo as f64),
            }
        })
        .collect()
}

/// Bilinear resize of the two trailing axes of an N×C×H×W tensor.
pub fn resize_bilinear<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("resize_bilinear")?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(config_err("resize_bilinear", format!("cannot resize {h}×{w} to {out_h}×{out_w}")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rows = taps::<T>(h, out_h);
    let cols = taps::<T>(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for r in &rows {
            let (top, bottom) = (&plane[r.lo * w..(r.lo + 1) * w], &plane[r.hi * w..(r.hi + 1) * w]);
            for q in &cols {
                let upper = top[q.lo] + (top[q.hi] - top[q.lo]) * q.frac;
                let lower = bottom[q.lo] + (bottom[q.hi] - bottom[q.lo]) * q.frac;
                out.push(upper + (lower - upper) * r.frac);
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

pub fn resize_bilinear_grad<T: Element>(gy: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let (_, _, out_h, out_w) = gy.dims4("resize_bilinear")?;
    let (h, w) = (input_shape[2], input_shape[3]);
    if (h, w) == (out_h, out_w) {
        return gy.reshape(input_shape.to_vec());
    }
    let rows = taps::<T>(h, out_h);
    let cols = taps::<T>(w, out_w);
    let mut gx = vec![T::zero(); input_shape.iter().product()];
    let one = T::one();
    for (gplane, xplane) in gy.data().chunks(out_h * out_w).zip(gx.chunks_mut(h * w)) {
        for (i, r) in rows.iter().enumerate() {
            for (j, q) in cols.iter().enumerate() {
                let g = gplane[i * out_w + j];
                let (wr_lo, wr_hi) = (one - r.frac, r.frac);
                let (wc_lo, wc_hi) = (one - q.frac, q.frac);
                xplane[r.lo * w + q.lo] = xplane[r.lo * w + q.lo] + g * wr_lo * wc_lo;
                xplane[r.lo * w + q.hi] = xplane[r.lo * w + q.hi] + g * wr_lo * wc_hi;
                xplane[r.hi * w + q.lo] = xplane[r.hi * w + q.lo] + g * wr_hi * wc_lo;
                xplane[r.hi * w + q.hi] = xplane[r.hi * w + q.hi] + g * wr_hi * wc_hi;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Concatenate N×Cᵢ×H×W tensors along the channel axis.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let first = parts.first().ok_or_else(|| config_err(OP, "nothing to concatenate"))?;
    let (n, _, h, w) = first.dims4(OP)?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4(OP)?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(config_err(
                OP,
                format!("part {:?} does not match batch/spatial extents of {:?}", p.shape(), first.shape()),
            ));
        }
        total_c += pc;
    }
    let mut out = Vec::with_capacity(n * total_c * h * w);
    for s in 0..n {
        for p in parts {
            let sz = p.shape()[1] * h * w;
            out.extend_from_slice(&p.data()[s * sz..(s + 1) * sz]);
        }
    }
    Tensor::new([n, total_c, h, w], out)
}

/// Split a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<T: Element>(gy: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = gy.dims4("concat_channels")?;
    debug_assert_eq!(c, channels.iter().sum::<usize>());
    let mut outs: Vec<Vec<T>> = channels.iter().map(|&pc| Vec::with_capacity(n * pc * h * w)).collect();
    for sample in gy.data().chunks(c * h * w) {
        let mut off = 0;
        for (o, &pc) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&sample[off..off + pc * h * w]);
            off += pc * h * w;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &pc)| Tensor::new([n, pc, h, w], d))
        .collect()
}

/// Place four equally shaped N×C×h×w maps on a 2×2 grid, row-major
/// (`[0, 1; 2, 3]`), giving N×C×2h×2w.
pub fn tile_2x2<T: Element>(parts: [&Tensor<T>; 4]) -> Result<Tensor<T>> {
    const OP: &str = "tile_2x2";
    let (n, c, h, w) = parts[0].dims4(OP)?;
    for p in &parts[1..] {
        if p.shape() != parts[0].shape() {
            return Err(config_err(OP, format!("tiles {:?} and {:?} differ", parts[0].shape(), p.shape())));
        }
    }
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (t, p) in parts.iter().enumerate() {
        let (ti, tj) = (t / 2, t % 2);
        for (plane_idx, plane) in p.data().chunks(h * w).enumerate() {
            let dst = &mut out[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
            for r in 0..h {
                let row = (ti * h + r) * ow + tj * w;
                dst[row..row + w].copy_from_slice(&plane[r * w..(r + 1) * w]);
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

pub fn untile_2x2<T: Element>(gy: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
    let (n, c, oh, ow) = gy.dims4("tile_2x2")?;
    let (h, w) = (oh / 2, ow / 2);
    let mut outs: [Vec<T>; 4] = Default::default();
    for plane in gy.data().chunks(oh * ow) {
        for (t, o) in outs.iter_mut().enumerate() {
            let (ti, tj) = (t / 2, t % 2);
            for r in 0..h {
                let row = (ti * h + r) * ow + tj * w;
                o.extend_from_slice(&plane[row..row + w]);
            }
        }
    }
    let [a, b, c2, d] = outs;
    let mk = |v| Tensor::new([n, c, h, w], v);
    Ok([mk(a)?, mk(b)?, mk(c2)?, mk(d)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_is_bitwise() {
        let x = Tensor::<f32>::from_fn([1, 3, 5, 4], |i| (i as f32).sin());
        assert_eq!(resize_bilinear(&x, 5, 4).unwrap(), x);
    }

    #[test]
    fn checker_to_three_by_three_centre() {
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let y = resize_bilinear(&x, 3, 3).unwrap();
        assert!((y.data()[4] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_image_stays_constant() {
        let x = Tensor::<f32>::full([2, 3, 7, 9], 0.37);
        let y = resize_bilinear(&x, 12, 5).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn tile_order_is_row_major() {
        let parts: Vec<Tensor<f32>> = (0..4).map(|t| Tensor::full([1, 1, 1, 1], t as f32)).collect();
        let y = tile_2x2([&parts[0], &parts[1], &parts[2], &parts[3]]).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
        let back = untile_2x2(&y).unwrap();
        for (b, p) in back.iter().zip(&parts) {
            assert_eq!(b, p);
        }
    }

    #[test]
    fn concat_then_split_roundtrip() {
        let a = Tensor::<f32>::from_fn([2, 1, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn([2, 3, 2, 2], |i| -(i as f32));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 4, 2, 2]);
        let parts = split_channels(&cat, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
