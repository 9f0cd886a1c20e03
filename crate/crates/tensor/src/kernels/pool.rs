use crate::error::{config_err, Result};
use crate::{Element, Tensor};

/// Window bounds along one axis: [floor(i·n/out), floor((i+1)·n/out)).
pub fn adaptive_window(i: usize, n: usize, out: usize) -> (usize, usize) {
    (i * n / out, (i + 1) * n / out)
}

pub fn adaptive_avg_pool<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    const OP: &str = "adaptive_avg_pool";
    let (n, c, h, w) = x.dims4(OP)?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(config_err(
            OP,
            format!("output {out_h}×{out_w} must be between 1×1 and the input {h}×{w}"),
        ));
    }
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for i in 0..out_h {
            let (r0, r1) = adaptive_window(i, h, out_h);
            for j in 0..out_w {
                let (c0, c1) = adaptive_window(j, w, out_w);
                let mut acc = T::zero();
                for r in r0..r1 {
                    for v in &plane[r * w + c0..r * w + c1] {
                        acc = acc + *v;
                    }
                }
                out.push(acc / T::lit(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

pub fn adaptive_avg_pool_grad<T: Element>(gy: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let (_, _, out_h, out_w) = gy.dims4("adaptive_avg_pool")?;
    let (h, w) = (input_shape[2], input_shape[3]);
    let mut gx = vec![T::zero(); input_shape.iter().product()];
    for (gplane, xplane) in gy.data().chunks(out_h * out_w).zip(gx.chunks_mut(h * w)) {
        for i in 0..out_h {
            let (r0, r1) = adaptive_window(i, h, out_h);
            for j in 0..out_w {
                let (c0, c1) = adaptive_window(j, w, out_w);
                let share = gplane[i * out_w + j] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                for r in r0..r1 {
                    for v in &mut xplane[r * w + c0..r * w + c1] {
                        *v = *v + share;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Max pooling with implicit −∞ padding. Returns the flat input index of
/// each selected element (first maximum in scan order on ties).
pub fn max_pool2d<T: Element>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    const OP: &str = "max_pool2d";
    let (n, c, h, w) = x.dims4(OP)?;
    if kernel == 0 || stride == 0 || 2 * pad > kernel {
        return Err(config_err(
            OP,
            format!("invalid pooling k={kernel} s={stride} p={pad} (need k,s ≥ 1 and 2p ≤ k)"),
        ));
    }
    let oh = super::conv::conv_out_extent(h, kernel, stride, pad)
        .ok_or_else(|| config_err(OP, format!("window {kernel} larger than padded input {h}×{w}")))?;
    let ow = super::conv::conv_out_extent(w, kernel, stride, pad)
        .ok_or_else(|| config_err(OP, format!("window {kernel} larger than padded input {h}×{w}")))?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for a in 0..kernel {
                    let r = (i * stride + a) as isize - pad as isize;
                    if r < 0 || r as usize >= h {
                        continue;
                    }
                    for b in 0..kernel {
                        let col = (j * stride + b) as isize - pad as isize;
                        if col < 0 || col as usize >= w {
                            continue;
                        }
                        let idx = r as usize * w + col as usize;
                        if best_idx == usize::MAX || plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(p * h * w + best_idx);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, arg))
}

pub fn max_pool2d_grad<T: Element>(gy: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<T>> {
    let mut gx = vec![T::zero(); input_shape.iter().product()];
    for (&g, &idx) in gy.data().iter().zip(argmax) {
        gx[idx] = gx[idx] + g;
    }
    Tensor::new(input_shape.to_vec(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_mean() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(adaptive_avg_pool(&x, 1, 1).unwrap().data(), &[2.5]);
    }

    #[test]
    fn row_index_map_by_enumeration() {
        // 4×4 map whose value is its row index; 2×2 windows are rows {0,1} and {2,3}.
        let x = Tensor::<f64>::from_fn([1, 1, 4, 4], |i| (i / 4) as f64);
        let y = adaptive_avg_pool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 2.5, 2.5]);
    }

    #[test]
    fn uneven_partition_covers_every_cell_once() {
        for (n, out) in [(5, 2), (7, 3), (6, 4), (3, 3)] {
            let mut seen = vec![0; n];
            for i in 0..out {
                let (a, b) = adaptive_window(i, n, out);
                assert!(a < b);
                for s in &mut seen[a..b] {
                    *s += 1;
                }
            }
            assert!(seen.iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn rejects_oversize_output() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert!(adaptive_avg_pool(&x, 3, 1).is_err());
        assert!(adaptive_avg_pool(&x, 0, 1).is_err());
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::<f32>::from_fn([1, 1, 4, 4], |i| i as f32);
        let (y, arg) = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
        let (y, _) = max_pool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }
}
