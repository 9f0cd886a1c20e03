use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::error::{config_err, Result};
use crate::{Element, Tensor};

/// out = x·Wᵀ + b for x: N×F_in, W: F_out×F_in.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    const OP: &str = "linear";
    let (n, f_in) = match *x.shape() {
        [n, f] => (n, f),
        _ => return Err(config_err(OP, format!("input must be N×F, got {:?}", x.shape()))),
    };
    let (f_out, w_in) = match *w.shape() {
        [o, i] => (o, i),
        _ => return Err(config_err(OP, format!("weight must be F_out×F_in, got {:?}", w.shape()))),
    };
    if w_in != f_in {
        return Err(config_err(
            OP,
            format!("input has {f_in} features but weight {:?} expects {w_in}", w.shape()),
        ));
    }
    let mut out = vec![T::zero(); n * f_out];
    if let Some(b) = bias {
        if b.shape() != [f_out] {
            return Err(config_err(OP, format!("bias {:?} must have length {f_out}", b.shape())));
        }
        for row in out.chunks_mut(f_out) {
            row.copy_from_slice(b.data());
        }
    }
    gemm_nt(n, f_in, f_out, x.data(), w.data(), &mut out);
    Tensor::new([n, f_out], out)
}

/// (grad input, grad weight, grad bias)
pub fn linear_grad<T: Element>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, f_in) = (x.shape()[0], x.shape()[1]);
    let f_out = w.shape()[0];
    let mut gx = vec![T::zero(); n * f_in];
    gemm_nn(n, f_out, f_in, gy.data(), w.data(), &mut gx);
    let mut gw = vec![T::zero(); f_out * f_in];
    gemm_tn(f_out, n, f_in, gy.data(), x.data(), &mut gw);
    let mut gb = vec![T::zero(); f_out];
    for row in gy.data().chunks(f_out) {
        for (b, &g) in gb.iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    Ok((
        Tensor::new([n, f_in], gx)?,
        Tensor::new([f_out, f_in], gw)?,
        Tensor::new([f_out], gb)?,
    ))
}
