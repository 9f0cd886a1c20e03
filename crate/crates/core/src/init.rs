//! Orthogonal weight initialization.

use pyrad_tensor::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Stable 64-bit seed for a named parameter under a base seed (FNV-1a).
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Draw a weight whose flattening to `shape[0] × fan_in` has orthonormal
/// rows (when rows ≤ fan_in) or orthonormal columns (otherwise).
///
/// A Gaussian matrix is orthonormalized with modified Gram–Schmidt in f64;
/// sign ambiguity is fixed by making the diagonal of the implied R factor
/// positive, so the result is Haar-distributed and deterministic per seed.
pub fn orthogonal_init<T: Element>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    if shape.len() < 2 {
        return Err(Error::Config(format!("orthogonal init needs a matrix-like shape, got {shape:?}")));
    }
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    if rows == 0 || cols == 0 {
        return Err(Error::Config(format!("orthogonal init of degenerate shape {shape:?}")));
    }
    let (long, short) = (rows.max(cols), rows.min(cols));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // `short` vectors of length `long` to orthonormalize.
    let mut v: Vec<Vec<f64>> = (0..short)
        .map(|_| (0..long).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for i in 0..short {
        let (done, rest) = v.split_at_mut(i);
        let cur = &mut rest[0];
        for q in done.iter() {
            let d: f64 = q.iter().zip(cur.iter()).map(|(a, b)| a * b).sum();
            for (c, a) in cur.iter_mut().zip(q) {
                *c -= d * a;
            }
        }
        let norm = cur.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric("orthogonal init hit a rank-deficient draw".into()));
        }
        for c in cur.iter_mut() {
            *c /= norm;
        }
    }
    let mut out = vec![T::zero(); rows * cols];
    for (i, q) in v.iter().enumerate() {
        for (j, &a) in q.iter().enumerate() {
            let (r, c) = if rows <= cols { (i, j) } else { (j, i) };
            out[r * cols + c] = T::lit(a);
        }
    }
    Ok(Tensor::new(shape.to_vec(), out)?)
}

/// Largest |(Q·Qᵀ or Qᵀ·Q) − I| entry over the smaller side, in f64.
pub fn orthogonality_defect<T: Element>(w: &Tensor<T>) -> f64 {
    let rows = w.shape()[0];
    let cols = w.numel() / rows.max(1);
    let d: Vec<f64> = w.data().iter().map(|v| v.to_f64_lossy()).collect();
    let at = |r: usize, c: usize| d[r * cols + c];
    let small = rows.min(cols);
    let mut worst = 0.0f64;
    for a in 0..small {
        for b in 0..=a {
            let dot: f64 = if rows <= cols {
                (0..cols).map(|k| at(a, k) * at(b, k)).sum()
            } else {
                (0..rows).map(|k| at(k, a) * at(k, b)).sum()
            };
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_orthogonal() {
        let w = orthogonal_init::<f32>(&[8, 8], 3).unwrap();
        assert!(orthogonality_defect(&w) <= 1e-5);
    }

    #[test]
    fn single_row_has_unit_norm() {
        let w = orthogonal_init::<f32>(&[1, 17], 5).unwrap();
        let n: f32 = w.data().iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conv_weight_rows_orthonormal() {
        let w = orthogonal_init::<f32>(&[16, 8, 3, 3], 11).unwrap();
        // independent Gram-matrix check
        let d = w.data();
        for a in 0..16 {
            for b in 0..16 {
                let dot: f64 = (0..72).map(|k| d[a * 72 + k] as f64 * d[b * 72 + k] as f64).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() <= 1e-5, "({a},{b}) {dot}");
            }
        }
    }

    #[test]
    fn tall_matrices_have_orthonormal_columns() {
        let w = orthogonal_init::<f32>(&[128, 8], 2).unwrap();
        assert!(orthogonality_defect(&w) <= 1e-5);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = orthogonal_init::<f32>(&[4, 6], 9).unwrap();
        let b = orthogonal_init::<f32>(&[4, 6], 9).unwrap();
        let c = orthogonal_init::<f32>(&[4, 6], 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_shapes_rejected() {
        assert!(orthogonal_init::<f32>(&[4], 0).is_err());
        assert!(orthogonal_init::<f32>(&[0, 3], 0).is_err());
        assert!(orthogonal_init::<f32>(&[3, 0, 1, 1], 0).is_err());
    }

    #[test]
    fn derived_seeds_depend_on_name() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }
}
