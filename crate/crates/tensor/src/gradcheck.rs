//! Central finite differences and a per-operator gradient self-check.
//!
//! Checks run in `f64`: at h = 1e-3 an `f32` forward pass cannot resolve
//! relative gradient errors near 1e-3, while the `f64` instantiation of the
//! same kernels can.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, OpKind, Var};
use crate::kernels::Activation;
use crate::{Element, Tensor};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// (f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h for every element i.
pub fn finite_difference<T: Element>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    let all: Vec<usize> = (0..x.numel()).collect();
    let values = finite_difference_at(&mut f, x, h, &all)?;
    Tensor::new(x.shape().to_vec(), values)
}

/// Central differences at selected flat indices only.
pub fn finite_difference_at<T: Element>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: T,
    indices: &[usize],
) -> Result<Vec<T>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (h + h));
    }
    Ok(out)
}

/// Largest elementwise relative error between an analytic gradient and a
/// numeric one.
///
/// Each denominator is max(|a|, |n|, floor) with the floor at 1e-3 of the
/// largest numeric magnitude (and never below 1e-7), so components that
/// are zero up to roundoff do not dominate the measure.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-7);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Builder,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so ReLU kinks stay out of reach of ±h.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced well beyond 2h so max-pool selections are stable.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).expect("shape")
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let u = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);
    vec![
        Case {
            name: "conv2d",
            inputs: vec![u(rng, &[2, 3, 4, 4]), u(rng, &[5, 3, 3, 3]), u(rng, &[5])],
            build: Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        },
        Case {
            name: "conv_transpose2d",
            inputs: vec![u(rng, &[2, 4, 3, 3]), u(rng, &[4, 3, 4, 4]), u(rng, &[3])],
            build: Box::new(|g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)),
        },
        Case {
            name: "adaptive_avg_pool",
            inputs: vec![u(rng, &[2, 3, 4, 4])],
            build: Box::new(|g, v| g.adaptive_avg_pool(v[0], 3, 2)),
        },
        Case {
            name: "max_pool2d",
            inputs: vec![distinct(rng, &[2, 2, 4, 4])],
            build: Box::new(|g, v| g.max_pool2d(v[0], 3, 2, 1)),
        },
        Case {
            name: "batch_norm_train",
            inputs: vec![u(rng, &[3, 4, 2, 2]), uniform(rng, &[4], 0.5, 1.5), u(rng, &[4])],
            build: Box::new(|g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y)),
        },
        Case {
            name: "batch_norm_eval",
            inputs: vec![u(rng, &[2, 4, 2, 2]), uniform(rng, &[4], 0.5, 1.5), u(rng, &[4])],
            build: Box::new(|g, v| {
                let mean = Tensor::new([4], vec![0.1, -0.2, 0.0, 0.3])?;
                let var = Tensor::new([4], vec![0.5, 1.0, 2.0, 0.8])?;
                g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
            }),
        },
        Case {
            name: "linear",
            inputs: vec![u(rng, &[3, 8]), u(rng, &[6, 8]), u(rng, &[6])],
            build: Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        },
        Case {
            name: "relu",
            inputs: vec![off_kink(rng, &[2, 3, 4, 4])],
            build: Box::new(|g, v| Ok(g.activation(v[0], Activation::Relu))),
        },
        Case {
            name: "tanh",
            inputs: vec![u(rng, &[2, 3, 4, 4])],
            build: Box::new(|g, v| Ok(g.activation(v[0], Activation::Tanh))),
        },
        Case {
            name: "unit_range",
            inputs: vec![u(rng, &[2, 3, 4, 4])],
            build: Box::new(|g, v| Ok(g.activation(v[0], Activation::UnitRange))),
        },
        Case {
            name: "add",
            inputs: vec![u(rng, &[2, 3, 2, 2]), u(rng, &[2, 3, 2, 2])],
            build: Box::new(|g, v| g.add(v[0], v[1])),
        },
        Case {
            name: "scale",
            inputs: vec![u(rng, &[2, 3, 2, 2])],
            build: Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
        },
        Case {
            name: "reshape",
            inputs: vec![u(rng, &[2, 8])],
            build: Box::new(|g, v| g.reshape(v[0], [2, 2, 2, 2])),
        },
        Case {
            name: "concat_channels",
            inputs: vec![u(rng, &[2, 2, 3, 3]), u(rng, &[2, 3, 3, 3])],
            build: Box::new(|g, v| g.concat_channels(&[v[0], v[1]])),
        },
        Case {
            name: "tile_2x2",
            inputs: (0..4).map(|_| u(rng, &[2, 3, 2, 2])).collect(),
            build: Box::new(|g, v| g.tile_2x2([v[0], v[1], v[2], v[3]])),
        },
        Case {
            name: "resize_bilinear",
            inputs: vec![u(rng, &[2, 2, 3, 4])],
            build: Box::new(|g, v| g.resize_bilinear(v[0], 7, 5)),
        },
        Case {
            name: "mse",
            inputs: vec![u(rng, &[2, 3, 2, 2]), u(rng, &[2, 3, 2, 2])],
            build: Box::new(|g, v| g.mse(v[0], v[1])),
        },
    ]
}

/// Returns the graph and `[output-or-loss, inputs...]`.
fn evaluate(
    case: &Case,
    inputs: &[Tensor<f64>],
    target: Option<&Tensor<f64>>,
    fault: Option<OpKind>,
) -> Result<(Graph<f64>, Vec<Var>)> {
    let mut g = Graph::new();
    if let Some(kind) = fault {
        g.inject_sign_flip(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = match target {
        // Non-scalar outputs are reduced against a fixed random target so
        // every output element carries a distinct upstream gradient.
        Some(t) => {
            let tv = g.constant(t.clone());
            g.mse(out, tv)?
        }
        None => out,
    };
    Ok((g, vec![loss].into_iter().chain(vars).collect()))
}

fn run_case(case: &Case, rng: &mut ChaCha8Rng, fault: Option<OpKind>, tolerance: f64) -> Result<OperatorCheck> {
    let (probe, probe_vars) = evaluate(case, &case.inputs, None, None)?;
    let out_shape = probe.value(probe_vars[0]).shape().to_vec();
    let target = (!out_shape.is_empty()).then(|| uniform(rng, &out_shape, -1.0, 1.0));

    let (mut g, vars) = evaluate(case, &case.inputs, target.as_ref(), fault)?;
    g.backward(vars[0])?;

    let mut worst = 0.0f64;
    for (idx, &v) in vars[1..].iter().enumerate() {
        let analytic: Vec<f64> = g.grad(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; case.inputs[idx].numel()]);
        let numeric = finite_difference(
            |x| {
                let mut inputs = case.inputs.clone();
                inputs[idx] = x.clone();
                let (g, v) = evaluate(case, &inputs, target.as_ref(), None)?;
                g.value(v[0]).item()
            },
            &case.inputs[idx],
            DEFAULT_STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic, numeric.data()));
    }
    Ok(OperatorCheck {
        name: case.name.to_string(),
        max_rel_err: worst,
        passed: worst <= tolerance,
    })
}

/// Compare backward against central differences for every operator on
/// small random tensors.
pub fn check_operators(seed: u64) -> Result<Vec<OperatorCheck>> {
    check_operators_with_fault(seed, None)
}

/// As [`check_operators`], but with the backward pass of `fault` negated.
pub fn check_operators_with_fault(seed: u64, fault: Option<OpKind>) -> Result<Vec<OperatorCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = cases(&mut rng);
    cases
        .iter()
        .map(|c| run_case(c, &mut rng, fault, DEFAULT_TOLERANCE))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_difference(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-3).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-5);
    }

    #[test]
    fn linear_function_is_exact_for_any_step() {
        let x = Tensor::<f64>::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let coeffs = [2.0, -0.25, 4.0];
        for h in [1e-1, 1e-3, 0.5] {
            let g = finite_difference(
                |t| Ok(t.data().iter().zip(coeffs).map(|(a, c)| a * c).sum()),
                &x,
                h,
            )
            .unwrap();
            for (got, want) in g.data().iter().zip(coeffs) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relative_error_ignores_roundoff_sized_components() {
        assert_eq!(max_relative_error(&[1.0, 0.0], &[1.0, 1e-14]), 1e-14 / 1e-3);
        assert!(max_relative_error(&[1.0], &[-1.0]) >= 2.0 - 1e-12);
    }

    #[test]
    fn every_operator_passes() {
        for c in check_operators(11).unwrap() {
            assert!(c.passed, "{} rel err {}", c.name, c.max_rel_err);
        }
    }

    #[test]
    fn sign_flip_is_detected() {
        let checks = check_operators_with_fault(11, Some(OpKind::Relu)).unwrap();
        for c in checks {
            assert_eq!(c.passed, c.name != "relu", "{} {}", c.name, c.max_rel_err);
        }
    }
}
