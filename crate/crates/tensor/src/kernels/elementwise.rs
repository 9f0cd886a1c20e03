use crate::error::{config_err, Result};
use crate::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    /// (tanh(x) + 1) / 2, mapping onto [0, 1].
    UnitRange,
}

impl Activation {
    pub fn apply<T: Element>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Tanh => v.tanh(),
            Activation::UnitRange => (v.tanh() + T::one()) * T::lit(0.5),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    pub fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::UnitRange => T::lit(2.0) * y * (T::one() - y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::UnitRange => "unit_range",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "unit_range" => Ok(Activation::UnitRange),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

pub fn activation<T: Element>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

pub fn activation_grad<T: Element>(gy: &Tensor<T>, x: &Tensor<T>, y: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let (g, xs, ys) = (gy.data(), x.data(), y.data());
    Tensor::from_fn(x.shape().to_vec(), |i| g[i] * kind.derivative(xs[i], ys[i]))
}

pub fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(config_err(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let (x, y) = (a.data(), b.data());
    Ok(Tensor::from_fn(a.shape().to_vec(), |i| x[i] + y[i]))
}

pub fn scale<T: Element>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    a.map(|v| v * factor)
}

/// Mean of squared differences over every element.
pub fn mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    same_shape("mse", a, b)?;
    if a.numel() == 0 {
        return Err(config_err("mse", "empty tensors"));
    }
    let sum = a
        .data()
        .iter()
        .zip(b.data())
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
    Ok(sum / T::lit(a.numel() as f64))
}

/// Gradient of `mse` with respect to `a` scaled by the upstream scalar.
pub fn mse_grad<T: Element>(a: &Tensor<T>, b: &Tensor<T>, upstream: T) -> Tensor<T> {
    let k = T::lit(2.0) * upstream / T::lit(a.numel() as f64);
    let (x, y) = (a.data(), b.data());
    Tensor::from_fn(a.shape().to_vec(), |i| k * (x[i] - y[i]))
}
