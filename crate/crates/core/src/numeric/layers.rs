use rand::Rng;

use super::tensor::{debug_check_finite, Real, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, bias zero.
    KaimingUniform,
    /// `U(-bound, bound)` for the weight, bias zero.
    Uniform(f64),
    Zeros,
}

/// Fully connected layer `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut impl Rng) -> Self {
        let bound = match init {
            Init::KaimingUniform => (6.0 / fan_in.max(1) as f64).sqrt(),
            Init::Uniform(b) => b,
            Init::Zeros => 0.0,
        };
        let weight: Vec<T> = (0..fan_in * fan_out)
            .map(|_| {
                if bound > 0.0 {
                    T::of(rng.random_range(-bound..bound))
                } else {
                    T::zero()
                }
            })
            .collect();
        Self::from_parts(
            name,
            Tensor::from_vec(&[fan_in, fan_out], weight).expect("sized above"),
            Tensor::zeros(&[fan_out]),
        )
        .expect("shapes agree")
    }

    pub fn from_parts(name: &str, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (_, out) = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::config(format!(
                "{name}: bias shape {:?} does not match {out} outputs",
                bias.shape()
            )));
        }
        Ok(Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
            input: None,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// Forward pass without caching; safe to share across threads.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, m) = x.dims2()?;
        let (wm, n) = self.weight.value.dims2()?;
        if m != wm {
            return Err(Error::config(format!(
                "{}: input width {m} does not match layer fan-in {wm}",
                self.weight.name
            )));
        }
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let xr = x.row(r);
            let start = out.len();
            out.extend_from_slice(b);
            let yr = &mut out[start..];
            for (k, &xv) in xr.iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                let wk = &w[k * n..(k + 1) * n];
                for (y, &wv) in yr.iter_mut().zip(wk) {
                    *y = *y + xv * wv;
                }
            }
        }
        let y = Tensor::from_vec(&[rows, n], out)?;
        debug_check_finite(&y, "linear forward");
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.apply(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    /// Accumulates `dW = x^T g`, `db = sum_rows g` and returns `g W^T`.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| {
            Error::Usage(format!("{}: backward called before forward", self.weight.name))
        })?;
        let (rows, m) = x.dims2()?;
        let n = self.fan_out();
        if grad_out.shape() != [rows, n] {
            return Err(Error::config(format!(
                "{}: gradient shape {:?} does not match output [{rows}, {n}]",
                self.weight.name,
                grad_out.shape()
            )));
        }
        let w = self.weight.value.data();
        let mut grad_in = vec![T::zero(); rows * m];
        {
            let gw = self.weight.grad.data_mut();
            for r in 0..rows {
                let g = grad_out.row(r);
                let xr = x.row(r);
                for k in 0..m {
                    let wk = &w[k * n..(k + 1) * n];
                    let mut acc = T::zero();
                    for (&gv, &wv) in g.iter().zip(wk) {
                        acc = acc + gv * wv;
                    }
                    grad_in[r * m + k] = acc;
                    let xv = xr[k];
                    for (gwv, &gv) in gw[k * n..(k + 1) * n].iter_mut().zip(g) {
                        *gwv = *gwv + xv * gv;
                    }
                }
            }
        }
        let gb = self.bias.grad.data_mut();
        for r in 0..rows {
            for (b, &gv) in gb.iter_mut().zip(grad_out.row(r)) {
                *b = *b + gv;
            }
        }
        let g = Tensor::from_vec(&[rows, m], grad_in)?;
        debug_check_finite(&g, "linear backward");
        Ok(g)
    }

    pub fn params(&self) -> [&Parameter<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[derive(Clone, Debug, Default)]
pub struct Gelu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Real> Gelu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(gelu)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input = Some(x.clone());
        self.apply(x)
    }

    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| Error::Usage("gelu: backward called before forward".into()))?;
        if x.shape() != grad_out.shape() {
            return Err(Error::config("gelu: gradient shape mismatch"));
        }
        let data = x
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&xv, &g)| g * gelu_grad(xv))
            .collect();
        Tensor::from_vec(x.shape(), data)
    }
}

/// `linear -> GELU -> linear`, the building block of every head.
#[derive(Clone, Debug)]
pub struct Mlp2<T> {
    pub first: Linear<T>,
    pub act: Gelu<T>,
    pub second: Linear<T>,
}

impl<T: Real> Mlp2<T> {
    pub fn new(
        name: &str,
        widths: [usize; 3],
        init: [Init; 2],
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            first: Linear::new(&format!("{name}.0"), widths[0], widths[1], init[0], rng),
            act: Gelu::new(),
            second: Linear::new(&format!("{name}.1"), widths[1], widths[2], init[1], rng),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.first.apply(x)?;
        self.second.apply(&self.act.apply(&h))
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.first.forward(x)?;
        let a = self.act.forward(&h);
        self.second.forward(&a)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.second.backward(grad_out)?;
        let g = self.act.backward(&g)?;
        self.first.backward(&g)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = self.first.params().to_vec();
        v.extend(self.second.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<_> = self.first.params_mut().into_iter().collect();
        v.extend(self.second.params_mut());
        v
    }
}
