//! Dense building blocks shared by the backbone: LayerNorm, Linear, and the
//! token-wise two-layer MLP.

use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::tensor::{Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;

pub(crate) const INIT_STD: f64 = 0.02;

/// Normalization over the trailing channel axis, population variance,
/// default epsilon 1e-5.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let gamma = fw.bind(&format!("{}.gamma", self.name), &self.gamma)?;
        let beta = fw.bind(&format!("{}.beta", self.name), &self.beta)?;
        fw.tape.layer_norm(x, gamma, beta, T::from_f64(self.eps))
    }

    pub fn param_count(&self) -> u64 {
        (self.gamma.numel() + self.beta.numel()) as u64
    }

    pub(crate) fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{}.gamma", self.name), &self.gamma));
        out.push((format!("{}.beta", self.name), &self.beta));
    }

    pub(crate) fn for_each_mut(
        &mut self,
        f: &mut dyn FnMut(&str, &mut Tensor<T>) -> Result<()>,
    ) -> Result<()> {
        f(&format!("{}.gamma", self.name), &mut self.gamma)?;
        f(&format!("{}.beta", self.name), &mut self.beta)
    }
}

/// Row-vector linear map `y = x W (+ b)` applied over the trailing axis.
/// Leading axes are flattened for the product and restored afterwards.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    name: String,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(
        name: impl Into<String>,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            name: name.into(),
            weight: Tensor::randn(&[in_dim, out_dim], INIT_STD, rng),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn zeros(name: impl Into<String>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            weight: Tensor::zeros(&[in_dim, out_dim]),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn with_weights(
        name: impl Into<String>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::Shape(format!(
                "linear weight must be rank 2, got {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[1]] {
                return Err(Error::Shape(format!(
                    "linear bias {:?} does not match weight {:?}",
                    b.shape(),
                    weight.shape()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            weight,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let shape = fw.tape.value(x).shape().to_vec();
        let last = *shape.last().ok_or_else(|| {
            Error::shape("linear", "input must have at least one axis")
        })?;
        if last != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear '{}' expects trailing extent {}, got {:?}",
                self.name,
                self.in_dim(),
                shape
            )));
        }
        let rows = fw.tape.value(x).numel() / last;
        let flat = fw.tape.reshape(x, &[rows, last])?;
        let w = fw.bind(&format!("{}.weight", self.name), &self.weight)?;
        let mut y = fw.tape.matmul(flat, w)?;
        if let Some(bias) = &self.bias {
            let b = fw.bind(&format!("{}.bias", self.name), bias)?;
            y = fw.tape.add_vec(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.out_dim();
        fw.tape.reshape(y, &out_shape)
    }

    pub fn param_count(&self) -> u64 {
        (self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)) as u64
    }

    /// MACs for `rows` input rows; bias adds are not counted.
    pub fn macs(&self, rows: u64) -> u64 {
        rows * self.in_dim() as u64 * self.out_dim() as u64
    }

    pub(crate) fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{}.weight", self.name), &self.weight));
        if let Some(b) = &self.bias {
            out.push((format!("{}.bias", self.name), b));
        }
    }

    pub(crate) fn for_each_mut(
        &mut self,
        f: &mut dyn FnMut(&str, &mut Tensor<T>) -> Result<()>,
    ) -> Result<()> {
        f(&format!("{}.weight", self.name), &mut self.weight)?;
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.name), b)?;
        }
        Ok(())
    }
}

/// Two bias-free linear layers with GELU between, applied per token.
#[derive(Debug, Clone)]
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn init(name: &str, channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::init(format!("{name}.fc1"), channels, hidden, false, rng),
            fc2: Linear::init(format!("{name}.fc2"), hidden, channels, false, rng),
        }
    }

    pub fn zeros(name: &str, channels: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::zeros(format!("{name}.fc1"), channels, hidden, false),
            fc2: Linear::zeros(format!("{name}.fc2"), hidden, channels, false),
        }
    }

    pub fn forward(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(fw, x)?;
        let h = fw.tape.gelu(h)?;
        self.fc2.forward(fw, h)
    }

    pub fn param_count(&self) -> u64 {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn macs(&self, tokens: u64) -> u64 {
        self.fc1.macs(tokens) + self.fc2.macs(tokens)
    }

    pub(crate) fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.fc1.collect(out);
        self.fc2.collect(out);
    }

    pub(crate) fn for_each_mut(
        &mut self,
        f: &mut dyn FnMut(&str, &mut Tensor<T>) -> Result<()>,
    ) -> Result<()> {
        self.fc1.for_each_mut(f)?;
        self.fc2.for_each_mut(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;

    #[test]
    fn linear_applies_over_trailing_axis() {
        let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let lin = Linear::with_weights("l", w, Some(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap())).unwrap();
        let mut tape = Tape::<f64>::new();
        let mut fw = Forward::eval(&mut tape);
        let x = fw.tape.constant(Tensor::new(vec![2, 2, 2], vec![1.0; 8]).unwrap());
        let y = lin.forward(&mut fw, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2, 3]);
        // each row is [1,1]: y = [1+4, 2+5, 3+6] + 1
        assert_eq!(&tape.value(y).data()[..3], &[6.0, 8.0, 10.0]);
    }

    #[test]
    fn mlp_param_count_is_bias_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::<f64>::init("m", 8, 32, &mut rng);
        assert_eq!(mlp.param_count(), 2 * 8 * 32);
        assert_eq!(mlp.macs(10), 2 * 10 * 8 * 32);
    }
}
