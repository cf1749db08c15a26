//! Per-pass context tying named model parameters to tape variables.
//!
//! A layer asks for its parameters through [`Forward::bind`]; the first
//! request for a name inserts the tensor as a tape leaf, later requests
//! (for example the second sample of a batch) reuse the same variable so
//! gradients accumulate in one place per parameter.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub struct Forward<'t, T: Scalar> {
    pub tape: &'t mut Tape<T>,
    train: bool,
    trainable: bool,
    binds: HashMap<String, Var>,
    order: Vec<String>,
    snapshot: Vec<(String, Tensor<T>)>,
    overrides: HashMap<String, Tensor<T>>,
    rng: Option<&'t mut ChaCha8Rng>,
}

impl<'t, T: Scalar> Forward<'t, T> {
    /// Inference pass: no gradients, no stochastic regularization.
    pub fn eval(tape: &'t mut Tape<T>) -> Self {
        Self::build(tape, false, false, None)
    }

    /// Training pass: gradients on, drop-path driven by `rng`.
    pub fn train(tape: &'t mut Tape<T>, rng: &'t mut ChaCha8Rng) -> Self {
        Self::build(tape, true, true, Some(rng))
    }

    /// Deterministic pass with gradients, used by gradient checking.
    pub fn trainable(tape: &'t mut Tape<T>) -> Self {
        Self::build(tape, false, true, None)
    }

    fn build(
        tape: &'t mut Tape<T>,
        train: bool,
        trainable: bool,
        rng: Option<&'t mut ChaCha8Rng>,
    ) -> Self {
        Self {
            tape,
            train,
            trainable,
            binds: HashMap::new(),
            order: Vec::new(),
            snapshot: Vec::new(),
            overrides: HashMap::new(),
            rng,
        }
    }

    /// Replace the value bound under `name` for this pass only. Used by the
    /// finite-difference checker to perturb one parameter element.
    pub fn with_override(mut self, name: &str, value: Tensor<T>) -> Self {
        self.overrides.insert(name.to_string(), value);
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Bind a named parameter, inserting it as a leaf on first use.
    pub fn bind(&mut self, name: &str, value: &Tensor<T>) -> Result<Var> {
        if let Some(&v) = self.binds.get(name) {
            return Ok(v);
        }
        let chosen = match self.overrides.get(name) {
            Some(o) => {
                if o.shape() != value.shape() {
                    return Err(Error::Shape(format!(
                        "override for '{name}' has shape {:?}, parameter is {:?}",
                        o.shape(),
                        value.shape()
                    )));
                }
                o.clone()
            }
            None => value.clone(),
        };
        self.snapshot.push((name.to_string(), chosen.clone()));
        let var = self.tape.leaf(chosen, self.trainable);
        self.binds.insert(name.to_string(), var);
        self.order.push(name.to_string());
        Ok(var)
    }

    /// Bound (name, var) pairs in first-bind order.
    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order
            .iter()
            .map(move |n| (n.as_str(), self.binds[n]))
    }

    /// Parameter values as they were bound this pass.
    pub fn snapshot(&self) -> &[(String, Tensor<T>)] {
        &self.snapshot
    }

    /// Bernoulli draw for drop-path. Only meaningful while training.
    pub fn sample_drop(&mut self, rate: f64) -> Result<bool> {
        let rng = self.rng.as_mut().ok_or_else(|| {
            Error::Train("stochastic depth requires an RNG; use Forward::train".into())
        })?;
        Ok(rng.gen::<f64>() < rate)
    }
}

/// Residual add `x + branch(x)` with stochastic depth. While training with
/// `rate > 0` the branch is skipped entirely with probability `rate` and
/// rescaled by `1/(1-rate)` otherwise, so the expectation matches eval.
pub fn residual_branch<T: Scalar>(
    fw: &mut Forward<T>,
    x: Var,
    rate: f64,
    branch: impl FnOnce(&mut Forward<T>) -> Result<Var>,
) -> Result<Var> {
    if fw.is_train() && rate > 0.0 {
        if fw.sample_drop(rate)? {
            return Ok(x);
        }
        let b = branch(fw)?;
        let b = fw.tape.scale(b, T::from_f64(1.0 / (1.0 - rate)))?;
        return fw.tape.add(x, b);
    }
    let b = branch(fw)?;
    fw.tape.add(x, b)
}
