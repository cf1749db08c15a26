//! Central finite-difference validation of analytic gradients.

use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::tensor::{Tape, Tensor, Var};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error with a unit scale clamp: |a-n| / max(1, |a|, |n|).
/// The clamp turns the comparison absolute for tiny gradients, where the
/// difference quotient itself carries ~1e-11 of roundoff noise.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

/// Check the analytic gradient of a scalar-valued function against central
/// finite differences.
///
/// `build` receives a [`Forward`] context and must return the loss variable;
/// any parameter it binds by name is checked element by element with a
/// `+h/-h` perturbation. `build` must be deterministic.
pub fn finite_diff_check<F>(build: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Forward<f64>) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let mut fw = Forward::trainable(&mut tape);
    let loss = build(&mut fw)?;
    let params: Vec<(String, Tensor<f64>)> = fw.snapshot().to_vec();
    let vars: HashMap<String, Var> = fw.bindings().map(|(n, v)| (n.to_string(), v)).collect();
    let base_loss = tape.scalar_value(loss)?;
    if !base_loss.is_finite() {
        return Err(Error::NonFinite("loss in gradient check".into()));
    }
    tape.backward(loss)?;
    let analytic: HashMap<String, Vec<f64>> = params
        .iter()
        .map(|(n, t)| {
            let g = tape
                .grad(vars[n])
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (n.clone(), g)
        })
        .collect();

    let eval_at = |name: &str, perturbed: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&mut tape).with_override(name, perturbed);
        let loss = build(&mut fw)?;
        let v = tape.scalar_value(loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss while perturbing '{name}' in gradient check"
            )));
        }
        Ok(v)
    };

    let mut per_param = Vec::with_capacity(params.len());
    let mut worst = 0.0f64;
    for (name, base) in &params {
        let grads = &analytic[name];
        let mut param_worst = 0.0f64;
        for i in 0..base.numel() {
            let x0 = base.data()[i];
            let mut plus = base.clone();
            plus.data_mut()[i] = x0 + h;
            let lp = eval_at(name, plus)?;
            let mut minus = base.clone();
            minus.data_mut()[i] = x0 - h;
            let lm = eval_at(name, minus)?;
            let numeric = (lp - lm) / (2.0 * h);
            let e = rel_err(grads[i], numeric);
            if e > param_worst {
                param_worst = e;
            }
        }
        if param_worst > worst {
            worst = param_worst;
        }
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: param_worst,
        });
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: worst,
        tol,
    })
}
