//! Central finite-difference verification of graph gradients.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms. Central
/// differences at step 1e-5 carry roundoff near 1e-11 for O(1) outputs.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Upper bound on perturbed entries per input; `None` checks every entry.
    pub max_probes: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_probes: None,
        }
    }
}

/// Agreement between autodiff and finite differences for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    /// `max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞, SCALE_FLOOR)`
    /// over probed entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub probed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    /// Set when the function produced a non-finite value at any evaluation.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error() < tol
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(TensorError::Contract("gradient check needs a scalar function".into()));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences for every input tensor.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = match f(&mut g, &vars) {
        Ok(v) => v,
        Err(TensorError::NonFinite { .. }) => {
            return Ok(GradCheckReport {
                inputs: Vec::new(),
                non_finite: true,
            })
        }
        Err(e) => return Err(e),
    };
    let grads = g.backward(out)?;
    let mut report = GradCheckReport {
        inputs: Vec::with_capacity(inputs.len()),
        non_finite: false,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, v) in vars.iter().enumerate() {
        let analytic = grads.wrt_or_zero(*v);
        let n = inputs[idx].len();
        let stride = match opts.max_probes {
            Some(m) if m > 0 && m < n => n.div_ceil(m),
            _ => 1,
        };
        let mut max_abs = 0.0f64;
        let mut scale = 0.0f64;
        let mut probed = 0;
        for e in (0..n).step_by(stride) {
            let orig = inputs[idx].data()[e];
            work[idx].data_mut()[e] = orig + opts.step;
            let plus = evaluate(&f, &work);
            work[idx].data_mut()[e] = orig - opts.step;
            let minus = evaluate(&f, &work);
            work[idx].data_mut()[e] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(TensorError::NonFinite { .. }), _) | (_, Err(TensorError::NonFinite { .. })) | (Ok(_), Ok(_)) => {
                    report.non_finite = true;
                    continue;
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[e];
            max_abs = max_abs.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            probed += 1;
        }
        let max_rel_error = max_abs / scale.max(SCALE_FLOOR);
        report.inputs.push(InputCheck {
            max_rel_error,
            max_abs_error: max_abs,
            probed,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let report = check_gradients(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.inputs[0].max_rel_error, 0.0);
        assert_eq!(report.inputs[0].max_abs_error, 0.0);
    }

    #[test]
    fn probe_limit_is_respected() {
        let x = Tensor::ones(&[100]);
        let opts = GradCheckOptions {
            max_probes: Some(10),
            ..Default::default()
        };
        let report = check_gradients(|g, v| g.sum(v[0]), &[x], opts).unwrap();
        assert_eq!(report.inputs[0].probed, 10);
    }
}
