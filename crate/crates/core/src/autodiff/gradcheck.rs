//! Central finite-difference check of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check over one or more input blocks.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// block and flat index of the worst coordinate
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.shape() != [1, 1] {
        return Err(Error::Evaluation(format!(
            "function must be scalar-valued, got shape {:?}",
            v.shape()
        )));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::Evaluation(format!("f(x) = {y} is not finite")));
    }
    Ok(y)
}

/// Checks the gradient of a scalar function of several tensors.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Evaluation(format!("step must be positive, got {h}")));
    }
    eval(&f, inputs)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (block, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[block].rows(), inputs[block].cols()));
        for i in 0..inputs[block].len() {
            let x0 = inputs[block].data()[i];
            probe[block].data_mut()[i] = x0 + h;
            let up = eval(&f, &probe)?;
            probe[block].data_mut()[i] = x0 - h;
            let down = eval(&f, &probe)?;
            probe[block].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (block, i);
            }
        }
    }
    Ok(report)
}

/// Max relative error of the tape gradient of `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), h)?;
    Ok(report.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &Tensor::row(&[3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn tanh_chain_depth_three() {
        let err = grad_check(
            |t, x| {
                let a = t.tanh(x);
                let b = t.tanh(a);
                let c = t.tanh(b);
                Ok(t.sum(c))
            },
            &Tensor::row(&[0.3, -1.2, 0.7]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_value_is_evaluation_error() {
        let r = grad_check(
            |t, x| {
                let l = t.log_clamped(x, 0.0);
                Ok(t.sum(l))
            },
            &Tensor::row(&[0.0]),
            1e-5,
        );
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        let r = grad_check(|t, x| Ok(t.sum(x)), &Tensor::row(&[1.0]), 0.0);
        assert!(r.is_err());
    }
}
