//! Central finite-difference verification of tape gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Relative step: `h = step * max(1, |x|)`, rounded down to a power of
    /// two so that `x ± h` is exact.
    pub step: f64,
    /// Check at most this many coordinates per input (sampled), or all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

fn eval<F, E>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, E>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = tape.value(out);
    match value.item() {
        Some(v) if v.is_finite() => Ok(v),
        Some(_) => Err(TensorError::NonFinite { op: "gradient_check" }.into()),
        None => Err(TensorError::NotScalar {
            shape: value.shape().to_vec(),
        }
        .into()),
    }
}

/// Compares the tape gradient of scalar `f` at `inputs` against central
/// differences. The error per coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradient_check<F, E>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    {
        let v = tape.value(out);
        if !v.all_finite() {
            return Err(TensorError::NonFinite { op: "gradient_check" }.into());
        }
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let x = input.data()[i];
            let h = (opts.step * x.abs().max(1.0)).log2().floor().exp2();
            probe[which].data_mut()[i] = x + h;
            let up = eval(&f, &probe)?;
            probe[which].data_mut()[i] = x - h;
            let down = eval(&f, &probe)?;
            probe[which].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[which].data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((which, i));
            }
        }
    }
    Ok(report)
}
