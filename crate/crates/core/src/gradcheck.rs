//! Central-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates of each tensor, sampled without
    /// replacement. `None` checks every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    /// Restrict the check to these tensor indices. `None` checks all.
    pub only: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_tensor: None,
            only: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub index: usize,
    pub checked: usize,
    pub total: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compare reverse-mode gradients of the scalar `f` against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, coordinate by coordinate.
///
/// The error per coordinate is `|analytic − numeric| / max(1, |numeric|)`;
/// the report carries the maximum over everything checked.
pub fn gradient_check<F>(
    f: F,
    params: &mut [Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if opts.eps <= 0.0 || !opts.eps.is_finite() {
        return Err(Error::arg(format!("finite-difference step {} must be positive", opts.eps)));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    let f0 = tape.value(root).item()?;
    if !f0.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {f0}")));
    }
    let mut grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    drop(tape);

    let selected: Vec<usize> = match &opts.only {
        Some(idx) => idx.clone(),
        None => (0..params.len()).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut report = GradCheckReport {
        tensors: Vec::with_capacity(selected.len()),
        max_rel_error: 0.0,
        coords_checked: 0,
    };
    for t in selected {
        let total = params
            .get(t)
            .ok_or_else(|| Error::arg(format!("no tensor at index {t}")))?
            .len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(cap) if cap < total => {
                let mut c = index::sample(&mut rng, total, cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..total).collect(),
        };

        let mut check = TensorCheck {
            index: t,
            checked: coords.len(),
            total,
            max_rel_error: 0.0,
            worst_coord: 0,
        };
        for &c in &coords {
            let orig = params[t].data()[c];
            params[t].data_mut()[c] = orig + opts.eps;
            let plus = evaluate(&f, params);
            params[t].data_mut()[c] = orig - opts.eps;
            let minus = evaluate(&f, params);
            params[t].data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = analytic[t].data()[c];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = err;
                check.worst_coord = c;
            }
        }
        report.coords_checked += check.checked;
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.tensors.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut params = vec![Tensor::vector(vec![3.0])];
        let report = gradient_check(
            |tape, v| tape.dot(v[0], v[0]),
            &mut params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(params[0].data(), &[3.0], "parameters restored");
    }

    #[test]
    fn linear_is_exact() {
        let mut params = vec![Tensor::vector(vec![0.7, -1.3])];
        let a = Tensor::vector(vec![2.5, -4.0]);
        let report = gradient_check(
            |tape, v| {
                let a = tape.constant(a.clone());
                tape.dot(a, v[0])
            },
            &mut params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn cosine_against_fixed_vector() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0, 2.0])];
        let fixed = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let report = gradient_check(
            |tape, v| {
                let w = tape.constant(fixed.clone());
                tape.cosine(v[0], w)
            },
            &mut params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn non_finite_objective_is_numeric_error() {
        let mut params = vec![Tensor::vector(vec![1.0])];
        let err = gradient_check(
            |tape, v| Ok(tape.scale(v[0], f64::INFINITY)),
            &mut params,
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn subsampling_caps_coordinates() {
        let mut params = vec![Tensor::vector((0..50).map(|i| i as f64 * 0.1).collect())];
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(7),
            ..Default::default()
        };
        let report = gradient_check(|tape, v| tape.dot(v[0], v[0]), &mut params, &opts).unwrap();
        assert_eq!(report.tensors[0].checked, 7);
        assert_eq!(report.tensors[0].total, 50);
    }
}
