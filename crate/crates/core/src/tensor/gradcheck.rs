//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// (input, element, autodiff, numeric) at the largest relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Set when `f` itself failed; the check then counts as failed.
    pub error: Option<String>,
}

impl GradCheckReport {
    fn failed(msg: String) -> Self {
        GradCheckReport {
            max_rel_error: f64::INFINITY,
            pass: false,
            checked: 0,
            worst: None,
            error: Some(msg),
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences `(f(x+eps) - f(x-eps)) / 2 eps`, element by element.
///
/// `f` receives a fresh tape and one leaf per input (each marked as
/// requiring grad) and must be deterministic.
pub fn grad_check<F>(f: F, inputs: &[Tensor], epsilon: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], record: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = if record { Tape::new() } else { Tape::inference() };
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let analytic: Vec<Vec<f64>> = match eval(inputs, true).and_then(|(mut tape, vars, out)| {
        tape.backward(out)?;
        Ok(vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
            })
            .collect())
    }) {
        Ok(g) => g,
        Err(e) => return GradCheckReport::failed(e.to_string()),
    };

    let scalar = |values: &[Tensor]| -> Result<f64> {
        let (tape, _, out) = eval(values, false)?;
        tape.value(out).item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        pass: true,
        checked: 0,
        worst: None,
        error: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + epsilon;
            let plus = scalar(&work);
            work[ti].data_mut()[ei] = orig - epsilon;
            let minus = scalar(&work);
            work[ti].data_mut()[ei] = orig;
            let numeric = match (plus, minus) {
                (Ok(p), Ok(m)) => (p - m) / (2.0 * epsilon),
                (Err(e), _) | (_, Err(e)) => return GradCheckReport::failed(e.to_string()),
            };
            let err = relative_error(a, numeric);
            report.checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = Some((ti, ei, a, numeric));
            }
        }
    }
    report.pass = report.max_rel_error < tolerance;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{BatchNormConfig, BatchNormStats, ConvSpec, NormMode, Padding};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let b = random(&[2], &mut rng);
        let r = grad_check(
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                t.sum(y)
            },
            &[x, w, b],
            1e-6,
            1e-4,
        );
        assert!(r.pass, "{r:?}");
        assert!(r.max_rel_error < 1e-8);
        assert_eq!(r.checked, 6 + 6 + 2);
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::new(vec![4], vec![-0.5, 0.25, 1.5, -2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.relu(v[0])?;
                let sq = t.mul(y, y)?;
                t.sum(sq)
            },
            &[x],
            1e-6,
            1e-4,
        );
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn conv_batchnorm_fc_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 2, 8, 8], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let gamma = Tensor::from_fn(&[3], |_| rng.gen_range(0.5..1.5)).unwrap();
        let beta = random(&[3], &mut rng);
        let fw = random(&[3 * 4 * 4, 2], &mut rng);
        let fb = random(&[2], &mut rng);
        let r = grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, ConvSpec::square(2, 3, 3, Padding::Same))?;
                let mut stats = BatchNormStats::new(3);
                let y = t.batch_norm(y, v[2], v[3], &mut stats, NormMode::Train, BatchNormConfig::default())?;
                let y = t.mean_pool2d(y, (2, 2), (2, 2))?;
                let y = t.reshape(y, &[1, 48])?;
                let y = t.linear(y, v[4], v[5])?;
                t.cross_entropy_from_logits(y, &[1])
            },
            &[x, w, gamma, beta, fw, fb],
            1e-6,
            1e-4,
        );
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn failing_function_is_reported_not_thrown() {
        let x = Tensor::zeros(&[2]).unwrap();
        let r = grad_check(|t, v| t.softmax(v[0], 3), &[x], 1e-6, 1e-4);
        assert!(!r.pass);
        assert!(r.error.is_some());
    }
}
