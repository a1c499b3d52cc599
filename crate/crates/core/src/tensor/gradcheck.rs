use super::{Result, Tape, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - b| / max(|a|, |b|, 1e-8)` over all coordinates.
    pub max_rel_err: f64,
    /// Coordinate where `max_rel_err` occurred.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub pass: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic[i]` with `(f(i, +eps) - f(i, -eps)) / 2 eps`, where
/// `f(i, delta)` evaluates the objective with coordinate `i` shifted by `delta`.
pub fn finite_difference_report(
    analytic: &[f64],
    eps: f64,
    tol: f64,
    mut f: impl FnMut(usize, f64) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: analytic.len(),
        pass: true,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = (f(i, eps) - f(i, -eps)) / (2.0 * eps);
        let err = relative_error(a, numeric);
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.pass = report.max_rel_err < tol;
    report
}

// Non-scalar outputs are contracted with fixed, distinct weights so that an
// error in one output coordinate cannot cancel against another.
fn contraction_weight(i: usize) -> f64 {
    1.0 + 0.5 * ((i as f64) * 0.731).sin()
}

fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    let value = tape.value(out);
    if value.len() == 1 {
        return Ok(out);
    }
    let w = Tensor::from_fn(value.shape(), contraction_weight);
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv)?;
    Ok(tape.sum(prod))
}

/// Checks the backward pass of `f` at `x` coordinate by coordinate.
///
/// # Panics
/// Panics if `f` fails on `x` or a perturbation of it.
pub fn grad_check(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    let eval = |input: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let v = tape.leaf(input.clone());
        let out = f(&mut tape, v).expect("function under check failed");
        let loss = reduce(&mut tape, out).expect("reduction failed");
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v).expect("function under check failed");
    let loss = reduce(&mut tape, out).expect("reduction failed");
    let grads = tape.backward(loss).expect("backward failed");
    let analytic = grads.get_or_zeros(v, x.len());

    let mut probe = x.clone();
    finite_difference_report(&analytic, eps, tol, |i, delta| {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + delta;
        let val = eval(&probe);
        probe.data_mut()[i] = orig;
        val
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_exact() {
        let x = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let r = grad_check(|_, v| Ok(v), &x, 1e-5, 1e-10);
        assert!(r.max_rel_err < 1e-10, "{r:?}");
    }

    #[test]
    fn softmax_cross_entropy_composite_passes() {
        let x = Tensor::randn(&[4, 7], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let r = grad_check(
            |t, v| {
                let p = t.softmax(v, 1)?;
                let s = t.scale(p, 5.0);
                t.cross_entropy(s, &[0, 3, 6, 1])
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        // y = x², but the recorded rule claims dy/dx = x.
        let x = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let value = Tensor::from_fn(&[3], |i| t.value(v).data()[i].powi(2));
                Ok(t.custom(
                    &[v],
                    value,
                    Box::new(|g, inputs| {
                        vec![Tensor::from_fn(&[3], |i| g.data()[i] * inputs[0].data()[i])]
                    }),
                ))
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(!r.pass);
        assert!(r.max_rel_err > 0.4);
    }
}
