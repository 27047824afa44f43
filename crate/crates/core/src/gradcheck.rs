//! Central finite-difference gradient verification.
//!
//! Used by the verification suites to validate every backward rule in f64.
//! The numeric side only ever calls the forward pass, so it stays
//! independent of the backward code it checks.

/// Default step for central differences in f64.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Default relative-error bound for f64 checks.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Numeric gradient of `f` w.r.t. every coordinate of every input slot,
/// by central differences: (f(x+eps) - f(x-eps)) / (2 eps).
pub fn numeric_gradient<F>(inputs: &[Vec<f64>], eps: f64, mut f: F) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for slot in 0..inputs.len() {
        let mut g = vec![0.0; inputs[slot].len()];
        for i in 0..inputs[slot].len() {
            let orig = work[slot][i];
            work[slot][i] = orig + eps;
            let fp = f(&work);
            work[slot][i] = orig - eps;
            let fm = f(&work);
            work[slot][i] = orig;
            g[i] = (fp - fm) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Largest relative error between analytic and numeric gradients, with the
/// denominator floored so near-zero entries are compared absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(floor);
        let err = (a - n).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Check one gradient slot against the numeric oracle; `Err` carries the
/// worst offender for diagnostics.
pub fn check_close(name: &str, analytic: &[f64], numeric: &[f64], tol: f64) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!("{name}: length mismatch {} vs {}", analytic.len(), numeric.len()));
    }
    let err = max_relative_error(analytic, numeric, 1e-3);
    if err <= tol {
        Ok(())
    } else {
        let (mut wi, mut we) = (0, 0.0);
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let e = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            if e > we {
                we = e;
                wi = i;
            }
        }
        Err(format!(
            "{name}: max relative error {err:.3e} > {tol:.1e} at index {wi} (analytic {} vs numeric {})",
            analytic[wi], numeric[wi]
        ))
    }
}

use crate::rng::Rng64;
use crate::tensor::{Shape, Tape, Var};

/// Verify one differentiable tape construction against the numeric oracle.
///
/// `build` assembles the graph from leaf vars (one per shape, inserted with
/// `requires_grad`) and returns the output; non-scalar outputs are reduced
/// with `sum_all`. Inputs are drawn uniformly from `range`. Returns the
/// worst relative error over all input slots or a diagnostic message.
pub fn check_tape_gradients<F>(
    name: &str,
    shapes: &[Shape],
    range: (f64, f64),
    seed: u64,
    tol: f64,
    build: F,
) -> Result<f64, String>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> crate::error::Result<Var>,
{
    let mut rng = Rng64::derive(seed, &[0x6772_6164]);
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| (0..s.numel()).map(|_| rng.uniform(range.0, range.1)).collect())
        .collect();

    // analytic gradients through the tape
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(&inputs)
        .map(|(s, d)| tape.leaf(d.clone(), *s, true).expect("leaf"))
        .collect();
    let out = build(&mut tape, &vars).map_err(|e| format!("{name}: forward failed: {e}"))?;
    let loss = if tape.shape(out).numel() == 1 {
        out
    } else {
        tape.sum_all(out).map_err(|e| format!("{name}: {e}"))?
    };
    tape.backward(loss).map_err(|e| format!("{name}: backward failed: {e}"))?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient").to_vec())
        .collect();

    // numeric oracle: forward evaluations only
    let numeric = numeric_gradient(&inputs, DEFAULT_EPS, |params| {
        let mut t = Tape::<f64>::new();
        let vs: Vec<Var> = shapes
            .iter()
            .zip(params)
            .map(|(s, d)| t.leaf(d.clone(), *s, false).expect("leaf"))
            .collect();
        let out = build(&mut t, &vs).expect("forward");
        if t.shape(out).numel() == 1 {
            t.scalar_value(out)
        } else {
            let l = t.sum_all(out).expect("sum");
            t.scalar_value(l)
        }
    });

    let mut worst = 0.0f64;
    for (slot, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        check_close(&format!("{name} slot {slot}"), a, n, tol)?;
        worst = worst.max(max_relative_error(a, n, 1e-3));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        // f(x) = sum(x_i^2): grad = 2x
        let xs = vec![vec![1.0, -2.0, 0.5]];
        let g = numeric_gradient(&xs, 1e-5, |p| p[0].iter().map(|v| v * v).sum());
        for (gi, xi) in g[0].iter().zip(&xs[0]) {
            assert!((gi - 2.0 * xi).abs() < 1e-9);
        }
    }

    #[test]
    fn check_close_flags_mismatch() {
        assert!(check_close("ok", &[1.0, 2.0], &[1.0, 2.0], 1e-4).is_ok());
        assert!(check_close("bad", &[1.0, 2.0], &[1.0, 2.1], 1e-4).is_err());
    }
}
