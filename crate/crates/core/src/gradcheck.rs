//! Central-difference gradient verification.
//!
//! This is the independent oracle for the tape's backward pass: it only ever
//! calls the forward function, so it cannot share a bug with the reverse
//! sweep it checks.

use crate::grid::ValueGrid;

/// Maximum relative error between analytic gradients and central differences.
///
/// `f` evaluates the scalar objective at a parameter setting; `params` is the
/// point being checked and `analytic` the gradients under test, in the same
/// order. The relative error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check(
    mut f: impl FnMut(&[ValueGrid]) -> f64,
    params: &[ValueGrid],
    analytic: &[ValueGrid],
    eps: f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len(), "params/gradients length mismatch");
    let mut point: Vec<ValueGrid> = params.to_vec();
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        assert_eq!(
            params[p].shape(),
            analytic[p].shape(),
            "gradient shape mismatch for parameter {p}"
        );
        for i in 0..params[p].len() {
            let orig = point[p].data()[i];
            point[p].data_mut()[i] = orig + eps;
            let f_plus = f(&point);
            point[p].data_mut()[i] = orig - eps;
            let f_minus = f(&point);
            point[p].data_mut()[i] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let exact = analytic[p].data()[i];
            let denom = 1.0f64.max(exact.abs()).max(numeric.abs());
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    worst
}

/// Default perturbation for gradient checks.
pub const GRAD_CHECK_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tape::Tape;

    #[test]
    fn linear_layer_gradient_within_1e7() {
        let mut rng = RngStream::new(15);
        let x = ValueGrid::from_fn(&[3, 4], |_| rng.normal());
        let w = ValueGrid::from_fn(&[4, 2], |_| rng.normal());
        let b = ValueGrid::from_fn(&[2], |_| rng.normal());
        let eval = |p: &[ValueGrid]| -> (f64, Vec<ValueGrid>) {
            let mut tape = Tape::new();
            let xi = tape.param("x", p[0].clone());
            let wi = tape.param("w", p[1].clone());
            let bi = tape.param("b", p[2].clone());
            let y = tape.linear(xi, wi, bi).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).data()[0],
                vec![
                    grads.by_path("x").unwrap().clone(),
                    grads.by_path("w").unwrap().clone(),
                    grads.by_path("b").unwrap().clone(),
                ],
            )
        };
        let params = vec![x, w, b];
        let (_, analytic) = eval(&params);
        let err = grad_check(|p| eval(p).0, &params, &analytic, GRAD_CHECK_EPS);
        assert!(err <= 1e-7, "max relative error {err}");
    }

    #[test]
    fn relu_kink_excluded_by_sampling_away_from_zero() {
        // Pre-activations are kept at least 0.1 from zero, so the central
        // difference never straddles the kink.
        let mut rng = RngStream::new(29);
        let x = ValueGrid::from_fn(&[4, 4], |_| {
            let v = rng.normal();
            v + 0.1f64.copysign(v) + if v.abs() < 0.1 { 0.2f64.copysign(v) } else { 0.0 }
        });
        let eval = |p: &[ValueGrid]| -> (f64, Vec<ValueGrid>) {
            let mut tape = Tape::new();
            let xi = tape.param("x", p[0].clone());
            let y = tape.relu(xi).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).data()[0], vec![grads.by_path("x").unwrap().clone()])
        };
        let params = vec![x];
        let (_, analytic) = eval(&params);
        let err = grad_check(|p| eval(p).0, &params, &analytic, GRAD_CHECK_EPS);
        assert!(err <= 1e-7, "max relative error {err}");
    }
}
