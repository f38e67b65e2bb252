const REL_FLOOR: f64 = 1e-6;

/// Maximum relative error between an analytic gradient and central finite
/// differences, `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`,
/// over all parameters. The floor keeps round-off on near-zero components
/// from counting as error.
///
/// `f` returns the loss and its analytic gradient at the given parameters.
pub fn finite_diff_check<F>(f: F, params: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    finite_diff_check_against(|p| f(p).0, &analytic, params, h)
}

/// As [`finite_diff_check`] with the analytic gradient supplied separately,
/// e.g. to test a deliberately corrupted gradient.
pub fn finite_diff_check_against<F>(loss: F, analytic: &[f64], params: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), params.len(), "gradient and parameter lengths differ");
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = loss(&work);
        work[i] = orig - h;
        let minus = loss(&work);
        work[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        if !rel.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(rel);
    }
    worst
}
