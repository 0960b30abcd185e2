/// Relative error of `a` against `b`, with entries smaller than `floor`
/// compared on the `floor` scale.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between an analytic gradient and finite
/// differences, entries compared on the scale of the whole vector.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| rel_err(*a, *b, floor))
        .fold(0.0, f64::max)
}
