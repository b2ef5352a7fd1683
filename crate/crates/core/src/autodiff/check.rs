//! Central finite differences, the independent oracle for every gradient.

use super::ParamSet;

/// `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` for every scalar coordinate of `at`.
pub fn finite_difference_grad<E>(
    mut loss_fn: impl FnMut(&ParamSet) -> Result<f64, E>,
    at: &ParamSet,
    h: f64,
) -> Result<ParamSet, E> {
    assert!(h > 0.0, "finite difference step must be positive, got {h}");
    let base = at.flatten();
    let mut probe = base.clone();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = loss_fn(&at.unflatten(&probe).expect("same layout"))?;
        probe[i] = base[i] - h;
        let minus = loss_fn(&at.unflatten(&probe).expect("same layout"))?;
        probe[i] = base[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(at.unflatten(&grad).expect("same layout"))
}

/// Largest absolute deviation normalized by the largest magnitude of either input.
///
/// Returns 0 when both are identically zero.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
