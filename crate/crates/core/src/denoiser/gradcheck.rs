//! Central finite-difference verification of analytic gradients.

use super::DenoiserModel;
use crate::error::Result;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Compares `analytic` against central differences of `f` around `params`.
/// Returns the maximum relative error over the checked coordinates.
///
/// `coords` restricts the check to a subset of parameters (all when `None`).
pub fn grad_check<F>(params: &[f64], analytic: &[f64], mut f: F, eps: f64, coords: Option<&[usize]>) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let all: Vec<usize>;
    let idx = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    for &j in idx {
        let orig = p[j];
        p[j] = orig + eps;
        let up = f(&p);
        p[j] = orig - eps;
        let down = f(&p);
        p[j] = orig;
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[j], fd));
    }
    worst
}

/// Gradient check for a loss that takes a model and returns `(value, grad)`.
///
/// The closure must be deterministic (reseed any rng inside it). At most
/// `max_coords` parameters are probed, spread evenly over the vector and
/// always including the coordinates with the largest analytic gradient.
pub fn grad_check_model<F>(model: &DenoiserModel, mut loss: F, eps: f64, max_coords: usize) -> Result<f64>
where
    F: FnMut(&DenoiserModel) -> Result<(f64, Vec<f64>)>,
{
    let (_, grad) = loss(model)?;
    let n = grad.len();
    let mut coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let stride = n / max_coords.max(1);
        (0..n).step_by(stride.max(1)).take(max_coords).collect()
    };
    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
    coords.extend(by_mag.into_iter().take(max_coords.min(n) / 4 + 1));
    coords.sort_unstable();
    coords.dedup();

    let mut probe = model.clone();
    let mut err: Option<crate::error::Error> = None;
    let worst = grad_check(
        model.params(),
        &grad,
        |p| {
            probe.params_mut().copy_from_slice(p);
            match loss(&probe) {
                Ok((v, _)) => v,
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        eps,
        Some(&coords),
    );
    match err {
        Some(e) => Err(e),
        None => Ok(worst),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // f(x) = Σ c_i x_i^2 + x_0 x_1
        let c = [1.5, -0.4, 3.0];
        let f = |x: &[f64]| x.iter().zip(&c).map(|(x, c)| c * x * x).sum::<f64>() + x[0] * x[1];
        let x = [0.7, -1.1, 0.25];
        let g = [2.0 * c[0] * x[0] + x[1], 2.0 * c[1] * x[1] + x[0], 2.0 * c[2] * x[2]];
        assert!(grad_check(&x, &g, f, 1e-4, None) <= 1e-8);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |x: &[f64]| x[0] * x[0];
        assert!(grad_check(&[1.0], &[1.0], f, 1e-4, None) > 0.4);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-9, 0.0) < 1e-2);
    }
}
