//! Central finite-difference check of analytic gradients.

use super::{Gradients, ParamStore};

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose true
/// gradient is zero from dividing rounding noise by nothing.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against `(L(p + h) - L(p - h)) / 2h` on up to
/// `per_tensor` evenly spaced coordinates of every parameter tensor.
/// Parameters are restored before returning.
pub fn check_gradients<F>(
    params: &mut ParamStore,
    analytic: &Gradients,
    mut loss: F,
    h: f64,
    per_tensor: usize,
    floor: f64,
) -> GradCheck
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).data().len();
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(params);
            params.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic.get(id).data()[i], numeric, floor);
            out.checked += 1;
            if err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Graph, Tensor};

    #[test]
    fn quadratic_gradient_checks_exactly() {
        let mut p = ParamStore::new();
        let w = p.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let loss_of = |p: &ParamStore| {
            let mut g = Graph::new(p);
            let x = g.param(w);
            let l = g.sum_squares(x);
            (g.value(l).item(), g.backward(l).unwrap())
        };
        let (_, grads) = loss_of(&p);
        let r = check_gradients(&mut p, &grads, |p| loss_of(p).0, 1e-4, 8, 1e-6);
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(p.get(w).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let mut p = ParamStore::new();
        let w = p.add("w", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let mut grads = Gradients::zeros_like(&p);
        let mut g = Graph::new(&p);
        let x = g.param(w);
        let l = g.sum_squares(x);
        let good = g.backward(l).unwrap();
        grads.accumulate(&good).unwrap();
        grads.scale(0.5);
        let r = check_gradients(&mut p, &grads, |p| p.get(w).data().iter().map(|v| v * v).sum(), 1e-4, 8, 1e-6);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
        assert_eq!(r.worst, Some(("w".to_string(), 0)));
    }
}
