//! Central finite differences against analytic parameter gradients.
//!
//! The numeric side only ever calls the forward function, so it stays
//! independent of the backward rules it is checking.

use crate::params::{Gradients, ParamId, ParamStore};

/// `(f(x + h) - f(x - h)) / 2h`
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    let plus = f(x + h);
    let minus = f(x - h);
    (plus - minus) / (2.0 * h)
}

/// Relative error with a floor on the denominator so that entries where both
/// gradients are essentially zero compare on absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compare `grads` with central differences of `loss` for every entry of
/// every parameter in `ids`.
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    grads: &Gradients,
    step: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut params = Vec::with_capacity(ids.len());
    for &id in ids {
        let len = store.value(id).len();
        let mut worst = 0.0_f64;
        let mut max_abs = 0.0_f64;
        for k in 0..len {
            let x0 = store.value(id).data()[k];
            let numeric = {
                store.value_mut(id).data_mut()[k] = x0 + step;
                let plus = loss(store);
                store.value_mut(id).data_mut()[k] = x0 - step;
                let minus = loss(store);
                store.value_mut(id).data_mut()[k] = x0;
                (plus - minus) / (2.0 * step)
            };
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            worst = worst.max(relative_error(analytic, numeric, floor));
            max_abs = max_abs.max(analytic.abs());
        }
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            entries: len,
            max_rel_error: worst,
            max_abs_analytic: max_abs,
        });
    }
    GradCheckReport { params }
}
