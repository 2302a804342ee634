//! Finite-difference verification of backward passes.

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Float;

/// Gradients smaller than this are compared absolutely rather than relatively.
///
/// Central differences of an O(1) loss in double precision carry roughly
/// `1e-16 * |loss| / eps * (accumulated rounding)` of noise, about 1e-10 to
/// 1e-9 at `eps = 1e-5`. Below 1e-5 that noise alone approaches the 1e-4
/// relative tolerance used by the test suite.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
}

/// Compares backward-pass gradients of the scalar built by `f` with central
/// differences `(f(w + eps) - f(w - eps)) / 2 eps` on up to `coords_per_param`
/// random coordinates of every trainable parameter.
pub fn grad_check<F, R>(
    store: &mut ParamStore,
    f: F,
    eps: Float,
    coords_per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
    R: Rng,
{
    let mut analytic = GradStore::new(store);
    {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward_into(loss, &mut analytic, 1.0)?;
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let v = g.value(loss);
        if v.numel() != 1 {
            return Err(Error::Shape("grad_check needs a scalar".into()));
        }
        Ok(v.item() as f64)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let numel = store.tensor(id).numel();
        let picks = sample(rng, numel, coords_per_param.min(numel)).into_vec();
        for i in picks {
            let original = store.tensor(id).data()[i];
            store.get_mut(id).tensor.data_mut()[i] = original + eps;
            let plus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = original - eps;
            let minus = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * eps as f64);
            let exact = analytic.get(id).map_or(0.0, |g| g[i] as f64);
            let denom = exact.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            let rel = (exact - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
