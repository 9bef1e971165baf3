use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Mode, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name (or "theta") and flat index of the worst coordinate.
    pub worst: (String, usize),
}

/// Gradients smaller than this are compared absolutely: central differences
/// of an O(1) objective carry roundoff around 1e-16 / eps, which would
/// otherwise dominate coordinates whose true gradient is zero.
const REL_FLOOR: f64 = 1e-6;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite objective {v} at {what}")))
    }
}

/// Compares the reverse-mode gradient of `f` at `theta` with central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`.
///
/// `samples` bounds the number of probed coordinates (all when `None`).
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64, samples: Option<usize>, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'static>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new(Mode::Train);
        let v = g.variable(t.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new(Mode::Train);
    let v = g.variable(theta.clone());
    let out = f(&mut g, v)?;
    finite(g.value(out).data()[0], "theta")?;
    g.backward(out)?;
    let analytic = g.grad(v).unwrap_or_else(|| Tensor::zeros(theta.shape()));

    let n = theta.len();
    let coords: Vec<usize> = match samples {
        Some(s) if s < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..s).map(|_| rng.gen_range(0..n)).collect()
        }
        _ => (0..n).collect(),
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: coords.len(),
        worst: ("theta".into(), 0),
    };
    let mut probe = theta.clone();
    for &i in &coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = finite(eval(&probe)?, "theta + eps")?;
        probe.data_mut()[i] = orig - eps;
        let down = finite(eval(&probe)?, "theta - eps")?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let e = rel_error(analytic.data()[i], numeric);
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst.1 = i;
        }
    }
    Ok(report)
}

/// Gradient check over the parameters of a model.
///
/// `f` builds the scalar loss on a graph bound to the given store. Each
/// parameter tensor contributes at least one probed coordinate; the rest of
/// the budget is drawn uniformly.
pub fn grad_check_params<F>(
    store: &ParamStore,
    mode: Mode,
    f: F,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(store, mode);
        let out = f(&mut g)?;
        finite(g.value(out).data()[0], "parameters")?;
        g.backward(out)?;
        g.param_grads()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    if ids.is_empty() {
        return Err(Error::Usage("no parameters to check".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<(ParamId, usize)> = ids
        .iter()
        .map(|&id| (id, rng.gen_range(0..store.value(id).len())))
        .collect();
    let total = store.num_scalars();
    while coords.len() < samples {
        let mut k = rng.gen_range(0..total);
        for &id in &ids {
            let len = store.value(id).len();
            if k < len {
                coords.push((id, k));
                break;
            }
            k -= len;
        }
    }

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: coords.len(),
        worst: (String::new(), 0),
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s, mode);
        let out = f(&mut g)?;
        Ok(g.value(out).data()[0])
    };
    for (id, i) in coords {
        let orig = probe.value(id).data()[i];
        probe.value_mut(id).data_mut()[i] = orig + eps;
        let up = finite(eval(&probe)?, &store.param(id).name)?;
        probe.value_mut(id).data_mut()[i] = orig - eps;
        let down = finite(eval(&probe)?, &store.param(id).name)?;
        probe.value_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.get(id).map(|g| g.data()[i]).unwrap_or(0.0);
        let e = rel_error(a, numeric);
        if report.worst.0.is_empty() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = (store.param(id).name.clone(), i);
        }
    }
    Ok(report)
}
