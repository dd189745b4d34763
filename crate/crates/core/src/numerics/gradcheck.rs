//! Central-difference gradient checking against the tape's backward pass.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// `|a - n| / max(|a|, |n|, 1e-5)`. The floor sits above the roundoff of a
/// central difference, so vanishing gradients compare by absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Compares analytic gradients of the scalar built by `build` with central
/// differences of width `step`. At most `per_param` evenly spaced entries
/// of each parameter are probed. The graph runs in eval mode.
pub fn grad_check<F>(store: &mut ParamStore, step: f64, per_param: usize, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        Ok(g.scalar(loss))
    };
    let grads = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let stride = n.div_ceil(per_param.max(1)).max(1);
        for flat in (0..n).step_by(stride) {
            let analytic = grads.get(id).map_or(0.0, |t| t.as_slice().expect("standard layout")[flat]);
            let orig = store.value(id).as_slice().expect("standard layout")[flat];
            store.value_mut(id).as_slice_mut().expect("standard layout")[flat] = orig + step;
            let up = eval(store);
            store.value_mut(id).as_slice_mut().expect("standard layout")[flat] = orig - step;
            let down = eval(store);
            store.value_mut(id).as_slice_mut().expect("standard layout")[flat] = orig;
            let numeric = (up? - down?) / (2.0 * step);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_string(), flat));
            }
        }
    }
    Ok(report)
}
