use std::collections::BTreeMap;

use serde::Serialize;

use super::{Graph, NodeId, Result};

/// Magnitudes below this are compared absolutely rather than relatively,
/// so near-zero adjoints are not judged against rounding noise in the
/// finite differences.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct ParamError {
    pub max_abs: f64,
    pub max_rel: f64,
}

/// Backward adjoints versus central differences, per parameter.
#[derive(Clone, Debug, Default, Serialize)]
pub struct GradientReport {
    pub step: f64,
    pub per_param: BTreeMap<String, ParamError>,
}

impl GradientReport {
    pub fn max_abs(&self) -> f64 {
        self.per_param.values().map(|e| e.max_abs).fold(0.0, f64::max)
    }

    pub fn max_rel(&self) -> f64 {
        self.per_param.values().map(|e| e.max_rel).fold(0.0, f64::max)
    }

    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel() <= rel_tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Compares `backward(loss)` with central differences of the forward value,
/// perturbing one parameter element at a time by `±h`. Previously bound
/// inputs stay bound. Parameter values are restored before returning.
pub fn finite_diff_check(graph: &mut Graph, loss: NodeId, h: f64) -> Result<GradientReport> {
    finite_diff_check_only(graph, loss, h, |_| true)
}

/// [`finite_diff_check`] restricted to parameters accepted by `select`.
pub fn finite_diff_check_only(
    graph: &mut Graph,
    loss: NodeId,
    h: f64,
    select: impl Fn(&str) -> bool,
) -> Result<GradientReport> {
    assert!(h > 0.0, "finite-difference step must be positive");
    graph.run()?;
    let analytic = graph.backward(loss)?;
    let mut report = GradientReport { step: h, per_param: BTreeMap::new() };
    for name in graph.parameter_names() {
        if !select(&name) {
            continue;
        }
        let id = graph.parameter_id(&name).expect("listed parameter");
        let original = graph.value(id)?.clone();
        let mut err = ParamError::default();
        for i in 0..original.len() {
            let mut probe = original.clone();
            probe.values[i] = original.values[i] + h;
            graph.set_parameter(&name, probe.clone())?;
            graph.run()?;
            let up = graph.value(loss)?.item();
            probe.values[i] = original.values[i] - h;
            graph.set_parameter(&name, probe)?;
            graph.run()?;
            let down = graph.value(loss)?.item();
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[&name].values[i];
            err.max_abs = err.max_abs.max((a - numeric).abs());
            err.max_rel = err.max_rel.max(relative_error(a, numeric));
        }
        graph.set_parameter(&name, original)?;
        report.per_param.insert(name, err);
    }
    graph.run()?;
    Ok(report)
}
