//! Central finite-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{BackwardFault, GradBuffer, Graph, ParamStore, Var};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Magnitude below which gradients are compared absolutely. Central
/// differences carry roundoff of roughly `eps * |loss| / step` (about 1e-10
/// here), so exactly-zero gradients would otherwise read as large relative
/// errors.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<EntryError>,
    pub failures: Vec<EntryError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares the backward pass of `loss` against central differences for
/// every scalar of every parameter, including parameters with a zero
/// learning-rate scale.
pub fn check_gradients<F>(
    params: &ParamStore,
    fault: Option<BackwardFault>,
    tolerance: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut analytic = GradBuffer::zeros_like(params);
    {
        let mut g = Graph::with_params(params);
        if let Some(f) = fault {
            g.inject_fault(f);
        }
        let l = loss(&mut g)?;
        g.backward(l)?;
        g.accumulate_into(&mut analytic);
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
        tolerance,
    };
    for id in params.ids() {
        for index in 0..params.get(id).numel() {
            let orig = params.get(id).data()[index];
            probe.get_mut(id).data_mut()[index] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[index] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[index] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(id)[index];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            let entry = || EntryError {
                param: params.name(id).to_string(),
                index,
                analytic: a,
                numeric,
                rel_error: rel,
            };
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(entry());
            }
            if rel >= tolerance || !rel.is_finite() {
                report.failures.push(entry());
            }
        }
    }
    Ok(report)
}
