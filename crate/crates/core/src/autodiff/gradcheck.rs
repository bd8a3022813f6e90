//! Central finite-difference check of the analytic backward rules.

use super::{AdResult, ParamStore, Tape, VarId};
use crate::tensor::Precision;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, max relative error over its elements)
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    /// Names of parameters exceeding the tolerance.
    pub flagged: Vec<String>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Compares analytic gradients against central finite differences with step
/// `h` for every trainable parameter in `store`. The builder must be
/// deterministic: it is re-run twice per parameter element.
pub fn gradient_check<F>(
    store: &mut ParamStore,
    build: F,
    tol: f64,
    h: f64,
) -> AdResult<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> AdResult<VarId>,
{
    let loss_of = |store: &ParamStore| -> AdResult<f64> {
        let mut tape = Tape::new(Precision::F64);
        let loss = build(&mut tape, store)?;
        Ok(tape.value(loss).data[0])
    };

    store.zero_grads();
    {
        let mut tape = Tape::new(Precision::F64);
        let loss = build(&mut tape, store)?;
        tape.backward(loss, store)?;
    }
    let analytic: Vec<Vec<f64>> = store
        .ids()
        .map(|id| store.get(id).grad.data.clone())
        .collect();

    let mut per_param = Vec::new();
    let mut flagged = Vec::new();
    let mut max_rel_err: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        if !store.get(id).requires_grad {
            continue;
        }
        let n = store.get(id).value.numel();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let orig = store.get(id).value.data[j];
            store.get_mut(id).value.data[j] = orig + h;
            let lp = loss_of(store)?;
            store.get_mut(id).value.data[j] = orig - h;
            let lm = loss_of(store)?;
            store.get_mut(id).value.data[j] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let g = analytic[id.0][j];
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1.0);
            worst = worst.max(rel);
        }
        let name = store.name(id).to_string();
        if worst > tol {
            flagged.push(name.clone());
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.push((name, worst));
    }
    Ok(GradCheckReport { per_param, max_rel_err, flagged, tolerance: tol })
}
