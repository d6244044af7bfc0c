use alloc::string::String;

use super::{Graph, Mode, ParamStore, Real, Var};
use crate::Result;

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Precision of the analytic side of a gradient check. Finite differences are
/// always taken in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

/// A scalar loss that can be recorded in either float width.
pub trait LossFn {
    fn loss<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

fn eval_loss<L: LossFn>(store: &ParamStore<f64>, loss: &L) -> Result<f64> {
    let mut g = Graph::new(store, Mode::Eval);
    let l = loss.loss(&mut g)?;
    Ok(g.value(l).data()[0])
}

fn analytic<F: Real, L: LossFn>(store: &ParamStore<F>, loss: &L) -> Result<alloc::vec::Vec<alloc::vec::Vec<f64>>> {
    let mut g = Graph::new(store, Mode::Eval);
    let l = loss.loss(&mut g)?;
    let grads = g.backward(l)?;
    Ok(store
        .iter()
        .map(|(id, p)| match grads.get(id) {
            Some(gr) => gr.iter().map(|v| v.as_f64()).collect(),
            None => alloc::vec![0.0; p.value.len()],
        })
        .collect())
}

/// Compares every parameter entry's analytic gradient with a central
/// difference. Relative error is `|ga - gf| / max(|ga|, |gf|, 1e-8)`.
pub fn grad_check<L: LossFn>(store: &ParamStore<f64>, loss: &L, precision: Precision) -> Result<GradCheckReport> {
    let analytic = match precision {
        Precision::F64 => analytic(store, loss)?,
        Precision::F32 => analytic(&store.cast::<f32>(), loss)?,
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    let ids: alloc::vec::Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for (i, &an) in analytic[id.index()].iter().enumerate() {
            let orig = store.value(id).data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let plus = eval_loss(&work, loss)?;
            work.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let minus = eval_loss(&work, loss)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let denom = an.abs().max(fd.abs()).max(1e-8);
            let rel = (an - fd).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_relative_error || rel.is_nan() {
                report.max_relative_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_parameter = store.get(id).name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
