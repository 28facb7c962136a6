//! Central finite-difference gradient oracle. Independent of the backward
//! pass: it only re-runs forward evaluations on perturbed parameter copies.

use super::params::{Graph, ParamStore};
use super::tape::Id;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares the reverse-mode gradient of a scalar loss against central
/// finite differences (f(x+h) - f(x-h)) / 2h for every parameter element.
pub fn grad_check<F>(store: &ParamStore, build_loss: F, h: f64) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Id,
{
    // Analytic gradients.
    let mut grad_store = store.clone();
    grad_store.zero_grads();
    {
        let mut g = Graph::new(store);
        let loss = build_loss(&mut g);
        g.backward_into(loss, &mut grad_store);
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };

    let names: Vec<String> = store.names().map(String::from).collect();
    for name in &names {
        let len = store.get(name).len();
        for i in 0..len {
            let mut plus = store.clone();
            plus.get_mut(name).data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(name).data_mut()[i] -= h;
            let f_plus = eval_loss(&plus, &build_loss);
            let f_minus = eval_loss(&minus, &build_loss);
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let analytic = grad_store.grad(name).data()[i];
            // The floor keeps finite-difference truncation noise (~1e-10
            // absolute at h=1e-5) from dominating near-zero gradients.
            let denom = analytic.abs().max(numeric.abs()).max(1e-4);
            let rel = (analytic - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    report
}

fn eval_loss<F>(store: &ParamStore, build_loss: &F) -> f64
where
    F: Fn(&mut Graph) -> Id,
{
    let mut g = Graph::new(store);
    let loss = build_loss(&mut g);
    g.value(loss).item()
}
