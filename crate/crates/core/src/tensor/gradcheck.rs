//! Central finite-difference oracle for reverse-mode gradients (fp64).

use super::{Array, Tape, Var};
use crate::error::Result;

/// Outcome of [`check_gradients`]: worst relative error over all entries.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Builds `f` on a fresh tape for the given inputs (each registered as a
/// trainable leaf) and compares reverse-mode gradients against central
/// differences with step `1e-4·max(1, |θ|)`.
///
/// `max_entries` caps the entries probed per input (evenly strided).
pub fn check_gradients<F>(inputs: &[Array<f64>], max_entries: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Array<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|a| t.leaf(a.clone().with_grad())).collect();
        let out = f(&mut t, &vars)?;
        Ok(t.value(out).item())
    };

    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| t.leaf(a.clone().with_grad())).collect();
    let out = f(&mut t, &vars)?;
    t.backward(out)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = t
            .grad(vars[k])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let n = input.numel();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let theta = input.data()[j];
            let h = 1e-4 * theta.abs().max(1.0);
            probe[k].data_mut()[j] = theta + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = theta - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = theta;
            let numeric = (up - down) / (2.0 * h);
            let rel = rel_err(analytic[j], numeric);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((k, j));
            }
        }
    }
    Ok(report)
}

/// Relative error with an absolute floor so that entries whose true
/// gradient is (near) zero do not divide by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
