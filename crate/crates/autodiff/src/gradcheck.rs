use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, ParamStore};
use crate::Result;

/// Where and how badly an analytic gradient disagreed with finite
/// differences, or where the loss stopped being finite.
#[derive(Debug, Clone)]
pub enum GradCheckError {
    Mismatch {
        param: String,
        index: usize,
        analytic: f64,
        numeric: f64,
        rel_error: f64,
    },
    NonFiniteLoss {
        param: String,
        index: usize,
        perturbation: f64,
    },
    Graph(crate::Error),
}

impl std::fmt::Display for GradCheckError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GradCheckError::Mismatch { param, index, analytic, numeric, rel_error } => write!(
                f,
                "gradient mismatch at {param}[{index}]: analytic {analytic:.12e}, \
                 numeric {numeric:.12e}, relative error {rel_error:.3e}"
            ),
            GradCheckError::NonFiniteLoss { param, index, perturbation } => write!(
                f,
                "loss became non-finite while perturbing {param}[{index}] by {perturbation:+e}"
            ),
            GradCheckError::Graph(e) => write!(f, "graph construction failed: {e}"),
        }
    }
}

impl std::error::Error for GradCheckError {}

/// Largest relative error seen across all checked components.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub components_checked: usize,
}

/// Verify analytic gradients of `f` against central finite differences for
/// every component of every parameter in `ids`.
///
/// `f` must rebuild the loss from scratch on the tape it is given so that
/// perturbed parameter values are re-read. Relative error for a component is
/// `|a - n| / max(1e-5, |a| + |n|)` and must stay below `tol`.
#[allow(clippy::needless_range_loop)] // components are perturbed in place, one index at a time
pub fn gradient_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    tol: f64,
    eps: f64,
    mut f: F,
) -> std::result::Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let eval = |tape: &mut Tape, store: &ParamStore, f: &mut F| -> std::result::Result<Var, GradCheckError> {
        f(tape, store).map_err(GradCheckError::Graph)
    };

    let mut tape = Tape::new();
    let loss = eval(&mut tape, store, &mut f)?;
    tape.backward(loss).map_err(GradCheckError::Graph)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let var = tape_param(&mut tape, store, id);
            tape.grad(var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; store.get(id).len()])
        })
        .collect();
    drop(tape);

    let mut max_rel = 0.0;
    let mut checked = 0;
    for (pi, &id) in ids.iter().enumerate() {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];

            store.get_mut(id).data_mut()[j] = orig + eps;
            let mut tp = Tape::new();
            let lp = eval(&mut tp, store, &mut f)?;
            let fplus = tp.scalar_value(lp);
            drop(tp);

            store.get_mut(id).data_mut()[j] = orig - eps;
            let mut tm = Tape::new();
            let lm = eval(&mut tm, store, &mut f)?;
            let fminus = tm.scalar_value(lm);
            drop(tm);

            store.get_mut(id).data_mut()[j] = orig;

            if !fplus.is_finite() {
                return Err(GradCheckError::NonFiniteLoss {
                    param: store.name(id).to_string(),
                    index: j,
                    perturbation: eps,
                });
            }
            if !fminus.is_finite() {
                return Err(GradCheckError::NonFiniteLoss {
                    param: store.name(id).to_string(),
                    index: j,
                    perturbation: -eps,
                });
            }

            let numeric = (fplus - fminus) / (2.0 * eps);
            let a = analytic[pi][j];
            // the denominator floor absorbs central-difference roundoff,
            // about machine-eps * |loss| / eps, on components whose true
            // gradient is negligible; a wrong gradient on a component that
            // matters sits orders of magnitude above it
            let rel = (a - numeric).abs() / f64::max(1e-5, a.abs() + numeric.abs());
            if rel > tol {
                return Err(GradCheckError::Mismatch {
                    param: store.name(id).to_string(),
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error: max_rel, components_checked: checked })
}

/// Fetch the tape node for a parameter (cached, so this is the same node the
/// loss was built from).
fn tape_param(tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
    tape.param(store, id)
}
