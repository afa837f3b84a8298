use crate::tensor::{ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter group, plus the
/// shared step counter used for bias correction.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    /// State for the given parameter group. The id list fixes the group;
    /// later steps must pass the same ids in the same order.
    pub fn new(store: &ParamStore, ids: &[ParamId]) -> Self {
        let m = ids.iter().map(|&id| vec![0.0; store.get(id).len()]).collect();
        let v = ids.iter().map(|&id| vec![0.0; store.get(id).len()]).collect();
        OptimizerState { ids: ids.to_vec(), m, v, step: 0 }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Rebuild state from its raw pieces, as read back from a checkpoint.
    pub fn from_raw(ids: Vec<ParamId>, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64) -> Self {
        assert_eq!(ids.len(), m.len());
        assert_eq!(ids.len(), v.len());
        OptimizerState { ids, m, v, step }
    }

    pub fn raw(&self) -> RawOptimizerState<'_> {
        (&self.ids, &self.m, &self.v, self.step)
    }
}

/// Borrowed view of optimizer state: (ids, first moments, second moments,
/// step count).
pub type RawOptimizerState<'a> = (&'a [ParamId], &'a [Vec<f64>], &'a [Vec<f64>], u64);

/// One Adam update over the state's parameter group, consuming the gradients
/// currently stored on those parameters and then clearing them.
///
/// Every parameter in the group must carry a gradient; a missing one points
/// at a broken backward pass, so it is an error rather than a silent skip.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, cfg: &AdamConfig) -> Result<()> {
    for (i, &id) in state.ids.iter().enumerate() {
        let t = store.get(id);
        if t.grad().is_none() {
            return Err(Error::MissingGradient { param: store.name(id).to_string() });
        }
        if t.len() != state.m[i].len() {
            return Err(Error::StateMismatch {
                detail: format!(
                    "parameter '{}' has {} values but optimizer state has {}",
                    store.name(id),
                    t.len(),
                    state.m[i].len()
                ),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, &id) in state.ids.iter().enumerate() {
        let tensor = store.get_mut(id);
        let grad = tensor.grad().expect("checked above").to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = tensor.data_mut();
        for j in 0..grad.len() {
            let g = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        tensor.clear_grad();
    }
    Ok(())
}
