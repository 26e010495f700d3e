use crate::error::{Error, Result};
use crate::ndgrad::{ParamStore, Tensor};
use crate::trainer::TrainConfig;

/// Learning-rate schedule state.
///
/// The rate is kept as counts rather than a running product, so after `E`
/// epochs without drops it equals `initial × decay^E` computed in one go.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub drops: usize,
    pub initial_lr: f64,
    pub decay: f64,
    pub divisor: f64,
    pub threshold: f64,
    /// Mean dev accuracy after each completed epoch.
    pub dev_history: Vec<f64>,
    pub best_dev: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stop: bool,
}

impl TrainState {
    pub fn new(initial_lr: f64, decay: f64, divisor: f64, threshold: f64) -> Self {
        TrainState {
            epoch: 0,
            lr: initial_lr,
            drops: 0,
            initial_lr,
            decay,
            divisor,
            threshold,
            dev_history: Vec::new(),
            best_dev: None,
            best_epoch: None,
            stop: initial_lr < threshold,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.initial_lr, cfg.lr_decay, cfg.lr_divisor, cfg.lr_threshold)
    }

    fn recompute(&mut self) {
        self.lr = self.initial_lr * self.decay.powi(self.epoch as i32) / self.divisor.powi(self.drops as i32);
        self.stop = self.lr < self.threshold;
    }
}

/// End-of-epoch update: decay every epoch, divide once more when the mean dev
/// accuracy fell below the previous epoch's, stop below the threshold.
pub fn lr_update(state: &TrainState, mean_dev_acc: f64) -> TrainState {
    let mut next = state.clone();
    let dropped = state.dev_history.last().is_some_and(|&prev| mean_dev_acc < prev);
    next.epoch += 1;
    next.drops += usize::from(dropped);
    next.dev_history.push(mean_dev_acc);
    if state.best_dev.is_none_or(|b| mean_dev_acc > b) {
        next.best_dev = Some(mean_dev_acc);
        next.best_epoch = Some(next.epoch);
    }
    next.recompute();
    next
}

/// The same update with the dev decision forced either way.
pub fn lr_update_forced(state: &TrainState, mean_dev_acc: f64, dropped: bool) -> TrainState {
    let mut next = lr_update(state, mean_dev_acc);
    next.drops = state.drops + usize::from(dropped);
    next.recompute();
    next
}

/// `p ← p − lr·g` for every parameter. Gradients are checked for NaN before any
/// parameter changes; the error names the offending parameter.
pub fn sgd_step(store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
    sgd_step_where(store, grads, lr, |_| true)
}

/// [`sgd_step`] restricted to the parameters whose name satisfies `select`.
pub fn sgd_step_where(
    store: &mut ParamStore,
    grads: &[Tensor],
    lr: f64,
    select: impl Fn(&str) -> bool,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::dim(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::arg(format!("learning rate must be a non-negative number, got {lr}")));
    }
    let ids: Vec<_> = store.ids().collect();
    for (&id, g) in ids.iter().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::dim(format!(
                "gradient shape {:?} for parameter {} of shape {:?}",
                g.shape(),
                store.name(id),
                store.get(id).shape()
            )));
        }
        if g.has_nan() {
            return Err(Error::Numerical(format!("NaN gradient for parameter {}", store.name(id))));
        }
    }
    for (&id, g) in ids.iter().zip(grads) {
        if !select(store.name(id)) {
            continue;
        }
        for (p, &d) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
            *p -= lr * d;
        }
    }
    Ok(())
}
