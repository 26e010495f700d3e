//! Central finite-difference verification of analytic gradients.

use std::fmt;

use crate::error::{Error, Result};
use crate::mtl::{cycle_loss, LossWeights, MtlModel};
use crate::ndgrad::{Graph, ParamStore, Tensor};
use crate::textdata::{batch_iter, Batch};
use crate::trainer::{derive_seed, prepare_data, TrainConfig};

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
    pub checked: usize,
    /// Flat index, analytic and numeric value of the entry with the largest relative error.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<28} n={:<6} max_rel={:.3e} max_abs={:.3e}",
                g.name, g.checked, g.max_rel, g.max_abs
            )?;
            if let Some((k, a, n)) = g.worst {
                writeln!(f, "{:<28} worst [{k}]: analytic {a:.6e} numeric {n:.6e}", "")?;
            }
        }
        write!(f, "max relative error: {:.3e}", self.max_rel())
    }
}

/// Compares `analytic` (one tensor per parameter, in store order) against central
/// differences of `loss`. Every scalar of every parameter is perturbed; `store`
/// is restored afterwards.
pub fn compare_gradients(
    store: &mut ParamStore,
    analytic: &[Tensor],
    eps: f64,
    loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    compare_gradients_in(store, |s| s, analytic, eps, loss)
}

/// [`compare_gradients`] for parameters that live inside a larger value `state`.
pub fn compare_gradients_in<S>(
    state: &mut S,
    params: impl Fn(&mut S) -> &mut ParamStore,
    analytic: &[Tensor],
    eps: f64,
    mut loss: impl FnMut(&S) -> Result<f64>,
) -> Result<GradCheckReport> {
    compare_term_gradients_in(state, params, analytic, eps, |s| Ok(vec![loss(s)?]))
}

/// [`compare_gradients_in`] for a loss given as a list of additive terms.
///
/// Each term is differenced on its own and the differences are summed. That is
/// the same central difference of the total, but rounding in the final
/// reductions (which work at the scale of the whole loss) no longer swamps
/// gradient entries near the `1e-8` floor.
pub fn compare_term_gradients_in<S>(
    state: &mut S,
    params: impl Fn(&mut S) -> &mut ParamStore,
    analytic: &[Tensor],
    eps: f64,
    mut terms: impl FnMut(&S) -> Result<Vec<f64>>,
) -> Result<GradCheckReport> {
    let n = params(state).len();
    if analytic.len() != n {
        return Err(Error::dim(format!("{} analytic gradients for {n} parameters", analytic.len())));
    }
    if !(eps > 0.0) {
        return Err(Error::arg("eps must be positive"));
    }
    let ids: Vec<_> = params(state).ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for (&id, a) in ids.iter().zip(analytic) {
        let store = params(state);
        if a.len() != store.get(id).len() {
            return Err(Error::dim(format!("analytic gradient size for {}", store.name(id))));
        }
        let mut ge = GroupError {
            name: store.name(id).to_string(),
            max_rel: 0.0,
            max_abs: 0.0,
            checked: 0,
            worst: None,
        };
        for k in 0..a.len() {
            let orig = params(state).get(id).data()[k];
            params(state).get_mut(id).data_mut()[k] = orig + eps;
            let plus = terms(state);
            params(state).get_mut(id).data_mut()[k] = orig - eps;
            let minus = terms(state);
            params(state).get_mut(id).data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            if plus.len() != minus.len() {
                return Err(Error::dim("number of loss terms changed under perturbation"));
            }
            let numeric = plus.iter().zip(&minus).map(|(p, m)| p - m).sum::<f64>() / (2.0 * eps);
            let an = a.data()[k];
            let rel = relative_error(an, numeric);
            if ge.worst.is_none() || rel > ge.max_rel {
                ge.max_rel = rel;
                ge.worst = Some((k, an, numeric));
            }
            ge.max_abs = ge.max_abs.max((an - numeric).abs());
            ge.checked += 1;
        }
        groups.push(ge);
    }
    Ok(GradCheckReport { groups })
}

/// Builds a loss graph with `build` and checks its parameter gradients.
pub fn grad_check(
    store: &mut ParamStore,
    eps: f64,
    build: impl Fn(&mut Graph, &ParamStore) -> Result<crate::ndgrad::Var>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let l = build(&mut g, store)?;
    let analytic = g.backward(l)?.param_grads(&g, store);
    compare_gradients(store, &analytic, eps, |s| {
        let mut g = Graph::inference();
        let l = build(&mut g, s)?;
        g.value(l).item()
    })
}

/// Checks the gradient of the full multi-task objective
/// `Σ_k L_task + β·L_adv + γ·L_diff` for one cycle of `batches`.
///
/// The objective itself has no reversal in it, so the boundary is run as an
/// identity (`λ = −1`) here; the reversal is exercised by its own tests.
pub fn grad_check_model(
    model: &mut MtlModel,
    batches: &[(usize, &Batch)],
    weights: &LossWeights,
    eps: f64,
) -> Result<GradCheckReport> {
    let w = LossWeights {
        lambda: -1.0,
        ..*weights
    };
    let mut g = Graph::new();
    let l = cycle_loss(&mut g, model, batches, &w)?.total;
    let analytic = g.backward(l)?.param_grads(&g, &model.store);
    compare_term_gradients_in(model, |m| &mut m.store, &analytic, eps, |m| {
        let mut g = Graph::inference();
        let cl = cycle_loss(&mut g, m, batches, &w)?;
        let mut terms = Vec::new();
        for (f, (_, batch)) in cl.forwards.iter().zip(batches) {
            let logits = g.value(f.logits);
            let n = batch.len() as f64;
            for (row, &y) in logits.data().chunks(logits.shape()[1]).zip(&batch.labels) {
                terms.push(excess_cross_entropy(row, y) / n);
            }
        }
        if let Some(a) = cl.adv.filter(|_| w.beta != 0.0) {
            terms.push(w.beta * g.value(a).item()?);
        }
        if let Some(d) = cl.diff.filter(|_| w.gamma != 0.0) {
            terms.push(w.gamma * g.value(d).item()?);
        }
        Ok(terms)
    })
}

/// `CE(z, y) − ln K`, evaluated as `ln1p(mean_j expm1(z_j − z_y))`.
///
/// The constant drops out of any difference, and near-uniform logits (the
/// regime of a freshly initialized model) keep full relative precision.
fn excess_cross_entropy(z: &[f64], y: usize) -> f64 {
    let zy = z[y];
    let mean = z.iter().map(|&zj| (zj - zy).exp_m1()).sum::<f64>() / z.len() as f64;
    let v = mean.ln_1p();
    if v.is_finite() {
        return v;
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&zj| (zj - m).exp()).sum::<f64>().ln() - zy - (z.len() as f64).ln()
}

/// Two-task ASP model small enough to check every scalar in well under a minute.
pub const DESK_GRADCHECK_CONFIG: &str = "\
framework = ASP
hidden = 8
embed_dim = 6
embed_scale = 4
mlp_hidden = 16
batch_size = 4
beta = 0.01
gamma = 0.05
synth.min_len = 3
synth.max_len = 6
task.overlap.synth = shared-overlap
task.overlap.train_size = 4
task.overlap.dev_size = 4
task.marker.synth = private-marker:0
task.marker.train_size = 4
task.marker.dev_size = 4
";

/// Builds the model described by `cfg` and checks the full objective on the
/// first training batch of every task.
pub fn grad_check_config(cfg: &TrainConfig, eps: f64) -> Result<GradCheckReport> {
    let data = prepare_data(cfg)?;
    let mut model = MtlModel::new(
        &data.model_config(cfg),
        data.vocab.clone(),
        data.embeddings.clone(),
        derive_seed(cfg.seed, "model"),
    )?;
    let batches: Vec<Batch> = data
        .tasks
        .iter()
        .map(|t| Ok(batch_iter(&t.train, cfg.batch_size, None)?.swap_remove(0)))
        .collect::<Result<_>>()?;
    let cycle: Vec<(usize, &Batch)> = batches.iter().enumerate().collect();
    grad_check_model(&mut model, &cycle, &cfg.loss_weights(), eps)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn linear_softmax() -> (ParamStore, Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let mut r = |n| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        s.add("w", Tensor::matrix(4, 3, r(12)).unwrap()).unwrap();
        s.add("b", Tensor::vector(r(3)).unwrap()).unwrap();
        let x = Tensor::matrix(5, 4, r(20)).unwrap();
        (s, x, vec![0, 2, 1, 1, 0])
    }

    fn linear_loss(g: &mut Graph, s: &ParamStore, x: &Tensor, y: &[usize]) -> Result<crate::ndgrad::Var> {
        let xv = g.constant(x.clone());
        let w = g.param(s, s.find("w").unwrap());
        let b = g.param(s, s.find("b").unwrap());
        let z = g.matmul(xv, w)?;
        let z = g.add_row(z, b)?;
        g.cross_entropy(z, y)
    }

    #[test]
    fn linear_softmax_is_near_exact() {
        let (mut s, x, y) = linear_softmax();
        let r = grad_check(&mut s, DEFAULT_EPS, |g, s| linear_loss(g, s, &x, &y)).unwrap();
        assert!(r.max_rel() < 1e-7, "{r}");
        assert_eq!(r.groups.iter().map(|g| g.checked).sum::<usize>(), 15);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let (mut s, x, y) = linear_softmax();
        let mut g = Graph::new();
        let l = linear_loss(&mut g, &s, &x, &y).unwrap();
        let mut analytic = g.backward(l).unwrap().param_grads(&g, &s);
        analytic[0].data_mut()[5] *= 1.01;
        let r = compare_gradients(&mut s, &analytic, DEFAULT_EPS, |s| {
            let mut g = Graph::inference();
            let l = linear_loss(&mut g, s, &x, &y)?;
            g.value(l).item()
        })
        .unwrap();
        assert!(r.max_rel() > 1e-3);
        assert_eq!(r.worst().unwrap().name, "w");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-12, 0.0), 1e-12 / 1e-8);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
