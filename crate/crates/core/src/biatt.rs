//! Biattentive pooling over contextualized token vectors.
//!
//! Given token matrices `X` (`T_x × d″`) and `Y` (`T_y × d″`) the pipeline is
//! affinity → attention weights → context summaries → augmentation →
//! max/mean/min/self-attentive pooling, applied symmetrically to both sides.
//! Optional row masks mark real tokens; masked rows never influence a result.

use crate::error::{Error, Result};
use crate::mtl::ClassifierHead;
use crate::ndgrad::{Graph, ParamId, ParamStore, PoolKind, Tensor, Var};

/// Self-attention scoring vectors, each of length `3d″`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiattentiveParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub dim: usize,
}

impl BiattentiveParams {
    /// Registers `<prefix>.w1` / `<prefix>.w2`, both zero (uniform initial attention).
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("biattentive dimension must be positive"));
        }
        let w1 = store.add(format!("{prefix}.w1"), Tensor::zeros(&[3 * dim]))?;
        let w2 = store.add(format!("{prefix}.w2"), Tensor::zeros(&[3 * dim]))?;
        Ok(BiattentiveParams { w1, w2, dim })
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            store
                .find(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {prefix}.{n}")))
        };
        let (w1, w2) = (get("w1")?, get("w2")?);
        let len = store.get(w1).len();
        if len % 3 != 0 || store.get(w2).len() != len {
            return Err(Error::Checkpoint(format!("bad scoring vector shapes under {prefix}")));
        }
        Ok(BiattentiveParams { w1, w2, dim: len / 3 })
    }

    /// Width of the pooled pair representation `[s̃_x ; s̃_y]`.
    pub fn output_dim(&self) -> usize {
        24 * self.dim
    }
}

/// `A = X Yᵀ`.
pub fn affinity(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let (_, dx) = g.value(x).dims2()?;
    let (_, dy) = g.value(y).dims2()?;
    if dx != dy {
        return Err(Error::dim(format!("affinity of widths {dx} and {dy}")));
    }
    g.matmul_nt(x, y)
}

fn check_mask(mask: Option<&[bool]>, rows: usize, what: &str) -> Result<()> {
    match mask {
        Some(m) if m.len() != rows => Err(Error::dim(format!(
            "{what} mask has {} entries for {rows} rows",
            m.len()
        ))),
        Some(m) if !m.iter().any(|&v| v) => Err(Error::arg(format!("{what} is fully masked"))),
        _ => Ok(()),
    }
}

/// Fills every entry of the rows where `row_mask` is false.
fn mask_rows(g: &mut Graph, a: Var, row_mask: Option<&[bool]>) -> Result<Var> {
    let Some(m) = row_mask else { return Ok(a) };
    let cols = g.value(a).cols();
    let fill: Vec<bool> = m.iter().flat_map(|&keep| std::iter::repeat(!keep).take(cols)).collect();
    g.masked_fill(a, &fill, f64::NEG_INFINITY)
}

/// `A_x = softmax(A)` over the `T_x` axis and `A_y = softmax(Aᵀ)` over the `T_y`
/// axis, so each column of `A_x` (and of `A_y`) sums to one.
pub fn attention_weights(
    g: &mut Graph,
    a: Var,
    x_mask: Option<&[bool]>,
    y_mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (tx, ty) = g.value(a).dims2()?;
    check_mask(x_mask, tx, "X")?;
    check_mask(y_mask, ty, "Y")?;
    if !g.value(a).all_finite() {
        return Err(Error::Numerical("non-finite affinity".into()));
    }
    let ax = mask_rows(g, a, x_mask)?;
    let ax = g.softmax(ax, 0)?;
    let at = g.transpose(a)?;
    let ay = mask_rows(g, at, y_mask)?;
    let ay = g.softmax(ay, 0)?;
    Ok((ax, ay))
}

/// `C_x = A_xᵀ X` (`T_y × d″`) and `C_y = A_yᵀ Y` (`T_x × d″`).
pub fn context_summaries(g: &mut Graph, x: Var, y: Var, ax: Var, ay: Var) -> Result<(Var, Var)> {
    let cx = g.matmul_tn(ax, x)?;
    let cy = g.matmul_tn(ay, y)?;
    Ok((cx, cy))
}

/// `[X ; X − C ; X ⊙ C]` row by row.
pub fn augment(g: &mut Graph, x: Var, c: Var) -> Result<Var> {
    if g.shape(x) != g.shape(c) {
        return Err(Error::dim(format!(
            "augment of {:?} with {:?}",
            g.shape(x),
            g.shape(c)
        )));
    }
    let diff = g.sub(x, c)?;
    let prod = g.mul(x, c)?;
    g.concat_cols(&[x, diff, prod])
}

/// `[max ; mean ; min ; self]` over the real rows of `xa`, as a `1 × 4·width` row.
/// The self-attentive pool weights rows by `softmax(xa · w)`.
pub fn pool_multi(g: &mut Graph, xa: Var, w: Var, mask: Option<&[bool]>) -> Result<Var> {
    let (t, width) = g.value(xa).dims2()?;
    check_mask(mask, t, "pooled matrix")?;
    if g.value(w).len() != width {
        return Err(Error::dim(format!(
            "scoring vector of length {} for width {width}",
            g.value(w).len()
        )));
    }
    let rows: Vec<usize> = match mask {
        Some(m) => (0..t).filter(|&i| m[i]).collect(),
        None => (0..t).collect(),
    };
    let groups = [rows];
    let max = g.pool_rows(xa, &groups, PoolKind::Max)?;
    let mean = g.pool_rows(xa, &groups, PoolKind::Mean)?;
    let min = g.pool_rows(xa, &groups, PoolKind::Min)?;
    let wc = g.reshape(w, vec![width, 1])?;
    let scores = g.matmul(xa, wc)?;
    let scores = match mask {
        Some(m) => {
            let fill: Vec<bool> = m.iter().map(|&keep| !keep).collect();
            g.masked_fill(scores, &fill, f64::NEG_INFINITY)?
        }
        None => scores,
    };
    let beta = g.softmax(scores, 0)?;
    let selfp = g.matmul_tn(beta, xa)?;
    g.concat_cols(&[max, mean, min, selfp])
}

/// Pooled pair representation `[s̃_x ; s̃_y]` (`1 × 24d″`).
pub fn biatt_pool(
    g: &mut Graph,
    store: &ParamStore,
    params: &BiattentiveParams,
    x: Var,
    y: Var,
    x_mask: Option<&[bool]>,
    y_mask: Option<&[bool]>,
) -> Result<Var> {
    let (_, d) = g.value(x).dims2()?;
    if d != params.dim {
        return Err(Error::dim(format!("token width {d} but biattention expects {}", params.dim)));
    }
    let a = affinity(g, x, y)?;
    let (ax, ay) = attention_weights(g, a, x_mask, y_mask)?;
    let (cx, cy) = context_summaries(g, x, y, ax, ay)?;
    let x_given_y = augment(g, x, cy)?;
    let y_given_x = augment(g, y, cx)?;
    let w1 = g.param(store, params.w1);
    let w2 = g.param(store, params.w2);
    let sx = pool_multi(g, x_given_y, w1, x_mask)?;
    let sy = pool_multi(g, y_given_x, w2, y_mask)?;
    g.concat_cols(&[sx, sy])
}

/// Full biattentive classifier for one sentence pair: pooled pair → task head.
#[allow(clippy::too_many_arguments)]
pub fn biatt_classify(
    g: &mut Graph,
    store: &ParamStore,
    params: &BiattentiveParams,
    head: &ClassifierHead,
    x: Var,
    y: Var,
    x_mask: Option<&[bool]>,
    y_mask: Option<&[bool]>,
) -> Result<Var> {
    let pooled = biatt_pool(g, store, params, x, y, x_mask, y_mask)?;
    head.forward(g, store, pooled)
}
