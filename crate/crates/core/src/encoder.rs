//! BiLSTM-Max sentence encoder and pair features.
//!
//! Batches are laid out time-major: the hidden-state matrix has `T·B` rows and
//! row `t·B + i` holds `[→h_t ; ←h_t]` of example `i`. Padding positions are
//! excluded from pooling, and the backward direction carries a zero state through
//! them, so padded and unpadded encodings agree bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndgrad::{Graph, ParamId, ParamStore, PoolKind, Tensor, Var};
use crate::textdata::{EmbeddingTable, PaddedSeqs, Vocabulary};

/// Uniform in ±1/√fan_in.
pub(crate) fn init_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Weights of one bidirectional LSTM. Each direction packs the i, f, g, o gates
/// into a `4d × (d_w + d)` matrix and a `4d` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub fwd_w: ParamId,
    pub fwd_b: ParamId,
    pub bwd_w: ParamId,
    pub bwd_b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl EncoderParams {
    /// Registers `<prefix>.{fwd,bwd}.{w,b}` in `store`, forget-gate bias at +1.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::arg("encoder dimensions must be positive"));
        }
        let fan_in = input_dim + hidden;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        let bias = Tensor::vector(bias)?;
        let fwd_w = store.add(format!("{prefix}.fwd.w"), init_uniform(rng, 4 * hidden, fan_in, fan_in))?;
        let fwd_b = store.add(format!("{prefix}.fwd.b"), bias.clone())?;
        let bwd_w = store.add(format!("{prefix}.bwd.w"), init_uniform(rng, 4 * hidden, fan_in, fan_in))?;
        let bwd_b = store.add(format!("{prefix}.bwd.b"), bias)?;
        Ok(EncoderParams {
            fwd_w,
            fwd_b,
            bwd_w,
            bwd_b,
            input_dim,
            hidden,
        })
    }

    /// Looks up previously registered weights (e.g. after loading a checkpoint).
    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            store
                .find(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {prefix}.{n}")))
        };
        let fwd_w = get("fwd.w")?;
        let (rows, cols) = store.get(fwd_w).dims2()?;
        if rows % 4 != 0 || cols <= rows / 4 {
            return Err(Error::Checkpoint(format!("{prefix}.fwd.w has shape {rows}x{cols}")));
        }
        let hidden = rows / 4;
        let p = EncoderParams {
            fwd_w,
            fwd_b: get("fwd.b")?,
            bwd_w: get("bwd.w")?,
            bwd_b: get("bwd.b")?,
            input_dim: cols - hidden,
            hidden,
        };
        for (w, b) in [(p.fwd_w, p.fwd_b), (p.bwd_w, p.bwd_b)] {
            if store.get(w).shape() != [4 * hidden, cols] || store.get(b).shape() != [4 * hidden] {
                return Err(Error::Checkpoint(format!("inconsistent shapes under {prefix}")));
            }
        }
        Ok(p)
    }

    /// Width of a sentence vector, `2d`.
    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Encoder outputs for a batch: `T·B × 2d` hidden matrix plus validity mask.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    pub h: Var,
    pub steps: usize,
    pub batch: usize,
    pub lengths: Vec<usize>,
}

impl HiddenStates {
    pub fn is_valid(&self, row: usize) -> bool {
        row / self.batch < self.lengths[row % self.batch]
    }

    /// Row mask over all `T·B` rows (true = real token).
    pub fn mask(&self) -> Vec<bool> {
        (0..self.steps * self.batch).map(|r| self.is_valid(r)).collect()
    }

    /// Rows of example `i`, in time order.
    pub fn example_rows(&self, i: usize) -> Vec<usize> {
        (0..self.lengths[i]).map(|t| t * self.batch + i).collect()
    }
}

/// Embedding rows for a padded batch, as a `T·B × d_w` time-major constant.
pub fn embed(g: &mut Graph, table: &EmbeddingTable, seqs: &PaddedSeqs) -> Result<Var> {
    let (b, t, d) = (seqs.batch(), seqs.max_len(), table.dim());
    let mut data = Vec::with_capacity(t * b * d);
    for step in 0..t {
        for seq in &seqs.tokens {
            let id = seq[step];
            if id >= table.vocab_size() {
                return Err(Error::Data(format!("token index {id} outside embedding table")));
            }
            data.extend_from_slice(table.row(id));
        }
    }
    Ok(g.constant(Tensor::matrix(t * b, d, data)?))
}

struct Direction {
    w: Var,
    b: Var,
}

fn lstm_direction(
    g: &mut Graph,
    dir: &Direction,
    inputs: &[Var],
    lengths: &[usize],
    hidden: usize,
    reverse: bool,
) -> Result<Vec<Var>> {
    let batch = lengths.len();
    let steps = inputs.len();
    let zero = g.constant(Tensor::zeros(&[batch, hidden]));
    let (mut h, mut c) = (zero, zero);
    let mut out = vec![zero; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let xh = g.concat_cols(&[inputs[t], h])?;
        let z = g.matmul_nt(xh, dir.w)?;
        let z = g.add_row(z, dir.b)?;
        let i = g.slice_cols(z, 0, hidden)?;
        let i = g.sigmoid(i)?;
        let f = g.slice_cols(z, hidden, 2 * hidden)?;
        let f = g.sigmoid(f)?;
        let cand = g.slice_cols(z, 2 * hidden, 3 * hidden)?;
        let cand = g.tanh(cand)?;
        let o = g.slice_cols(z, 3 * hidden, 4 * hidden)?;
        let o = g.sigmoid(o)?;
        let fc = g.mul(f, c)?;
        let ig = g.mul(i, cand)?;
        let c_new = g.add(fc, ig)?;
        let tc = g.tanh(c_new)?;
        let h_new = g.mul(o, tc)?;
        let active: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
        if active.iter().all(|&a| a) {
            h = h_new;
            c = c_new;
        } else {
            h = g.select_rows(&active, h_new, h)?;
            c = g.select_rows(&active, c_new, c)?;
        }
        out[t] = h;
    }
    Ok(out)
}

/// Runs both LSTM directions over `embedded` (`T·B × d_w`, time-major) with
/// zero initial states.
pub fn bilstm_forward(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    embedded: Var,
    lengths: &[usize],
) -> Result<HiddenStates> {
    let batch = lengths.len();
    let (rows, d_w) = g.value(embedded).dims2()?;
    if batch == 0 || rows % batch != 0 {
        return Err(Error::dim(format!("{rows} embedded rows for batch {batch}")));
    }
    if d_w != params.input_dim {
        return Err(Error::dim(format!(
            "embedding width {d_w} but encoder expects {}",
            params.input_dim
        )));
    }
    let steps = rows / batch;
    if lengths.iter().any(|&l| l == 0 || l > steps) {
        return Err(Error::arg("sequence lengths must lie in 1..=T"));
    }
    let inputs: Vec<Var> = (0..steps)
        .map(|t| g.gather_rows(embedded, &(t * batch..(t + 1) * batch).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let fwd = Direction {
        w: g.param(store, params.fwd_w),
        b: g.param(store, params.fwd_b),
    };
    let bwd = Direction {
        w: g.param(store, params.bwd_w),
        b: g.param(store, params.bwd_b),
    };
    let hf = lstm_direction(g, &fwd, &inputs, lengths, params.hidden, false)?;
    let hb = lstm_direction(g, &bwd, &inputs, lengths, params.hidden, true)?;
    let rows: Vec<Var> = hf
        .iter()
        .zip(&hb)
        .map(|(&f, &b)| g.concat_cols(&[f, b]))
        .collect::<Result<_>>()?;
    let h = g.concat_rows(&rows)?;
    Ok(HiddenStates {
        h,
        steps,
        batch,
        lengths: lengths.to_vec(),
    })
}

/// Per-dimension maximum over the real rows of each example: `B × 2d`.
pub fn max_pool(g: &mut Graph, hs: &HiddenStates) -> Result<Var> {
    let groups: Vec<Vec<usize>> = (0..hs.batch).map(|i| hs.example_rows(i)).collect();
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::arg("max_pool over a fully masked sentence"));
    }
    g.pool_rows(hs.h, &groups, PoolKind::Max)
}

/// `[s1 ; s2 ; s1 − s2 ; s1 ⊙ s2]`, row-wise for batches.
pub fn pair_features(g: &mut Graph, s1: Var, s2: Var) -> Result<Var> {
    if g.shape(s1) != g.shape(s2) {
        return Err(Error::dim(format!(
            "pair_features of {:?} and {:?}",
            g.shape(s1),
            g.shape(s2)
        )));
    }
    let diff = g.sub(s1, s2)?;
    let prod = g.mul(s1, s2)?;
    g.concat_cols(&[s1, s2, diff, prod])
}

/// Embeds, runs the BiLSTM and max-pools a padded batch.
pub fn encode_batch(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    table: &EmbeddingTable,
    seqs: &PaddedSeqs,
) -> Result<(HiddenStates, Var)> {
    let x = embed(g, table, seqs)?;
    let hs = bilstm_forward(g, store, params, x, &seqs.lengths)?;
    let s = max_pool(g, &hs)?;
    Ok((hs, s))
}

/// Sentence vector of already-indexed tokens (inference only).
pub fn encode_ids(
    ids: &[usize],
    table: &EmbeddingTable,
    store: &ParamStore,
    params: &EncoderParams,
) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(Error::arg("cannot encode an empty sentence"));
    }
    let mut g = Graph::inference();
    let seqs = PaddedSeqs::new(&[ids])?;
    let (_, s) = encode_batch(&mut g, store, params, table, &seqs)?;
    Ok(g.value(s).data().to_vec())
}

/// Sentence vector of a token list: lookup, BiLSTM, max-pool.
pub fn encode_sentence(
    tokens: &[String],
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    store: &ParamStore,
    params: &EncoderParams,
) -> Result<Vec<f64>> {
    encode_ids(&vocab.encode(tokens), table, store, params)
}
