//! Probing frozen sentence representations.
//!
//! Feature extraction for the shared, private and concatenated encoders;
//! seeded logistic and MLP probe classifiers; the length, word-content and
//! word-order auxiliary tasks; cosine/Spearman scoring of sentence pairs.
//! Nothing in this module writes to model parameters.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoder::{init_uniform, pair_features};
use crate::error::{Error, Result};
use crate::mtl::{argmax_rows, encode_side, Framework, MtlModel};
use crate::ndgrad::{Graph, ParamStore, Tensor};
use crate::textdata::{Dataset, EmbeddingTable, PaddedSeqs};

const ENCODE_BATCH: usize = 256;

/// Which encoder output a feature matrix holds.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum EncoderTag {
    Shared,
    Private(String),
    /// Shared vector followed by the private vector of the named task
    /// (the first task when `None`).
    Concat(Option<String>),
}

impl FromStr for EncoderTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(EncoderTag::Shared),
            "concat" => Ok(EncoderTag::Concat(None)),
            _ => {
                if let Some(t) = s.strip_prefix("private:").filter(|t| !t.is_empty()) {
                    Ok(EncoderTag::Private(t.to_string()))
                } else if let Some(t) = s.strip_prefix("concat:").filter(|t| !t.is_empty()) {
                    Ok(EncoderTag::Concat(Some(t.to_string())))
                } else {
                    Err(Error::Config(format!(
                        "unknown encoder tag {s:?} (expected shared, private:<task>, concat or concat:<task>)"
                    )))
                }
            }
        }
    }
}

impl fmt::Display for EncoderTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EncoderTag::Shared => write!(f, "shared"),
            EncoderTag::Private(t) => write!(f, "private:{t}"),
            EncoderTag::Concat(None) => write!(f, "concat"),
            EncoderTag::Concat(Some(t)) => write!(f, "concat:{t}"),
        }
    }
}

impl EncoderTag {
    /// Resolves the tag against a model: the task whose private encoder is
    /// used (if any). FS models only accept `shared`.
    fn resolve(&self, model: &MtlModel) -> Result<Option<usize>> {
        let task = match self {
            EncoderTag::Shared => return Ok(None),
            EncoderTag::Private(t) | EncoderTag::Concat(Some(t)) => t.as_str(),
            EncoderTag::Concat(None) => model.tasks.first().map(|t| t.name.as_str()).unwrap_or(""),
        };
        if model.framework == Framework::Fs {
            return Err(Error::Framework(format!(
                "encoder tag {self} needs private encoders, but the model is FS"
            )));
        }
        model.task_index(task).map(Some)
    }

    /// Dimension of one sentence vector under this tag.
    pub fn sentence_dim(&self, model: &MtlModel) -> Result<usize> {
        let d2 = 2 * model.hidden();
        Ok(match (self, self.resolve(model)?) {
            (EncoderTag::Concat(_), _) => 2 * d2,
            _ => d2,
        })
    }
}

/// `N × D` features with one id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub tag: EncoderTag,
    pub ids: Vec<String>,
    pub data: Tensor,
}

impl FeatureMatrix {
    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// CSV text: header `id,tag=<tag>,D=<D>`, then `id,v1,…,vD` per row.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = format!("id,tag={},D={d}\n", self.tag);
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for v in &self.data.data()[i * d..(i + 1) * d] {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, message: String| Error::format(path.display().to_string(), line, message);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty feature file".into()))?;
        let h: Vec<&str> = header.split(',').collect();
        let (tag, d) = match h.as_slice() {
            ["id", t, d] => (
                t.strip_prefix("tag=").ok_or_else(|| bad(1, format!("bad header {header:?}")))?.parse()?,
                d.strip_prefix("D=")
                    .and_then(|d| d.parse::<usize>().ok())
                    .ok_or_else(|| bad(1, format!("bad header {header:?}")))?,
            ),
            _ => return Err(bad(1, format!("bad header {header:?}"))),
        };
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (n, line) in lines.enumerate() {
            let mut cells = line.split(',');
            ids.push(cells.next().unwrap_or_default().to_string());
            let row: Vec<f64> = cells
                .map(|c| c.parse::<f64>().map_err(|_| bad(n + 2, format!("bad number {c:?}"))))
                .collect::<Result<_>>()?;
            if row.len() != d {
                return Err(bad(n + 2, format!("{} values, header says D={d}", row.len())));
            }
            data.extend(row);
        }
        let data = Tensor::matrix(ids.len(), d, data)?;
        Ok(FeatureMatrix { tag, ids, data })
    }
}

/// Sentence vectors of `sentences` (token ids) under `tag`, one row each.
pub fn sentence_vectors(model: &MtlModel, tag: &EncoderTag, sentences: &[Vec<usize>]) -> Result<Tensor> {
    let task = tag.resolve(model)?;
    let dim = tag.sentence_dim(model)?;
    let mut out = Vec::with_capacity(sentences.len() * dim);
    for chunk in sentences.chunks(ENCODE_BATCH) {
        let seqs = PaddedSeqs::new(chunk)?;
        let mut g = Graph::inference();
        let side = encode_side(&mut g, model, task.unwrap_or(0), &seqs)?;
        let v = match tag {
            EncoderTag::Shared => side.shared_vec,
            EncoderTag::Private(_) => side.private.as_ref().map(|p| p.1).expect("resolved private encoder"),
            EncoderTag::Concat(_) => side.sentence_vec(&mut g)?,
        };
        out.extend_from_slice(g.value(v).data());
    }
    Tensor::matrix(sentences.len(), dim, out)
}

/// Features of a dataset: pair features `[u; v; u−v; u⊙v]` for each example.
/// Row ids are the example indices.
pub fn extract_features(model: &MtlModel, dataset: &Dataset, tag: &EncoderTag) -> Result<FeatureMatrix> {
    let first: Vec<Vec<usize>> = dataset.examples.iter().map(|e| e.tokens1.clone()).collect();
    let second: Vec<Vec<usize>> = dataset.examples.iter().map(|e| e.tokens2.clone()).collect();
    let u = sentence_vectors(model, tag, &first)?;
    let v = sentence_vectors(model, tag, &second)?;
    let mut g = Graph::inference();
    let (u, v) = (g.constant(u), g.constant(v));
    let f = pair_features(&mut g, u, v)?;
    Ok(FeatureMatrix {
        tag: tag.clone(),
        ids: (0..dataset.len()).map(|i| i.to_string()).collect(),
        data: g.value(f).clone(),
    })
}

/// Features of single sentences (sentence vectors).
pub fn extract_sentence_features(model: &MtlModel, sentences: &[Vec<usize>], tag: &EncoderTag) -> Result<FeatureMatrix> {
    Ok(FeatureMatrix {
        tag: tag.clone(),
        ids: (0..sentences.len()).map(|i| i.to_string()).collect(),
        data: sentence_vectors(model, tag, sentences)?,
    })
}

/// A sentence representation to probe.
#[derive(Clone, Copy, Debug)]
pub enum Representation<'a> {
    Encoder { model: &'a MtlModel, tag: &'a EncoderTag },
    /// Mean of the word embeddings; blind to word order.
    BagOfEmbeddings(&'a EmbeddingTable),
    /// Fixed seeded Gaussian projection of the mean word embedding to `dim`.
    RandomProjection { embeddings: &'a EmbeddingTable, dim: usize, seed: u64 },
}

impl Representation<'_> {
    pub fn encode(&self, sentences: &[Vec<usize>]) -> Result<Tensor> {
        match *self {
            Representation::Encoder { model, tag } => sentence_vectors(model, tag, sentences),
            Representation::BagOfEmbeddings(table) => bag_of_embeddings(table, sentences),
            Representation::RandomProjection { embeddings, dim, seed } => {
                if dim == 0 {
                    return Err(Error::arg("projection dimension must be positive"));
                }
                let boe = bag_of_embeddings(embeddings, sentences)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let scale = 1.0 / (embeddings.dim() as f64).sqrt();
                let p: Vec<f64> = (0..embeddings.dim() * dim).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect();
                let mut g = Graph::inference();
                let (x, p) = (g.constant(boe), g.constant(Tensor::matrix(embeddings.dim(), dim, p)?));
                let y = g.matmul(x, p)?;
                Ok(g.value(y).clone())
            }
        }
    }
}

fn bag_of_embeddings(table: &EmbeddingTable, sentences: &[Vec<usize>]) -> Result<Tensor> {
    let d = table.dim();
    let mut out = vec![0.0; sentences.len() * d];
    for (row, s) in out.chunks_mut(d).zip(sentences) {
        if s.is_empty() {
            return Err(Error::Data("empty sentence".into()));
        }
        for &t in s {
            if t >= table.vocab_size() {
                return Err(Error::Data(format!("token id {t} outside the embedding table")));
            }
            for (o, e) in row.iter_mut().zip(table.row(t)) {
                *o += e / s.len() as f64;
            }
        }
    }
    Tensor::matrix(sentences.len(), d, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Logistic,
    /// One tanh hidden layer of the given width.
    Mlp(usize),
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ProbeKind::Logistic),
            "mlp-512" | "mlp" => Ok(ProbeKind::Mlp(512)),
            _ => s
                .strip_prefix("mlp-")
                .and_then(|h| h.parse().ok())
                .filter(|&h| h > 0)
                .map(ProbeKind::Mlp)
                .ok_or_else(|| Error::Config(format!("unknown probe type {s:?}"))),
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeKind::Logistic => write!(f, "logistic"),
            ProbeKind::Mlp(h) => write!(f, "mlp-{h}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of examples held out for the reported accuracy.
    pub test_fraction: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn logistic(seed: u64) -> Self {
        ProbeConfig {
            kind: ProbeKind::Logistic,
            epochs: 40,
            lr: 0.1,
            batch_size: 32,
            test_fraction: 0.2,
            seed,
        }
    }

    /// The auxiliary-task default: an MLP with 512 hidden units.
    pub fn mlp(seed: u64) -> Self {
        ProbeConfig {
            kind: ProbeKind::Mlp(512),
            ..Self::logistic(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || !(0.0 < self.test_fraction && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("invalid probe config {self:?}")));
        }
        Ok(())
    }
}

/// Outcome of a probe run.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Trains a probe on a seeded split of `features` and reports held-out accuracy.
///
/// Features are standardized with the training split's statistics. The split
/// is stratified-free but guarantees both sides are non-empty.
pub fn train_probe(features: &Tensor, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if labels.len() != n {
        return Err(Error::dim(format!("{n} feature rows but {} labels", labels.len())));
    }
    if features.has_nan() {
        return Err(Error::Numerical("NaN in probe features".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    if labels.iter().collect::<HashSet<_>>().len() < 2 {
        return Err(Error::Data("probe labels contain a single class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n - 1);
    let (test_idx, train_idx) = order.split_at(n_test);

    let rows = |idx: &[usize]| {
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
        }
        out
    };
    let (mut xtr, mut xte) = (rows(train_idx), rows(test_idx));
    for j in 0..d {
        let col = || xtr.iter().skip(j).step_by(d);
        let mean = col().sum::<f64>() / train_idx.len() as f64;
        let var = col().map(|v| (v - mean).powi(2)).sum::<f64>() / train_idx.len() as f64;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for x in [&mut xtr, &mut xte] {
            for v in x.iter_mut().skip(j).step_by(d) {
                *v = (*v - mean) / sd;
            }
        }
    }
    let xtr = Tensor::matrix(train_idx.len(), d, xtr)?;
    let xte = Tensor::matrix(test_idx.len(), d, xte)?;
    let ytr: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();

    let mut store = ParamStore::new();
    match cfg.kind {
        ProbeKind::Logistic => {
            store.add("w", Tensor::zeros(&[d, classes]))?;
            store.add("b", Tensor::zeros(&[classes]))?;
        }
        ProbeKind::Mlp(h) => {
            store.add("w1", init_uniform(&mut rng, d, h, d))?;
            store.add("b1", Tensor::zeros(&[h]))?;
            store.add("w2", init_uniform(&mut rng, h, classes, h))?;
            store.add("b2", Tensor::zeros(&[classes]))?;
        }
    }
    let forward = |g: &mut Graph, store: &ParamStore, x: Tensor| -> Result<crate::ndgrad::Var> {
        let x = g.constant(x);
        let p = |g: &mut Graph, name: &str| g.param(store, store.find(name).expect("probe parameter"));
        match cfg.kind {
            ProbeKind::Logistic => {
                let (w, b) = (p(g, "w"), p(g, "b"));
                let z = g.matmul(x, w)?;
                g.add_row(z, b)
            }
            ProbeKind::Mlp(_) => {
                let (w1, b1, w2, b2) = (p(g, "w1"), p(g, "b1"), p(g, "w2"), p(g, "b2"));
                let z = g.matmul(x, w1)?;
                let z = g.add_row(z, b1)?;
                let hdn = g.tanh(z)?;
                let z = g.matmul(hdn, w2)?;
                g.add_row(z, b2)
            }
        }
    };

    let mut idx: Vec<usize> = (0..train_idx.len()).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch_size) {
            let x = take_rows(&xtr, chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| ytr[i]).collect();
            let mut g = Graph::new();
            let z = forward(&mut g, &store, x)?;
            let loss = g.cross_entropy(z, &y)?;
            let grads = g.backward(loss)?.param_grads(&g, &store);
            crate::trainer::sgd_step(&mut store, &grads, cfg.lr)?;
        }
    }
    let accuracy = |x: &Tensor, y: &[usize]| -> Result<f64> {
        let mut g = Graph::inference();
        let z = forward(&mut g, &store, x.clone())?;
        let pred = argmax_rows(g.value(z));
        Ok(pred.iter().zip(y).filter(|(p, y)| p == y).count() as f64 / y.len() as f64)
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(&xtr, &ytr)?,
        test_accuracy: accuracy(&xte, &yte)?,
        train_size: ytr.len(),
        test_size: yte.len(),
    })
}

fn take_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = x.cols();
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(x.row(r));
    }
    Tensor::matrix(rows.len(), d, out)
}

/// Upper bounds of the first seven length bins; longer sentences fall in bin 7.
pub const LENGTH_BINS: [usize; 7] = [5, 8, 12, 16, 20, 25, 30];

pub fn length_bin(len: usize) -> usize {
    LENGTH_BINS.iter().position(|&b| len <= b).unwrap_or(LENGTH_BINS.len())
}

/// Sentence-length prediction (8 classes) from the representation alone.
pub fn aux_length(rep: &Representation<'_>, sentences: &[Vec<usize>], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let labels: Vec<usize> = sentences.iter().map(|s| length_bin(s.len())).collect();
    if labels.iter().collect::<HashSet<_>>().len() < 2 {
        return Err(Error::Data("sentence lengths fall into a single bin".into()));
    }
    train_probe(&rep.encode(sentences)?, &labels, cfg)
}

/// One word-content probe item: does `word` occur in sentence `sentence`?
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContentItem {
    pub sentence: usize,
    pub word: usize,
    pub label: usize,
}

/// Token ids grouped into ten corpus-frequency deciles (most frequent first).
fn frequency_deciles(sentences: &[Vec<usize>]) -> BTreeMap<usize, usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in sentences {
        for &t in s {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = ranked.len();
    ranked.iter().enumerate().map(|(r, &(t, _))| (t, r * 10 / n)).collect()
}

/// Builds balanced word-content items. Negatives are absent words from the
/// positive candidate's frequency decile (any absent corpus word when the decile
/// has none); sentences containing every corpus word are skipped.
pub fn word_content_items(sentences: &[Vec<usize>], seed: u64) -> Vec<ContentItem> {
    let decile = frequency_deciles(sentences);
    let mut by_decile: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&t, &d) in &decile {
        by_decile.entry(d).or_default().push(t);
    }
    let all: Vec<usize> = decile.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(sentences.len());
    let mut positives = 0usize;
    for (i, s) in sentences.iter().enumerate() {
        let Some(&w) = s.choose(&mut rng) else { continue };
        let present: HashSet<usize> = s.iter().copied().collect();
        let absent = |pool: &[usize]| pool.iter().copied().filter(|t| !present.contains(t)).collect::<Vec<_>>();
        let mut negatives = absent(&by_decile[&decile[&w]]);
        if negatives.is_empty() {
            negatives = absent(&all);
        }
        let Some(&neg) = negatives.choose(&mut rng) else { continue };
        // keep the two classes within one of each other
        let want_positive = positives * 2 <= items.len();
        let label = usize::from(want_positive);
        positives += label;
        items.push(ContentItem {
            sentence: i,
            word: if want_positive { w } else { neg },
            label,
        });
    }
    items
}

fn with_word_embeddings(base: &Tensor, table: &EmbeddingTable, rows: &[(usize, Vec<usize>)]) -> Result<Tensor> {
    let d = base.shape()[1];
    let width = d + rows.first().map_or(0, |r| r.1.len()) * table.dim();
    let mut out = Vec::with_capacity(rows.len() * width);
    for (s, words) in rows {
        out.extend_from_slice(&base.data()[s * d..(s + 1) * d]);
        for &w in words {
            out.extend_from_slice(table.row(w));
        }
    }
    Tensor::matrix(rows.len(), width, out)
}

/// Word-content probe over `[sentence vector ; word embedding]` inputs.
pub fn aux_word_content(
    rep: &Representation<'_>,
    table: &EmbeddingTable,
    sentences: &[Vec<usize>],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let items = word_content_items(sentences, cfg.seed);
    let base = rep.encode(sentences)?;
    let rows: Vec<(usize, Vec<usize>)> = items.iter().map(|it| (it.sentence, vec![it.word])).collect();
    let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
    train_probe(&with_word_embeddings(&base, table, &rows)?, &labels, cfg)
}

/// One word-order probe item: does `first` occur before `second`?
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrderItem {
    pub sentence: usize,
    pub first: usize,
    pub second: usize,
    pub label: usize,
}

/// 1 iff the first occurrence of `a` precedes the first occurrence of `b`.
pub fn order_label(sentence: &[usize], a: usize, b: usize) -> Option<usize> {
    let pa = sentence.iter().position(|&t| t == a)?;
    let pb = sentence.iter().position(|&t| t == b)?;
    (pa != pb).then_some(usize::from(pa < pb))
}

/// Balanced word-order items; sentences with fewer than two distinct tokens are skipped.
pub fn word_order_items(sentences: &[Vec<usize>], seed: u64) -> Vec<OrderItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(sentences.len());
    let mut positives = 0usize;
    for (i, s) in sentences.iter().enumerate() {
        let mut distinct: Vec<usize> = Vec::new();
        for &t in s {
            if !distinct.contains(&t) {
                distinct.push(t);
            }
        }
        if distinct.len() < 2 {
            continue;
        }
        let picked: Vec<usize> = distinct.choose_multiple(&mut rng, 2).copied().collect();
        // `distinct` is in first-occurrence order
        let (early, late) = if distinct.iter().position(|&t| t == picked[0]) < distinct.iter().position(|&t| t == picked[1]) {
            (picked[0], picked[1])
        } else {
            (picked[1], picked[0])
        };
        let label = usize::from(positives * 2 <= items.len());
        positives += label;
        let (first, second) = if label == 1 { (early, late) } else { (late, early) };
        items.push(OrderItem {
            sentence: i,
            first,
            second,
            label,
        });
    }
    items
}

/// Word-order probe over `[sentence vector ; emb(w_a) ; emb(w_b)]` inputs.
pub fn aux_word_order(
    rep: &Representation<'_>,
    table: &EmbeddingTable,
    sentences: &[Vec<usize>],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let items = word_order_items(sentences, cfg.seed);
    if items.is_empty() {
        return Err(Error::Data("no sentence has two distinct tokens".into()));
    }
    let base = rep.encode(sentences)?;
    let rows: Vec<(usize, Vec<usize>)> = items.iter().map(|it| (it.sentence, vec![it.first, it.second])).collect();
    let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
    train_probe(&with_word_embeddings(&base, table, &rows)?, &labels, cfg)
}

/// Cosine similarity; `None` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::arg(format!("spearman needs two equal series of length ≥ 2, got {} and {}", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in spearman input".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Numerical("spearman of a constant series".into()));
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// A scored sentence pair for similarity evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    pub gold: f64,
}

/// Cosine similarity of each pair's vectors, Spearman-correlated with gold.
/// Returns `(ρ, cosines)`.
pub fn cosine_eval(model: &MtlModel, tag: &EncoderTag, pairs: &[ScoredPair]) -> Result<(f64, Vec<f64>)> {
    if pairs.len() < 3 {
        return Err(Error::Data(format!("cosine evaluation needs at least 3 pairs, got {}", pairs.len())));
    }
    let first: Vec<Vec<usize>> = pairs.iter().map(|p| p.first.clone()).collect();
    let second: Vec<Vec<usize>> = pairs.iter().map(|p| p.second.clone()).collect();
    let (u, v) = (sentence_vectors(model, tag, &first)?, sentence_vectors(model, tag, &second)?);
    let d = u.shape()[1];
    let cos = (0..pairs.len())
        .map(|i| {
            cosine(&u.data()[i * d..(i + 1) * d], &v.data()[i * d..(i + 1) * d])
                .ok_or_else(|| Error::Numerical(format!("pair {} has a zero sentence vector", i + 1)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
    Ok((spearman(&cos, &gold)?, cos))
}

/// Accuracy of a fresh logistic discriminator that predicts the task of a
/// sentence from its frozen shared vector. Both sentences of every dev
/// example of every task are used.
pub fn posthoc_discriminator(model: &MtlModel, datasets: &[&Dataset], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let mut sentences = Vec::new();
    let mut labels = Vec::new();
    for ds in datasets {
        let t = model.task_index(&ds.task)?;
        for e in &ds.examples {
            sentences.push(e.tokens1.clone());
            sentences.push(e.tokens2.clone());
            labels.extend([t, t]);
        }
    }
    let x = sentence_vectors(model, &EncoderTag::Shared, &sentences)?;
    train_probe(&x, &labels, cfg)
}

/// One line of a probe report.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReportRow {
    pub probe: String,
    pub encoder_tag: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub const PROBE_REPORT_HEADER: &str = "probe,encoder_tag,metric,value,seed";

pub fn write_probe_report(path: &Path, rows: &[ProbeReportRow]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = format!("{PROBE_REPORT_HEADER}\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{},{}\n", r.probe, r.encoder_tag, r.metric, r.value, r.seed));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
