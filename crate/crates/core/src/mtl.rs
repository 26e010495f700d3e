//! Fully-shared (FS), shared-private (SP) and adversarial shared-private (ASP)
//! multi-task models, their task discriminator and the three-part loss.
//!
//! Parameter naming is part of the checkpoint format:
//!
//! | name                    | shape              |
//! |-------------------------|--------------------|
//! | `shared.{fwd,bwd}.{w,b}`  | `4d × (d_w+d)`, `4d` |
//! | `private.<task>.…`      | as above (SP/ASP)  |
//! | `biatt.<task>.{w1,w2}`  | `3d″`              |
//! | `head.<task>.{w1,b1,w2,b2}` | `in × h`, `h`, `h × C`, `C` |
//! | `disc.{w,b}`            | `d_s × K`, `K` (ASP) |

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::biatt::{biatt_pool, BiattentiveParams};
use crate::encoder::{encode_batch, init_uniform, pair_features, EncoderParams, HiddenStates};
use crate::error::{Error, Result};
use crate::ndgrad::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::textdata::{Batch, EmbeddingTable, PaddedSeqs, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Framework {
    Fs,
    Sp,
    Asp,
}

impl Framework {
    pub fn has_private(self) -> bool {
        self != Framework::Fs
    }

    pub fn has_discriminator(self) -> bool {
        self == Framework::Asp
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Framework::Fs => "FS",
            Framework::Sp => "SP",
            Framework::Asp => "ASP",
        })
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FS" => Ok(Framework::Fs),
            "SP" => Ok(Framework::Sp),
            "ASP" => Ok(Framework::Asp),
            _ => Err(Error::Config(format!("unknown framework {s:?} (expected FS, SP or ASP)"))),
        }
    }
}

/// How a task turns encoder outputs into a pair representation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    /// Max-pooled sentence vectors combined into pair features.
    #[default]
    Max,
    /// Biattentive pooling over the concatenated token vectors.
    Biattentive,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Biattentive => "biattentive",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max" => Ok(Pooling::Max),
            "biattentive" | "biatt" => Ok(Pooling::Biattentive),
            _ => Err(Error::Config(format!("unknown pooling {s:?} (expected max or biattentive)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DiffMode {
    /// Rows are L2-normalized before the product.
    #[default]
    Normalized,
    Unnormalized,
}

impl FromStr for DiffMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normalized" => Ok(DiffMode::Normalized),
            "unnormalized" | "raw" => Ok(DiffMode::Unnormalized),
            _ => Err(Error::Config(format!("unknown diff mode {s:?}"))),
        }
    }
}

impl fmt::Display for DiffMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiffMode::Normalized => "normalized",
            DiffMode::Unnormalized => "unnormalized",
        })
    }
}

/// Two-layer feed-forward head: `softmax(σ(v W1 + b1) W2 + b2)` with σ the sigmoid.
/// [`ClassifierHead::forward`] returns the pre-softmax logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || classes < 2 {
            return Err(Error::arg(format!(
                "classifier head {input_dim}→{hidden}→{classes} is degenerate"
            )));
        }
        Ok(ClassifierHead {
            w1: store.add(format!("{prefix}.w1"), init_uniform(rng, input_dim, hidden, input_dim))?,
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?,
            w2: store.add(format!("{prefix}.w2"), init_uniform(rng, hidden, classes, hidden))?,
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[classes]))?,
            input_dim,
            hidden,
            classes,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            store
                .find(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {prefix}.{n}")))
        };
        let (w1, b1, w2, b2) = (get("w1")?, get("b1")?, get("w2")?, get("b2")?);
        let (input_dim, hidden) = store.get(w1).dims2()?;
        let (h2, classes) = store.get(w2).dims2()?;
        if h2 != hidden || store.get(b1).shape() != [hidden] || store.get(b2).shape() != [classes] {
            return Err(Error::Checkpoint(format!("inconsistent head shapes under {prefix}")));
        }
        Ok(ClassifierHead {
            w1,
            b1,
            w2,
            b2,
            input_dim,
            hidden,
            classes,
        })
    }

    /// Logits (`B × C`) for input rows `v` (`B × input_dim`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, v: Var) -> Result<Var> {
        let width = g.value(v).cols();
        if width != self.input_dim {
            return Err(Error::dim(format!(
                "head expects {} inputs, got {width}",
                self.input_dim
            )));
        }
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(v, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.sigmoid(h)?;
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }
}

/// Task discriminator `softmax(s W + b)` over shared sentence vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub w: ParamId,
    pub b: ParamId,
    pub dim: usize,
    pub tasks: usize,
}

impl DiscriminatorParams {
    pub fn init(store: &mut ParamStore, dim: usize, tasks: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if tasks < 2 {
            return Err(Error::Config(format!(
                "adversarial training needs at least 2 tasks, got {tasks}"
            )));
        }
        Ok(DiscriminatorParams {
            w: store.add("disc.w", init_uniform(rng, dim, tasks, dim))?,
            b: store.add("disc.b", Tensor::zeros(&[tasks]))?,
            dim,
            tasks,
        })
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let w = store
            .find("disc.w")
            .ok_or_else(|| Error::Checkpoint("missing parameter disc.w".into()))?;
        let b = store
            .find("disc.b")
            .ok_or_else(|| Error::Checkpoint("missing parameter disc.b".into()))?;
        let (dim, tasks) = store.get(w).dims2()?;
        if store.get(b).shape() != [tasks] {
            return Err(Error::Checkpoint("inconsistent discriminator shapes".into()));
        }
        Ok(DiscriminatorParams { w, b, dim, tasks })
    }

    /// Logits (`N × K`) for shared vectors `s` (`N × d_s`).
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, s: Var) -> Result<Var> {
        let width = g.value(s).cols();
        if width != self.dim {
            return Err(Error::dim(format!(
                "discriminator expects {} inputs, got {width}",
                self.dim
            )));
        }
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let z = g.matmul(s, w)?;
        g.add_row(z, b)
    }
}

/// Task probabilities `softmax(s W + b)`, one row per input row.
pub fn discriminator_forward(g: &mut Graph, store: &ParamStore, disc: &DiscriminatorParams, s: Var) -> Result<Var> {
    let s = if g.shape(s).len() == 1 {
        let n = g.value(s).len();
        g.reshape(s, vec![1, n])?
    } else {
        s
    };
    let z = disc.logits(g, store, s)?;
    g.softmax(z, 1)
}

/// Per-task parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModule {
    pub name: String,
    pub classes: usize,
    pub private: Option<EncoderParams>,
    pub biatt: Option<BiattentiveParams>,
    pub head: ClassifierHead,
}

/// Architecture of a model to be built from scratch.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub framework: Framework,
    pub pooling: Pooling,
    /// LSTM hidden size `d` (shared and private encoders alike).
    pub hidden: usize,
    pub mlp_hidden: usize,
    /// `(name, class count)` per task, in task-index order.
    pub tasks: Vec<(String, usize)>,
}

#[derive(Clone, Debug)]
pub struct MtlModel {
    pub framework: Framework,
    pub pooling: Pooling,
    pub store: ParamStore,
    pub shared: EncoderParams,
    pub tasks: Vec<TaskModule>,
    pub disc: Option<DiscriminatorParams>,
    pub vocab: Vocabulary,
    pub embeddings: EmbeddingTable,
    pub mlp_hidden: usize,
}

impl MtlModel {
    /// Builds a freshly initialized model. The discriminator is initialized last,
    /// so SP and ASP models with the same seed share every other starting value.
    pub fn new(cfg: &ModelConfig, vocab: Vocabulary, embeddings: EmbeddingTable, seed: u64) -> Result<Self> {
        if cfg.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        if vocab.len() != embeddings.vocab_size() {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the embedding table {}",
                vocab.len(),
                embeddings.vocab_size()
            )));
        }
        for (i, (name, _)) in cfg.tasks.iter().enumerate() {
            if cfg.tasks[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!("duplicate task name {name}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d_w = embeddings.dim();
        let shared = EncoderParams::init(&mut store, "shared", d_w, cfg.hidden, &mut rng)?;
        let private_dim = if cfg.framework.has_private() { 2 * cfg.hidden } else { 0 };
        let token_dim = 2 * cfg.hidden + private_dim;
        let mut tasks = Vec::with_capacity(cfg.tasks.len());
        for (name, classes) in &cfg.tasks {
            let private = if cfg.framework.has_private() {
                Some(EncoderParams::init(&mut store, &format!("private.{name}"), d_w, cfg.hidden, &mut rng)?)
            } else {
                None
            };
            let (biatt, head_in) = match cfg.pooling {
                Pooling::Max => (None, 4 * token_dim),
                Pooling::Biattentive => {
                    let p = BiattentiveParams::init(&mut store, &format!("biatt.{name}"), token_dim)?;
                    let out = p.output_dim();
                    (Some(p), out)
                }
            };
            let head = ClassifierHead::init(
                &mut store,
                &format!("head.{name}"),
                head_in,
                cfg.mlp_hidden,
                *classes,
                &mut rng,
            )?;
            tasks.push(TaskModule {
                name: name.clone(),
                classes: *classes,
                private,
                biatt,
                head,
            });
        }
        let disc = if cfg.framework.has_discriminator() {
            Some(DiscriminatorParams::init(&mut store, 2 * cfg.hidden, cfg.tasks.len(), &mut rng)?)
        } else {
            None
        };
        Ok(MtlModel {
            framework: cfg.framework,
            pooling: cfg.pooling,
            store,
            shared,
            tasks,
            disc,
            vocab,
            embeddings,
            mlp_hidden: cfg.mlp_hidden,
        })
    }

    /// Rebuilds the typed view over a parameter store read from disk.
    pub fn from_store(
        framework: Framework,
        store: ParamStore,
        vocab: Vocabulary,
        embeddings: EmbeddingTable,
    ) -> Result<Self> {
        let shared = EncoderParams::bind(&store, "shared")?;
        if shared.input_dim != embeddings.dim() {
            return Err(Error::Checkpoint(format!(
                "encoder input width {} but embeddings have {}",
                shared.input_dim,
                embeddings.dim()
            )));
        }
        if vocab.len() != embeddings.vocab_size() {
            return Err(Error::Checkpoint("vocabulary and embedding table disagree in size".into()));
        }
        let names: Vec<String> = store
            .iter()
            .filter_map(|(n, _)| n.strip_prefix("head.")?.strip_suffix(".w1").map(str::to_string))
            .collect();
        if names.is_empty() {
            return Err(Error::Checkpoint("no task heads".into()));
        }
        let mut tasks = Vec::new();
        let mut pooling = None;
        for name in names {
            let head = ClassifierHead::bind(&store, &format!("head.{name}"))?;
            let private = match framework.has_private() {
                true => Some(EncoderParams::bind(&store, &format!("private.{name}"))?),
                false => None,
            };
            if !framework.has_private() && store.find(&format!("private.{name}.fwd.w")).is_some() {
                return Err(Error::Framework(format!(
                    "{framework} checkpoint carries a private encoder for {name}"
                )));
            }
            let biatt = match store.find(&format!("biatt.{name}.w1")) {
                Some(_) => Some(BiattentiveParams::bind(&store, &format!("biatt.{name}"))?),
                None => None,
            };
            let this = if biatt.is_some() { Pooling::Biattentive } else { Pooling::Max };
            if *pooling.get_or_insert(this) != this {
                return Err(Error::Checkpoint("tasks disagree on pooling".into()));
            }
            tasks.push(TaskModule {
                name,
                classes: head.classes,
                private,
                biatt,
                head,
            });
        }
        let disc = match framework.has_discriminator() {
            true => Some(DiscriminatorParams::bind(&store)?),
            false if store.find("disc.w").is_some() => {
                return Err(Error::Framework(format!("{framework} checkpoint carries a discriminator")))
            }
            false => None,
        };
        let mlp_hidden = tasks[0].head.hidden;
        let model = MtlModel {
            framework,
            pooling: pooling.unwrap_or_default(),
            store,
            shared,
            tasks,
            disc,
            vocab,
            embeddings,
            mlp_hidden,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let token = self.token_dim();
        for t in &self.tasks {
            if let Some(p) = &t.private {
                if p.hidden != self.shared.hidden || p.input_dim != self.shared.input_dim {
                    return Err(Error::Checkpoint(format!("private encoder of {} differs in size", t.name)));
                }
            }
            let want = match &t.biatt {
                Some(b) if b.dim != token => {
                    return Err(Error::Checkpoint(format!("biattention of {} has width {}", t.name, b.dim)))
                }
                Some(b) => b.output_dim(),
                None => 4 * token,
            };
            if t.head.input_dim != want {
                return Err(Error::Checkpoint(format!(
                    "head of {} takes {} inputs, expected {want}",
                    t.name, t.head.input_dim
                )));
            }
        }
        if let Some(d) = &self.disc {
            if d.dim != self.shared.output_dim() || d.tasks != self.tasks.len() {
                return Err(Error::Checkpoint("discriminator does not match the model".into()));
            }
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.shared.hidden
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Width of a per-token (or per-sentence) vector: `2d` for FS, `4d` otherwise.
    pub fn token_dim(&self) -> usize {
        if self.framework.has_private() {
            4 * self.hidden()
        } else {
            2 * self.hidden()
        }
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Data(format!("unknown task {name:?}")))
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }
}

/// Shared (and, for SP/ASP, private) encodings of one side of a batch.
#[derive(Clone, Debug)]
pub struct SideEncoding {
    pub shared: HiddenStates,
    pub shared_vec: Var,
    pub private: Option<(HiddenStates, Var)>,
}

impl SideEncoding {
    /// `s_s ⊕ s_p` (or `s_s` alone for FS).
    pub fn sentence_vec(&self, g: &mut Graph) -> Result<Var> {
        match &self.private {
            Some((_, p)) => g.concat_cols(&[self.shared_vec, *p]),
            None => Ok(self.shared_vec),
        }
    }

    /// Token matrix `T·B × d″` concatenating shared and private states.
    pub fn token_matrix(&self, g: &mut Graph) -> Result<Var> {
        match &self.private {
            Some((hs, _)) => g.concat_cols(&[self.shared.h, hs.h]),
            None => Ok(self.shared.h),
        }
    }
}

/// Encodes one side of a batch with the shared and (if any) task-private encoders.
pub fn encode_side(g: &mut Graph, model: &MtlModel, task: usize, seqs: &PaddedSeqs) -> Result<SideEncoding> {
    let (shared, shared_vec) = encode_batch(g, &model.store, &model.shared, &model.embeddings, seqs)?;
    let private = match &model.tasks[task].private {
        Some(p) => Some(encode_batch(g, &model.store, p, &model.embeddings, seqs)?),
        None => None,
    };
    Ok(SideEncoding {
        shared,
        shared_vec,
        private,
    })
}

#[derive(Clone, Debug)]
pub struct TaskForward {
    pub task: usize,
    pub logits: Var,
    pub loss: Var,
    pub sides: [SideEncoding; 2],
}

/// Forward pass of one single-task batch through the model.
pub fn task_forward(g: &mut Graph, model: &MtlModel, task: usize, batch: &Batch) -> Result<TaskForward> {
    let module = model
        .tasks
        .get(task)
        .ok_or_else(|| Error::Data(format!("task index {task} out of range")))?;
    if batch.task != module.name {
        return Err(Error::Data(format!(
            "batch of task {} fed to task {}",
            batch.task, module.name
        )));
    }
    let s1 = encode_side(g, model, task, &batch.first)?;
    let s2 = encode_side(g, model, task, &batch.second)?;
    let logits = match &module.biatt {
        None => {
            let v1 = s1.sentence_vec(g)?;
            let v2 = s2.sentence_vec(g)?;
            let f = pair_features(g, v1, v2)?;
            module.head.forward(g, &model.store, f)?
        }
        Some(bp) => {
            let x = s1.token_matrix(g)?;
            let y = s2.token_matrix(g)?;
            let mut pooled = Vec::with_capacity(batch.len());
            for i in 0..batch.len() {
                let xi = g.gather_rows(x, &s1.shared.example_rows(i))?;
                let yi = g.gather_rows(y, &s2.shared.example_rows(i))?;
                pooled.push(biatt_pool(g, &model.store, bp, xi, yi, None, None)?);
            }
            let v = g.concat_rows(&pooled)?;
            module.head.forward(g, &model.store, v)?
        }
    };
    let loss = g.cross_entropy(logits, &batch.labels)?;
    Ok(TaskForward {
        task,
        logits,
        loss,
        sides: [s1, s2],
    })
}

/// FS forward: logits and mean cross-entropy of the batch's task.
pub fn fs_forward(g: &mut Graph, model: &MtlModel, batch: &Batch) -> Result<(Var, Var)> {
    if model.framework != Framework::Fs {
        return Err(Error::Framework(format!("fs_forward on a {} model", model.framework)));
    }
    let tf = task_forward(g, model, model.task_index(&batch.task)?, batch)?;
    Ok((tf.logits, tf.loss))
}

/// SP/ASP forward, keeping the hidden matrices for the diff loss.
pub fn sp_forward(g: &mut Graph, model: &MtlModel, batch: &Batch) -> Result<TaskForward> {
    if !model.framework.has_private() {
        return Err(Error::Framework(format!("sp_forward on a {} model", model.framework)));
    }
    task_forward(g, model, model.task_index(&batch.task)?, batch)
}

/// Mean cross-entropy of the discriminator predicting `task_ids` from the shared
/// vectors `s` (`N × d_s`). The vectors pass through a gradient-reversal boundary of
/// strength `lambda`, so the encoder side receives `−λ` times the gradient while the
/// discriminator parameters receive it unchanged.
pub fn adv_loss(g: &mut Graph, model: &MtlModel, s: Var, task_ids: &[usize], lambda: f64) -> Result<Var> {
    let disc = match (&model.disc, model.framework) {
        (Some(d), Framework::Asp) => d,
        _ => {
            return Err(Error::Framework(format!(
                "adversarial loss on a {} model",
                model.framework
            )))
        }
    };
    let r = g.grad_reverse(s, lambda)?;
    let z = disc.logits(g, &model.store, r)?;
    g.cross_entropy(z, task_ids)
}

/// `‖H_sᵀ H_p‖_F²` per sentence over its real rows, averaged over the batch.
pub fn diff_loss(g: &mut Graph, hs: &HiddenStates, hp: &HiddenStates, mode: DiffMode) -> Result<Var> {
    if hs.lengths != hp.lengths || hs.steps != hp.steps {
        return Err(Error::dim("diff_loss: shared and private masks differ"));
    }
    let (a, b) = match mode {
        DiffMode::Normalized => (g.normalize_rows(hs.h)?, g.normalize_rows(hp.h)?),
        DiffMode::Unnormalized => (hs.h, hp.h),
    };
    let mut terms = Vec::with_capacity(hs.batch);
    for i in 0..hs.batch {
        let rows = hs.example_rows(i);
        let ai = g.gather_rows(a, &rows)?;
        let bi = g.gather_rows(b, &rows)?;
        let m = g.matmul_tn(ai, bi)?;
        terms.push(g.sum_squares(m)?);
    }
    let all = g.concat_cols(&terms)?;
    g.mean(all)
}

/// Weights of the auxiliary losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    /// Gradient-reversal strength.
    pub lambda: f64,
    pub diff_mode: DiffMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.0,
            gamma: 0.0,
            lambda: 1.0,
            diff_mode: DiffMode::Normalized,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.gamma >= 0.0) || !self.beta.is_finite() || !self.gamma.is_finite() {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative (beta={}, gamma={})",
                self.beta, self.gamma
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        Ok(())
    }
}

/// Scalar summary of one step's losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub task: Vec<f64>,
    pub adv: f64,
    pub diff: f64,
    pub total: f64,
}

/// `Σ_k L_task^k + β·L_adv + γ·L_diff`.
pub fn total_loss(task: &[f64], adv: f64, diff: f64, beta: f64, gamma: f64) -> Result<LossBreakdown> {
    LossWeights {
        beta,
        gamma,
        ..LossWeights::default()
    }
    .validate()?;
    let mut total: f64 = task.iter().sum();
    if beta != 0.0 {
        total += beta * adv;
    }
    if gamma != 0.0 {
        total += gamma * diff;
    }
    Ok(LossBreakdown {
        task: task.to_vec(),
        adv,
        diff,
        total,
    })
}

/// Graph nodes of one multi-task cycle.
#[derive(Clone, Debug)]
pub struct CycleLoss {
    pub forwards: Vec<TaskForward>,
    /// Discriminator loss over the shared vectors of every batch (ASP only).
    pub adv: Option<Var>,
    /// Sum over tasks of the per-batch diff loss (SP/ASP).
    pub diff: Option<Var>,
    pub total: Var,
}

impl CycleLoss {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
        LossBreakdown {
            task: self.forwards.iter().map(|f| g.value(f.loss).data()[0]).collect(),
            adv: val(self.adv),
            diff: val(self.diff),
            total: g.value(self.total).data()[0],
        }
    }
}

/// Builds the summed loss of one batch per listed task.
///
/// The adversarial batch stacks the shared vectors of both sentences of every
/// task batch, labeled by task index. Weighted terms with a zero weight are left
/// out of the total entirely.
pub fn cycle_loss(g: &mut Graph, model: &MtlModel, batches: &[(usize, &Batch)], w: &LossWeights) -> Result<CycleLoss> {
    w.validate()?;
    if batches.is_empty() {
        return Err(Error::arg("empty cycle"));
    }
    let mut forwards = Vec::with_capacity(batches.len());
    for &(task, batch) in batches {
        forwards.push(task_forward(g, model, task, batch)?);
    }
    let adv = if model.framework.has_discriminator() {
        let mut vecs = Vec::new();
        let mut ids = Vec::new();
        for f in &forwards {
            for side in &f.sides {
                vecs.push(side.shared_vec);
                ids.extend(std::iter::repeat(f.task).take(side.shared.batch));
            }
        }
        let s = g.concat_rows(&vecs)?;
        Some(adv_loss(g, model, s, &ids, w.lambda)?)
    } else {
        None
    };
    let diff = if model.framework.has_private() {
        let mut per_task = Vec::with_capacity(forwards.len());
        for f in &forwards {
            let mut sides = Vec::with_capacity(2);
            for side in &f.sides {
                let (hp, _) = side.private.as_ref().expect("private encoder present");
                sides.push(diff_loss(g, &side.shared, hp, w.diff_mode)?);
            }
            let both = g.concat_cols(&sides)?;
            per_task.push(g.mean(both)?);
        }
        let all = g.concat_cols(&per_task)?;
        Some(g.sum(all)?)
    } else {
        None
    };
    let losses: Vec<Var> = forwards.iter().map(|f| f.loss).collect();
    let mut total = if losses.len() == 1 {
        losses[0]
    } else {
        let all = g.concat_cols(&losses)?;
        g.sum(all)?
    };
    if let Some(a) = adv.filter(|_| w.beta != 0.0) {
        let term = g.scale(a, w.beta)?;
        total = g.add(total, term)?;
    }
    if let Some(d) = diff.filter(|_| w.gamma != 0.0) {
        let term = g.scale(d, w.gamma)?;
        total = g.add(total, term)?;
    }
    Ok(CycleLoss {
        forwards,
        adv,
        diff,
        total,
    })
}

/// Index of the largest logit per row (first on ties).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Predicted classes for a batch, without building gradients.
pub fn predict(model: &MtlModel, task: usize, batch: &Batch) -> Result<Vec<usize>> {
    let mut g = Graph::inference();
    let f = task_forward(&mut g, model, task, batch)?;
    Ok(argmax_rows(g.value(f.logits)))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::textdata::Example;

    fn model(framework: Framework, pooling: Pooling, seed: u64) -> MtlModel {
        let cfg = ModelConfig {
            framework,
            pooling,
            hidden: 3,
            mlp_hidden: 5,
            tasks: vec![("a".into(), 2), ("b".into(), 3)],
        };
        let vocab = Vocabulary::from_tokens((0..10).map(|i| format!("w{i}")));
        let emb = EmbeddingTable::random(vocab.len(), 4, 1.0, seed).unwrap();
        MtlModel::new(&cfg, vocab, emb, seed).unwrap()
    }

    fn batch(task: &str, seed: u64, n: usize, classes: usize) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sent = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            let len = rng.gen_range(1..6);
            (0..len).map(|_| rng.gen_range(1..12)).collect()
        };
        let ds = crate::textdata::Dataset {
            task: task.into(),
            examples: (0..n)
                .map(|i| Example {
                    task: task.into(),
                    tokens1: sent(&mut rng),
                    tokens2: sent(&mut rng),
                    label: i % classes,
                })
                .collect(),
        };
        Batch::from_ids(&ds, &(0..n).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn framework_names() {
        for f in [Framework::Fs, Framework::Sp, Framework::Asp] {
            assert_eq!(f.to_string().parse::<Framework>().unwrap(), f);
        }
        assert!("MT".parse::<Framework>().is_err());
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let mut m = model(Framework::Fs, Pooling::Max, 1);
        let h = m.tasks[1].head.clone();
        for id in [h.w1, h.b1, h.w2, h.b2] {
            m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let b = batch("b", 2, 4, 3);
        let mut g = Graph::new();
        let (logits, loss) = fs_forward(&mut g, &m, &b).unwrap();
        assert_eq!(g.shape(logits), &[4, 3]);
        assert!((g.value(loss).data()[0] - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn fs_forward_is_encoder_then_head() {
        let m = model(Framework::Fs, Pooling::Max, 3);
        let b = batch("a", 4, 3, 2);
        let mut g = Graph::new();
        let (logits, loss) = fs_forward(&mut g, &m, &b).unwrap();
        let (_, v1) = encode_batch(&mut g, &m.store, &m.shared, &m.embeddings, &b.first).unwrap();
        let (_, v2) = encode_batch(&mut g, &m.store, &m.shared, &m.embeddings, &b.second).unwrap();
        let f = pair_features(&mut g, v1, v2).unwrap();
        let manual = m.tasks[0].head.forward(&mut g, &m.store, f).unwrap();
        assert_eq!(g.value(manual).data(), g.value(logits).data());
        let manual_loss = g.cross_entropy(manual, &b.labels).unwrap();
        assert_eq!(g.value(manual_loss).data(), g.value(loss).data());
    }

    #[test]
    fn framework_and_task_errors() {
        let fs = model(Framework::Fs, Pooling::Max, 5);
        let sp = model(Framework::Sp, Pooling::Max, 5);
        let b = batch("a", 6, 2, 2);
        let mut g = Graph::new();
        assert!(matches!(sp_forward(&mut g, &fs, &b), Err(Error::Framework(_))));
        assert!(matches!(fs_forward(&mut g, &sp, &b), Err(Error::Framework(_))));
        assert!(sp_forward(&mut g, &sp, &batch("zzz", 6, 2, 2)).is_err());
        assert!(task_forward(&mut g, &sp, 1, &b).is_err());
        let s = g.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(adv_loss(&mut g, &sp, s, &[0, 1], 1.0), Err(Error::Framework(_))));
    }

    #[test]
    fn sp_sentence_vector_halves() {
        let mut m = model(Framework::Sp, Pooling::Max, 7);
        let p = m.tasks[0].private.clone().unwrap();
        for (src, dst) in [
            (m.shared.fwd_w, p.fwd_w),
            (m.shared.fwd_b, p.fwd_b),
            (m.shared.bwd_w, p.bwd_w),
            (m.shared.bwd_b, p.bwd_b),
        ] {
            *m.store.get_mut(dst) = m.store.get(src).clone();
        }
        let b = batch("a", 8, 3, 2);
        let mut g = Graph::new();
        let f = sp_forward(&mut g, &m, &b).unwrap();
        let v = f.sides[0].sentence_vec(&mut g).unwrap();
        assert_eq!(g.shape(v), &[3, 12]);
        for r in 0..3 {
            let row = g.value(v).row(r);
            assert_eq!(row[..6], row[6..]);
        }
    }

    #[test]
    fn discriminator_examples() {
        let mut m = model(Framework::Asp, Pooling::Max, 9);
        let d = m.disc.clone().unwrap();
        let mut g = Graph::new();
        let s = g.constant(Tensor::vector(vec![0.3, -0.2, 0.9, 0.1, 0.0, -1.0]).unwrap());
        let p = discriminator_forward(&mut g, &m.store, &d, s).unwrap();
        assert!((g.value(p).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // direct oracle
        let w = m.store.get(d.w).clone();
        let z: Vec<f64> = (0..2)
            .map(|k| (0..6).map(|j| g.value(s).data()[j] * w.at(j, k)).sum())
            .collect();
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let zsum: f64 = e.iter().sum();
        for k in 0..2 {
            assert!((g.value(p).data()[k] - e[k] / zsum).abs() < 1e-14);
        }
        let bad = g.constant(Tensor::vector(vec![1.0; 5]).unwrap());
        assert!(discriminator_forward(&mut g, &m.store, &d, bad).is_err());

        m.store.get_mut(d.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let s = g.constant(Tensor::full(&[4, 6], 0.7));
        let p = discriminator_forward(&mut g, &m.store, &d, s).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let l = adv_loss(&mut g, &m, s, &[0, 1, 1, 0], 1.0).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn reversal_scales_encoder_side_gradient() {
        let m = model(Framework::Asp, Pooling::Max, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ids = [0, 1, 1];
        let grad_at = |lambda: f64| {
            let mut g = Graph::new();
            let s = g.variable(Tensor::matrix(3, 6, data.clone()).unwrap());
            let l = adv_loss(&mut g, &m, s, &ids, lambda).unwrap();
            let grads = g.backward(l).unwrap();
            let ds = grads.get(&g, s).unwrap();
            let dw = grads.param_grads(&g, &m.store)[m.disc.as_ref().unwrap().w.index()].clone();
            (ds, dw)
        };
        let (plain, dw_plain) = grad_at(-1.0);
        for lambda in [1.0, 0.3] {
            let (rev, dw) = grad_at(lambda);
            for (r, p) in rev.data().iter().zip(plain.data()) {
                assert!((r + lambda * p).abs() < 1e-15);
            }
            assert_eq!(dw, dw_plain);
        }
    }

    #[test]
    fn diff_loss_examples() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::identity(2));
        let hs = HiddenStates {
            h: eye,
            steps: 2,
            batch: 1,
            lengths: vec![2],
        };
        let v = diff_loss(&mut g, &hs, &hs, DiffMode::Unnormalized).unwrap();
        assert_eq!(g.value(v).data(), &[2.0]);

        // shared states live only at t = 0, private ones only at t = 1
        let a = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 0.0, 0.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![3.0, 0.0, -1.0]]).unwrap());
        let ha = HiddenStates { h: a, ..hs.clone() };
        let hb = HiddenStates { h: b, ..hs.clone() };
        for mode in [DiffMode::Normalized, DiffMode::Unnormalized] {
            let v = diff_loss(&mut g, &ha, &hb, mode).unwrap();
            assert_eq!(g.value(v).data(), &[0.0]);
        }
        let other = HiddenStates {
            lengths: vec![1],
            ..hs.clone()
        };
        assert!(diff_loss(&mut g, &hs, &other, DiffMode::Normalized).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let b = total_loss(&[0.5, 0.25], 3.0, 7.0, 0.0, 0.0).unwrap();
        assert_eq!(b.total, 0.75);
        let b = total_loss(&[0.5], 2.0, 4.0, 0.1, 0.01).unwrap();
        assert!((b.total - (0.5 + 0.2 + 0.04)).abs() < 1e-15);
        assert!(total_loss(&[0.5], 1.0, 1.0, -0.1, 0.0).is_err());
        assert!(total_loss(&[0.5], 1.0, 1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn zero_weights_leave_only_task_losses() {
        let m = model(Framework::Asp, Pooling::Max, 12);
        let (ba, bb) = (batch("a", 13, 3, 2), batch("b", 14, 4, 3));
        let mut g = Graph::new();
        let c = cycle_loss(&mut g, &m, &[(0, &ba), (1, &bb)], &LossWeights::default()).unwrap();
        let br = c.breakdown(&g);
        assert_eq!(br.total, br.task[0] + br.task[1]);
        assert!(br.adv > 0.0 && br.diff > 0.0);
    }

    #[test]
    fn biattentive_model_runs() {
        for fw in [Framework::Fs, Framework::Sp] {
            let m = model(fw, Pooling::Biattentive, 15);
            let b = batch("b", 16, 3, 3);
            let mut g = Graph::new();
            let f = task_forward(&mut g, &m, 1, &b).unwrap();
            assert_eq!(g.shape(f.logits), &[3, 3]);
            assert!(g.value(f.loss).data()[0].is_finite());
        }
    }

    #[test]
    fn store_round_trip_rebinds_everything() {
        for (fw, pool) in [
            (Framework::Fs, Pooling::Max),
            (Framework::Sp, Pooling::Biattentive),
            (Framework::Asp, Pooling::Max),
        ] {
            let m = model(fw, pool, 17);
            let again = MtlModel::from_store(fw, m.store.clone(), m.vocab.clone(), m.embeddings.clone()).unwrap();
            assert_eq!(again.tasks, m.tasks);
            assert_eq!(again.shared, m.shared);
            assert_eq!(again.disc, m.disc);
            assert_eq!(again.pooling, pool);
        }
        let fs = model(Framework::Fs, Pooling::Max, 18);
        assert!(MtlModel::from_store(Framework::Sp, fs.store.clone(), fs.vocab.clone(), fs.embeddings.clone()).is_err());
        let asp = model(Framework::Asp, Pooling::Max, 18);
        assert!(matches!(
            MtlModel::from_store(Framework::Sp, asp.store.clone(), asp.vocab.clone(), asp.embeddings.clone()),
            Err(Error::Framework(_))
        ));
    }
}
