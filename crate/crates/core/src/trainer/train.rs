use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mtl::{cycle_loss, predict, CycleLoss, LossWeights, ModelConfig, MtlModel};
use crate::ndgrad::Graph;
use crate::textdata::{
    batch_iter, build_vocab, load_embeddings, load_pair_dataset, read_pair_file, synth_generate, Batch, Dataset,
    EmbeddingTable, TaskSource, TaskSpec, Vocabulary,
};
use crate::trainer::schedule::{lr_update, lr_update_forced, sgd_step, sgd_step_where, TrainState};
use crate::trainer::{AdversarialMode, TrainConfig};

/// Mixes a run seed with a purpose tag (FNV-1a over the tag, then SplitMix64).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Option<Dataset>,
}

/// Vocabulary, embeddings and split datasets for every configured task.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub embeddings: EmbeddingTable,
    pub tasks: Vec<TaskData>,
}

impl PreparedData {
    pub fn model_config(&self, cfg: &TrainConfig) -> ModelConfig {
        ModelConfig {
            framework: cfg.framework,
            pooling: cfg.pooling,
            hidden: cfg.hidden,
            mlp_hidden: cfg.mlp_hidden,
            tasks: self.tasks.iter().map(|t| (t.spec.name.clone(), t.spec.classes())).collect(),
        }
    }
}

/// Loads or generates every task's data and checks labels against class counts.
pub fn prepare_data(cfg: &TrainConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let has_synth = cfg.tasks.iter().any(|t| matches!(t.source, TaskSource::Synthetic { .. }));
    let mut corpus: Vec<Vec<String>> = Vec::new();
    if has_synth {
        // repeated so that min_count never drops a generator token
        let toks = cfg.synth.vocabulary().tokens()[2..].to_vec();
        corpus.extend(std::iter::repeat_n(toks, cfg.min_count));
    }
    for t in &cfg.tasks {
        if let TaskSource::Files { train, dev, test } = &t.source {
            for p in [Some(train), Some(dev), test.as_ref()].into_iter().flatten() {
                for r in read_pair_file(p, t)? {
                    corpus.push(r.sentence1);
                    corpus.push(r.sentence2);
                }
            }
        }
    }
    let vocab = build_vocab(&corpus, cfg.min_count)?;
    let embeddings = match &cfg.embeddings {
        Some(p) => load_embeddings(p, &vocab, cfg.oov)?,
        None => EmbeddingTable::random(vocab.len(), cfg.embed_dim, cfg.embed_scale, derive_seed(cfg.seed, "embeddings"))?,
    };
    if embeddings.dim() != cfg.embed_dim {
        return Err(Error::Config(format!(
            "embed_dim = {} but the embedding file has {} dimensions",
            cfg.embed_dim,
            embeddings.dim()
        )));
    }
    let synth_vocab = cfg.synth.vocabulary();
    let remap = |ds: Dataset| -> Dataset {
        // synthetic ids index the generator's own vocabulary
        let map = |ids: Vec<usize>| ids.into_iter().map(|i| vocab.lookup(synth_vocab.token(i).unwrap())).collect();
        Dataset {
            task: ds.task,
            examples: ds
                .examples
                .into_iter()
                .map(|e| crate::textdata::Example {
                    task: e.task,
                    tokens1: map(e.tokens1),
                    tokens2: map(e.tokens2),
                    label: e.label,
                })
                .collect(),
        }
    };
    let mut tasks = Vec::with_capacity(cfg.tasks.len());
    for t in &cfg.tasks {
        let (train, dev, test) = match &t.source {
            TaskSource::Files { train, dev, test } => (
                load_pair_dataset(train, t, &vocab)?,
                load_pair_dataset(dev, t, &vocab)?,
                test.as_ref().map(|p| load_pair_dataset(p, t, &vocab)).transpose()?,
            ),
            TaskSource::Synthetic {
                kind,
                train_size,
                dev_size,
            } => {
                let tr = synth_generate(*kind, &t.name, *train_size, derive_seed(cfg.seed, &format!("train/{}", t.name)), &cfg.synth)?;
                let dv = synth_generate(*kind, &t.name, *dev_size, derive_seed(cfg.seed, &format!("dev/{}", t.name)), &cfg.synth)?;
                (remap(tr), remap(dv), None)
            }
        };
        for (split, ds) in [("train", Some(&train)), ("dev", Some(&dev)), ("test", test.as_ref())] {
            let Some(ds) = ds else { continue };
            if ds.is_empty() {
                return Err(Error::Data(format!("task {}: empty {split} split", t.name)));
            }
            if let Some(e) = ds.examples.iter().find(|e| e.label >= t.classes()) {
                return Err(Error::Data(format!(
                    "task {}: {split} label {} but only {} classes declared",
                    t.name,
                    e.label,
                    t.classes()
                )));
            }
        }
        tasks.push(TaskData {
            spec: t.clone(),
            train,
            dev,
            test,
        });
    }
    Ok(PreparedData {
        vocab,
        embeddings,
        tasks,
    })
}

/// Classification accuracy of `model` on `dataset` (task `task`).
pub fn evaluate(model: &MtlModel, task: usize, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data(format!("cannot evaluate on empty dataset of {}", dataset.task)));
    }
    let mut correct = 0usize;
    for b in batch_iter(dataset, batch_size, None)? {
        let pred = predict(model, task, &b)?;
        correct += pred.iter().zip(&b.labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub task: String,
    pub train_loss: f64,
    pub dev_acc: f64,
    pub adv_loss: f64,
    pub diff_loss: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,task,train_loss,dev_acc,adv_loss,diff_loss";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.task, r.train_loss, r.dev_acc, r.adv_loss, r.diff_loss
        );
    }
    s
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Parses a metrics log written by [`write_metrics`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(Error::format(&name, 1, "missing metrics header")),
    }
    lines
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(&name, n + 1, "malformed metrics row");
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricsRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                lr: num(f[1])?,
                task: f[2].to_string(),
                train_loss: num(f[3])?,
                dev_acc: num(f[4])?,
                adv_loss: num(f[5])?,
                diff_loss: num(f[6])?,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best mean dev accuracy.
    pub model: MtlModel,
    pub metrics: Vec<MetricsRow>,
    pub state: TrainState,
    /// Final-epoch model (differs from `model` when a later epoch was worse).
    pub last: MtlModel,
}

/// Called after each epoch with the state and that epoch's metrics rows.
pub type EpochHook<'a> = dyn FnMut(&TrainState, &[MetricsRow]) + 'a;

/// Multi-task training with round-robin cycles: each cycle takes one batch from
/// every task, sums their losses (plus the weighted adversarial and diff terms)
/// and takes one SGD step.
pub fn train_multitask(cfg: &TrainConfig, data: &PreparedData) -> Result<TrainOutcome> {
    train_multitask_with(cfg, data, &mut |_, _| {})
}

pub fn train_multitask_with(cfg: &TrainConfig, data: &PreparedData, hook: &mut EpochHook<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.tasks.is_empty() {
        return Err(Error::Config("no tasks to train".into()));
    }
    let mut model = MtlModel::new(
        &data.model_config(cfg),
        data.vocab.clone(),
        data.embeddings.clone(),
        derive_seed(cfg.seed, "model"),
    )?;
    let weights = cfg.loss_weights();
    let mut state = TrainState::from_config(cfg);
    let mut best = model.clone();
    let mut metrics = Vec::new();

    while state.epoch < cfg.max_epochs && !state.stop {
        let epoch = state.epoch + 1;
        let lr = state.lr;
        let per_task: Vec<Vec<Batch>> = data
            .tasks
            .iter()
            .map(|t| {
                let seed = cfg
                    .shuffle
                    .then(|| derive_seed(cfg.seed, &format!("shuffle/{}/{epoch}", t.spec.name)));
                batch_iter(&t.train, cfg.batch_size, seed)
            })
            .collect::<Result<_>>()?;
        let cycles = per_task.iter().map(Vec::len).max().unwrap_or(0);
        let k = per_task.len();
        let mut loss_sum = vec![0.0; k];
        let mut loss_count = vec![0usize; k];
        let (mut adv_sum, mut diff_sum) = (0.0, 0.0);
        for c in 0..cycles {
            let batches: Vec<(usize, &Batch)> =
                per_task.iter().enumerate().map(|(t, bs)| (t, &bs[c % bs.len()])).collect();
            let br = train_cycle(&mut model, &batches, &weights, cfg.adversarial, lr)?;
            for (t, l) in br.task.iter().enumerate() {
                loss_sum[t] += l;
                loss_count[t] += 1;
            }
            adv_sum += br.adv;
            diff_sum += br.diff;
        }
        let dev: Vec<f64> = data
            .tasks
            .iter()
            .enumerate()
            .map(|(t, td)| evaluate(&model, t, &td.dev, cfg.batch_size))
            .collect::<Result<_>>()?;
        let mean_dev = dev.iter().sum::<f64>() / dev.len() as f64;
        let first_row = metrics.len();
        for (t, td) in data.tasks.iter().enumerate() {
            metrics.push(MetricsRow {
                epoch,
                lr,
                task: td.spec.name.clone(),
                train_loss: loss_sum[t] / loss_count[t].max(1) as f64,
                dev_acc: dev[t],
                adv_loss: adv_sum / cycles.max(1) as f64,
                diff_loss: diff_sum / cycles.max(1) as f64,
            });
        }
        if state.best_dev.is_none_or(|b| mean_dev > b) {
            best = model.clone();
        }
        state = match &cfg.scripted_dev_drops {
            Some(drops) => lr_update_forced(&state, mean_dev, drops.contains(&epoch)),
            None => lr_update(&state, mean_dev),
        };
        hook(&state, &metrics[first_row..]);
    }
    Ok(TrainOutcome {
        model: best,
        metrics,
        state,
        last: model,
    })
}

/// One optimization step over a cycle of task batches; returns the losses.
pub fn train_cycle(
    model: &mut MtlModel,
    batches: &[(usize, &Batch)],
    weights: &LossWeights,
    mode: AdversarialMode,
    lr: f64,
) -> Result<crate::mtl::LossBreakdown> {
    let alternating = mode == AdversarialMode::Alternating && model.disc.is_some();
    if alternating && weights.beta != 0.0 {
        // discriminator step on the current encodings; encoder untouched
        let w = LossWeights { lambda: 0.0, ..*weights };
        let mut g = Graph::new();
        let cl = cycle_loss(&mut g, model, batches, &w)?;
        let adv = cl.adv.expect("discriminator present");
        let scaled = g.scale(adv, weights.beta)?;
        let grads = g.backward(scaled)?.param_grads(&g, &model.store);
        sgd_step_where(&mut model.store, &grads, lr, |n| n.starts_with("disc."))?;
    }
    let mut g = Graph::new();
    let cl: CycleLoss = cycle_loss(&mut g, model, batches, weights)?;
    let grads = g.backward(cl.total)?.param_grads(&g, &model.store);
    if alternating {
        sgd_step_where(&mut model.store, &grads, lr, |n| !n.starts_with("disc."))?;
    } else {
        sgd_step(&mut model.store, &grads, lr)?;
    }
    Ok(cl.breakdown(&g))
}
