//! Line-oriented `key = value` files used for task manifests and run configs.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::textdata::dataset::{TaskSource, TaskSpec};
use crate::textdata::synth::SynthKind;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are skipped.
pub fn parse_kv(text: &str, source: &str) -> Result<Vec<KvEntry>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::format(source, n + 1, format!("expected `key = value`, got {line:?}")));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::format(source, n + 1, "empty key"));
        }
        out.push(KvEntry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line: n + 1,
        });
    }
    Ok(out)
}

#[derive(Default)]
struct TaskDraft {
    labels: Option<Vec<String>>,
    train: Option<PathBuf>,
    dev: Option<PathBuf>,
    test: Option<PathBuf>,
    synth: Option<SynthKind>,
    train_size: Option<usize>,
    dev_size: Option<usize>,
}

const TASK_FIELDS: &[&str] = &["labels", "train", "dev", "test", "synth", "train_size", "dev_size"];

/// Extracts task declarations of the form `task.<name>.<field> = value`.
///
/// Fields: `labels` (comma separated), `train`, `dev`, `test` (paths, relative to
/// `base`), or `synth` (`shared-overlap` / `private-marker:<k>`) with
/// `train_size` and `dev_size`. Returns the tasks in first-mention order and the
/// entries that are not task keys.
pub fn parse_tasks(entries: &[KvEntry], base: &Path, source: &str) -> Result<(Vec<TaskSpec>, Vec<KvEntry>)> {
    let mut names: Vec<String> = Vec::new();
    let mut drafts: Vec<TaskDraft> = Vec::new();
    let mut rest = Vec::new();
    for e in entries {
        let Some(tail) = e.key.strip_prefix("task.") else {
            rest.push(e.clone());
            continue;
        };
        let Some((name, field)) = tail.rsplit_once('.') else {
            return Err(Error::format(source, e.line, format!("bad task key {:?}", e.key)));
        };
        if !TASK_FIELDS.contains(&field) {
            return Err(Error::Config(format!("{source}:{}: unknown task field {field:?}", e.line)));
        }
        let idx = match names.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                names.push(name.to_string());
                drafts.push(TaskDraft::default());
                names.len() - 1
            }
        };
        let d = &mut drafts[idx];
        let size = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{source}:{}: expected a count, got {v:?}", e.line)))
        };
        match field {
            "labels" => {
                d.labels = Some(e.value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            }
            "train" => d.train = Some(base.join(&e.value)),
            "dev" => d.dev = Some(base.join(&e.value)),
            "test" => d.test = Some(base.join(&e.value)),
            "synth" => d.synth = Some(e.value.parse()?),
            "train_size" => d.train_size = Some(size(&e.value)?),
            "dev_size" => d.dev_size = Some(size(&e.value)?),
            _ => unreachable!(),
        }
    }

    let mut tasks = Vec::new();
    for (name, d) in names.into_iter().zip(drafts) {
        let source = match (d.synth, d.train, d.dev) {
            (Some(kind), None, None) => TaskSource::Synthetic {
                kind,
                train_size: d.train_size.unwrap_or(2000),
                dev_size: d.dev_size.unwrap_or(500),
            },
            (None, Some(train), Some(dev)) => TaskSource::Files {
                train,
                dev,
                test: d.test,
            },
            _ => {
                return Err(Error::Config(format!(
                    "task {name}: declare either `synth` or both `train` and `dev`"
                )))
            }
        };
        let labels = match (&source, d.labels) {
            (_, Some(l)) => l,
            (TaskSource::Synthetic { .. }, None) => vec!["0".into(), "1".into()],
            (TaskSource::Files { .. }, None) => {
                return Err(Error::Config(format!("task {name}: missing `labels`")))
            }
        };
        tasks.push(TaskSpec::new(name, labels, source)?);
    }
    Ok((tasks, rest))
}
