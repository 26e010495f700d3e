use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::textdata::synth::SynthKind;
use crate::textdata::vocab::{tokenize, Vocabulary};

/// A labeled sentence pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub task: String,
    pub tokens1: Vec<usize>,
    pub tokens2: Vec<usize>,
    pub label: usize,
}

/// Examples of one task, identified by their position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub task: String,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

/// Where a task's examples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSource {
    Files {
        train: PathBuf,
        dev: PathBuf,
        test: Option<PathBuf>,
    },
    Synthetic {
        kind: SynthKind,
        train_size: usize,
        dev_size: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    /// Declared class names; `labels.len()` is the class count.
    pub labels: Vec<String>,
    pub source: TaskSource,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, labels: Vec<String>, source: TaskSource) -> Result<Self> {
        let spec = TaskSpec {
            name: name.into(),
            labels,
            source,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn synthetic(name: impl Into<String>, kind: SynthKind, train_size: usize, dev_size: usize) -> Self {
        TaskSpec {
            name: name.into(),
            labels: vec!["0".into(), "1".into()],
            source: TaskSource::Synthetic {
                kind,
                train_size,
                dev_size,
            },
        }
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(char::is_whitespace) {
            return Err(Error::Config(format!("invalid task name {:?}", self.name)));
        }
        if self.classes() < 2 {
            return Err(Error::Config(format!(
                "task {} declares {} classes; at least 2 are required",
                self.name,
                self.classes()
            )));
        }
        Ok(())
    }

    fn parse_label(&self, field: &str) -> Option<usize> {
        if let Some(i) = self.labels.iter().position(|l| l == field) {
            return Some(i);
        }
        field.parse::<usize>().ok().filter(|&i| i < self.classes())
    }
}

/// One parsed line of a pair file before vocabulary lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPair {
    pub label: usize,
    pub sentence1: Vec<String>,
    pub sentence2: Vec<String>,
}

/// Parses `label<TAB>sentence1<TAB>sentence2` lines.
pub fn read_pair_file(path: &Path, task: &TaskSpec) -> Result<Vec<RawPair>> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                &name,
                n + 1,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let label = task.parse_label(fields[0].trim()).ok_or_else(|| {
            Error::format(&name, n + 1, format!("unknown label {:?} for task {}", fields[0], task.name))
        })?;
        let s1 = tokenize(fields[1]);
        let s2 = tokenize(fields[2]);
        if s1.is_empty() || s2.is_empty() {
            return Err(Error::format(&name, n + 1, "empty sentence"));
        }
        out.push(RawPair {
            label,
            sentence1: s1,
            sentence2: s2,
        });
    }
    Ok(out)
}

pub fn load_pair_dataset(path: &Path, task: &TaskSpec, vocab: &Vocabulary) -> Result<Dataset> {
    let raw = read_pair_file(path, task)?;
    Ok(Dataset {
        task: task.name.clone(),
        examples: raw
            .into_iter()
            .map(|r| Example {
                task: task.name.clone(),
                tokens1: vocab.encode(&r.sentence1),
                tokens2: vocab.encode(&r.sentence2),
                label: r.label,
            })
            .collect(),
    })
}

/// Writes a dataset in the pair-file format with integer labels.
pub fn write_pair_dataset(path: &Path, dataset: &Dataset, vocab: &Vocabulary) -> Result<()> {
    let detok = |ids: &[usize]| -> Result<String> {
        ids.iter()
            .map(|&i| {
                vocab
                    .token(i)
                    .ok_or_else(|| Error::Data(format!("token index {i} outside vocabulary")))
            })
            .collect::<Result<Vec<_>>>()
            .map(|t| t.join(" "))
    };
    let mut out = String::new();
    for e in &dataset.examples {
        out.push_str(&format!("{}\t{}\t{}\n", e.label, detok(&e.tokens1)?, detok(&e.tokens2)?));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads one sentence per line (for probes), returning tokenized sentences.
pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokenize).filter(|t| !t.is_empty()).collect())
}
