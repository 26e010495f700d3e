//! `MTLSE1` checkpoints.
//!
//! ```text
//! MTLSE1 <framework> <K> <d> <d_w> <h_mlp>\n
//! <name> <length>\n <length little-endian f64>     (one record per parameter)
//! embedding <|V|·d_w>\n <…>
//! ```
//!
//! Shapes are not stored; they follow from the parameter name, the record
//! length and the header. The vocabulary goes to a `<checkpoint>.vocab` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mtl::{Framework, MtlModel};
use crate::ndgrad::{ParamStore, Tensor};
use crate::textdata::{EmbeddingTable, Vocabulary};

const MAGIC: &str = "MTLSE1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub framework: Framework,
    pub tasks: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
}

impl CheckpointHeader {
    pub fn of(model: &MtlModel) -> Self {
        CheckpointHeader {
            framework: model.framework,
            tasks: model.num_tasks(),
            hidden: model.hidden(),
            embed_dim: model.embeddings.dim(),
            mlp_hidden: model.mlp_hidden,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{MAGIC} {} {} {} {} {}",
            self.framework, self.tasks, self.hidden, self.embed_dim, self.mlp_hidden
        )
    }
}

pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

/// Serializes a model to bytes (without the vocabulary).
pub fn checkpoint_bytes(model: &MtlModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CheckpointHeader::of(model).line().as_bytes());
    out.push(b'\n');
    let mut record = |name: &str, t: &Tensor| {
        out.extend_from_slice(format!("{name} {}\n", t.len()).as_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in model.store.iter() {
        record(name, t);
    }
    record("embedding", model.embeddings.matrix());
    out
}

pub fn save_checkpoint(model: &MtlModel, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))?;
    model.vocab.save(&vocab_path(path))
}

pub fn load_checkpoint(path: &Path) -> Result<MtlModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let vocab = Vocabulary::load(&vocab_path(path))?;
    parse_checkpoint(&bytes, vocab, &path.display().to_string())
}

/// Loads a checkpoint and insists on the given framework.
pub fn load_checkpoint_as(path: &Path, framework: Framework) -> Result<MtlModel> {
    let m = load_checkpoint(path)?;
    if m.framework != framework {
        return Err(Error::Framework(format!(
            "{} holds a {} model, but a {framework} model is required",
            path.display(),
            m.framework
        )));
    }
    Ok(m)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint(format!("{}: {} (byte {})", self.source, msg.into(), self.pos))
    }

    fn line(&mut self) -> Result<Option<&'a str>> {
        if self.pos == self.bytes.len() {
            return Ok(None);
        }
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .take(4096)
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.fail("unterminated record header"))?;
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| self.fail("record header is not text"))?;
        self.pos += end + 1;
        Ok(Some(text))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let need = n.checked_mul(8).ok_or_else(|| self.fail("record length overflows"))?;
        if self.bytes.len() - self.pos < need {
            return Err(self.fail(format!("truncated: record needs {need} bytes")));
        }
        let out = self.bytes[self.pos..self.pos + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += need;
        Ok(out)
    }
}

fn parse_header(line: &str, source: &str) -> Result<CheckpointHeader> {
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.first() != Some(&MAGIC) {
        return Err(Error::Checkpoint(format!(
            "{source}: not an {MAGIC} checkpoint (header {line:?})"
        )));
    }
    if fields.len() != 6 {
        return Err(Error::Checkpoint(format!("{source}: malformed header {line:?}")));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Checkpoint(format!("{source}: bad header field {s:?}")))
    };
    Ok(CheckpointHeader {
        framework: fields[1]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("{source}: unknown framework {:?}", fields[1])))?,
        tasks: num(fields[2])?,
        hidden: num(fields[3])?,
        embed_dim: num(fields[4])?,
        mlp_hidden: num(fields[5])?,
    })
}

fn shape_for(name: &str, len: usize, h: &CheckpointHeader) -> Option<Vec<usize>> {
    let d = h.hidden;
    let split = |cols: usize| (cols > 0 && len % cols == 0 && len > 0).then(|| vec![len / cols, cols]);
    let leaf = name.rsplit('.').next()?;
    if name.starts_with("shared.") || name.starts_with("private.") {
        return match leaf {
            "w" if len == 4 * d * (h.embed_dim + d) => Some(vec![4 * d, h.embed_dim + d]),
            "b" if len == 4 * d => Some(vec![4 * d]),
            _ => None,
        };
    }
    if name.starts_with("head.") {
        return match leaf {
            "w1" => split(h.mlp_hidden),
            "b1" if len == h.mlp_hidden => Some(vec![len]),
            "w2" if len % h.mlp_hidden == 0 && len > 0 => Some(vec![h.mlp_hidden, len / h.mlp_hidden]),
            "b2" if len > 0 => Some(vec![len]),
            _ => None,
        };
    }
    if name.starts_with("biatt.") {
        return (matches!(leaf, "w1" | "w2") && len > 0).then(|| vec![len]);
    }
    match name {
        "disc.w" if len == 2 * d * h.tasks => Some(vec![2 * d, h.tasks]),
        "disc.b" if len == h.tasks => Some(vec![h.tasks]),
        _ => None,
    }
}

/// Rebuilds a model from checkpoint bytes.
pub fn parse_checkpoint(bytes: &[u8], vocab: Vocabulary, source: &str) -> Result<MtlModel> {
    let mut r = Reader { bytes, pos: 0, source };
    let first = r.line()?.ok_or_else(|| r.fail("empty file"))?;
    let header = parse_header(first, source)?;
    let mut store = ParamStore::new();
    let mut embedding = None;
    while let Some(line) = r.line()? {
        let (name, len) = line
            .rsplit_once(' ')
            .and_then(|(n, l)| Some((n, l.parse::<usize>().ok()?)))
            .ok_or_else(|| r.fail(format!("bad record header {line:?}")))?;
        if embedding.is_some() {
            return Err(r.fail(format!("record {name} after the embedding table")));
        }
        let data = r.floats(len)?;
        if name == "embedding" {
            if len % header.embed_dim != 0 || len == 0 {
                return Err(r.fail("embedding length is not a multiple of d_w"));
            }
            embedding = Some(Tensor::matrix(len / header.embed_dim, header.embed_dim, data)?);
            continue;
        }
        let shape =
            shape_for(name, len, &header).ok_or_else(|| r.fail(format!("unexpected record {name} of length {len}")))?;
        store
            .add(name, Tensor::new(shape, data)?)
            .map_err(|_| r.fail(format!("duplicate record {name}")))?;
    }
    let matrix = embedding.ok_or_else(|| r.fail("truncated: no embedding table"))?;
    let embeddings = EmbeddingTable::new(matrix, true)?;
    let model = MtlModel::from_store(header.framework, store, vocab, embeddings)?;
    if CheckpointHeader::of(&model) != header {
        return Err(Error::Checkpoint(format!(
            "{source}: header {:?} disagrees with the stored parameters",
            header.line()
        )));
    }
    Ok(model)
}
