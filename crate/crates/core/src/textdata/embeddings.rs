use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::textdata::vocab::{Vocabulary, PAD};

/// How rows are filled for vocabulary entries missing from an embedding file.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum OovPolicy {
    #[default]
    Zeros,
    /// Uniform in ±0.1 from a seeded generator.
    Uniform { seed: u64 },
}

/// `|V| × d_w` word vectors. Row 0 (padding) is always zero. A frozen table is
/// only ever inserted into graphs as a constant.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
    frozen: bool,
}

impl EmbeddingTable {
    pub fn new(mut matrix: Tensor, frozen: bool) -> Result<Self> {
        let (_, d) = matrix.dims2()?;
        if matrix.shape().len() != 2 {
            return Err(Error::dim("embedding table must be a matrix"));
        }
        matrix.data_mut()[..d].iter_mut().for_each(|v| *v = 0.0);
        Ok(EmbeddingTable { matrix, frozen })
    }

    /// Seeded uniform vectors in ±`scale`, used when no pretrained file is given.
    pub fn random(vocab_size: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..vocab_size * dim)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Self::new(Tensor::matrix(vocab_size, dim, data)?, true)
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.matrix.row(index)
    }
}

/// Reads a GloVe-style text file (`token v1 … v_d` per line) for the tokens of `vocab`.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, oov: OovPolicy) -> Result<EmbeddingTable> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    let mut dim: Option<usize> = None;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::format(&name, n + 1, format!("unreadable float {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if values.is_empty() => {
                return Err(Error::format(&name, n + 1, "no vector components"));
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::format(
                    &name,
                    n + 1,
                    format!("expected {d} components, found {}", values.len()),
                ));
            }
            Some(_) => {}
        }
        if let Some(i) = vocab.get(token) {
            if rows[i].is_none() {
                rows[i] = Some(values);
            }
        }
    }
    let dim = dim.ok_or_else(|| Error::format(&name, 0, "embedding file is empty"))?;

    let mut rng = match oov {
        OovPolicy::Uniform { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        OovPolicy::Zeros => None,
    };
    let mut data = Vec::with_capacity(vocab.len() * dim);
    for (i, row) in rows.into_iter().enumerate() {
        match (row, rng.as_mut()) {
            _ if i == PAD => data.extend(std::iter::repeat(0.0).take(dim)),
            (Some(v), _) => data.extend(v),
            (None, None) => data.extend(std::iter::repeat(0.0).take(dim)),
            (None, Some(r)) => data.extend((0..dim).map(|_| r.gen_range(-0.1..=0.1))),
        }
    }
    EmbeddingTable::new(Tensor::matrix(vocab.len(), dim, data)?, true)
}
