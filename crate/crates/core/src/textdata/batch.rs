use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::textdata::dataset::Dataset;
use crate::textdata::vocab::PAD;

pub const DEFAULT_BATCH_SIZE: usize = 128;

/// Padded token sequences of one side of a batch, plus their true lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedSeqs {
    /// `batch × max_len`, padded with [`PAD`].
    pub tokens: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl PaddedSeqs {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::arg("no sequences to pad"));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        if lengths.contains(&0) {
            return Err(Error::arg("empty sequence"));
        }
        let max = *lengths.iter().max().unwrap();
        let tokens = seqs
            .iter()
            .map(|s| {
                let mut t = s.as_ref().to_vec();
                t.resize(max, PAD);
                t
            })
            .collect();
        Ok(PaddedSeqs { tokens, lengths })
    }

    pub fn batch(&self) -> usize {
        self.tokens.len()
    }

    pub fn max_len(&self) -> usize {
        self.tokens[0].len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub task: String,
    /// Positions of the examples in their dataset.
    pub ids: Vec<usize>,
    pub first: PaddedSeqs,
    pub second: PaddedSeqs,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_ids(dataset: &Dataset, ids: &[usize]) -> Result<Self> {
        let ex: Vec<_> = ids.iter().map(|&i| &dataset.examples[i]).collect();
        Ok(Batch {
            task: dataset.task.clone(),
            ids: ids.to_vec(),
            first: PaddedSeqs::new(&ex.iter().map(|e| e.tokens1.as_slice()).collect::<Vec<_>>())?,
            second: PaddedSeqs::new(&ex.iter().map(|e| e.tokens2.as_slice()).collect::<Vec<_>>())?,
            labels: ex.iter().map(|e| e.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One epoch of batches. With a shuffle seed the example order is a seeded
/// permutation; without, dataset order.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|ids| Batch::from_ids(dataset, ids))
        .collect()
}
