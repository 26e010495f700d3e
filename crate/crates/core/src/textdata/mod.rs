//! Vocabulary, word embeddings, pair-classification datasets, batching and
//! synthetic task generation.

mod batch;
mod dataset;
mod embeddings;
mod manifest;
mod synth;
mod vocab;

pub use batch::{batch_iter, Batch, PaddedSeqs, DEFAULT_BATCH_SIZE};
pub use dataset::{
    load_pair_dataset, read_pair_file, read_sentences, write_pair_dataset, Dataset, Example, RawPair,
    TaskSource, TaskSpec,
};
pub use embeddings::{load_embeddings, EmbeddingTable, OovPolicy};
pub use manifest::{parse_kv, parse_tasks, KvEntry};
pub use synth::{marker_label, overlap_label, synth_generate, synth_sentences, SynthConfig, SynthKind};
pub use vocab::{build_vocab, tokenize, Vocabulary, PAD, PAD_TOKEN, UNK, UNK_TOKEN};
