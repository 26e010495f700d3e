//! Synthetic pair-classification tasks with planted shared and task-private signal.
//!
//! All generators draw fillers from one common vocabulary. `SHARED-OVERLAP` asks
//! whether the two sentences share a content token (`x*`), which any encoder can
//! learn and which is useful to every task built on it. `PRIVATE-MARKER(k)` asks
//! for the parity of the position of marker `m{k}` in the first sentence; only
//! task `k` ever sees that marker.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::textdata::dataset::{Dataset, Example};
use crate::textdata::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    SharedOverlap,
    PrivateMarker(usize),
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "shared-overlap" {
            return Ok(SynthKind::SharedOverlap);
        }
        if let Some(k) = lower.strip_prefix("private-marker:") {
            let k = k
                .parse()
                .map_err(|_| Error::Config(format!("bad marker index in {s:?}")))?;
            return Ok(SynthKind::PrivateMarker(k));
        }
        Err(Error::Config(format!(
            "unknown synthetic task {s:?} (expected shared-overlap or private-marker:<k>)"
        )))
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthKind::SharedOverlap => write!(f, "shared-overlap"),
            SynthKind::PrivateMarker(k) => write!(f, "private-marker:{k}"),
        }
    }
}

/// Shape of the synthetic token universe and sentence lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub fillers: usize,
    pub content: usize,
    pub markers: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            fillers: 24,
            content: 6,
            markers: 4,
            min_len: 4,
            max_len: 10,
        }
    }
}

impl SynthConfig {
    pub fn filler_token(i: usize) -> String {
        format!("w{i}")
    }

    pub fn content_token(i: usize) -> String {
        format!("x{i}")
    }

    pub fn marker_token(k: usize) -> String {
        format!("m{k}")
    }

    /// The whole token universe: fillers, then content tokens, then markers.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(
            (0..self.fillers)
                .map(Self::filler_token)
                .chain((0..self.content).map(Self::content_token))
                .chain((0..self.markers).map(Self::marker_token)),
        )
    }

    fn validate(&self, kind: SynthKind) -> Result<()> {
        if self.fillers == 0 || self.content < 2 || self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Config(format!("degenerate synthetic config {self:?}")));
        }
        if let SynthKind::PrivateMarker(k) = kind {
            if k >= self.markers {
                return Err(Error::Config(format!(
                    "marker {k} out of range ({} markers)",
                    self.markers
                )));
            }
        }
        Ok(())
    }
}

/// Label of a SHARED-OVERLAP pair: 1 iff some content token occurs in both.
pub fn overlap_label(s1: &[usize], s2: &[usize], content: &[usize]) -> usize {
    let shared = s1
        .iter()
        .any(|t| content.contains(t) && s2.contains(t));
    usize::from(shared)
}

/// Label of a PRIVATE-MARKER sentence: parity of the marker's first position.
pub fn marker_label(s1: &[usize], marker: usize) -> Option<usize> {
    s1.iter().position(|&t| t == marker).map(|p| p % 2)
}

struct Tokens {
    fillers: Vec<usize>,
    content: Vec<usize>,
}

impl Tokens {
    fn new(cfg: &SynthConfig, vocab: &Vocabulary) -> Self {
        Tokens {
            fillers: (0..cfg.fillers)
                .map(|i| vocab.lookup(&SynthConfig::filler_token(i)))
                .collect(),
            content: (0..cfg.content)
                .map(|i| vocab.lookup(&SynthConfig::content_token(i)))
                .collect(),
        }
    }

    fn filler_sentence(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
        (0..len).map(|_| *self.fillers.choose(rng).unwrap()).collect()
    }
}

/// Balanced label sequence: `n/2` zeros and ones (plus one extra when odd), shuffled.
fn balanced_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(rng);
    labels
}

/// Generates `n` examples of `kind` named `task`.
pub fn synth_generate(
    kind: SynthKind,
    task: &str,
    n: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<Dataset> {
    cfg.validate(kind)?;
    let vocab = cfg.vocabulary();
    let toks = Tokens::new(cfg, &vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = balanced_labels(&mut rng, n);
    let mut examples = Vec::with_capacity(n);
    for &label in &labels {
        let len1 = rng.gen_range(cfg.min_len..=cfg.max_len);
        let len2 = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut s1 = toks.filler_sentence(&mut rng, len1);
        let mut s2 = toks.filler_sentence(&mut rng, len2);
        let (tokens1, tokens2) = match kind {
            SynthKind::SharedOverlap => {
                let c1 = *toks.content.choose(&mut rng).unwrap();
                let c2 = if label == 1 {
                    c1
                } else {
                    **toks
                        .content
                        .iter()
                        .filter(|&&c| c != c1)
                        .collect::<Vec<_>>()
                        .choose(&mut rng)
                        .unwrap()
                };
                let p1 = rng.gen_range(0..len1);
                let p2 = rng.gen_range(0..len2);
                s1[p1] = c1;
                s2[p2] = c2;
                debug_assert_eq!(overlap_label(&s1, &s2, &toks.content), label);
                (s1, s2)
            }
            SynthKind::PrivateMarker(k) => {
                let marker = vocab.lookup(&SynthConfig::marker_token(k));
                let slots: Vec<usize> = (0..len1).filter(|p| p % 2 == label).collect();
                let p = *slots.choose(&mut rng).unwrap();
                s1[p] = marker;
                // one irrelevant content token per sentence, as in SHARED-OVERLAP
                let free: Vec<usize> = (0..len1).filter(|&q| q != p).collect();
                let q = *free.choose(&mut rng).unwrap();
                s1[q] = *toks.content.choose(&mut rng).unwrap();
                let q2 = rng.gen_range(0..len2);
                s2[q2] = *toks.content.choose(&mut rng).unwrap();
                debug_assert_eq!(marker_label(&s1, marker), Some(label));
                (s1, s2)
            }
        };
        examples.push(Example {
            task: task.to_string(),
            tokens1,
            tokens2,
            label,
        });
    }
    Ok(Dataset {
        task: task.to_string(),
        examples,
    })
}

/// Single filler sentences (each with one content token) of the requested lengths.
pub fn synth_sentences(lengths: &[usize], seed: u64, cfg: &SynthConfig) -> Vec<Vec<usize>> {
    let vocab = cfg.vocabulary();
    let toks = Tokens::new(cfg, &vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lengths
        .iter()
        .map(|&len| {
            let mut s = toks.filler_sentence(&mut rng, len.max(1));
            let p = rng.gen_range(0..s.len());
            s[p] = *toks.content.choose(&mut rng).unwrap();
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(vocab: &Vocabulary, toks: &[&str]) -> Vec<usize> {
        toks.iter().map(|t| vocab.lookup(t)).collect()
    }

    #[test]
    fn definitional_labels() {
        let cfg = SynthConfig {
            content: 8,
            ..SynthConfig::default()
        };
        let v = cfg.vocabulary();
        let content: Vec<usize> = (0..8).map(|i| v.lookup(&SynthConfig::content_token(i))).collect();
        let s1 = ids(&v, &["w1", "x7", "w2"]);
        let s2 = ids(&v, &["w3", "w4", "x7"]);
        assert_eq!(overlap_label(&s1, &s2, &content), 1);
        let s2 = ids(&v, &["w3", "w4", "x6"]);
        assert_eq!(overlap_label(&s1, &s2, &content), 0);
        // fillers in common do not count
        let s2 = ids(&v, &["w1", "x3"]);
        assert_eq!(overlap_label(&s1, &s2, &content), 0);

        let m = v.lookup("m1");
        let s = ids(&v, &["w0", "w1", "w2", "m1", "w4"]);
        assert_eq!(marker_label(&s, m), Some(1));
    }

    #[test]
    fn labels_are_consistent_and_balanced() {
        let cfg = SynthConfig::default();
        let v = cfg.vocabulary();
        let content: Vec<usize> = (0..cfg.content).map(|i| v.lookup(&SynthConfig::content_token(i))).collect();
        for kind in [SynthKind::SharedOverlap, SynthKind::PrivateMarker(2)] {
            let ds = synth_generate(kind, "t", 501, 3, &cfg).unwrap();
            let ones = ds.examples.iter().filter(|e| e.label == 1).count();
            assert!((ones as f64 / 501.0 - 0.5).abs() <= 0.02);
            for e in &ds.examples {
                assert!(e.tokens1.len() >= cfg.min_len && e.tokens1.len() <= cfg.max_len);
                let want = match kind {
                    SynthKind::SharedOverlap => overlap_label(&e.tokens1, &e.tokens2, &content),
                    SynthKind::PrivateMarker(k) => {
                        marker_label(&e.tokens1, v.lookup(&SynthConfig::marker_token(k))).unwrap()
                    }
                };
                assert_eq!(e.label, want);
            }
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let cfg = SynthConfig::default();
        let a = synth_generate(SynthKind::SharedOverlap, "t", 100, 42, &cfg).unwrap();
        let b = synth_generate(SynthKind::SharedOverlap, "t", 100, 42, &cfg).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(SynthKind::SharedOverlap, "t", 100, 43, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn names_parse() {
        assert_eq!("shared-overlap".parse::<SynthKind>().unwrap(), SynthKind::SharedOverlap);
        assert_eq!("PRIVATE-MARKER:3".parse::<SynthKind>().unwrap(), SynthKind::PrivateMarker(3));
        assert!("mystery".parse::<SynthKind>().is_err());
        assert!(synth_generate(SynthKind::PrivateMarker(9), "t", 4, 0, &SynthConfig::default()).is_err());
    }
}
