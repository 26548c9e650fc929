use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SeqBatch, TaskError};

/// Byte-level text split into fixed-length blocks; validation is the final
/// fraction of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CharCorpus {
    context: usize,
    train: Vec<u8>,
    val: Vec<u8>,
}

pub const BYTE_VOCAB: usize = 256;

/// Reads `path` and splits it; see [`CharCorpus::from_bytes`].
pub fn char_corpus(path: &Path, context: usize, split_fraction: f64) -> Result<CharCorpus, TaskError> {
    let bytes = std::fs::read(path)?;
    CharCorpus::from_bytes(&bytes, context, split_fraction)
}

impl CharCorpus {
    /// Cuts `bytes` into `len / context` blocks, dropping the remainder, and
    /// keeps the last `round(split_fraction · blocks)` blocks for validation.
    pub fn from_bytes(bytes: &[u8], context: usize, split_fraction: f64) -> Result<Self, TaskError> {
        if context < 2 {
            return Err(TaskError::InvalidSpec("context length must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&split_fraction) {
            return Err(TaskError::InvalidSpec(format!(
                "split fraction must lie in [0, 1), got {split_fraction}"
            )));
        }
        let blocks = bytes.len() / context;
        if blocks == 0 {
            return Err(TaskError::CorpusTooShort {
                len: bytes.len(),
                context,
            });
        }
        let val_blocks = (blocks as f64 * split_fraction).round() as usize;
        let cut = (blocks - val_blocks) * context;
        Ok(Self {
            context,
            train: bytes[..cut].to_vec(),
            val: bytes[cut..blocks * context].to_vec(),
        })
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn train_blocks(&self) -> usize {
        self.train.len() / self.context
    }

    pub fn val_blocks(&self) -> usize {
        self.val.len() / self.context
    }

    pub fn train_block(&self, i: usize) -> &[u8] {
        &self.train[i * self.context..(i + 1) * self.context]
    }

    pub fn val_block(&self, i: usize) -> &[u8] {
        &self.val[i * self.context..(i + 1) * self.context]
    }

    fn batch_of<'a>(&self, blocks: impl Iterator<Item = &'a [u8]>) -> SeqBatch {
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        let mut batch = 0;
        for b in blocks {
            tokens.extend(b.iter().map(|&x| x as usize));
            targets.extend(b[1..].iter().map(|&x| Some(x as usize)));
            targets.push(None);
            batch += 1;
        }
        SeqBatch {
            tokens,
            targets,
            batch,
            seq: self.context,
        }
    }

    /// `batch` training blocks drawn uniformly with replacement. Each block
    /// predicts its own next byte at every position but the last.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> SeqBatch {
        let n = self.train_blocks();
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        self.batch_of(idx.into_iter().map(|i| self.train_block(i)))
    }

    /// Validation blocks `start..start + count` (clipped), in order.
    pub fn val_batch(&self, start: usize, count: usize) -> SeqBatch {
        let end = (start + count).min(self.val_blocks());
        self.batch_of((start.min(end)..end).map(|i| self.val_block(i)))
    }
}

const DETERMINERS: &[&str] = &["the", "a", "every", "some", "this", "that", "no", "one"];
const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "cl", "st", "tr", "sh",
    "th", "gr", "pl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "l", "nd", "st", "m"];

fn make_words(rng: &mut ChaCha8Rng, count: usize, suffix: &str) -> Vec<String> {
    (0..count)
        .map(|_| {
            let syllables = rng.random_range(1..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).expect("nonempty"));
                w.push_str(VOWELS.choose(rng).expect("nonempty"));
                w.push_str(CODAS.choose(rng).expect("nonempty"));
            }
            w.push_str(suffix);
            w
        })
        .collect()
}

/// Zipf-weighted pick: index `i` has weight `1 / (i + 1)`.
fn zipf<'a>(words: &'a [String], rng: &mut ChaCha8Rng) -> &'a str {
    let h: f64 = (1..=words.len()).map(|k| 1.0 / k as f64).sum();
    let mut u = rng.random::<f64>() * h;
    for (i, w) in words.iter().enumerate() {
        u -= 1.0 / (i + 1) as f64;
        if u <= 0.0 {
            return w;
        }
    }
    words.last().expect("nonempty")
}

/// Deterministic pseudo-English text of exactly `n_bytes` ASCII bytes:
/// sentences built from a seeded lexicon of nouns, verbs and adjectives
/// following a small phrase grammar, grouped into paragraphs.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nouns = make_words(&mut rng, 400, "");
    let verbs = make_words(&mut rng, 150, "s");
    let adjectives = make_words(&mut rng, 120, "y");
    let mut out = String::with_capacity(n_bytes + 256);
    let mut sentences_in_paragraph = 0;
    while out.len() < n_bytes {
        let mut words: Vec<String> = Vec::new();
        let clauses = rng.random_range(1..=2);
        for c in 0..clauses {
            if c > 0 {
                words.push(if rng.random_bool(0.5) { "and" } else { "while" }.to_string());
            }
            for part in 0..2 {
                words.push(DETERMINERS.choose(&mut rng).expect("nonempty").to_string());
                if rng.random_bool(0.4) {
                    words.push(zipf(&adjectives, &mut rng).to_string());
                }
                words.push(zipf(&nouns, &mut rng).to_string());
                if part == 0 {
                    words.push(zipf(&verbs, &mut rng).to_string());
                }
            }
        }
        let mut sentence = words.join(" ");
        if let Some(first) = sentence.get_mut(0..1) {
            first.make_ascii_uppercase();
        }
        out.push_str(&sentence);
        out.push('.');
        sentences_in_paragraph += 1;
        if sentences_in_paragraph >= rng.random_range(3..=7) {
            out.push('\n');
            sentences_in_paragraph = 0;
        } else {
            out.push(' ');
        }
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(n_bytes);
    bytes
}
