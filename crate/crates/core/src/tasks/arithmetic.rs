use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TaskError;

/// Per-digit vocabulary: `0`–`9`, `*`, `=`, end-of-sequence, padding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DigitTokenizer;

impl DigitTokenizer {
    pub const TIMES: usize = 10;
    pub const EQUALS: usize = 11;
    pub const EOS: usize = 12;
    pub const PAD: usize = 13;
    pub const VOCAB_SIZE: usize = 14;

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, TaskError> {
        text.chars()
            .enumerate()
            .map(|(position, ch)| match ch {
                '0'..='9' => Ok(ch as usize - '0' as usize),
                '*' => Ok(Self::TIMES),
                '=' => Ok(Self::EQUALS),
                _ => Err(TaskError::UnknownChar { ch, position }),
            })
            .collect()
    }

    /// Inverse of [`DigitTokenizer::encode`]. Decoding stops at the first
    /// end-of-sequence token and skips padding.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TaskError> {
        let mut out = String::with_capacity(ids.len());
        for (position, &id) in ids.iter().enumerate() {
            match id {
                0..=9 => out.push((b'0' + id as u8) as char),
                Self::TIMES => out.push('*'),
                Self::EQUALS => out.push('='),
                Self::EOS => break,
                Self::PAD => {}
                _ => return Err(TaskError::UnknownToken { id, position }),
            }
        }
        Ok(out)
    }

    /// Next-token pair for one equation, padded to `seq_len` positions.
    /// Only targets that follow `=` (the answer digits and the closing
    /// end-of-sequence) carry loss.
    pub fn training_pair(
        &self,
        eq: &Equation,
        seq_len: usize,
    ) -> Result<(Vec<usize>, Vec<Option<usize>>), TaskError> {
        let mut full = self.encode(&eq.text())?;
        full.push(Self::EOS);
        if full.len() - 1 > seq_len {
            return Err(TaskError::InvalidSpec(format!(
                "equation {} needs {} positions, sequence length is {seq_len}",
                eq.text(),
                full.len() - 1
            )));
        }
        let eq_pos = full
            .iter()
            .position(|&t| t == Self::EQUALS)
            .expect("equation text contains '='");
        let mut inputs = vec![Self::PAD; seq_len];
        let mut targets = vec![None; seq_len];
        for i in 0..full.len() - 1 {
            inputs[i] = full[i];
            if i >= eq_pos {
                targets[i] = Some(full[i + 1]);
            }
        }
        Ok((inputs, targets))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Equation {
    pub a: u64,
    pub b: u64,
}

impl Equation {
    pub fn product(&self) -> u64 {
        self.a * self.b
    }

    /// `"a*b=c"`.
    pub fn text(&self) -> String {
        format!("{}*{}={}", self.a, self.b, self.product())
    }
}

/// A batch of padded token sequences with masked next-token targets,
/// laid out row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub batch: usize,
    pub seq: usize,
}

impl SeqBatch {
    pub fn from_equations(eqs: &[Equation], seq: usize) -> Result<Self, TaskError> {
        let tok = DigitTokenizer;
        let mut tokens = Vec::with_capacity(eqs.len() * seq);
        let mut targets = Vec::with_capacity(eqs.len() * seq);
        for eq in eqs {
            let (i, t) = tok.training_pair(eq, seq)?;
            tokens.extend(i);
            targets.extend(t);
        }
        Ok(Self {
            tokens,
            targets,
            batch: eqs.len(),
            seq,
        })
    }
}

/// Operand digit ranges and split sizes for the multiplication task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArithmeticSpec {
    pub train_digits: (u32, u32),
    pub ood_digits: (u32, u32),
    pub count_train: usize,
    pub count_test_id: usize,
    pub count_test_ood: usize,
    pub count_val_ood: usize,
    pub seed: u64,
}

impl Default for ArithmeticSpec {
    fn default() -> Self {
        Self {
            train_digits: (1, 2),
            ood_digits: (3, 3),
            count_train: 100_000,
            count_test_id: 5_000,
            count_test_ood: 5_000,
            count_val_ood: 1_000,
            seed: 0,
        }
    }
}

/// Widest operand the generator supports; keeps every product inside `u64`.
pub const MAX_DIGITS: u32 = 9;

fn numbers_with_digits(len: u32) -> (u64, u64) {
    if len == 1 {
        (0, 10)
    } else {
        (10u64.pow(len - 1), 10u64.pow(len))
    }
}

fn count_numbers((lo, hi): (u32, u32)) -> u64 {
    (lo..=hi)
        .map(|l| {
            let (a, b) = numbers_with_digits(l);
            b - a
        })
        .sum()
}

fn sample_operand(range: (u32, u32), rng: &mut ChaCha8Rng) -> u64 {
    let len = rng.random_range(range.0..=range.1);
    let (lo, hi) = numbers_with_digits(len);
    rng.random_range(lo..hi)
}

impl ArithmeticSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::InvalidSpec(m));
        for (name, (lo, hi)) in [("train", self.train_digits), ("ood", self.ood_digits)] {
            if lo == 0 || lo > hi || hi > MAX_DIGITS {
                return bad(format!(
                    "{name} digit range ({lo}, {hi}) must satisfy 1 ≤ lo ≤ hi ≤ {MAX_DIGITS}"
                ));
            }
        }
        if self.ood_digits.0 <= self.train_digits.1 {
            return bad("the out-of-domain range must lie above the training range".into());
        }
        Ok(())
    }

    /// Positions needed for the longest equation of either range, excluding
    /// the final end-of-sequence target.
    pub fn sequence_length(&self) -> usize {
        let hi = self.train_digits.1.max(self.ood_digits.1) as usize;
        4 * hi + 2
    }

    pub fn manifest(&self, splits: &ArithmeticSplits) -> ArithmeticManifest {
        ArithmeticManifest {
            spec: self.clone(),
            counts: SplitCounts {
                train: splits.train.len(),
                test_id: splits.test_id.len(),
                test_ood: splits.test_ood.len(),
                val_ood: splits.val_ood.len(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test_id: usize,
    pub test_ood: usize,
    pub val_ood: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArithmeticManifest {
    pub spec: ArithmeticSpec,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArithmeticSplits {
    /// Sampled with replacement from the pairs not held out for testing.
    pub train: Vec<Equation>,
    pub test_id: Vec<Equation>,
    pub test_ood: Vec<Equation>,
    pub val_ood: Vec<Equation>,
}

impl ArithmeticSplits {
    /// Writes one equation per line for each split plus `manifest.json`.
    pub fn write(&self, spec: &ArithmeticSpec, dir: &Path) -> Result<(), TaskError> {
        std::fs::create_dir_all(dir)?;
        for (name, eqs) in [
            ("train", &self.train),
            ("test_id", &self.test_id),
            ("test_ood", &self.test_ood),
            ("val_ood", &self.val_ood),
        ] {
            let mut text = String::new();
            for eq in eqs {
                text.push_str(&eq.text());
                text.push('\n');
            }
            std::fs::write(dir.join(format!("{name}.txt")), text)?;
        }
        let manifest = serde_json::to_string_pretty(&spec.manifest(self))?;
        std::fs::write(dir.join("manifest.json"), manifest)?;
        Ok(())
    }
}

/// Draws `count` distinct pairs from `range`, skipping anything in `taken`,
/// and adds them to `taken`.
fn distinct_pairs(
    split: &'static str,
    range: (u32, u32),
    count: usize,
    taken: &mut HashSet<Equation>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Equation>, TaskError> {
    let n = count_numbers(range);
    let in_range = taken
        .iter()
        .filter(|e| {
            let (lo, _) = numbers_with_digits(range.0);
            let (_, hi) = numbers_with_digits(range.1);
            (lo..hi).contains(&e.a) && (lo..hi).contains(&e.b)
        })
        .count() as u64;
    let available = (n * n).saturating_sub(in_range);
    if count as u64 > available {
        return Err(TaskError::RangeExhausted {
            split,
            requested: count,
            available,
        });
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let eq = Equation {
            a: sample_operand(range, rng),
            b: sample_operand(range, rng),
        };
        if taken.insert(eq) {
            out.push(eq);
        }
    }
    Ok(out)
}

/// Generates the four splits. Operand lengths are uniform over the digit
/// range and values uniform within a length; the held-out splits hold
/// distinct pairs, disjoint from each other and from training.
pub fn gen_multiplication_data(spec: &ArithmeticSpec) -> Result<ArithmeticSplits, TaskError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut held_out = HashSet::new();
    let test_id = distinct_pairs(
        "test_id",
        spec.train_digits,
        spec.count_test_id,
        &mut held_out,
        &mut rng,
    )?;
    let test_ood = distinct_pairs(
        "test_ood",
        spec.ood_digits,
        spec.count_test_ood,
        &mut held_out,
        &mut rng,
    )?;
    let val_ood = distinct_pairs(
        "val_ood",
        spec.ood_digits,
        spec.count_val_ood,
        &mut held_out,
        &mut rng,
    )?;

    let n = count_numbers(spec.train_digits);
    let free = n * n - test_id.len() as u64;
    if spec.count_train > 0 && free == 0 {
        return Err(TaskError::RangeExhausted {
            split: "train",
            requested: spec.count_train,
            available: 0,
        });
    }
    let mut train = Vec::with_capacity(spec.count_train);
    while train.len() < spec.count_train {
        let eq = Equation {
            a: sample_operand(spec.train_digits, &mut rng),
            b: sample_operand(spec.train_digits, &mut rng),
        };
        if !held_out.contains(&eq) {
            train.push(eq);
        }
    }
    Ok(ArithmeticSplits {
        train,
        test_id,
        test_ood,
        val_ood,
    })
}
