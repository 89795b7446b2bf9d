//! Synthetic two-modality sequences: a visual prefix and a text suffix drawn
//! from disjoint sub-vocabularies, each following its own affine successor
//! rule `next = (mul·t + add) mod |vocab|`.

use serde::{Deserialize, Serialize};

use crate::error::{EvoError, Result};
use crate::model::batch::{Modality, TokenBatch};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineRule {
    pub mul: usize,
    pub add: usize,
}

impl AffineRule {
    pub fn next(&self, t: usize, modulus: usize) -> usize {
        (self.mul * t + self.add) % modulus
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    /// Size of the visual sub-vocabulary.
    pub vocab_a: usize,
    /// Size of the text sub-vocabulary.
    pub vocab_b: usize,
    /// First global id of each sub-vocabulary.
    pub offset_a: usize,
    pub offset_b: usize,
    pub rule_a: AffineRule,
    pub rule_b: AffineRule,
    pub prefix_len: usize,
    pub suffix_len: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_a: 32,
            vocab_b: 32,
            offset_a: 0,
            offset_b: 32,
            rule_a: AffineRule { mul: 5, add: 3 },
            rule_b: AffineRule { mul: 3, add: 7 },
            prefix_len: 16,
            suffix_len: 16,
            seed: 42,
        }
    }
}

/// Local-id sequence `start, rule(start), rule(rule(start)), ...`.
pub fn rule_sequence(rule: AffineRule, modulus: usize, start: usize, len: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut t = start % modulus;
    for _ in 0..len {
        out.push(t);
        t = rule.next(t, modulus);
    }
    out
}

impl SyntheticTaskSpec {
    pub fn seq_len(&self) -> usize {
        self.prefix_len + self.suffix_len
    }

    pub fn validate(&self, vocab_size: usize, max_seq_len: usize) -> Result<()> {
        if self.vocab_a == 0 || self.vocab_b == 0 {
            return Err(EvoError::config("sub-vocabularies must be non-empty"));
        }
        if self.prefix_len == 0 || self.suffix_len == 0 {
            return Err(EvoError::config("prefix and suffix must be non-empty"));
        }
        let a = self.offset_a..self.offset_a + self.vocab_a;
        let b = self.offset_b..self.offset_b + self.vocab_b;
        if a.start < b.end && b.start < a.end {
            return Err(EvoError::config(format!("sub-vocabularies {a:?} and {b:?} overlap")));
        }
        if a.end > vocab_size || b.end > vocab_size {
            return Err(EvoError::config(format!(
                "sub-vocabularies {a:?}, {b:?} exceed model vocabulary {vocab_size}"
            )));
        }
        if self.seq_len() > max_seq_len {
            return Err(EvoError::config(format!(
                "prefix + suffix = {} exceeds max_seq_len {max_seq_len}",
                self.seq_len()
            )));
        }
        Ok(())
    }

    /// Deterministic batch number `index` of `stream`.
    pub fn generate_batch(&self, stream: u64, index: u64, batch_size: usize) -> Result<TokenBatch> {
        let mut rng = Rng::substream(self.seed, stream, index);
        self.generate_with(&mut rng, batch_size)
    }

    pub fn generate_with(&self, rng: &mut Rng, batch_size: usize) -> Result<TokenBatch> {
        let (p, m) = (self.prefix_len, self.suffix_len);
        let s = p + m;
        let mut tokens = Vec::with_capacity(batch_size * s);
        let mut modality = Vec::with_capacity(batch_size * s);
        let mut targets = Vec::with_capacity(batch_size * s);
        for _ in 0..batch_size {
            let start_a = rng.below(self.vocab_a);
            let start_b = rng.below(self.vocab_b);
            let seg_a = rule_sequence(self.rule_a, self.vocab_a, start_a, p);
            let seg_b = rule_sequence(self.rule_b, self.vocab_b, start_b, m);
            let row: Vec<usize> = seg_a
                .iter()
                .map(|t| t + self.offset_a)
                .chain(seg_b.iter().map(|t| t + self.offset_b))
                .collect();
            for i in 0..s {
                modality.push(if i < p { Modality::V } else { Modality::T });
                let excluded = i == p - 1 || i == s - 1;
                targets.push(if excluded { -1 } else { row[i + 1] as i64 });
            }
            tokens.extend(row);
        }
        TokenBatch::new(batch_size, s, tokens, modality, targets)
    }
}
