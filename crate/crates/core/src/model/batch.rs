use serde::{Deserialize, Serialize};

use crate::error::{EvoError, Result};

/// Which input stream a token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Visual prefix.
    V,
    /// Text suffix.
    T,
}

impl Modality {
    pub fn from_tag(tag: char) -> Result<Self> {
        match tag {
            'V' | 'v' => Ok(Modality::V),
            'T' | 't' => Ok(Modality::T),
            other => Err(EvoError::contract(format!("unknown modality tag {other:?}"))),
        }
    }

    pub fn tag(self) -> char {
        match self {
            Modality::V => 'V',
            Modality::T => 'T',
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::V => 0,
            Modality::T => 1,
        }
    }
}

/// `batch × seq` tokens with modality tags and next-token targets
/// (`-1` marks excluded positions). All matrices are row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<usize>,
    pub modality: Vec<Modality>,
    pub targets: Vec<i64>,
}

impl TokenBatch {
    pub fn new(
        batch: usize,
        seq: usize,
        tokens: Vec<usize>,
        modality: Vec<Modality>,
        targets: Vec<i64>,
    ) -> Result<Self> {
        let n = batch * seq;
        if tokens.len() != n || modality.len() != n || targets.len() != n {
            return Err(EvoError::dim(
                "token_batch",
                &[batch, seq],
                &[tokens.len(), modality.len(), targets.len()],
            ));
        }
        Ok(TokenBatch {
            batch,
            seq,
            tokens,
            modality,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= vocab) {
            return Err(EvoError::contract(format!("token id {t} outside vocabulary of {vocab}")));
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t >= vocab as i64 || t < -1) {
            return Err(EvoError::contract(format!("target id {t} outside vocabulary of {vocab}")));
        }
        Ok(())
    }
}
