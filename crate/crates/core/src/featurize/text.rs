use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token → vector lookup; read-only after loading.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    /// Insert or replace a vector. Returns `true` if the token was already present.
    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f32>) -> Result<bool> {
        let token = token.into();
        if vector.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding for '{token}' has {} values, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "embedding for '{token}' has a non-finite value"
            )));
        }
        Ok(self.vectors.insert(token, vector).is_some())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.vectors.get(token).map(Vec::as_slice)
    }
}

/// Lowercase, split on whitespace, trim surrounding punctuation.
///
/// Apostrophes inside a word survive ("it'll"); leading or trailing ones do not.
pub fn tokenize(transcript: &str) -> Vec<String> {
    transcript
        .split_whitespace()
        .map(|raw| {
            raw.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Embed up to `max_words` tokens into a `max_words × dim` matrix.
///
/// Out-of-vocabulary tokens and padding rows are zero. Returns the matrix
/// and the number of token rows actually filled (OOV rows included).
pub fn encode_text(
    tokens: &[String],
    table: &EmbeddingTable,
    max_words: usize,
) -> (Tensor<f32>, usize) {
    let dim = table.dim();
    let mut out = Tensor::zeros(&[max_words, dim]);
    let used = tokens.len().min(max_words);
    for (i, tok) in tokens.iter().take(used).enumerate() {
        if let Some(v) = table.get(tok) {
            out.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(v);
        }
    }
    (out, used)
}
