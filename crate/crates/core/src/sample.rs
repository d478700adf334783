//! Fixed-width token sequence batches shared by the stream, buffer and model.

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

/// A row-major matrix of token ids, every row exactly `seq_len` long.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleBatch {
    seq_len: usize,
    tokens: Vec<TokenId>,
}

impl SampleBatch {
    pub fn new(seq_len: usize, tokens: Vec<TokenId>) -> Self {
        assert!(seq_len > 0, "seq_len must be positive");
        assert_eq!(
            tokens.len() % seq_len,
            0,
            "token count {} is not a multiple of seq_len {}",
            tokens.len(),
            seq_len
        );
        Self { seq_len, tokens }
    }

    pub fn empty(seq_len: usize) -> Self {
        Self::new(seq_len, Vec::new())
    }

    pub fn from_rows<R: AsRef<[TokenId]>>(seq_len: usize, rows: &[R]) -> Self {
        let mut tokens = Vec::with_capacity(rows.len() * seq_len);
        for row in rows {
            let row = row.as_ref();
            assert_eq!(row.len(), seq_len, "row width mismatch");
            tokens.extend_from_slice(row);
        }
        Self { seq_len, tokens }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_rows(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn row(&self, index: usize) -> &[TokenId] {
        &self.tokens[index * self.seq_len..(index + 1) * self.seq_len]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[TokenId]> + '_ {
        self.tokens.chunks_exact(self.seq_len)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<TokenId> {
        self.tokens
    }

    pub fn push_row(&mut self, row: &[TokenId]) {
        assert_eq!(row.len(), self.seq_len, "row width mismatch");
        self.tokens.extend_from_slice(row);
    }

    /// Appends all rows of `other`, which must share the row width.
    pub fn extend(&mut self, other: &SampleBatch) {
        assert_eq!(other.seq_len, self.seq_len, "row width mismatch");
        self.tokens.extend_from_slice(&other.tokens);
    }

    pub fn select(&self, indices: &[usize]) -> SampleBatch {
        let mut out = Vec::with_capacity(indices.len() * self.seq_len);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        SampleBatch::new(self.seq_len, out)
    }

    /// Rows `start..end` as a new batch.
    pub fn slice_rows(&self, start: usize, end: usize) -> SampleBatch {
        SampleBatch::new(
            self.seq_len,
            self.tokens[start * self.seq_len..end * self.seq_len].to_vec(),
        )
    }

    pub fn max_token(&self) -> Option<TokenId> {
        self.tokens.iter().copied().max()
    }
}
