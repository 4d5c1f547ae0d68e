//! Late-interaction relevance and the symmetric contrastive objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{best_match, infonce_forward};
use crate::tensor::Tensor;

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Query,
    Document,
}

/// `k × late_width` token representation of one query or document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMatrix {
    pub side: Side,
    pub id: String,
    tokens: Tensor,
}

impl TokenMatrix {
    /// # Panics
    /// If `tokens` is not a matrix.
    pub fn new(side: Side, id: impl Into<String>, tokens: Tensor) -> Self {
        assert_eq!(tokens.shape().len(), 2, "token matrix must be 2-D");
        Self {
            side,
            id: id.into(),
            tokens,
        }
    }

    pub fn from_rows(side: Side, id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        Ok(Self::new(side, id, Tensor::from_rows(rows)?))
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// `sum_i max_j Q_i · D_j` over raw dot products.
pub fn maxsim_score(q: &TokenMatrix, d: &TokenMatrix) -> Result<f64> {
    if q.width() != d.width() {
        return Err(Error::Shape {
            op: "maxsim_score",
            left: q.tokens.shape().to_vec(),
            right: d.tokens.shape().to_vec(),
        });
    }
    let kd = d.num_tokens();
    Ok((0..q.num_tokens())
        .map(|i| best_match(q.tokens.row(i), &d.tokens, kd).1)
        .sum())
}

/// `B×B` matrix with entry `(a, b) = maxsim_score(queries[a], docs[b])`.
pub fn score_matrix(queries: &[TokenMatrix], docs: &[TokenMatrix]) -> Result<Tensor> {
    if queries.is_empty() || docs.is_empty() {
        return Err(Error::Empty("score batch"));
    }
    if queries.len() != docs.len() {
        return Err(Error::Shape {
            op: "score_matrix",
            left: vec![queries.len()],
            right: vec![docs.len()],
        });
    }
    let b = queries.len();
    let mut data = Vec::with_capacity(b * b);
    for q in queries {
        for d in docs {
            data.push(maxsim_score(q, d)?);
        }
    }
    Tensor::new(vec![b, b], data)
}

/// Mean of the row-wise and column-wise cross-entropies of `scores / tau`
/// against the diagonal.
pub fn symmetric_infonce(scores: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (b, b2) = scores.dims2("symmetric_infonce")?;
    if b != b2 {
        return Err(Error::Shape {
            op: "symmetric_infonce",
            left: scores.shape().to_vec(),
            right: vec![b, b],
        });
    }
    if !scores.is_finite() {
        return Err(Error::NonFinite("score matrix".into()));
    }
    Ok(infonce_forward(scores.data(), b, tau).0)
}
