//! Embedding table storage, text-format vector loading, lookup and sparse
//! row updates.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng as _;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Range used for rows missing from a pretrained file.
pub const DEFAULT_FALLBACK_SCALE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    weights: Array2<f64>,
    trainable: bool,
}

/// Rows of an embedding matrix gathered for one token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSequence {
    pub values: Array2<f64>,
    pub token_indices: Vec<usize>,
}

impl EmbeddedSequence {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Result of [`load_pretrained`].
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub matrix: EmbeddingMatrix,
    /// Fraction of vocabulary rows (UNK included) found in the file.
    pub coverage: f64,
}

fn uniform_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..=scale))
}

impl EmbeddingMatrix {
    pub fn from_weights(weights: Array2<f64>, trainable: bool) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::invalid("weights", "need V >= 1 and d >= 1"));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding weights"));
        }
        Ok(Self { weights, trainable })
    }

    /// Entries i.i.d. uniform in `[-scale, scale]`.
    pub fn init_random(vocab_size: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::invalid("shape", "need V >= 1 and d >= 1"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid("scale", format!("{scale} must be positive")));
        }
        Ok(Self {
            weights: uniform_matrix(vocab_size, dim, scale, seed),
            trainable: true,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn row(&self, index: usize) -> ArrayView1<'_, f64> {
        self.weights.row(index)
    }

    pub fn lookup(&self, tokens: &[usize]) -> Result<EmbeddedSequence> {
        if tokens.is_empty() {
            return Err(Error::invalid("tokens", "empty sequence"));
        }
        let mut values = Array2::zeros((tokens.len(), self.dim()));
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.vocab_size() {
                return Err(Error::IndexOutOfRange {
                    index: t,
                    size: self.vocab_size(),
                });
            }
            values.row_mut(i).assign(&self.weights.row(t));
        }
        Ok(EmbeddedSequence {
            values,
            token_indices: tokens.to_vec(),
        })
    }

    /// `weights[tokens[i]] -= lr * grad[i]` for every position; repeated
    /// indices accumulate.
    pub fn accumulate_update(&mut self, tokens: &[usize], grad: &Array2<f64>, lr: f64) -> Result<()> {
        if !self.trainable {
            return Err(Error::Frozen);
        }
        if grad.dim() != (tokens.len(), self.dim()) {
            return Err(Error::Shape {
                expected: (tokens.len(), self.dim()),
                found: grad.dim(),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: self.vocab_size(),
            });
        }
        for (i, &t) in tokens.iter().enumerate() {
            self.weights
                .row_mut(t)
                .scaled_add(-lr, &grad.row(i));
        }
        Ok(())
    }
}

/// Free-function form of [`EmbeddingMatrix::lookup`].
pub fn lookup(emb: &EmbeddingMatrix, tokens: &[usize]) -> Result<EmbeddedSequence> {
    emb.lookup(tokens)
}

/// Loads vectors in the word-per-line text format
/// `<token> <v1> ... <vd>`, with an optional `<count> <dim>` header.
///
/// Vocabulary rows absent from the file are drawn uniform in
/// `[-fallback_scale, fallback_scale]`.
pub fn load_pretrained(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    fallback_scale: f64,
    seed: u64,
) -> Result<Pretrained> {
    if dim == 0 {
        return Err(Error::invalid("dim", "must be >= 1"));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut weights = uniform_matrix(vocab.len(), dim, fallback_scale, seed);
    let mut found = vec![false; vocab.len()];

    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        if i == 0 && rest.len() == 1 && token.parse::<u64>().is_ok() && rest[0].parse::<u64>().is_ok() {
            continue;
        }
        if rest.len() != dim {
            return Err(Error::DimensionMismatch {
                token: token.to_owned(),
                expected: dim,
                found: rest.len(),
            });
        }
        let Some(row) = vocab.get(token) else { continue };
        for (j, s) in rest.iter().enumerate() {
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: format!("bad number {s:?} for token {token:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite("pretrained vector"));
            }
            weights[[row, j]] = v;
        }
        found[row] = true;
    }

    let matched = found.iter().filter(|&&f| f).count();
    Ok(Pretrained {
        matrix: EmbeddingMatrix {
            weights,
            trainable: true,
        },
        coverage: matched as f64 / vocab.len() as f64,
    })
}
