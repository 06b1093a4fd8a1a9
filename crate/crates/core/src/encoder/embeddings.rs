use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::UtteranceRecord;
use crate::error::{Error, Result};

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Token to row index map. Row 0 is the unknown token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Vocabulary::from_tokens(tokens.into_iter().filter(|t| t != UNKNOWN_TOKEN))
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in first-seen order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: vec![UNKNOWN_TOKEN.to_string()],
            index: HashMap::from([(UNKNOWN_TOKEN.to_string(), 0)]),
        };
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a UtteranceRecord>) -> Self {
        Vocabulary::from_tokens(records.into_iter().flat_map(|r| r.tokens.iter().cloned()))
    }

    /// Row index of `token`, or 0 when it is unknown.
    pub fn index(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Frozen `V×E` embedding matrix. It is never part of a trainable
/// parameter set, so no optimizer step can reach it.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EmbeddingCoverage {
    pub vocabulary: usize,
    pub found: usize,
    pub missing: usize,
    pub duplicates: Vec<String>,
}

impl EmbeddingTable {
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::contract(
                "encoder_model",
                "embedding matrix must be rank 2",
            ));
        }
        Ok(EmbeddingTable {
            matrix: matrix.with_requires_grad(false),
        })
    }

    /// Random frozen vectors with unit variance per component; the unknown
    /// row is zero.
    pub fn random(vocab: &Vocabulary, dim: usize, rng: &mut impl Rng) -> Self {
        let limit = 3f64.sqrt();
        let mut values = vec![0.0; vocab.len() * dim];
        for v in values.iter_mut().skip(dim) {
            *v = rng.gen_range(-limit..limit);
        }
        EmbeddingTable {
            matrix: Tensor::matrix(vocab.len(), dim, values).expect("shape"),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn frozen(&self) -> bool {
        true
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.matrix.row(index)
    }

    /// Stacks the rows for `tokens` into an `m×E` input matrix.
    pub fn lookup(&self, vocab: &Vocabulary, tokens: &[String]) -> Tensor {
        let mut values = Vec::with_capacity(tokens.len() * self.dim());
        for t in tokens {
            values.extend_from_slice(self.row(vocab.index(t)));
        }
        Tensor::matrix(tokens.len(), self.dim(), values).expect("shape")
    }
}

/// Reads whitespace-separated `token v1 … vE` lines. Vocabulary tokens
/// absent from the file, and the unknown token, get zero rows; a token
/// listed twice keeps its last vector.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
) -> Result<(EmbeddingTable, EmbeddingCoverage)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, &path.display().to_string(), vocab)
}

pub fn parse_embeddings(
    text: &str,
    origin: &str,
    vocab: &Vocabulary,
) -> Result<(EmbeddingTable, EmbeddingCoverage)> {
    let fail = |line: usize, message: String| Error::Format {
        module: "encoder_model",
        path: origin.to_string(),
        line,
        message,
    };
    let mut dim: Option<usize> = None;
    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut duplicates = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| fail(lineno, format!("bad number: {e}")))?;
        match dim {
            None if values.is_empty() => return Err(fail(lineno, "no vector components".into())),
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(fail(
                    lineno,
                    format!("vector has {} components, expected {d}", values.len()),
                ))
            }
            Some(_) => {}
        }
        if let Some(first) = seen.insert(token.to_string(), lineno) {
            log::warn!("{origin}:{lineno}: duplicate token '{token}' (first on line {first}); keeping the last vector");
            duplicates.push(token.to_string());
        }
        if vocab.contains(token) && token != super::embeddings::UNKNOWN_TOKEN {
            rows.insert(vocab.index(token), values);
        }
    }
    let dim = dim.ok_or_else(|| fail(0, "no embeddings in file".into()))?;
    let mut values = vec![0.0; vocab.len() * dim];
    for (&r, v) in &rows {
        values[r * dim..(r + 1) * dim].copy_from_slice(v);
    }
    let coverage = EmbeddingCoverage {
        vocabulary: vocab.len() - 1,
        found: rows.len(),
        missing: vocab.len() - 1 - rows.len(),
        duplicates,
    };
    Ok((
        EmbeddingTable {
            matrix: Tensor::matrix(vocab.len(), dim, values)?,
        },
        coverage,
    ))
}

/// Precomputed per-token vectors keyed by utterance id, standing in for a
/// contextual embedding model.
///
/// File format: blank-line separated blocks of `# id: <id>` followed by one
/// line of `E` whitespace-separated floats per token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextualVectors {
    dim: usize,
    vectors: HashMap<String, Tensor>,
}

impl ContextualVectors {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ContextualVectors::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let fail = |line: usize, message: String| Error::Format {
            module: "encoder_model",
            path: origin.to_string(),
            line,
            message,
        };
        let mut out = ContextualVectors::default();
        let mut current: Option<(String, Vec<f64>, usize)> = None;
        let flush =
            |cur: Option<(String, Vec<f64>, usize)>, out: &mut ContextualVectors| -> Result<()> {
                if let Some((id, values, rows)) = cur {
                    if rows == 0 {
                        return Err(fail(0, format!("utterance '{id}' has no vectors")));
                    }
                    let t = Tensor::matrix(rows, out.dim, values)?;
                    out.vectors.insert(id, t);
                }
                Ok(())
            };
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() {
                flush(current.take(), &mut out)?;
                continue;
            }
            if let Some(id) = line.strip_prefix("# id:") {
                flush(current.take(), &mut out)?;
                current = Some((id.trim().to_string(), Vec::new(), 0));
                continue;
            }
            let Some((_, values, rows)) = current.as_mut() else {
                return Err(fail(lineno, "vector line before any '# id:' line".into()));
            };
            let row = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| fail(lineno, format!("bad number: {e}")))?;
            if out.dim == 0 {
                out.dim = row.len();
            }
            if row.len() != out.dim {
                return Err(fail(
                    lineno,
                    format!("vector has {} components, expected {}", row.len(), out.dim),
                ));
            }
            values.extend(row);
            *rows += 1;
        }
        flush(current.take(), &mut out)?;
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.vectors.get(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, vectors: Tensor) -> Result<()> {
        let (_, d) = vectors.dims2();
        if self.dim == 0 {
            self.dim = d;
        }
        if d != self.dim {
            return Err(Error::contract(
                "encoder_model",
                "contextual vector width mismatch",
            ));
        }
        self.vectors.insert(id.into(), vectors);
        Ok(())
    }
}
