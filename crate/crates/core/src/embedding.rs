//! Pre-trained word vectors and exact cosine neighbour queries.
//!
//! Two text layouts are accepted: GloVe (`token v1 .. vd` per line, no header)
//! and fastText `.vec` (same records preceded by a `count dim` header line).
//! The layout is detected from the first line. Rows are L2-normalised at load
//! so cosine similarity is a plain dot product.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;
use thiserror::Error;

pub const DEFAULT_ROW_LIMIT: usize = 200_000;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding file {0} contains no vectors")]
    EmptyFile(PathBuf),
    #[error("line {line}: vector has {found} components, expected {expected}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("token {0:?} is not in the embedding vocabulary")]
    OutOfVocabulary(String),
    #[error("k must satisfy 1 <= k < vocabulary size ({vocab}), got {k}")]
    InvalidK { k: usize, vocab: usize },
    #[error("invalid embedding row {row}: {reason}")]
    InvalidRow { row: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFormat {
    Glove,
    FastText,
    InMemory,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Maximum number of accepted rows.
    pub limit: usize,
    /// Retry failed lookups with the lowercased token.
    pub lowercase_fallback: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            limit: DEFAULT_ROW_LIMIT,
            lowercase_fallback: false,
        }
    }
}

/// Counters for the rows skipped while loading.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct LoadReport {
    pub duplicates: usize,
    pub zero_vectors: usize,
    pub malformed: usize,
}

impl LoadReport {
    pub fn warnings(&self) -> usize {
        self.duplicates + self.zero_vectors + self.malformed
    }
}

/// Vocabulary plus a row-major matrix of unit vectors.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    words: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f32>,
    format: EmbeddingFormat,
    source: Option<PathBuf>,
    lowercase_fallback: bool,
    report: LoadReport,
}

/// Builds the store incrementally, applying the duplicate/zero-vector policy.
struct Builder {
    words: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f32>,
    report: LoadReport,
}

impl Builder {
    fn new(dim: usize) -> Self {
        Self {
            words: Vec::new(),
            index: HashMap::new(),
            dim,
            data: Vec::new(),
            report: LoadReport::default(),
        }
    }

    fn push(&mut self, word: &str, values: &[f64]) {
        if self.index.contains_key(word) {
            self.report.duplicates += 1;
            return;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            self.report.zero_vectors += 1;
            return;
        }
        self.index.insert(word.to_string(), self.words.len());
        self.words.push(word.to_string());
        self.data.extend(values.iter().map(|v| (v / norm) as f32));
    }

    fn len(&self) -> usize {
        self.words.len()
    }

    fn finish(
        self,
        format: EmbeddingFormat,
        source: Option<PathBuf>,
        lowercase_fallback: bool,
    ) -> EmbeddingStore {
        EmbeddingStore {
            words: self.words,
            index: self.index,
            dim: self.dim,
            data: self.data,
            format,
            source,
            lowercase_fallback,
            report: self.report,
        }
    }
}

/// Candidate in the bounded top-k heap. The heap's maximum is the *worst*
/// candidate: lowest score, and among equal scores the highest row index.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    row: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.row.cmp(&other.row))
    }
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let mut it = line.split_whitespace();
    let count = it.next()?.parse().ok()?;
    let dim = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some((count, dim))
}

impl EmbeddingStore {
    /// Loads a GloVe or fastText text file.
    pub fn load(path: &Path, opts: &LoadOptions) -> Result<Self, EmbeddingError> {
        let io_err = |source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut format = EmbeddingFormat::Glove;
        let mut builder: Option<Builder> = None;
        let mut values = Vec::new();

        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = match line {
                Ok(l) => l,
                Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                    // not UTF-8
                    if let Some(b) = builder.as_mut() {
                        b.report.malformed += 1;
                    }
                    continue;
                }
                Err(e) => return Err(io_err(e)),
            };
            if i == 0 {
                if let Some((_, dim)) = parse_header(&line) {
                    format = EmbeddingFormat::FastText;
                    builder = Some(Builder::new(dim));
                    continue;
                }
            }
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else {
                continue;
            };
            values.clear();
            let mut bad = false;
            for f in fields {
                match f.parse::<f64>() {
                    Ok(v) if v.is_finite() => values.push(v),
                    _ => bad = true,
                }
            }
            let b = builder.get_or_insert_with(|| Builder::new(values.len()));
            if bad || values.is_empty() {
                b.report.malformed += 1;
                continue;
            }
            if values.len() != b.dim {
                return Err(EmbeddingError::DimensionMismatch {
                    line: line_no,
                    expected: b.dim,
                    found: values.len(),
                });
            }
            b.push(word, &values);
            if b.len() >= opts.limit {
                break;
            }
        }

        let builder = match builder {
            Some(b) if b.len() > 0 => b,
            _ => return Err(EmbeddingError::EmptyFile(path.to_path_buf())),
        };
        let r = &builder.report;
        if r.warnings() > 0 {
            warn!(
                "{}: skipped {} duplicate, {} zero-norm and {} malformed rows",
                path.display(),
                r.duplicates,
                r.zero_vectors,
                r.malformed
            );
        }
        Ok(builder.finish(format, Some(path.to_path_buf()), opts.lowercase_fallback))
    }

    /// Builds a store from in-memory rows under the same policy as [`load`](Self::load).
    pub fn from_rows<S: AsRef<str>>(
        rows: &[(S, Vec<f64>)],
        lowercase_fallback: bool,
    ) -> Result<Self, EmbeddingError> {
        let Some((_, first)) = rows.first() else {
            return Err(EmbeddingError::EmptyFile(PathBuf::from("<memory>")));
        };
        let mut b = Builder::new(first.len());
        for (i, (word, v)) in rows.iter().enumerate() {
            let word = word.as_ref();
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(EmbeddingError::InvalidRow {
                    row: i,
                    reason: format!("token {word:?} is empty or contains whitespace"),
                });
            }
            if v.len() != b.dim {
                return Err(EmbeddingError::DimensionMismatch {
                    line: i + 1,
                    expected: b.dim,
                    found: v.len(),
                });
            }
            b.push(word, v);
        }
        if b.len() == 0 {
            return Err(EmbeddingError::EmptyFile(PathBuf::from("<memory>")));
        }
        Ok(b.finish(EmbeddingFormat::InMemory, None, lowercase_fallback))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn format(&self) -> EmbeddingFormat {
        self.format
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn report(&self) -> &LoadReport {
        &self.report
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, row: usize) -> &str {
        &self.words[row]
    }

    /// Unit vector of `row`.
    pub fn vector(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// Row of `token`, trying the lowercased form when the fallback is on.
    pub fn lookup(&self, token: &str) -> Option<usize> {
        if let Some(&r) = self.index.get(token) {
            return Some(r);
        }
        if self.lowercase_fallback {
            let lower = token.to_lowercase();
            if lower != token {
                return self.index.get(&lower).copied();
            }
        }
        None
    }

    pub fn contains(&self, token: &str) -> bool {
        self.lookup(token).is_some()
    }

    pub fn cosine_rows(&self, a: usize, b: usize) -> f64 {
        dot(self.vector(a), self.vector(b))
    }

    /// The `k` most similar rows to `row`, excluding `row` itself, ordered by
    /// cosine descending and then by row index ascending.
    pub fn topk_rows(&self, row: usize, k: usize) -> Result<Vec<(usize, f64)>, EmbeddingError> {
        if k == 0 || k >= self.len() {
            return Err(EmbeddingError::InvalidK {
                k,
                vocab: self.len(),
            });
        }
        let query = self.vector(row);
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        for other in 0..self.len() {
            if other == row {
                continue;
            }
            let cand = Candidate {
                score: dot(query, self.vector(other)),
                row: other,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        // ascending under `Candidate`'s order means best first
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| (c.row, c.score))
            .collect())
    }

    pub fn topk_similar(
        &self,
        token: &str,
        k: usize,
    ) -> Result<Vec<(String, f64)>, EmbeddingError> {
        let row = self
            .lookup(token)
            .ok_or_else(|| EmbeddingError::OutOfVocabulary(token.to_string()))?;
        Ok(self
            .topk_rows(row, k)?
            .into_iter()
            .map(|(r, s)| (self.words[r].clone(), s))
            .collect())
    }

    /// Draws one of the `k` nearest neighbours of `token` uniformly.
    ///
    /// `k` is capped at `len() - 1` so small vocabularies still answer.
    pub fn sample_neighbor<R: Rng + ?Sized>(
        &self,
        token: &str,
        k: usize,
        rng: &mut R,
    ) -> Result<&str, EmbeddingError> {
        let row = self
            .lookup(token)
            .ok_or_else(|| EmbeddingError::OutOfVocabulary(token.to_string()))?;
        let k = k.min(self.len().saturating_sub(1));
        let neighbours = self.topk_rows(row, k)?;
        let pick = neighbours[rng.random_range(0..neighbours.len())].0;
        Ok(&self.words[pick])
    }
}

/// Embedding stores keyed by language code, with an optional store used for
/// languages that have none of their own.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingSet {
    by_lang: std::collections::BTreeMap<String, EmbeddingStore>,
    fallback: Option<EmbeddingStore>,
}

impl EmbeddingSet {
    /// One store for every language.
    pub fn single(store: EmbeddingStore) -> Self {
        EmbeddingSet {
            by_lang: Default::default(),
            fallback: Some(store),
        }
    }

    pub fn insert(&mut self, lang: impl Into<String>, store: EmbeddingStore) {
        self.by_lang.insert(lang.into(), store);
    }

    pub fn for_lang(&self, lang: &str) -> Option<&EmbeddingStore> {
        self.by_lang.get(lang).or(self.fallback.as_ref())
    }

    pub fn is_empty(&self) -> bool {
        self.by_lang.is_empty() && self.fallback.is_none()
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}
