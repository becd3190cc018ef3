//! Multilingual parallel corpora and attack placement.
//!
//! Corpora are pre-tokenised UTF-8 text, one sentence per line, stored as
//! `<split>.<src>-<tgt>.<side>` files (`train.fr-en.src`, `test.fr-en.tgt`).
//! A TOML manifest lists the directions and splits of a dataset.
//!
//! In the training phase only the source side of one direction is attacked;
//! in the testing phase the source side of every direction is. Target sides
//! are never touched.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::{is_nfc_quick, IsNormalized, UnicodeNormalization};

use crate::attack::{Alphabet, AttackConfig, AttackOutcome, Attacker, ConfigError, OpHistogram};
use crate::embedding::{EmbeddingError, EmbeddingSet};
use crate::io::{join_lines, write_atomic};
use crate::rng::direction_id;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 on line {line}")]
    InvalidUtf8 { path: PathBuf, line: usize },
    #[error("line count mismatch: {src} source lines, {tgt} target lines")]
    LineCountMismatch { src: usize, tgt: usize },
    #[error("{0}: corpus has no lines")]
    EmptyCorpus(PathBuf),
    #[error(
        "invalid direction {0:?}: expected <src>-<tgt> with distinct lowercase 2-3 letter codes"
    )]
    InvalidDirection(String),
    #[error("unknown split {0:?}")]
    InvalidSplit(String),
    #[error("direction {0} is not part of the dataset")]
    UnknownDirection(Direction),
    #[error("{split} split missing for direction {direction}")]
    MissingSplit { split: Split, direction: Direction },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An ordered language pair, written `src-tgt`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Direction {
    src: String,
    tgt: String,
}

fn valid_code(code: &str) -> bool {
    (2..=3).contains(&code.len()) && code.bytes().all(|b| b.is_ascii_lowercase())
}

impl Direction {
    pub fn new(src: &str, tgt: &str) -> Result<Self, CorpusError> {
        if !valid_code(src) || !valid_code(tgt) || src == tgt {
            return Err(CorpusError::InvalidDirection(format!("{src}-{tgt}")));
        }
        Ok(Direction {
            src: src.to_string(),
            tgt: tgt.to_string(),
        })
    }

    pub fn src(&self) -> &str {
        &self.src
    }

    pub fn tgt(&self) -> &str {
        &self.tgt
    }

    /// Random-stream id used when attacking this direction.
    pub fn stream_id(&self) -> u64 {
        direction_id(&self.to_string())
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl FromStr for Direction {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (src, tgt) = s
            .split_once('-')
            .ok_or_else(|| CorpusError::InvalidDirection(s.to_string()))?;
        Direction::new(src, tgt)
    }
}

impl TryFrom<String> for Direction {
    type Error = CorpusError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Direction> for String {
    fn from(d: Direction) -> Self {
        d.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(CorpusError::InvalidSplit(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Src,
    Tgt,
}

impl Side {
    pub fn ext(self) -> &'static str {
        match self {
            Side::Src => "src",
            Side::Tgt => "tgt",
        }
    }
}

/// `<split>.<src>-<tgt>.<side>`
pub fn file_name(split: Split, direction: &Direction, side: Side) -> String {
    format!("{split}.{direction}.{}", side.ext())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub direction: Direction,
    pub split: Split,
    pub src_lines: Vec<String>,
    pub tgt_lines: Vec<String>,
}

impl ParallelCorpus {
    pub fn new(
        direction: Direction,
        split: Split,
        src_lines: Vec<String>,
        tgt_lines: Vec<String>,
    ) -> Result<Self, CorpusError> {
        if src_lines.len() != tgt_lines.len() {
            return Err(CorpusError::LineCountMismatch {
                src: src_lines.len(),
                tgt: tgt_lines.len(),
            });
        }
        Ok(ParallelCorpus {
            direction,
            split,
            src_lines,
            tgt_lines,
        })
    }

    pub fn len(&self) -> usize {
        self.src_lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_lines.is_empty()
    }
}

/// Reads a UTF-8 text file into NFC-normalised lines; CRLF endings become LF.
pub fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut body: &[u8] = &bytes;
    if body.last() == Some(&b'\n') {
        body = &body[..body.len() - 1];
    }
    if body.is_empty() && bytes.len() <= 1 {
        return Ok(Vec::new());
    }
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, raw)| {
            let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
            let s = std::str::from_utf8(raw).map_err(|_| CorpusError::InvalidUtf8 {
                path: path.to_path_buf(),
                line: i + 1,
            })?;
            Ok(match is_nfc_quick(s.chars()) {
                IsNormalized::Yes => s.to_string(),
                _ => s.nfc().collect(),
            })
        })
        .collect()
}

pub fn read_corpus(
    src_path: &Path,
    tgt_path: &Path,
    direction: Direction,
    split: Split,
) -> Result<ParallelCorpus, CorpusError> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.is_empty() && tgt.is_empty() {
        return Err(CorpusError::EmptyCorpus(src_path.to_path_buf()));
    }
    ParallelCorpus::new(direction, split, src, tgt)
}

/// Writes both sides into `out_dir` under the standard file names.
pub fn write_corpus(
    corpus: &ParallelCorpus,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), CorpusError> {
    let src = out_dir.join(file_name(corpus.split, &corpus.direction, Side::Src));
    let tgt = out_dir.join(file_name(corpus.split, &corpus.direction, Side::Tgt));
    write_atomic(&src, join_lines(&corpus.src_lines).as_bytes()).map_err(io_err(&src))?;
    write_atomic(&tgt, join_lines(&corpus.tgt_lines).as_bytes()).map_err(io_err(&tgt))?;
    Ok((src, tgt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    /// Data directory, relative to the manifest file unless absolute.
    #[serde(default)]
    pub root: Option<PathBuf>,
    pub directions: Vec<Direction>,
    pub splits: Vec<Split>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| CorpusError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let root = match &m.root {
            Some(r) => base.join(r),
            None => base.to_path_buf(),
        };
        for (i, d) in m.directions.iter().enumerate() {
            if m.directions[..i].contains(d) {
                return Err(CorpusError::Manifest {
                    path: path.to_path_buf(),
                    message: format!("direction {d} listed twice"),
                });
            }
        }
        Ok((m, root))
    }
}

/// Corpora of every (split, direction) of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultilingualDataset {
    pub name: String,
    directions: Vec<Direction>,
    corpora: BTreeMap<(Split, Direction), ParallelCorpus>,
}

impl MultilingualDataset {
    pub fn new(name: impl Into<String>) -> Self {
        MultilingualDataset {
            name: name.into(),
            directions: Vec::new(),
            corpora: BTreeMap::new(),
        }
    }

    /// Loads every split and direction listed in the manifest.
    pub fn load(manifest_path: &Path) -> Result<Self, CorpusError> {
        let (m, root) = Manifest::load(manifest_path)?;
        let mut ds = MultilingualDataset::new(m.name.clone());
        for d in &m.directions {
            for &split in &m.splits {
                let corpus = read_corpus(
                    &root.join(file_name(split, d, Side::Src)),
                    &root.join(file_name(split, d, Side::Tgt)),
                    d.clone(),
                    split,
                )?;
                ds.insert(corpus);
            }
        }
        Ok(ds)
    }

    pub fn insert(&mut self, corpus: ParallelCorpus) {
        if !self.directions.contains(&corpus.direction) {
            self.directions.push(corpus.direction.clone());
        }
        self.corpora
            .insert((corpus.split, corpus.direction.clone()), corpus);
    }

    /// Directions in insertion (manifest) order.
    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn splits(&self) -> Vec<Split> {
        let mut s: Vec<Split> = self.corpora.keys().map(|(s, _)| *s).collect();
        s.dedup();
        s
    }

    pub fn get(&self, split: Split, direction: &Direction) -> Option<&ParallelCorpus> {
        self.corpora.get(&(split, direction.clone()))
    }

    pub fn corpora(&self) -> impl Iterator<Item = &ParallelCorpus> {
        self.corpora.values()
    }

    pub fn contains_direction(&self, d: &Direction) -> bool {
        self.directions.contains(d)
    }

    /// Writes the data files of `splits` (all splits when `None`).
    pub fn write_files(
        &self,
        out_dir: &Path,
        splits: Option<&[Split]>,
    ) -> Result<Vec<PathBuf>, CorpusError> {
        let mut written = Vec::new();
        for c in self.corpora.values() {
            if splits.is_some_and(|s| !s.contains(&c.split)) {
                continue;
            }
            let (a, b) = write_corpus(c, out_dir)?;
            written.push(a);
            written.push(b);
        }
        Ok(written)
    }

    /// Writes all data files plus a manifest describing them.
    pub fn write_with_manifest(&self, out_dir: &Path) -> Result<PathBuf, CorpusError> {
        self.write_files(out_dir, None)?;
        let m = Manifest {
            name: self.name.clone(),
            root: None,
            directions: self.directions.clone(),
            splits: self.splits(),
        };
        let path = out_dir.join(MANIFEST_FILE);
        let text = toml::to_string(&m).expect("manifest serialises");
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
        Ok(path)
    }
}

/// Totals over a batch of attacked lines.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AttackStats {
    pub sentences: u64,
    pub events: u64,
    /// Operations as drawn from the configured weights.
    pub drawn: OpHistogram,
    /// Operations actually applied after fallbacks.
    pub applied: OpHistogram,
}

impl AttackStats {
    pub fn merge(&mut self, o: &AttackStats) {
        self.sentences += o.sentences;
        self.events += o.events;
        self.drawn.merge(&o.drawn);
        self.applied.merge(&o.applied);
    }

    fn record(&mut self, outcome: &AttackOutcome) {
        self.sentences += 1;
        self.events += outcome.events.len() as u64;
        for e in &outcome.events {
            self.drawn.add(e.drawn);
            self.applied.add(e.applied);
        }
    }
}

/// Attacks every line, returning the full per-line outcomes.
///
/// The character alphabet is resolved against `lines` themselves when the
/// policy is corpus-local.
pub fn attack_outcomes(
    lines: &[String],
    direction: &Direction,
    config: &AttackConfig,
    embeddings: &EmbeddingSet,
) -> Result<Vec<AttackOutcome>, CorpusError> {
    let alphabet = Alphabet::resolve(&config.alphabet, lines.iter().map(String::as_str));
    let store = if config.uses_word_ops() {
        embeddings.for_lang(direction.src())
    } else {
        None
    };
    let attacker = Attacker::new(config, &alphabet, store)?;
    let stream = direction.stream_id();
    Ok(lines
        .par_iter()
        .enumerate()
        .map(|(i, line)| attacker.attack_line(line, i, stream))
        .collect())
}

pub fn attack_lines(
    lines: &[String],
    direction: &Direction,
    config: &AttackConfig,
    embeddings: &EmbeddingSet,
) -> Result<(Vec<String>, AttackStats), CorpusError> {
    let outcomes = attack_outcomes(lines, direction, config, embeddings)?;
    let mut stats = AttackStats::default();
    let mut out = Vec::with_capacity(outcomes.len());
    for (o, original) in outcomes.iter().zip(lines) {
        stats.record(o);
        // blank lines have no tokens and pass through verbatim
        out.push(if o.tokens.is_empty() {
            original.clone()
        } else {
            o.line()
        });
    }
    Ok((out, stats))
}

/// Training phase: attacks the source side of `attacked` (train split, plus
/// the valid split when `include_valid`); everything else is left as is.
pub fn attack_training_direction(
    dataset: &MultilingualDataset,
    attacked: &Direction,
    config: &AttackConfig,
    embeddings: &EmbeddingSet,
    include_valid: bool,
) -> Result<(MultilingualDataset, AttackStats), CorpusError> {
    config.validate()?;
    if !dataset.contains_direction(attacked) {
        return Err(CorpusError::UnknownDirection(attacked.clone()));
    }
    let train = dataset
        .get(Split::Train, attacked)
        .ok_or_else(|| CorpusError::MissingSplit {
            split: Split::Train,
            direction: attacked.clone(),
        })?;
    let mut out = dataset.clone();
    let mut stats = AttackStats::default();
    let mut targets = vec![train];
    if include_valid {
        targets.extend(dataset.get(Split::Valid, attacked));
    }
    for corpus in targets {
        let (src, s) = attack_lines(&corpus.src_lines, attacked, config, embeddings)?;
        stats.merge(&s);
        out.insert(ParallelCorpus {
            src_lines: src,
            ..corpus.clone()
        });
    }
    Ok((out, stats))
}

/// Testing phase: attacks the test source side of every direction.
pub fn attack_test_all(
    dataset: &MultilingualDataset,
    config: &AttackConfig,
    embeddings: &EmbeddingSet,
) -> Result<(MultilingualDataset, AttackStats), CorpusError> {
    config.validate()?;
    let mut out = dataset.clone();
    let mut stats = AttackStats::default();
    for d in dataset.directions() {
        let corpus = dataset
            .get(Split::Test, d)
            .ok_or_else(|| CorpusError::MissingSplit {
                split: Split::Test,
                direction: d.clone(),
            })?;
        let (src, s) = attack_lines(&corpus.src_lines, d, config, embeddings)?;
        stats.merge(&s);
        out.insert(ParallelCorpus {
            src_lines: src,
            ..corpus.clone()
        });
    }
    Ok((out, stats))
}
