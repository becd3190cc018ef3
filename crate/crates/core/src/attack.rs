//! Black-box character- and word-level noise.
//!
//! A sentence of `n` tokens receives `select_attack_count(n, p)` attack
//! events. Each event picks a not-yet-attacked token position uniformly, draws
//! a [`NoiseOp`] from the configured weights and applies it at that position.
//! Operations that cannot apply (a one-cluster token for a deletion, an
//! out-of-vocabulary token for an embedding lookup, ...) fall back to a legal
//! operation, so every event perturbs the sentence and no sentence is ever
//! emptied.
//!
//! Characters are extended grapheme clusters, never code points.

use std::collections::BTreeSet;
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_segmentation::UnicodeSegmentation;

use crate::embedding::EmbeddingStore;
use crate::rng;

/// Fraction of tokens attacked per sentence unless configured otherwise.
pub const DEFAULT_PROPORTION: f64 = 0.1;
pub const DEFAULT_TOP_K: usize = 10;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("attack proportion must be in (0, 1], got {0}")]
    InvalidProportion(f64),
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("operation weights must be finite and non-negative ({op}: {weight})")]
    NegativeWeight { op: NoiseOp, weight: f64 },
    #[error("operation weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("operation {op} has weight {weight} but is not part of the {level} level")]
    WeightOutsideLevel {
        op: NoiseOp,
        level: AttackLevel,
        weight: f64,
    },
    #[error("unknown operation {0:?}")]
    UnknownOp(String),
    #[error("character alphabet is empty")]
    EmptyAlphabet,
    #[error("{0} level attacks need word embeddings")]
    MissingEmbeddings(AttackLevel),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OpError {
    #[error("no in-vocabulary anchor token for word insertion")]
    AnchorOutOfVocabulary,
    #[error("no in-vocabulary target token for word replacement")]
    TargetOutOfVocabulary,
    #[error("operation needs at least {0} units")]
    TooShort(usize),
    #[error("alphabet offers no replacement")]
    NoAlternative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackLevel {
    Char,
    Word,
    Multi,
}

impl AttackLevel {
    pub fn ops(self) -> &'static [NoiseOp] {
        match self {
            AttackLevel::Char => &NoiseOp::ALL[..4],
            AttackLevel::Word => &NoiseOp::ALL[4..],
            AttackLevel::Multi => &NoiseOp::ALL,
        }
    }

    pub fn includes(self, op: NoiseOp) -> bool {
        self.ops().contains(&op)
    }

    pub fn needs_embeddings(self) -> bool {
        self != AttackLevel::Char
    }
}

impl fmt::Display for AttackLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackLevel::Char => "char",
            AttackLevel::Word => "word",
            AttackLevel::Multi => "multi",
        })
    }
}

impl std::str::FromStr for AttackLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "char" => Ok(AttackLevel::Char),
            "word" => Ok(AttackLevel::Word),
            "multi" => Ok(AttackLevel::Multi),
            _ => Err(format!(
                "unknown attack level {s:?} (expected char, word or multi)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NoiseOp {
    #[serde(rename = "char_ins")]
    CharInsert,
    #[serde(rename = "char_del")]
    CharDelete,
    #[serde(rename = "char_sub")]
    CharSubstitute,
    #[serde(rename = "char_swap")]
    CharSwapAdjacent,
    #[serde(rename = "word_swap")]
    WordSwap,
    #[serde(rename = "word_del")]
    WordDelete,
    #[serde(rename = "word_ins")]
    WordInsert,
    #[serde(rename = "word_rep")]
    WordReplace,
}

impl NoiseOp {
    pub const ALL: [NoiseOp; 8] = [
        NoiseOp::CharInsert,
        NoiseOp::CharDelete,
        NoiseOp::CharSubstitute,
        NoiseOp::CharSwapAdjacent,
        NoiseOp::WordSwap,
        NoiseOp::WordDelete,
        NoiseOp::WordInsert,
        NoiseOp::WordReplace,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_char(self) -> bool {
        self.index() < 4
    }

    /// Short tag used in histograms, logs and vector dump labels.
    pub fn tag(self) -> &'static str {
        match self {
            NoiseOp::CharInsert => "char_ins",
            NoiseOp::CharDelete => "char_del",
            NoiseOp::CharSubstitute => "char_sub",
            NoiseOp::CharSwapAdjacent => "char_swap",
            NoiseOp::WordSwap => "word_swap",
            NoiseOp::WordDelete => "word_del",
            NoiseOp::WordInsert => "word_ins",
            NoiseOp::WordReplace => "word_rep",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.tag() == tag)
    }
}

impl fmt::Display for NoiseOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Sampling probability of each [`NoiseOp`], indexed by [`NoiseOp::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "std::collections::BTreeMap<String, f64>")]
#[serde(into = "std::collections::BTreeMap<String, f64>")]
pub struct OpWeights([f64; 8]);

impl OpWeights {
    /// Equal mass on every operation of `level`: 0.25 for char or word, 0.125 for multi.
    pub fn uniform(level: AttackLevel) -> Self {
        let ops = level.ops();
        let mut w = [0.0; 8];
        for op in ops {
            w[op.index()] = 1.0 / ops.len() as f64;
        }
        OpWeights(w)
    }

    pub fn from_pairs(pairs: &[(NoiseOp, f64)]) -> Self {
        let mut w = [0.0; 8];
        for &(op, v) in pairs {
            w[op.index()] = v;
        }
        OpWeights(w)
    }

    pub fn get(&self, op: NoiseOp) -> f64 {
        self.0[op.index()]
    }

    pub fn as_array(&self) -> &[f64; 8] {
        &self.0
    }

    pub fn validate(&self, level: AttackLevel) -> Result<(), ConfigError> {
        for op in NoiseOp::ALL {
            let weight = self.get(op);
            if !weight.is_finite() || weight < 0.0 {
                return Err(ConfigError::NegativeWeight { op, weight });
            }
            if weight > 0.0 && !level.includes(op) {
                return Err(ConfigError::WeightOutsideLevel { op, level, weight });
            }
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(ConfigError::WeightSum(sum));
        }
        Ok(())
    }
}

impl TryFrom<std::collections::BTreeMap<String, f64>> for OpWeights {
    type Error = ConfigError;

    fn try_from(map: std::collections::BTreeMap<String, f64>) -> Result<Self, Self::Error> {
        let mut w = [0.0; 8];
        for (tag, v) in map {
            let op = NoiseOp::from_tag(&tag).ok_or(ConfigError::UnknownOp(tag))?;
            w[op.index()] = v;
        }
        Ok(OpWeights(w))
    }
}

impl From<OpWeights> for std::collections::BTreeMap<String, f64> {
    fn from(w: OpWeights) -> Self {
        NoiseOp::ALL
            .into_iter()
            .filter(|op| w.get(*op) > 0.0)
            .map(|op| (op.tag().to_string(), w.get(op)))
            .collect()
    }
}

/// Where inserted and substituted characters come from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphabetPolicy {
    /// Every grapheme cluster observed on the corpus side being attacked.
    #[default]
    CorpusLocal,
    /// The clusters of a user-supplied string.
    Explicit(String),
}

/// Sorted, de-duplicated pool of grapheme clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    clusters: Vec<String>,
}

impl Alphabet {
    pub fn from_text(text: &str) -> Self {
        Self::from_lines(std::iter::once(text))
    }

    pub fn from_lines<'a, I: IntoIterator<Item = &'a str>>(lines: I) -> Self {
        let mut set = BTreeSet::new();
        for line in lines {
            // per token: a space followed by a combining mark is one cluster
            for g in line.split(' ').flat_map(|t| t.graphemes(true)) {
                if !g.chars().any(char::is_whitespace) {
                    set.insert(g.to_string());
                }
            }
        }
        Alphabet {
            clusters: set.into_iter().collect(),
        }
    }

    /// Resolves `policy`, scanning `lines` only for [`AlphabetPolicy::CorpusLocal`].
    pub fn resolve<'a, I: IntoIterator<Item = &'a str>>(policy: &AlphabetPolicy, lines: I) -> Self {
        match policy {
            AlphabetPolicy::CorpusLocal => Self::from_lines(lines),
            AlphabetPolicy::Explicit(s) => Self::from_text(s),
        }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn clusters(&self) -> &[String] {
        &self.clusters
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&str> {
        if self.clusters.is_empty() {
            return None;
        }
        Some(&self.clusters[rng.random_range(0..self.clusters.len())])
    }

    /// Uniform draw from the pool minus `exclude`.
    pub fn sample_excluding<R: Rng + ?Sized>(&self, exclude: &str, rng: &mut R) -> Option<&str> {
        match self.clusters.binary_search_by(|c| c.as_str().cmp(exclude)) {
            Ok(pos) => {
                if self.clusters.len() < 2 {
                    return None;
                }
                let mut i = rng.random_range(0..self.clusters.len() - 1);
                if i >= pos {
                    i += 1;
                }
                Some(&self.clusters[i])
            }
            Err(_) => self.sample(rng),
        }
    }

    fn has_alternative(&self, cluster: &str) -> bool {
        self.clusters.len() > 1 || self.clusters.first().is_some_and(|c| c != cluster)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub level: AttackLevel,
    pub proportion: f64,
    pub op_weights: OpWeights,
    pub top_k: usize,
    pub alphabet: AlphabetPolicy,
    pub global_seed: u64,
}

impl AttackConfig {
    /// Defaults for `level`: p = 0.1, uniform weights, k = 10, corpus-local alphabet.
    pub fn new(level: AttackLevel, global_seed: u64) -> Self {
        AttackConfig {
            level,
            proportion: DEFAULT_PROPORTION,
            op_weights: OpWeights::uniform(level),
            top_k: DEFAULT_TOP_K,
            alphabet: AlphabetPolicy::CorpusLocal,
            global_seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = self.proportion;
        if !(p > 0.0 && p <= 1.0) {
            return Err(ConfigError::InvalidProportion(p));
        }
        if self.top_k == 0 {
            return Err(ConfigError::InvalidTopK);
        }
        self.op_weights.validate(self.level)
    }

    /// Whether any word operation can be drawn.
    pub fn uses_word_ops(&self) -> bool {
        NoiseOp::ALL[4..]
            .iter()
            .any(|&op| self.op_weights.get(op) > 0.0)
    }
}

/// Events per sentence: `round_half_up(p * n)` clamped to `[1, n]`.
pub fn select_attack_count(n_tokens: usize, p: f64) -> usize {
    if n_tokens == 0 {
        return 0;
    }
    // the epsilon keeps products like 0.3 * 5 = 1.4999999999999998 on the upper side
    let raw = (p * n_tokens as f64 + 0.5 + 1e-9).floor();
    (raw.max(0.0) as usize).clamp(1, n_tokens)
}

/// One whitespace-tokenised line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceTokens {
    pub tokens: Vec<String>,
    pub line_index: usize,
}

impl SentenceTokens {
    pub fn parse(line: &str, line_index: usize) -> Self {
        SentenceTokens {
            tokens: tokenize(line),
            line_index,
        }
    }

    pub fn detokenize(&self) -> String {
        self.tokens.join(" ")
    }
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn clusters(token: &str) -> Vec<&str> {
    token.graphemes(true).collect()
}

pub fn char_insert<R: Rng + ?Sized>(
    token: &str,
    alphabet: &Alphabet,
    rng: &mut R,
) -> Result<String, OpError> {
    let mut cl = clusters(token);
    let pos = rng.random_range(0..=cl.len());
    let c = alphabet.sample(rng).ok_or(OpError::NoAlternative)?;
    cl.insert(pos, c);
    Ok(cl.concat())
}

pub fn char_delete<R: Rng + ?Sized>(token: &str, rng: &mut R) -> Result<String, OpError> {
    let mut cl = clusters(token);
    if cl.len() < 2 {
        return Err(OpError::TooShort(2));
    }
    cl.remove(rng.random_range(0..cl.len()));
    Ok(cl.concat())
}

/// Replaces one cluster with a different cluster from the alphabet.
pub fn char_substitute<R: Rng + ?Sized>(
    token: &str,
    alphabet: &Alphabet,
    rng: &mut R,
) -> Result<String, OpError> {
    let mut cl = clusters(token);
    let eligible: Vec<usize> = (0..cl.len())
        .filter(|&i| alphabet.has_alternative(cl[i]))
        .collect();
    if eligible.is_empty() {
        return Err(OpError::NoAlternative);
    }
    let pos = eligible[rng.random_range(0..eligible.len())];
    let replacement = alphabet
        .sample_excluding(cl[pos], rng)
        .ok_or(OpError::NoAlternative)?;
    cl[pos] = replacement;
    Ok(cl.concat())
}

/// Transposes one adjacent pair of distinct clusters, chosen uniformly.
///
/// Pairs of identical clusters ("ll") are not eligible since swapping them
/// would leave the token unchanged.
pub fn char_swap_adjacent<R: Rng + ?Sized>(token: &str, rng: &mut R) -> Result<String, OpError> {
    let mut cl = clusters(token);
    if cl.len() < 2 {
        return Err(OpError::TooShort(2));
    }
    let pairs: Vec<usize> = (0..cl.len() - 1).filter(|&i| cl[i] != cl[i + 1]).collect();
    if pairs.is_empty() {
        return Err(OpError::NoAlternative);
    }
    let i = pairs[rng.random_range(0..pairs.len())];
    cl.swap(i, i + 1);
    Ok(cl.concat())
}

/// Swaps one uniformly chosen adjacent token pair.
pub fn word_swap<R: Rng + ?Sized>(tokens: &[String], rng: &mut R) -> Result<Vec<String>, OpError> {
    if tokens.len() < 2 {
        return Err(OpError::TooShort(2));
    }
    let mut out = tokens.to_vec();
    let i = rng.random_range(0..tokens.len() - 1);
    out.swap(i, i + 1);
    Ok(out)
}

/// Removes one uniformly chosen token; never empties the sentence.
pub fn word_delete<R: Rng + ?Sized>(
    tokens: &[String],
    rng: &mut R,
) -> Result<Vec<String>, OpError> {
    if tokens.len() < 2 {
        return Err(OpError::TooShort(2));
    }
    let mut out = tokens.to_vec();
    out.remove(rng.random_range(0..tokens.len()));
    Ok(out)
}

fn in_vocab_positions(tokens: &[String], store: &EmbeddingStore) -> Vec<usize> {
    (0..tokens.len())
        .filter(|&i| store.contains(&tokens[i]))
        .collect()
}

/// Inserts an embedding neighbour of a random in-vocabulary anchor next to it.
pub fn word_insert<R: Rng + ?Sized>(
    tokens: &[String],
    store: &EmbeddingStore,
    k: usize,
    rng: &mut R,
) -> Result<Vec<String>, OpError> {
    let cands = in_vocab_positions(tokens, store);
    if cands.is_empty() || store.len() < 2 {
        return Err(OpError::AnchorOutOfVocabulary);
    }
    let anchor = cands[rng.random_range(0..cands.len())];
    let mut out = tokens.to_vec();
    let (at, word) = insert_neighbour(&tokens[anchor], anchor, store, k, rng)?;
    out.insert(at, word);
    Ok(out)
}

/// Replaces a random in-vocabulary token with one of its embedding neighbours.
pub fn word_replace<R: Rng + ?Sized>(
    tokens: &[String],
    store: &EmbeddingStore,
    k: usize,
    rng: &mut R,
) -> Result<Vec<String>, OpError> {
    let cands = in_vocab_positions(tokens, store);
    if cands.is_empty() || store.len() < 2 {
        return Err(OpError::TargetOutOfVocabulary);
    }
    let target = cands[rng.random_range(0..cands.len())];
    let mut out = tokens.to_vec();
    out[target] = store
        .sample_neighbor(&tokens[target], k, rng)
        .map_err(|_| OpError::TargetOutOfVocabulary)?
        .to_string();
    Ok(out)
}

fn insert_neighbour<R: Rng + ?Sized>(
    anchor_token: &str,
    anchor: usize,
    store: &EmbeddingStore,
    k: usize,
    rng: &mut R,
) -> Result<(usize, String), OpError> {
    let word = store
        .sample_neighbor(anchor_token, k, rng)
        .map_err(|_| OpError::AnchorOutOfVocabulary)?
        .to_string();
    let at = if rng.random_bool(0.5) {
        anchor
    } else {
        anchor + 1
    };
    Ok((at, word))
}

/// One applied perturbation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttackEvent {
    /// Operation drawn from the configured weights.
    pub drawn: NoiseOp,
    /// Operation actually applied after fallbacks.
    pub applied: NoiseOp,
    /// Token the operation was anchored on, as it read before the event.
    pub target: String,
    /// Token produced by the event: the edited token for character operations,
    /// the inserted or replacing word for insertion/replacement, empty otherwise.
    pub produced: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackOutcome {
    pub tokens: Vec<String>,
    pub events: Vec<AttackEvent>,
}

impl AttackOutcome {
    pub fn line(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Counts per [`NoiseOp`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpHistogram(pub [u64; 8]);

impl OpHistogram {
    pub fn add(&mut self, op: NoiseOp) {
        self.0[op.index()] += 1;
    }

    pub fn merge(&mut self, other: &OpHistogram) {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            *a += b;
        }
    }

    pub fn get(&self, op: NoiseOp) -> u64 {
        self.0[op.index()]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }
}

impl fmt::Display for OpHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = NoiseOp::ALL
            .iter()
            .map(|op| format!("{}:{}", op.tag(), self.get(*op)))
            .collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone)]
struct Slot {
    text: String,
    /// Position in the input sentence; `None` for inserted words.
    origin: Option<usize>,
    touched: bool,
}

/// Validated attack configuration bound to its alphabet and embeddings.
///
/// Immutable once built; share it freely across threads.
#[derive(Debug, Clone)]
pub struct Attacker<'a> {
    config: &'a AttackConfig,
    alphabet: &'a Alphabet,
    store: Option<&'a EmbeddingStore>,
    op_dist: WeightedIndex<f64>,
}

impl<'a> Attacker<'a> {
    pub fn new(
        config: &'a AttackConfig,
        alphabet: &'a Alphabet,
        store: Option<&'a EmbeddingStore>,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        if alphabet.is_empty() {
            return Err(ConfigError::EmptyAlphabet);
        }
        if config.uses_word_ops() && store.is_none() {
            return Err(ConfigError::MissingEmbeddings(config.level));
        }
        let op_dist = WeightedIndex::new(config.op_weights.as_array())
            .map_err(|_| ConfigError::WeightSum(config.op_weights.as_array().iter().sum()))?;
        Ok(Attacker {
            config,
            alphabet,
            store,
            op_dist,
        })
    }

    pub fn config(&self) -> &AttackConfig {
        self.config
    }

    /// Attacks one sentence with the stream of `(global_seed, direction, line)`.
    pub fn attack_sentence(&self, sentence: &SentenceTokens, direction_id: u64) -> AttackOutcome {
        let mut r = rng::line_rng(
            self.config.global_seed,
            direction_id,
            sentence.line_index as u64,
        );
        self.attack_tokens(&sentence.tokens, &mut r)
    }

    /// Attacks a raw line; empty lines come back unchanged.
    pub fn attack_line(&self, line: &str, line_index: usize, direction_id: u64) -> AttackOutcome {
        self.attack_sentence(&SentenceTokens::parse(line, line_index), direction_id)
    }

    /// Runs the attack procedure with an explicit generator.
    pub fn attack_tokens<R: Rng + ?Sized>(&self, tokens: &[String], rng: &mut R) -> AttackOutcome {
        let mut slots: Vec<Slot> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| Slot {
                text: t.clone(),
                origin: Some(i),
                touched: false,
            })
            .collect();
        let count = select_attack_count(tokens.len(), self.config.proportion);
        let mut events = Vec::with_capacity(count);
        for _ in 0..count {
            let open: Vec<usize> = untouched(&slots).collect();
            if open.is_empty() {
                break;
            }
            let idx = open[rng.random_range(0..open.len())];
            let drawn = NoiseOp::ALL[self.op_dist.sample(rng)];
            events.push(self.apply(&mut slots, idx, drawn, rng));
        }
        AttackOutcome {
            tokens: slots.into_iter().map(|s| s.text).collect(),
            events,
        }
    }

    fn apply<R: Rng + ?Sized>(
        &self,
        slots: &mut Vec<Slot>,
        idx: usize,
        drawn: NoiseOp,
        rng: &mut R,
    ) -> AttackEvent {
        match drawn {
            op if op.is_char() => self.apply_char(slots, idx, drawn, op, rng),
            NoiseOp::WordSwap if slots.len() >= 2 => self.apply_swap(slots, idx, drawn, rng),
            NoiseOp::WordDelete if slots.len() >= 2 => {
                let removed = slots.remove(idx);
                AttackEvent {
                    drawn,
                    applied: NoiseOp::WordDelete,
                    target: removed.text,
                    produced: String::new(),
                }
            }
            NoiseOp::WordInsert | NoiseOp::WordReplace => {
                match self.embedding_target(slots, idx, rng) {
                    Some(t) => self.apply_embedding_op(slots, t, drawn, rng),
                    None if slots.len() >= 2 => self.apply_swap(slots, idx, drawn, rng),
                    None => self.apply_char(slots, idx, drawn, NoiseOp::CharSubstitute, rng),
                }
            }
            // swap/delete on a one-token sentence
            _ => self.apply_char(slots, idx, drawn, NoiseOp::CharSubstitute, rng),
        }
    }

    /// The drawn position if its token is in the vocabulary, otherwise a
    /// uniformly re-drawn untouched in-vocabulary position.
    fn embedding_target<R: Rng + ?Sized>(
        &self,
        slots: &[Slot],
        idx: usize,
        rng: &mut R,
    ) -> Option<usize> {
        let store = self.store?;
        if store.len() < 2 {
            return None;
        }
        if store.contains(&slots[idx].text) {
            return Some(idx);
        }
        let cands: Vec<usize> = untouched(slots)
            .filter(|&i| store.contains(&slots[i].text))
            .collect();
        if cands.is_empty() {
            None
        } else {
            Some(cands[rng.random_range(0..cands.len())])
        }
    }

    fn apply_embedding_op<R: Rng + ?Sized>(
        &self,
        slots: &mut Vec<Slot>,
        idx: usize,
        drawn: NoiseOp,
        rng: &mut R,
    ) -> AttackEvent {
        let store = self.store.expect("embedding target implies a store");
        let target = slots[idx].text.clone();
        slots[idx].touched = true;
        let neighbour = store
            .sample_neighbor(&target, self.config.top_k, rng)
            .expect("target checked in vocabulary")
            .to_string();
        if drawn == NoiseOp::WordInsert {
            let at = if rng.random_bool(0.5) { idx } else { idx + 1 };
            slots.insert(
                at,
                Slot {
                    text: neighbour.clone(),
                    origin: None,
                    touched: true,
                },
            );
        } else {
            slots[idx].text = neighbour.clone();
        }
        AttackEvent {
            drawn,
            applied: drawn,
            target,
            produced: neighbour,
        }
    }

    fn apply_swap<R: Rng + ?Sized>(
        &self,
        slots: &mut [Slot],
        idx: usize,
        drawn: NoiseOp,
        rng: &mut R,
    ) -> AttackEvent {
        let mut neighbours = Vec::with_capacity(2);
        if idx > 0 {
            neighbours.push(idx - 1);
        }
        if idx + 1 < slots.len() {
            neighbours.push(idx + 1);
        }
        let other = neighbours[rng.random_range(0..neighbours.len())];
        slots[idx].touched = true;
        let target = slots[idx].text.clone();
        slots.swap(idx, other);
        AttackEvent {
            drawn,
            applied: NoiseOp::WordSwap,
            target,
            produced: String::new(),
        }
    }

    /// Applies `first` to the token at `idx`; if it is illegal there, re-draws
    /// among the remaining character operations of the level by weight, with
    /// insertion as the last resort (legal for any non-empty alphabet).
    fn apply_char<R: Rng + ?Sized>(
        &self,
        slots: &mut [Slot],
        idx: usize,
        drawn: NoiseOp,
        first: NoiseOp,
        rng: &mut R,
    ) -> AttackEvent {
        let token = slots[idx].text.clone();
        let mut tried = Vec::with_capacity(4);
        let mut op = first;
        let produced = loop {
            if let Ok(s) = self.char_op(op, &token, rng) {
                break s;
            }
            tried.push(op);
            let legal: Vec<NoiseOp> = NoiseOp::ALL[..4]
                .iter()
                .copied()
                .filter(|o| !tried.contains(o) && self.config.op_weights.get(*o) > 0.0)
                .collect();
            op = if legal.is_empty() {
                NoiseOp::CharInsert
            } else {
                let w: Vec<f64> = legal
                    .iter()
                    .map(|o| self.config.op_weights.get(*o))
                    .collect();
                let dist = WeightedIndex::new(&w).expect("positive weights");
                legal[dist.sample(rng)]
            };
            if tried.contains(&op) {
                // only reachable when insertion itself failed, i.e. an empty alphabet
                break token.clone();
            }
        };
        slots[idx].text = produced.clone();
        slots[idx].touched = true;
        AttackEvent {
            drawn,
            applied: op,
            target: token,
            produced,
        }
    }

    fn char_op<R: Rng + ?Sized>(
        &self,
        op: NoiseOp,
        token: &str,
        rng: &mut R,
    ) -> Result<String, OpError> {
        match op {
            NoiseOp::CharInsert => char_insert(token, self.alphabet, rng),
            NoiseOp::CharDelete => char_delete(token, rng),
            NoiseOp::CharSubstitute => char_substitute(token, self.alphabet, rng),
            NoiseOp::CharSwapAdjacent => char_swap_adjacent(token, rng),
            _ => unreachable!("word operation passed to char_op"),
        }
    }
}

fn untouched(slots: &[Slot]) -> impl Iterator<Item = usize> + '_ {
    slots
        .iter()
        .enumerate()
        .filter(|(_, s)| s.origin.is_some() && !s.touched)
        .map(|(i, _)| i)
}
