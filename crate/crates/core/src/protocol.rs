//! Two-phase robustness-transfer experiments.
//!
//! Training phase: for every training setting (clean, char, word, multi) a
//! copy of the training data is built in which only the source side of the
//! attacked direction carries noise of that level, and the external train
//! hook is run on it. Testing phase: for every test setting the source side
//! of *all* directions is attacked, each trained model translates each test
//! set through the translate hook, and the output is scored with corpus BLEU
//! against the untouched references.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/effective_config.toml   resolved configuration
//! <out>/state.json              resume state (built sets, trained models, scored cells)
//! <out>/train/<setting>/        train.<src>-<tgt>.{src,tgt} (+ valid.* when present)
//! <out>/test/<setting>/         test.<src>-<tgt>.{src,tgt}
//! <out>/models/<setting>/       whatever the train hook writes
//! <out>/hyp/<train>/<test>/<src>-<tgt>.hyp
//! <out>/logs/                   hook stdout/stderr
//! <out>/report.md, grid.csv, deltas.tsv, report.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{
    AlphabetPolicy, AttackConfig, AttackLevel, OpWeights, DEFAULT_PROPORTION, DEFAULT_TOP_K,
};
use crate::corpus::{
    attack_lines, file_name, read_lines, CorpusError, Direction, MultilingualDataset, Side, Split,
};
use crate::embedding::{
    EmbeddingError, EmbeddingSet, EmbeddingStore, LoadOptions, DEFAULT_ROW_LIMIT,
};
use crate::io::{join_lines, sha256_file, write_atomic};
use crate::metrics::{
    corpus_bleu, format_delta, mark_best, percent_improvement, round_half_up, MetricsError,
};

pub const TRAIN_PLACEHOLDERS: [&str; 2] = ["{train_dir}", "{model_dir}"];
pub const TRANSLATE_PLACEHOLDERS: [&str; 4] =
    ["{model_dir}", "{src_file}", "{out_file}", "{direction}"];

const STATE_FILE: &str = "state.json";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{hook} command template lacks the {placeholder} placeholder")]
    MissingPlaceholder {
        hook: &'static str,
        placeholder: &'static str,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("hook failed ({status}): {command}\n{stderr}")]
    HookFailure {
        command: String,
        status: String,
        stderr: String,
    },
    #[error("hook produced no output file {0}")]
    MissingOutput(PathBuf),
    #[error("copy of {0} does not match its source")]
    CopyMismatch(PathBuf),
    #[error("report grid incomplete: {missing} of {total} cells missing")]
    IncompleteGrid { missing: usize, total: usize },
    #[error("run state {path}: {message}")]
    State { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ProtocolError + '_ {
    move |source| ProtocolError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Training (or test) condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "clean")]
    Clean,
    #[serde(rename = "char")]
    CharAttack,
    #[serde(rename = "word")]
    WordAttack,
    #[serde(rename = "multi")]
    MultiAttack,
}

impl Setting {
    pub const ALL: [Setting; 4] = [
        Setting::Clean,
        Setting::CharAttack,
        Setting::WordAttack,
        Setting::MultiAttack,
    ];

    pub fn level(self) -> Option<AttackLevel> {
        match self {
            Setting::Clean => None,
            Setting::CharAttack => Some(AttackLevel::Char),
            Setting::WordAttack => Some(AttackLevel::Word),
            Setting::MultiAttack => Some(AttackLevel::Multi),
        }
    }

    /// Directory / file-name form.
    pub fn slug(self) -> &'static str {
        match self {
            Setting::Clean => "clean",
            Setting::CharAttack => "char",
            Setting::WordAttack => "word",
            Setting::MultiAttack => "multi",
        }
    }

    /// Row label in rendered tables.
    pub fn label(self) -> &'static str {
        match self {
            Setting::Clean => "clean corpus",
            Setting::CharAttack => "character-level attack",
            Setting::WordAttack => "word-level attack",
            Setting::MultiAttack => "multi-level attack",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl std::str::FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Setting::ALL
            .into_iter()
            .find(|x| x.slug() == s)
            .ok_or_else(|| format!("unknown setting {s:?}"))
    }
}

/// Attack parameters shared by every noisy setting; the level comes from the setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackDefaults {
    #[serde(default = "default_proportion")]
    pub proportion: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub alphabet: AlphabetPolicy,
}

fn default_proportion() -> f64 {
    DEFAULT_PROPORTION
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

impl Default for AttackDefaults {
    fn default() -> Self {
        AttackDefaults {
            proportion: DEFAULT_PROPORTION,
            top_k: DEFAULT_TOP_K,
            alphabet: AlphabetPolicy::CorpusLocal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Embedding file per source language code.
    #[serde(default)]
    pub paths: BTreeMap<String, PathBuf>,
    /// Used for languages missing from `paths`.
    #[serde(default)]
    pub default: Option<PathBuf>,
    #[serde(default = "default_limit")]
    pub limit: usize,
    #[serde(default)]
    pub lowercase_fallback: bool,
}

fn default_limit() -> usize {
    DEFAULT_ROW_LIMIT
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            paths: BTreeMap::new(),
            default: None,
            limit: DEFAULT_ROW_LIMIT,
            lowercase_fallback: false,
        }
    }
}

/// Shell command templates of the external MT system.
///
/// `train` receives `{train_dir}` and `{model_dir}`; `translate` receives
/// `{model_dir}`, `{src_file}`, `{out_file}` and `{direction}`. Both may also
/// use `{src_lang}`, `{tgt_lang}` and `{setting}`; `train` also gets
/// `{seed}`. Substituted paths are absolute and shell-quoted. Commands run
/// through `sh -c` from the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HookConfig {
    pub train: String,
    pub translate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    pub attacked_direction: Direction,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub global_seed: u64,
    #[serde(default = "all_settings")]
    pub settings: Vec<Setting>,
    /// Concurrent translate/score cells.
    #[serde(default = "one")]
    pub jobs: usize,
    /// Also attack the attacked direction's validation split during training.
    #[serde(default)]
    pub attack_valid: bool,
    #[serde(default)]
    pub attack: AttackDefaults,
    #[serde(default)]
    pub embeddings: EmbeddingConfig,
    pub hook: HookConfig,
}

fn all_settings() -> Vec<Setting> {
    Setting::ALL.to_vec()
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    /// Parses a TOML config; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, ProtocolError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| ProtocolError::Config {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = base.canonicalize().map_err(io_err(base))?;
        cfg.resolve_paths(&base);
        cfg.validate().map_err(|e| match e {
            ProtocolError::Config { message, .. } => ProtocolError::Config {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.output_dir);
        self.embeddings.paths.values_mut().for_each(fix);
        if let Some(p) = self.embeddings.default.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        for placeholder in TRAIN_PLACEHOLDERS {
            if !self.hook.train.contains(placeholder) {
                return Err(ProtocolError::MissingPlaceholder {
                    hook: "train",
                    placeholder,
                });
            }
        }
        for placeholder in TRANSLATE_PLACEHOLDERS {
            if !self.hook.translate.contains(placeholder) {
                return Err(ProtocolError::MissingPlaceholder {
                    hook: "translate",
                    placeholder,
                });
            }
        }
        let bad = |message: String| ProtocolError::Config {
            path: PathBuf::new(),
            message,
        };
        if !self.settings.contains(&Setting::Clean) {
            return Err(bad(
                "settings must include \"clean\", the baseline of every delta".into(),
            ));
        }
        let unique: BTreeSet<_> = self.settings.iter().collect();
        if unique.len() != self.settings.len() {
            return Err(bad("settings contain duplicates".into()));
        }
        if self.jobs == 0 {
            return Err(bad("jobs must be at least 1".into()));
        }
        for s in &self.settings {
            if let Some(level) = s.level() {
                self.attack_config(level)
                    .validate()
                    .map_err(|e| bad(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn attack_config(&self, level: AttackLevel) -> AttackConfig {
        AttackConfig {
            level,
            proportion: self.attack.proportion,
            op_weights: OpWeights::uniform(level),
            top_k: self.attack.top_k,
            alphabet: self.attack.alphabet.clone(),
            global_seed: self.global_seed,
        }
    }

    /// Settings in canonical order.
    pub fn ordered_settings(&self) -> Vec<Setting> {
        Setting::ALL
            .into_iter()
            .filter(|s| self.settings.contains(s))
            .collect()
    }

    /// Hash of everything that determines the built corpora.
    fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            manifest: &'a Path,
            attacked: &'a Direction,
            seed: u64,
            attack_valid: bool,
            attack: &'a AttackDefaults,
            embeddings: &'a EmbeddingConfig,
        }
        let key = Key {
            manifest: &self.manifest,
            attacked: &self.attacked_direction,
            seed: self.global_seed,
            attack_valid: self.attack_valid,
            attack: &self.attack,
            embeddings: &self.embeddings,
        };
        crate::io::sha256_hex(
            serde_json::to_string(&key)
                .expect("serialisable")
                .as_bytes(),
        )
    }
}

/// Scores and provenance of one (training setting, test setting, direction) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub train: Setting,
    pub test: Setting,
    pub direction: Direction,
    pub bleu: f64,
    pub matches: [u64; 4],
    pub totals: [u64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
    pub src_sha256: String,
    pub hyp_sha256: String,
    pub ref_sha256: String,
}

fn cell_key(train: Setting, test: Setting, d: &Direction) -> String {
    format!("{train}/{test}/{d}")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub fingerprint: String,
    pub built_train: BTreeSet<Setting>,
    pub built_test: BTreeSet<Setting>,
    pub trained: BTreeSet<Setting>,
    pub cells: BTreeMap<String, CellRecord>,
}

impl RunState {
    fn load(path: &Path) -> Result<Option<Self>, ProtocolError> {
        match fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| ProtocolError::State {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(path)(e)),
        }
    }

    fn save(&self, path: &Path) -> Result<(), ProtocolError> {
        let json = serde_json::to_string_pretty(self).expect("serialisable");
        write_atomic(path, json.as_bytes()).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub train: Setting,
    pub test: Setting,
    pub direction: Direction,
    pub bleu: f64,
    /// Change over the clean-trained model on the same test set and direction.
    pub delta_pct: Option<f64>,
    #[serde(default)]
    pub hyp_sha256: String,
    #[serde(default)]
    pub ref_sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub global_seed: u64,
    pub dataset: String,
    pub started: String,
    pub finished: String,
    pub toolkit_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub attacked_direction: Direction,
    pub settings: Vec<Setting>,
    pub directions: Vec<Direction>,
    pub cells: Vec<GridCell>,
    pub metadata: ReportMetadata,
}

impl TransferReport {
    /// Builds the grid from raw BLEU scores, filling in deltas against the
    /// clean-trained row. Cells absent from `scores` are left out.
    pub fn from_scores(
        attacked_direction: Direction,
        settings: Vec<Setting>,
        directions: Vec<Direction>,
        scores: &BTreeMap<(Setting, Setting, Direction), f64>,
        metadata: ReportMetadata,
    ) -> Self {
        let mut cells = Vec::new();
        for &train in &settings {
            for &test in &settings {
                for d in &directions {
                    let Some(&bleu) = scores.get(&(train, test, d.clone())) else {
                        continue;
                    };
                    let delta_pct = scores
                        .get(&(Setting::Clean, test, d.clone()))
                        .and_then(|&base| percent_improvement(bleu, base).ok());
                    cells.push(GridCell {
                        train,
                        test,
                        direction: d.clone(),
                        bleu,
                        delta_pct,
                        hyp_sha256: String::new(),
                        ref_sha256: String::new(),
                    });
                }
            }
        }
        TransferReport {
            attacked_direction,
            settings,
            directions,
            cells,
            metadata,
        }
    }

    pub fn cell(&self, train: Setting, test: Setting, d: &Direction) -> Option<&GridCell> {
        self.cells
            .iter()
            .find(|c| c.train == train && c.test == test && &c.direction == d)
    }

    pub fn expected_cells(&self) -> usize {
        self.settings.len() * self.settings.len() * self.directions.len()
    }

    pub fn missing_cells(&self) -> usize {
        let mut n = 0;
        for &train in &self.settings {
            for &test in &self.settings {
                for d in &self.directions {
                    if self.cell(train, test, d).is_none() {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    pub fn is_complete(&self) -> bool {
        self.missing_cells() == 0
    }

    /// Training settings whose score is the (display-rounded) maximum for
    /// this test setting and direction.
    pub fn best_training(&self, test: Setting, d: &Direction) -> Vec<Setting> {
        let col: Vec<(Setting, f64)> = self
            .settings
            .iter()
            .filter_map(|&t| self.cell(t, test, d).map(|c| (t, round_half_up(c.bleu, 1))))
            .collect();
        let values: Vec<f64> = col.iter().map(|(_, v)| *v).collect();
        mark_best(&values).into_iter().map(|i| col[i].0).collect()
    }

    fn shows_delta(&self, c: &GridCell) -> bool {
        c.train == c.test && c.train != Setting::Clean && c.direction != self.attacked_direction
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Table with bolded column maxima and deltas on the diagonal.
    Markdown,
    /// Every cell, one row each.
    Csv,
    /// Bar-chart data: per direction and noisy setting, gain over the clean model.
    DeltasTsv,
}

pub fn render_report(
    report: &TransferReport,
    format: ReportFormat,
) -> Result<String, ProtocolError> {
    let missing = report.missing_cells();
    if missing > 0 {
        return Err(ProtocolError::IncompleteGrid {
            missing,
            total: report.expected_cells(),
        });
    }
    Ok(match format {
        ReportFormat::Markdown => render_markdown(report),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::DeltasTsv => render_deltas(report),
    })
}

fn render_markdown(r: &TransferReport) -> String {
    let mut s = format!(
        "## Robustness transfer, attacked direction {}\n\n",
        r.attacked_direction
    );
    s.push_str("| Training dataset | Test dataset |");
    for d in &r.directions {
        if *d == r.attacked_direction {
            s.push_str(&format!(" {d} (attacked) |"));
        } else {
            s.push_str(&format!(" {d} |"));
        }
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(r.directions.len()));
    s.push('\n');
    let best: BTreeMap<(Setting, &Direction), Vec<Setting>> = r
        .settings
        .iter()
        .flat_map(|&test| r.directions.iter().map(move |d| (test, d)))
        .map(|(test, d)| ((test, d), r.best_training(test, d)))
        .collect();
    for &train in &r.settings {
        for &test in &r.settings {
            s.push_str(&format!("| {} | {} |", train.label(), test.label()));
            for d in &r.directions {
                let c = r.cell(train, test, d).expect("complete grid");
                let score = format!("{:.1}", round_half_up(c.bleu, 1));
                let mut text = if best[&(test, d)].contains(&train) {
                    format!("**{score}**")
                } else {
                    score
                };
                if r.shows_delta(c) {
                    if let Some(delta) = c.delta_pct {
                        text.push_str(&format!("({})", format_delta(delta)));
                    }
                }
                s.push_str(&format!(" {text} |"));
            }
            s.push('\n');
        }
    }
    s.push_str(
        "\nBold: best training setting for each test set and direction. \
         Percentages: change over the clean-trained model on the same test set.\n",
    );
    s
}

fn render_csv(r: &TransferReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "train",
        "test",
        "direction",
        "attacked",
        "bleu",
        "delta_pct",
        "best",
        "hyp_sha256",
        "ref_sha256",
    ])
    .expect("in-memory write");
    for &train in &r.settings {
        for &test in &r.settings {
            for d in &r.directions {
                let c = r.cell(train, test, d).expect("complete grid");
                let best = r.best_training(test, d).contains(&train);
                w.write_record([
                    train.slug().to_string(),
                    test.slug().to_string(),
                    d.to_string(),
                    (*d == r.attacked_direction).to_string(),
                    format!("{:.4}", c.bleu),
                    c.delta_pct.map(|x| format!("{x:.4}")).unwrap_or_default(),
                    best.to_string(),
                    c.hyp_sha256.clone(),
                    c.ref_sha256.clone(),
                ])
                .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn render_deltas(r: &TransferReport) -> String {
    let mut s =
        String::from("direction\tsetting\tattacked\tbleu\tclean_bleu\tbleu_gain\tdelta_pct\n");
    for d in &r.directions {
        for &setting in r.settings.iter().filter(|s| **s != Setting::Clean) {
            let c = r.cell(setting, setting, d).expect("complete grid");
            let base = r.cell(Setting::Clean, setting, d).expect("complete grid");
            s.push_str(&format!(
                "{d}\t{setting}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
                *d == r.attacked_direction,
                c.bleu,
                base.bleu,
                c.bleu - base.bleu,
                c.delta_pct
                    .map(|x| format!("{x:.4}"))
                    .unwrap_or_else(|| "NA".into())
            ));
        }
    }
    s
}

/// What a `run` did, for logging and resume checks.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub built_train: Vec<Setting>,
    pub built_test: Vec<Setting>,
    pub trained: Vec<Setting>,
    /// Cells translated and scored in this invocation.
    pub scored: Vec<String>,
    /// Cells taken over from a previous invocation.
    pub reused: usize,
    pub report: TransferReport,
}

fn shell_quote(p: &str) -> String {
    format!("'{}'", p.replace('\'', "'\\''"))
}

fn copy_verified(from: &Path, to: &Path) -> Result<(), ProtocolError> {
    let bytes = fs::read(from).map_err(io_err(from))?;
    write_atomic(to, &bytes).map_err(io_err(to))?;
    if sha256_file(to).map_err(io_err(to))? != crate::io::sha256_hex(&bytes) {
        return Err(ProtocolError::CopyMismatch(to.to_path_buf()));
    }
    Ok(())
}

/// A loaded experiment: config, dataset and output layout.
pub struct Protocol {
    config: ExperimentConfig,
    dataset: MultilingualDataset,
    data_root: PathBuf,
    work_dir: PathBuf,
    splits: Vec<Split>,
}

impl Protocol {
    pub fn load(config_path: &Path) -> Result<Self, ProtocolError> {
        let cfg = ExperimentConfig::load(config_path)?;
        let work_dir = config_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .canonicalize()
            .map_err(io_err(config_path))?;
        Self::new(cfg, work_dir)
    }

    /// `work_dir` is where hook commands run.
    pub fn new(config: ExperimentConfig, work_dir: PathBuf) -> Result<Self, ProtocolError> {
        config.validate()?;
        let (manifest, data_root) = crate::corpus::Manifest::load(&config.manifest)?;
        let dataset = MultilingualDataset::load(&config.manifest)?;
        if !dataset.contains_direction(&config.attacked_direction) {
            return Err(CorpusError::UnknownDirection(config.attacked_direction.clone()).into());
        }
        for split in [Split::Train, Split::Test] {
            if !manifest.splits.contains(&split) {
                return Err(ProtocolError::Config {
                    path: config.manifest.clone(),
                    message: format!("dataset has no {split} split"),
                });
            }
        }
        fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir))?;
        let output_dir = config
            .output_dir
            .canonicalize()
            .map_err(io_err(&config.output_dir))?;
        let config = ExperimentConfig {
            output_dir,
            ..config
        };
        Ok(Protocol {
            splits: manifest.splits,
            config,
            dataset,
            data_root,
            work_dir,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn dataset(&self) -> &MultilingualDataset {
        &self.dataset
    }

    pub fn train_dir(&self, s: Setting) -> PathBuf {
        self.config.output_dir.join("train").join(s.slug())
    }

    pub fn test_dir(&self, s: Setting) -> PathBuf {
        self.config.output_dir.join("test").join(s.slug())
    }

    pub fn model_dir(&self, s: Setting) -> PathBuf {
        self.config.output_dir.join("models").join(s.slug())
    }

    pub fn hyp_path(&self, train: Setting, test: Setting, d: &Direction) -> PathBuf {
        self.config
            .output_dir
            .join("hyp")
            .join(train.slug())
            .join(test.slug())
            .join(format!("{d}.hyp"))
    }

    fn state_path(&self) -> PathBuf {
        self.config.output_dir.join(STATE_FILE)
    }

    fn source_file(&self, split: Split, d: &Direction, side: Side) -> PathBuf {
        self.data_root.join(file_name(split, d, side))
    }

    fn train_splits(&self) -> Vec<Split> {
        self.splits
            .iter()
            .copied()
            .filter(|s| *s != Split::Test)
            .collect()
    }

    /// Loads the embedding stores needed by the requested settings.
    pub fn load_embeddings(&self) -> Result<EmbeddingSet, ProtocolError> {
        let mut set = EmbeddingSet::default();
        let needs_words = self
            .config
            .settings
            .iter()
            .any(|s| s.level().is_some_and(AttackLevel::needs_embeddings));
        if !needs_words {
            return Ok(set);
        }
        let opts = LoadOptions {
            limit: self.config.embeddings.limit,
            lowercase_fallback: self.config.embeddings.lowercase_fallback,
        };
        let langs: BTreeSet<&str> = self.dataset.directions().iter().map(|d| d.src()).collect();
        let mut by_path: BTreeMap<PathBuf, EmbeddingStore> = BTreeMap::new();
        for lang in langs {
            let path = self.config.embeddings.paths.get(lang).or(self
                .config
                .embeddings
                .default
                .as_ref());
            let Some(path) = path else {
                warn!("no embeddings configured for {lang}; word attacks on it will fail");
                continue;
            };
            if !by_path.contains_key(path) {
                info!("loading embeddings for {lang} from {}", path.display());
                by_path.insert(path.clone(), EmbeddingStore::load(path, &opts)?);
            }
            set.insert(lang, by_path[path].clone());
        }
        Ok(set)
    }

    /// Writes one training directory per setting. The clean directory is a
    /// verified byte copy of the source data; the others differ from it only
    /// in the attacked direction's source file(s).
    pub fn build_training_sets(
        &self,
        embeddings: &EmbeddingSet,
    ) -> Result<BTreeMap<Setting, PathBuf>, ProtocolError> {
        self.config
            .ordered_settings()
            .into_iter()
            .map(|s| self.build_training_set(s, embeddings).map(|p| (s, p)))
            .collect()
    }

    fn build_training_set(
        &self,
        setting: Setting,
        embeddings: &EmbeddingSet,
    ) -> Result<PathBuf, ProtocolError> {
        let dir = self.train_dir(setting);
        let attacked = &self.config.attacked_direction;
        for d in self.dataset.directions() {
            for split in self.train_splits() {
                let noisy = setting.level().is_some()
                    && d == attacked
                    && (split == Split::Train
                        || (split == Split::Valid && self.config.attack_valid));
                for side in [Side::Src, Side::Tgt] {
                    let out = dir.join(file_name(split, d, side));
                    if noisy && side == Side::Src {
                        let level = setting.level().expect("noisy setting");
                        let corpus = self.dataset.get(split, d).expect("manifest split loaded");
                        let (lines, stats) = attack_lines(
                            &corpus.src_lines,
                            d,
                            &self.config.attack_config(level),
                            embeddings,
                        )?;
                        info!(
                            "train/{setting}: {d} {split} events={} ops={}",
                            stats.events, stats.applied
                        );
                        write_atomic(&out, join_lines(&lines).as_bytes()).map_err(io_err(&out))?;
                    } else {
                        copy_verified(&self.source_file(split, d, side), &out)?;
                    }
                }
            }
        }
        Ok(dir)
    }

    /// Writes one test directory per setting; noisy settings attack the
    /// source side of every direction.
    pub fn build_test_sets(
        &self,
        embeddings: &EmbeddingSet,
    ) -> Result<BTreeMap<Setting, PathBuf>, ProtocolError> {
        self.config
            .ordered_settings()
            .into_iter()
            .map(|s| self.build_test_set(s, embeddings).map(|p| (s, p)))
            .collect()
    }

    fn build_test_set(
        &self,
        setting: Setting,
        embeddings: &EmbeddingSet,
    ) -> Result<PathBuf, ProtocolError> {
        let dir = self.test_dir(setting);
        for d in self.dataset.directions() {
            let src_out = dir.join(file_name(Split::Test, d, Side::Src));
            match setting.level() {
                Some(level) => {
                    let corpus = self.dataset.get(Split::Test, d).ok_or_else(|| {
                        CorpusError::MissingSplit {
                            split: Split::Test,
                            direction: d.clone(),
                        }
                    })?;
                    let (lines, stats) = attack_lines(
                        &corpus.src_lines,
                        d,
                        &self.config.attack_config(level),
                        embeddings,
                    )?;
                    info!(
                        "test/{setting}: {d} events={} ops={}",
                        stats.events, stats.applied
                    );
                    write_atomic(&src_out, join_lines(&lines).as_bytes())
                        .map_err(io_err(&src_out))?;
                }
                None => copy_verified(&self.source_file(Split::Test, d, Side::Src), &src_out)?,
            }
            copy_verified(
                &self.source_file(Split::Test, d, Side::Tgt),
                &dir.join(file_name(Split::Test, d, Side::Tgt)),
            )?;
        }
        Ok(dir)
    }

    fn training_set_present(&self, s: Setting) -> bool {
        self.dataset.directions().iter().all(|d| {
            self.train_splits().iter().all(|&split| {
                [Side::Src, Side::Tgt]
                    .iter()
                    .all(|&side| self.train_dir(s).join(file_name(split, d, side)).is_file())
            })
        })
    }

    fn test_set_present(&self, s: Setting) -> bool {
        self.dataset.directions().iter().all(|d| {
            [Side::Src, Side::Tgt].iter().all(|&side| {
                self.test_dir(s)
                    .join(file_name(Split::Test, d, side))
                    .is_file()
            })
        })
    }

    fn expand(&self, template: &str, vars: &[(&str, String)]) -> String {
        let mut cmd = template.to_string();
        for (k, v) in vars {
            cmd = cmd.replace(k, v);
        }
        cmd
    }

    fn run_hook(&self, command: &str, log_name: &str) -> Result<(), ProtocolError> {
        info!("hook: {command}");
        let output = Command::new("sh")
            .arg("-c")
            .arg(command)
            .current_dir(&self.work_dir)
            .output()
            .map_err(io_err(Path::new("sh")))?;
        let log_dir = self.config.output_dir.join("logs");
        let log = log_dir.join(format!("{log_name}.log"));
        let mut text = format!("$ {command}\n--- stdout\n");
        text.push_str(&String::from_utf8_lossy(&output.stdout));
        text.push_str("--- stderr\n");
        text.push_str(&String::from_utf8_lossy(&output.stderr));
        write_atomic(&log, text.as_bytes()).map_err(io_err(&log))?;
        if !output.status.success() {
            return Err(ProtocolError::HookFailure {
                command: command.to_string(),
                status: output.status.to_string(),
                stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
            });
        }
        Ok(())
    }

    fn train(&self, s: Setting) -> Result<(), ProtocolError> {
        let model_dir = self.model_dir(s);
        fs::create_dir_all(&model_dir).map_err(io_err(&model_dir))?;
        let d = &self.config.attacked_direction;
        let cmd = self.expand(
            &self.config.hook.train,
            &[
                (
                    "{train_dir}",
                    shell_quote(&self.train_dir(s).to_string_lossy()),
                ),
                ("{model_dir}", shell_quote(&model_dir.to_string_lossy())),
                ("{setting}", s.slug().to_string()),
                ("{seed}", self.config.global_seed.to_string()),
                ("{direction}", d.to_string()),
                ("{src_lang}", d.src().to_string()),
                ("{tgt_lang}", d.tgt().to_string()),
            ],
        );
        self.run_hook(&cmd, &format!("train-{s}"))
    }

    fn score_cell(
        &self,
        train: Setting,
        test: Setting,
        d: &Direction,
    ) -> Result<CellRecord, ProtocolError> {
        let src = self
            .test_dir(test)
            .join(file_name(Split::Test, d, Side::Src));
        let reference = self
            .test_dir(test)
            .join(file_name(Split::Test, d, Side::Tgt));
        let out = self.hyp_path(train, test, d);
        let parent = out.parent().expect("hyp path has a parent");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        if out.exists() {
            fs::remove_file(&out).map_err(io_err(&out))?;
        }
        let cmd = self.expand(
            &self.config.hook.translate,
            &[
                (
                    "{model_dir}",
                    shell_quote(&self.model_dir(train).to_string_lossy()),
                ),
                ("{src_file}", shell_quote(&src.to_string_lossy())),
                ("{out_file}", shell_quote(&out.to_string_lossy())),
                ("{direction}", d.to_string()),
                ("{src_lang}", d.src().to_string()),
                ("{tgt_lang}", d.tgt().to_string()),
                ("{setting}", train.slug().to_string()),
            ],
        );
        self.run_hook(&cmd, &format!("translate-{train}-{test}-{d}"))?;
        if !out.is_file() {
            return Err(ProtocolError::MissingOutput(out));
        }
        let hyps = read_lines(&out)?;
        let refs = read_lines(&reference)?;
        let b = corpus_bleu(&hyps, &refs)?;
        Ok(CellRecord {
            train,
            test,
            direction: d.clone(),
            bleu: b.score,
            matches: b.matches,
            totals: b.totals,
            brevity_penalty: b.brevity_penalty,
            hyp_len: b.hyp_len,
            ref_len: b.ref_len,
            src_sha256: sha256_file(&src).map_err(io_err(&src))?,
            hyp_sha256: sha256_file(&out).map_err(io_err(&out))?,
            ref_sha256: sha256_file(&reference).map_err(io_err(&reference))?,
        })
    }

    fn cell_still_valid(&self, rec: &CellRecord) -> bool {
        let hyp = self.hyp_path(rec.train, rec.test, &rec.direction);
        sha256_file(&hyp).is_ok_and(|h| h == rec.hyp_sha256)
    }

    /// Runs (or resumes) the whole experiment and writes the reports.
    pub fn run(&self) -> Result<RunSummary, ProtocolError> {
        let started = chrono::Utc::now().to_rfc3339();
        let out = &self.config.output_dir;
        let effective = out.join("effective_config.toml");
        let text = toml::to_string(&self.config).expect("config serialises");
        write_atomic(&effective, text.as_bytes()).map_err(io_err(&effective))?;

        let state_path = self.state_path();
        let fingerprint = self.config.fingerprint();
        let mut state = match RunState::load(&state_path)? {
            Some(s) if s.fingerprint == fingerprint => s,
            Some(_) => {
                warn!("configuration changed since the last run; starting over");
                RunState::default()
            }
            None => RunState::default(),
        };
        state.fingerprint = fingerprint;

        let settings = self.config.ordered_settings();
        let mut embeddings: Option<EmbeddingSet> = None;
        let mut summary_built_train = Vec::new();
        let mut summary_built_test = Vec::new();
        for &s in &settings {
            if !(state.built_train.contains(&s) && self.training_set_present(s)) {
                if embeddings.is_none() {
                    embeddings = Some(self.load_embeddings()?);
                }
                self.build_training_set(s, embeddings.as_ref().expect("loaded"))?;
                state.built_train.insert(s);
                state.trained.remove(&s);
                summary_built_train.push(s);
                state.save(&state_path)?;
            }
            if !(state.built_test.contains(&s) && self.test_set_present(s)) {
                if embeddings.is_none() {
                    embeddings = Some(self.load_embeddings()?);
                }
                self.build_test_set(s, embeddings.as_ref().expect("loaded"))?;
                state.built_test.insert(s);
                state.cells.retain(|_, c| c.test != s);
                summary_built_test.push(s);
                state.save(&state_path)?;
            }
        }
        drop(embeddings);

        let mut trained = Vec::new();
        for &s in &settings {
            if state.trained.contains(&s) {
                continue;
            }
            self.train(s)?;
            state.trained.insert(s);
            state.cells.retain(|_, c| c.train != s);
            trained.push(s);
            state.save(&state_path)?;
        }

        let directions = self.dataset.directions().to_vec();
        let mut todo = Vec::new();
        let mut reused = 0;
        for &train in &settings {
            for &test in &settings {
                for d in &directions {
                    match state.cells.get(&cell_key(train, test, d)) {
                        Some(rec) if self.cell_still_valid(rec) => reused += 1,
                        _ => todo.push((train, test, d.clone())),
                    }
                }
            }
        }

        let state = Mutex::new(state);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.jobs)
            .build()
            .expect("thread pool");
        let scored: Vec<String> = pool.install(|| {
            todo.par_iter()
                .map(|(train, test, d)| {
                    let rec = self.score_cell(*train, *test, d)?;
                    let key = cell_key(*train, *test, d);
                    info!("{key}: BLEU {:.2}", rec.bleu);
                    let mut st = state.lock().expect("state lock");
                    st.cells.insert(key.clone(), rec);
                    st.save(&state_path)?;
                    Ok(key)
                })
                .collect::<Result<Vec<_>, ProtocolError>>()
        })?;
        let state = state.into_inner().expect("state lock");

        let scores: BTreeMap<(Setting, Setting, Direction), f64> = state
            .cells
            .values()
            .map(|c| ((c.train, c.test, c.direction.clone()), c.bleu))
            .collect();
        let mut report = TransferReport::from_scores(
            self.config.attacked_direction.clone(),
            settings,
            directions,
            &scores,
            ReportMetadata {
                global_seed: self.config.global_seed,
                dataset: self.dataset.name.clone(),
                started,
                finished: chrono::Utc::now().to_rfc3339(),
                toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            },
        );
        for c in &mut report.cells {
            if let Some(rec) = state.cells.get(&cell_key(c.train, c.test, &c.direction)) {
                c.hyp_sha256 = rec.hyp_sha256.clone();
                c.ref_sha256 = rec.ref_sha256.clone();
            }
        }
        self.write_reports(&report)?;
        Ok(RunSummary {
            built_train: summary_built_train,
            built_test: summary_built_test,
            trained,
            scored,
            reused,
            report,
        })
    }

    fn write_reports(&self, report: &TransferReport) -> Result<(), ProtocolError> {
        let out = &self.config.output_dir;
        let json = serde_json::to_string_pretty(report).expect("serialisable");
        let p = out.join("report.json");
        write_atomic(&p, json.as_bytes()).map_err(io_err(&p))?;
        for (name, fmt) in [
            ("report.md", ReportFormat::Markdown),
            ("grid.csv", ReportFormat::Csv),
            ("deltas.tsv", ReportFormat::DeltasTsv),
        ] {
            let p = out.join(name);
            let body = render_report(report, fmt)?;
            write_atomic(&p, body.as_bytes()).map_err(io_err(&p))?;
        }
        Ok(())
    }

    /// Side-by-side dump of selected test lines: clean source, reference, and
    /// for each noisy setting the noisy source with the translation of the
    /// model trained under the same setting.
    pub fn extract_examples(
        &self,
        d: &Direction,
        lines: &[usize],
    ) -> Result<String, ProtocolError> {
        let read = |p: PathBuf| read_lines(&p).map_err(ProtocolError::from);
        let clean_src = read(self.test_dir(Setting::Clean).join(file_name(
            Split::Test,
            d,
            Side::Src,
        )))?;
        let reference = read(self.test_dir(Setting::Clean).join(file_name(
            Split::Test,
            d,
            Side::Tgt,
        )))?;
        let mut noisy = Vec::new();
        for s in self
            .config
            .ordered_settings()
            .into_iter()
            .filter(|s| *s != Setting::Clean)
        {
            let src = read(self.test_dir(s).join(file_name(Split::Test, d, Side::Src)))?;
            let hyp = read(self.hyp_path(s, s, d))?;
            noisy.push((s, src, hyp));
        }
        let mut out = String::new();
        for &i in lines {
            let get = |v: &Vec<String>| v.get(i).cloned().unwrap_or_default();
            out.push_str(&format!("== {d} line {i}\n"));
            out.push_str(&format!("source\t{}\n", get(&clean_src)));
            out.push_str(&format!("reference\t{}\n", get(&reference)));
            for (s, src, hyp) in &noisy {
                out.push_str(&format!("{s} noisy source\t{}\n", get(src)));
                out.push_str(&format!("{s} hypothesis ({s}-trained)\t{}\n", get(hyp)));
            }
        }
        Ok(out)
    }
}

pub fn run_protocol(config_path: &Path) -> Result<RunSummary, ProtocolError> {
    Protocol::load(config_path)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> Direction {
        s.parse().unwrap()
    }

    fn config_text(extra: &str) -> String {
        format!(
            r#"
manifest = "data/manifest.toml"
attacked_direction = "en-fr"
output_dir = "out"
{extra}
[hook]
train = "true {{train_dir}} {{model_dir}}"
translate = "cp {{src_file}} {{out_file}} # {{model_dir}} {{direction}}"
"#
        )
    }

    #[test]
    fn config_defaults_and_paths() {
        let t = tempfile::tempdir().unwrap();
        let p = t.path().join("exp.toml");
        fs::write(&p, config_text("")).unwrap();
        let cfg = ExperimentConfig::load(&p).unwrap();
        assert_eq!(cfg.settings, Setting::ALL);
        assert_eq!(cfg.attack, AttackDefaults::default());
        assert_eq!(cfg.jobs, 1);
        assert!(cfg.manifest.is_absolute());
        assert!(cfg.manifest.ends_with("data/manifest.toml"));
        let c = cfg.attack_config(AttackLevel::Multi);
        assert_eq!(c.op_weights, OpWeights::uniform(AttackLevel::Multi));
        assert_eq!(c.proportion, 0.1);
    }

    #[test]
    fn config_rejects_bad_input() {
        let t = tempfile::tempdir().unwrap();
        let p = t.path().join("exp.toml");
        fs::write(&p, config_text("bogus_field = 1")).unwrap();
        assert!(matches!(
            ExperimentConfig::load(&p),
            Err(ProtocolError::Config { .. })
        ));
        fs::write(&p, config_text("settings = [\"char\"]")).unwrap();
        assert!(matches!(
            ExperimentConfig::load(&p),
            Err(ProtocolError::Config { .. })
        ));
        fs::write(&p, config_text("[attack]\nproportion = 0.0")).unwrap();
        assert!(matches!(
            ExperimentConfig::load(&p),
            Err(ProtocolError::Config { .. })
        ));
        let no_out = config_text("")
            .replace("{{out_file}}", "x")
            .replace("{out_file}", "x");
        fs::write(&p, no_out).unwrap();
        assert!(matches!(
            ExperimentConfig::load(&p),
            Err(ProtocolError::MissingPlaceholder {
                hook: "translate",
                placeholder: "{out_file}"
            })
        ));
    }

    fn report_2x1() -> TransferReport {
        let mut scores = BTreeMap::new();
        let dirs = [d("fr-en"), d("de-en")];
        let vals = [
            ((Setting::Clean, Setting::Clean), [40.0, 36.0]),
            ((Setting::Clean, Setting::CharAttack), [24.0, 23.8]),
            ((Setting::CharAttack, Setting::Clean), [39.0, 36.0]),
            ((Setting::CharAttack, Setting::CharAttack), [37.9, 26.2]),
        ];
        for ((tr, te), v) in vals {
            for (dir, x) in dirs.iter().zip(v) {
                scores.insert((tr, te, dir.clone()), x);
            }
        }
        TransferReport::from_scores(
            d("fr-en"),
            vec![Setting::Clean, Setting::CharAttack],
            dirs.to_vec(),
            &scores,
            ReportMetadata::default(),
        )
    }

    #[test]
    fn deltas_against_clean_row() {
        let r = report_2x1();
        assert!(r.is_complete());
        for c in r.cells.iter().filter(|c| c.train == Setting::Clean) {
            assert_eq!(c.delta_pct, Some(0.0));
        }
        let c = r
            .cell(Setting::CharAttack, Setting::CharAttack, &d("de-en"))
            .unwrap();
        assert_eq!(round_half_up(c.delta_pct.unwrap(), 1), 10.1);
    }

    #[test]
    fn markdown_bold_ties_and_deltas() {
        let md = render_report(&report_2x1(), ReportFormat::Markdown).unwrap();
        assert!(
            md.contains("| clean corpus | clean corpus | **40.0** | **36.0** |"),
            "{md}"
        );
        assert!(
            md.contains(
                "| character-level attack | character-level attack | **37.9** | **26.2**(↑10.1%) |"
            ),
            "{md}"
        );
        assert!(md.contains("fr-en (attacked)"));
        let csv = render_report(&report_2x1(), ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 1 + 8);
        let tsv = render_report(&report_2x1(), ReportFormat::DeltasTsv).unwrap();
        assert_eq!(tsv.lines().count(), 1 + 2);
    }

    #[test]
    fn incomplete_grid_refused() {
        let mut r = report_2x1();
        r.cells.pop();
        assert!(matches!(
            render_report(&r, ReportFormat::Markdown),
            Err(ProtocolError::IncompleteGrid {
                missing: 1,
                total: 8
            })
        ));
    }

    #[test]
    fn quoting() {
        assert_eq!(shell_quote("/a b/c"), "'/a b/c'");
        assert_eq!(shell_quote("it's"), "'it'\\''s'");
    }
}
