//! End-to-end runs driven by a config file: clean, split, BPE, baselines, a BT strategy,
//! evaluation and report tables. Every stage persists its artifacts in the run directory
//! and is skipped on re-invocation when its recorded artifacts are intact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::bt::{
    incremental_bt, iterative_bt, our_bt, standard_bt, BtConfig, BtContext, BtError, BtOutcome, BtRunState,
    MergePolicy, MonoPool, SelectionPolicy, StageModels, Strategy,
};
use crate::corpus::{
    clean, concat_bilingual, expand_eval_sets, filter_by_source, load_bilingual, load_monolingual, make_splits,
    BilingualCorpus, CleanRuleSet, CorpusError, DataSplit, LanguageTag, Manifest, ManifestLanguage, MonolingualCorpus,
    SplitRatios, SplitVariant, DEFAULT_ALLOWED_PUNCTUATION,
};
use crate::hash::sha256_hex;
use crate::metrics::{evaluate_all_with, MetricError, TokenizerProfile};
use crate::subword::{learn_bpe, BpeError, BpeModel};
use crate::translator::{
    load_model, translate, BeamConfig, Direction, LexicalTrainer, TrainConfig, TranslatorError, TranslatorModel,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}:{line}: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("config is missing required key {0}")]
    MissingKey(String),
    #[error("config references missing path {0}")]
    MissingPath(PathBuf),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Translator(#[from] TranslatorError),
    #[error(transparent)]
    Bt(#[from] BtError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("run directory {0} was created from a different config")]
    ConfigChanged(PathBuf),
    #[error("test sets differ: {left} has {left_fingerprint}, {right} has {right_fingerprint}")]
    FingerprintMismatch {
        left: String,
        left_fingerprint: String,
        right: String,
        right_fingerprint: String,
    },
    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl ExperimentError {
    /// Short category used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentError::Config { .. } | ExperimentError::MissingKey(_) | ExperimentError::Invalid(_) => "config",
            ExperimentError::MissingPath(_) => "missing-path",
            ExperimentError::Corpus(_) => "corpus",
            ExperimentError::Bpe(_) => "bpe",
            ExperimentError::Translator(TranslatorError::FingerprintMismatch { .. }) => "bpe-mismatch",
            ExperimentError::Translator(_) => "translator",
            ExperimentError::Bt(_) => "bt",
            ExperimentError::Metric(_) => "metric",
            ExperimentError::Io { .. } => "io",
            ExperimentError::Locked(_) => "locked",
            ExperimentError::ConfigChanged(_) => "config-changed",
            ExperimentError::FingerprintMismatch { .. } => "fingerprint-mismatch",
            ExperimentError::Malformed { .. } => "malformed",
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<String, ExperimentError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// `[section]` headers and `key = value` lines; `#` starts a comment line.
#[derive(Debug, Clone, Default)]
struct Ini {
    values: BTreeMap<String, (String, usize)>,
    used: std::cell::RefCell<BTreeSet<String>>,
}

impl Ini {
    fn parse(text: &str, path: &Path) -> Result<Self, ExperimentError> {
        let mut section = String::new();
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ExperimentError::Config {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            if let Some(name) = line.strip_prefix('[') {
                section = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header {line:?}")))?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, found {line:?}")))?;
            let key = format!("{section}.{}", k.trim());
            if values.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(err(format!("duplicate key {key}")));
            }
        }
        Ok(Self {
            values,
            used: Default::default(),
        })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    fn line(&self, key: &str) -> usize {
        self.values.get(key).map(|(_, l)| *l).unwrap_or(0)
    }

    fn require(&self, key: &str) -> Result<&str, ExperimentError> {
        self.get(key)
            .ok_or_else(|| ExperimentError::MissingKey(key.to_string()))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, path: &Path, default: T) -> Result<T, ExperimentError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ExperimentError::Config {
                path: path.to_path_buf(),
                line: self.line(key),
                message: format!("cannot parse {key} = {v:?}"),
            }),
        }
    }

    fn required_parsed<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T, ExperimentError> {
        let v = self.require(key)?;
        v.parse().map_err(|_| ExperimentError::Config {
            path: path.to_path_buf(),
            line: self.line(key),
            message: format!("cannot parse {key} = {v:?}"),
        })
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }

    fn unused(&self) -> Option<(String, usize)> {
        let used = self.used.borrow();
        self.values
            .iter()
            .find(|(k, _)| !used.contains(*k))
            .map(|(k, (_, l))| (k.clone(), *l))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub source_language: LanguageTag,
    pub target_language: LanguageTag,
    /// Bilingual manifest ids; empty means every bilingual entry of the language pair.
    pub bilingual: Vec<String>,
    /// Pairs with these source tags are removed from the training split.
    pub exclude_tags: BTreeSet<String>,
    /// Manifest id of extra evaluation pairs appended to validation and test.
    pub newtest: Option<String>,
    /// Monolingual manifest ids; empty means every entry of the language.
    pub mono_source: Vec<String>,
    pub mono_target: Vec<String>,
    pub word_lists: Vec<(LanguageTag, PathBuf)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanConfig {
    pub enabled: bool,
    pub strip_hyperlinks: bool,
    pub strip_special_characters: bool,
    pub collapse_whitespace: bool,
    pub drop_code_mixed: bool,
    pub drop_repetitive: bool,
    pub allowed_punctuation: String,
    pub code_mix_threshold: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        let r = CleanRuleSet::default();
        Self {
            enabled: true,
            strip_hyperlinks: r.strip_hyperlinks,
            strip_special_characters: r.strip_special_characters,
            collapse_whitespace: r.collapse_whitespace,
            drop_code_mixed: r.drop_code_mixed,
            drop_repetitive: r.drop_repetitive,
            allowed_punctuation: DEFAULT_ALLOWED_PUNCTUATION.to_string(),
            code_mix_threshold: r.code_mix_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub clean: CleanConfig,
    pub split_ratios: SplitRatios,
    pub split_seed: u64,
    pub bpe_vocab_size: usize,
    pub train: TrainConfig,
    pub bt: BtConfig,
    /// Iterative rounds run after the selection-based strategy.
    pub iterations_after: usize,
    /// Also run standard BT on the selected datasets, for comparison.
    pub standard_row: bool,
    pub metric_profile: TokenizerProfile,
    pub decimals: usize,
    pub run_dir: Option<PathBuf>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = read_file(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, path, base)
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, path: &Path, base: &Path) -> Result<Self, ExperimentError> {
        let ini = Ini::parse(text, path)?;
        let cfg_err = |key: &str, message: String| ExperimentError::Config {
            path: path.to_path_buf(),
            line: ini.line(key),
            message,
        };
        let tag = |key: &str| -> Result<LanguageTag, ExperimentError> {
            LanguageTag::new(ini.require(key)?).map_err(|e| cfg_err(key, e.to_string()))
        };
        let boolean = |key: &str, default: bool| -> Result<bool, ExperimentError> {
            match ini.get(key) {
                None => Ok(default),
                Some(v) => parse_bool(v).ok_or_else(|| cfg_err(key, format!("expected true or false, found {v:?}"))),
            }
        };

        let mut word_lists = Vec::new();
        let keys: Vec<String> = ini
            .values
            .keys()
            .filter(|k| k.starts_with("data.word_list."))
            .cloned()
            .collect();
        for k in keys {
            let lang = LanguageTag::new(&k["data.word_list.".len()..]).map_err(|e| cfg_err(&k, e.to_string()))?;
            word_lists.push((lang, resolve(base, ini.require(&k)?)));
        }
        let data = DataConfig {
            manifest: resolve(base, ini.require("data.manifest")?),
            source_language: tag("data.source_language")?,
            target_language: tag("data.target_language")?,
            bilingual: ini.list("data.bilingual"),
            exclude_tags: ini.list("data.exclude_tags").into_iter().collect(),
            newtest: ini.get("data.newtest").filter(|s| !s.is_empty()).map(str::to_string),
            mono_source: ini.list("data.mono_source"),
            mono_target: ini.list("data.mono_target"),
            word_lists,
        };

        let d = CleanConfig::default();
        let clean = CleanConfig {
            enabled: boolean("clean.enabled", d.enabled)?,
            strip_hyperlinks: boolean("clean.strip_hyperlinks", d.strip_hyperlinks)?,
            strip_special_characters: boolean("clean.strip_special_characters", d.strip_special_characters)?,
            collapse_whitespace: boolean("clean.collapse_whitespace", d.collapse_whitespace)?,
            drop_code_mixed: boolean("clean.drop_code_mixed", d.drop_code_mixed)?,
            drop_repetitive: boolean("clean.drop_repetitive", d.drop_repetitive)?,
            allowed_punctuation: ini
                .get("clean.allowed_punctuation")
                .map(str::to_string)
                .unwrap_or(d.allowed_punctuation),
            code_mix_threshold: ini.parsed("clean.code_mix_threshold", path, d.code_mix_threshold)?,
        };

        let dr = SplitRatios::default();
        let split_ratios = SplitRatios::new(
            ini.parsed("split.train", path, dr.train)?,
            ini.parsed("split.valid", path, dr.valid)?,
            ini.parsed("split.test", path, dr.test)?,
        )
        .map_err(|e| cfg_err("split.train", e.to_string()))?;
        let split_seed = ini.required_parsed("split.seed", path)?;

        let dt = TrainConfig::default();
        let train = TrainConfig {
            batch_size: ini.parsed("train.batch_size", path, dt.batch_size)?,
            patience: ini.parsed("train.patience", path, dt.patience)?,
            max_epochs: ini.parsed("train.max_epochs", path, dt.max_epochs)?,
            seed: ini.required_parsed("train.seed", path)?,
            em_tolerance: ini.parsed("train.em_tolerance", path, dt.em_tolerance)?,
            lm_smoothing: ini.parsed("train.lm_smoothing", path, dt.lm_smoothing)?,
        };

        let db = BtConfig::default();
        let strategy = match ini.get("bt.strategy") {
            None => db.strategy,
            Some(s) => Strategy::parse(s).ok_or_else(|| cfg_err("bt.strategy", format!("unknown strategy {s:?}")))?,
        };
        let merge_policy = match ini.get("bt.merge_policy") {
            None => db.merge_policy,
            Some(s) => MergePolicy::parse(s)
                .ok_or_else(|| cfg_err("bt.merge_policy", format!("unknown merge policy {s:?}")))?,
        };
        let selection_policy = match ini.get("bt.selection") {
            None | Some("top-k") => SelectionPolicy::TopK(ini.parsed("bt.top_k", path, 3)?),
            Some("above-baseline") => SelectionPolicy::AboveBaseline,
            Some(s) => return Err(cfg_err("bt.selection", format!("unknown selection policy {s:?}"))),
        };
        let portion_schedule = match ini.get("bt.portion_schedule") {
            None => db.portion_schedule.clone(),
            Some(_) => ini
                .list("bt.portion_schedule")
                .iter()
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| cfg_err("bt.portion_schedule", format!("bad portion {p:?}")))
                })
                .collect::<Result<_, _>>()?,
        };
        let dbeam = BeamConfig::default();
        let bt = BtConfig {
            strategy,
            merge_policy,
            selection_policy,
            max_iterations: ini.parsed("bt.max_iterations", path, db.max_iterations)?,
            convergence_epsilon: ini.parsed("bt.convergence_epsilon", path, db.convergence_epsilon)?,
            portion_schedule,
            beam: BeamConfig {
                beam_width: ini.parsed("bt.beam_width", path, dbeam.beam_width)?,
                max_output_length_factor: ini.parsed(
                    "bt.max_output_length_factor",
                    path,
                    dbeam.max_output_length_factor,
                )?,
                candidates_per_token: ini.parsed("bt.candidates_per_token", path, dbeam.candidates_per_token)?,
            },
            seed: ini.required_parsed("bt.seed", path)?,
        };
        bt.validate().map_err(|e| cfg_err("bt.strategy", e.to_string()))?;

        let profile_name = ini.get("metrics.profile").unwrap_or("plain");
        let metric_profile = TokenizerProfile::by_name(profile_name)
            .ok_or_else(|| cfg_err("metrics.profile", format!("unknown tokenizer profile {profile_name:?}")))?;

        let config = Self {
            data,
            clean,
            split_ratios,
            split_seed,
            bpe_vocab_size: ini.required_parsed("bpe.vocab_size", path)?,
            train,
            bt,
            iterations_after: ini.parsed("bt.iterations_after", path, 0)?,
            standard_row: boolean("bt.standard_row", false)?,
            metric_profile,
            decimals: ini.parsed("metrics.decimals", path, 2)?,
            run_dir: ini.get("run.dir").map(|d| resolve(base, d)),
        };
        if let Some((key, line)) = ini.unused() {
            return Err(ExperimentError::Config {
                path: path.to_path_buf(),
                line,
                message: format!("unknown key {key}"),
            });
        }
        Ok(config)
    }

    /// Overrides every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.split_seed = seed;
        self.train.seed = seed;
        self.bt.seed = seed;
        self
    }

    /// Checks that every referenced path exists.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let mut paths = vec![self.data.manifest.clone()];
        paths.extend(self.data.word_lists.iter().map(|(_, p)| p.clone()));
        for p in paths {
            if !p.exists() {
                return Err(ExperimentError::MissingPath(p));
            }
        }
        let manifest = Manifest::load(&self.data.manifest)?;
        let ids = self
            .data
            .bilingual
            .iter()
            .chain(&self.data.mono_source)
            .chain(&self.data.mono_target)
            .chain(self.data.newtest.iter());
        for id in ids {
            let e = manifest
                .get(id)
                .ok_or_else(|| ExperimentError::Invalid(format!("manifest has no entry {id}")))?;
            if !e.path.exists() {
                return Err(ExperimentError::MissingPath(e.path.clone()));
            }
        }
        Ok(())
    }

    fn rules(&self) -> Result<CleanRuleSet, ExperimentError> {
        let c = &self.clean;
        let mut rules = CleanRuleSet::default();
        rules.strip_hyperlinks = c.strip_hyperlinks;
        rules.strip_special_characters = c.strip_special_characters;
        rules.collapse_whitespace = c.collapse_whitespace;
        rules.drop_code_mixed = c.drop_code_mixed;
        rules.drop_repetitive = c.drop_repetitive;
        rules.allowed_punctuation = c.allowed_punctuation.clone();
        rules.code_mix_threshold = c.code_mix_threshold;
        for (lang, p) in &self.data.word_lists {
            rules.load_word_list(lang.clone(), p)?;
        }
        Ok(rules)
    }

    /// Canonical text form with absolute paths; parsing it yields an equal config.
    pub fn render(&self) -> String {
        let d = &self.data;
        let c = &self.clean;
        let b = &self.bt;
        let list = |v: &[String]| v.join(", ");
        let mut s = String::new();
        s.push_str("[data]\n");
        s.push_str(&format!("manifest = {}\n", d.manifest.display()));
        s.push_str(&format!("source_language = {}\n", d.source_language));
        s.push_str(&format!("target_language = {}\n", d.target_language));
        s.push_str(&format!("bilingual = {}\n", list(&d.bilingual)));
        s.push_str(&format!(
            "exclude_tags = {}\n",
            d.exclude_tags.iter().cloned().collect::<Vec<_>>().join(", ")
        ));
        s.push_str(&format!("newtest = {}\n", d.newtest.clone().unwrap_or_default()));
        s.push_str(&format!("mono_source = {}\n", list(&d.mono_source)));
        s.push_str(&format!("mono_target = {}\n", list(&d.mono_target)));
        for (l, p) in &d.word_lists {
            s.push_str(&format!("word_list.{l} = {}\n", p.display()));
        }
        s.push_str("\n[clean]\n");
        s.push_str(&format!("enabled = {}\n", c.enabled));
        s.push_str(&format!("strip_hyperlinks = {}\n", c.strip_hyperlinks));
        s.push_str(&format!("strip_special_characters = {}\n", c.strip_special_characters));
        s.push_str(&format!("collapse_whitespace = {}\n", c.collapse_whitespace));
        s.push_str(&format!("drop_code_mixed = {}\n", c.drop_code_mixed));
        s.push_str(&format!("drop_repetitive = {}\n", c.drop_repetitive));
        s.push_str(&format!("allowed_punctuation = {}\n", c.allowed_punctuation));
        s.push_str(&format!("code_mix_threshold = {}\n", c.code_mix_threshold));
        s.push_str("\n[split]\n");
        s.push_str(&format!("train = {}\n", self.split_ratios.train));
        s.push_str(&format!("valid = {}\n", self.split_ratios.valid));
        s.push_str(&format!("test = {}\n", self.split_ratios.test));
        s.push_str(&format!("seed = {}\n", self.split_seed));
        s.push_str("\n[bpe]\n");
        s.push_str(&format!("vocab_size = {}\n", self.bpe_vocab_size));
        s.push_str("\n[train]\n");
        s.push_str(&format!("batch_size = {}\n", self.train.batch_size));
        s.push_str(&format!("patience = {}\n", self.train.patience));
        s.push_str(&format!("max_epochs = {}\n", self.train.max_epochs));
        s.push_str(&format!("seed = {}\n", self.train.seed));
        s.push_str(&format!("em_tolerance = {}\n", self.train.em_tolerance));
        s.push_str(&format!("lm_smoothing = {}\n", self.train.lm_smoothing));
        s.push_str("\n[bt]\n");
        s.push_str(&format!("strategy = {}\n", b.strategy.as_str()));
        s.push_str(&format!("merge_policy = {}\n", b.merge_policy.as_str()));
        match b.selection_policy {
            SelectionPolicy::TopK(k) => s.push_str(&format!("selection = top-k\ntop_k = {k}\n")),
            SelectionPolicy::AboveBaseline => s.push_str("selection = above-baseline\n"),
        }
        s.push_str(&format!("max_iterations = {}\n", b.max_iterations));
        s.push_str(&format!("convergence_epsilon = {}\n", b.convergence_epsilon));
        s.push_str(&format!(
            "portion_schedule = {}\n",
            b.portion_schedule
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        ));
        s.push_str(&format!("beam_width = {}\n", b.beam.beam_width));
        s.push_str(&format!(
            "max_output_length_factor = {}\n",
            b.beam.max_output_length_factor
        ));
        s.push_str(&format!("candidates_per_token = {}\n", b.beam.candidates_per_token));
        s.push_str(&format!("seed = {}\n", b.seed));
        s.push_str(&format!("iterations_after = {}\n", self.iterations_after));
        s.push_str(&format!("standard_row = {}\n", self.standard_row));
        s.push_str("\n[metrics]\n");
        s.push_str(&format!("profile = {}\n", self.metric_profile.name));
        s.push_str(&format!("decimals = {}\n", self.decimals));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Clean,
    Split,
    Bpe,
    Baseline,
    Bt,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Clean,
        Stage::Split,
        Stage::Bpe,
        Stage::Baseline,
        Stage::Bt,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Clean => "clean",
            Stage::Split => "split",
            Stage::Bpe => "bpe",
            Stage::Baseline => "baseline",
            Stage::Bt => "bt",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageEntry {
    pub stage: Stage,
    pub done: bool,
    pub timestamp: u64,
    /// Paths relative to the run directory with their sha256.
    pub artifacts: Vec<(String, String)>,
    pub message: Option<String>,
}

/// One evaluated model: the numbers behind a report row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub direction: String,
    pub label: String,
    pub bleu: f64,
    pub sacrebleu: f64,
    pub chrf2: f64,
    pub ter: f64,
    pub baseline: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub test_fingerprint: String,
    pub stages: Vec<StageEntry>,
    /// Stages executed by the invocation that produced this record.
    pub executed: Vec<Stage>,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Tsv,
    Text,
}

struct Lock {
    path: PathBuf,
}

impl Lock {
    fn acquire(dir: &Path) -> Result<Self, ExperimentError> {
        let path = dir.join("lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(ExperimentError::Locked(dir.to_path_buf())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Well-known locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }

    pub fn stages_log(&self) -> PathBuf {
        self.root.join("stages.log")
    }

    fn cleaned_bilingual(&self, id: &str) -> PathBuf {
        self.root.join("splits").join("clean").join(format!("{id}.tsv"))
    }

    fn cleaned_mono(&self, id: &str) -> PathBuf {
        self.root.join("splits").join("clean").join(format!("{id}.txt"))
    }

    fn clean_report(&self, id: &str) -> PathBuf {
        self.root.join("splits").join("clean").join(format!("{id}.report.tsv"))
    }

    pub fn split(&self, part: &str) -> PathBuf {
        self.root.join("splits").join(format!("{part}.tsv"))
    }

    pub fn test_fingerprint(&self) -> PathBuf {
        self.root.join("splits").join("test.fingerprint")
    }

    pub fn bpe(&self) -> PathBuf {
        self.root.join("bpe").join("merges.txt")
    }

    pub fn model(&self, key: &str, direction: &Direction) -> PathBuf {
        self.root.join("models").join(format!("{key}.{direction}.model"))
    }

    pub fn stage_index(&self) -> PathBuf {
        self.root.join("models").join("stages.tsv")
    }

    pub fn hypotheses(&self, key: &str, direction: &Direction) -> PathBuf {
        self.root.join("eval").join(format!("{key}.{direction}.hyp"))
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("eval").join("results.tsv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.tsv")
    }

    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn hash_file(path: &Path) -> Result<String, ExperimentError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

pub fn read_stage_log(path: &Path) -> Result<Vec<StageEntry>, ExperimentError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = read_file(path)?;
    let bad = |message: String| ExperimentError::Malformed {
        path: path.to_path_buf(),
        message,
    };
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 3 {
                return Err(bad(format!("short line {line:?}")));
            }
            let stage = Stage::parse(cols[0]).ok_or_else(|| bad(format!("unknown stage {:?}", cols[0])))?;
            let done = match cols[1] {
                "done" => true,
                "failed" => false,
                s => return Err(bad(format!("unknown status {s:?}"))),
            };
            let timestamp = cols[2]
                .parse()
                .map_err(|_| bad(format!("bad timestamp {:?}", cols[2])))?;
            let mut artifacts = Vec::new();
            let mut message = None;
            for c in &cols[3..] {
                if let Some(m) = c.strip_prefix("error=") {
                    message = Some(m.to_string());
                } else {
                    let (p, h) = c.rsplit_once('=').ok_or_else(|| bad(format!("bad artifact {c:?}")))?;
                    artifacts.push((p.to_string(), h.to_string()));
                }
            }
            Ok(StageEntry {
                stage,
                done,
                timestamp,
                artifacts,
                message,
            })
        })
        .collect()
}

fn write_stage_log(path: &Path, entries: &[StageEntry]) -> Result<(), ExperimentError> {
    let mut s = String::new();
    for e in entries {
        s.push_str(e.stage.as_str());
        s.push('\t');
        s.push_str(if e.done { "done" } else { "failed" });
        s.push_str(&format!("\t{}", e.timestamp));
        for (p, h) in &e.artifacts {
            s.push_str(&format!("\t{p}={h}"));
        }
        if let Some(m) = &e.message {
            s.push_str(&format!("\terror={}", m.replace(['\t', '\n'], " ")));
        }
        s.push('\n');
    }
    write_file(path, s)
}

fn entry_intact(paths: &RunPaths, e: &StageEntry) -> bool {
    e.done
        && e.artifacts
            .iter()
            .all(|(p, h)| hash_file(&paths.root.join(p)).map(|x| &x == h).unwrap_or(false))
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    paths: RunPaths,
}

#[derive(Debug, Clone)]
struct StageIndexRow {
    label: String,
    key: String,
}

impl Runner<'_> {
    fn forward(&self) -> Direction {
        Direction::new(
            self.config.data.source_language.clone(),
            self.config.data.target_language.clone(),
        )
    }

    fn directions(&self) -> [Direction; 2] {
        let f = self.forward();
        let b = f.reversed();
        [f, b]
    }

    fn manifest(&self) -> Result<Manifest, ExperimentError> {
        Ok(Manifest::load(&self.config.data.manifest)?)
    }

    fn bilingual_ids(&self, manifest: &Manifest) -> Vec<String> {
        if !self.config.data.bilingual.is_empty() {
            return self.config.data.bilingual.clone();
        }
        let (s, t) = (&self.config.data.source_language, &self.config.data.target_language);
        manifest
            .bilingual()
            .filter(|e| match &e.language {
                ManifestLanguage::Bilingual(a, b) => (a == s && b == t) || (a == t && b == s),
                ManifestLanguage::Monolingual(_) => false,
            })
            .filter(|e| Some(&e.id) != self.config.data.newtest.as_ref())
            .map(|e| e.id.clone())
            .collect()
    }

    fn mono_ids(&self, manifest: &Manifest, configured: &[String], language: &LanguageTag) -> Vec<String> {
        if !configured.is_empty() {
            return configured.to_vec();
        }
        manifest.monolingual(language).map(|e| e.id.clone()).collect()
    }

    fn load_bilingual_entry(&self, manifest: &Manifest, id: &str) -> Result<BilingualCorpus, ExperimentError> {
        let e = manifest
            .get(id)
            .ok_or_else(|| ExperimentError::Invalid(format!("manifest has no entry {id}")))?;
        let (s, t) = (&self.config.data.source_language, &self.config.data.target_language);
        match &e.language {
            ManifestLanguage::Bilingual(a, b) if a == s && b == t => {
                Ok(load_bilingual(&e.path, a.clone(), b.clone(), id, &e.source_tag)?)
            }
            ManifestLanguage::Bilingual(a, b) if a == t && b == s => {
                Ok(load_bilingual(&e.path, a.clone(), b.clone(), id, &e.source_tag)?.swapped())
            }
            _ => Err(ExperimentError::Invalid(format!(
                "manifest entry {id} is not {s}>{t} bilingual data"
            ))),
        }
    }

    fn load_mono_entry(
        &self,
        manifest: &Manifest,
        id: &str,
        language: &LanguageTag,
    ) -> Result<MonolingualCorpus, ExperimentError> {
        let e = manifest
            .get(id)
            .ok_or_else(|| ExperimentError::Invalid(format!("manifest has no entry {id}")))?;
        if e.language != ManifestLanguage::Monolingual(language.clone()) {
            return Err(ExperimentError::Invalid(format!(
                "manifest entry {id} is not {language} monolingual data"
            )));
        }
        Ok(load_monolingual(&e.path, language.clone(), id, &e.source_tag)?)
    }

    fn run_clean(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let manifest = self.manifest()?;
        let rules = self.config.rules()?;
        let mut out = Vec::new();
        let mut ids = self.bilingual_ids(&manifest);
        ids.extend(self.config.data.newtest.iter().cloned());
        for id in ids {
            let corpus = self.load_bilingual_entry(&manifest, &id)?;
            let corpus = if self.config.clean.enabled {
                let (c, report) = clean(&corpus, &rules)?;
                let p = self.paths.clean_report(&id);
                write_file(&p, report.to_tsv())?;
                out.push(p);
                c
            } else {
                corpus
            };
            let p = self.paths.cleaned_bilingual(&id);
            write_file(&p, "")?;
            corpus.save_tagged(&p, &[])?;
            out.push(p);
        }
        for (configured, lang) in [
            (&self.config.data.mono_source, &self.config.data.source_language),
            (&self.config.data.mono_target, &self.config.data.target_language),
        ] {
            for id in self.mono_ids(&manifest, configured, lang) {
                let corpus = self.load_mono_entry(&manifest, &id, lang)?;
                let corpus = if self.config.clean.enabled {
                    let (c, report) = clean(&corpus, &rules)?;
                    let p = self.paths.clean_report(&id);
                    write_file(&p, report.to_tsv())?;
                    out.push(p);
                    c
                } else {
                    corpus
                };
                let p = self.paths.cleaned_mono(&id);
                write_file(&p, "")?;
                corpus.save(&p)?;
                out.push(p);
            }
        }
        Ok(out)
    }

    fn cleaned_pool(
        &self,
        manifest: &Manifest,
        configured: &[String],
        lang: &LanguageTag,
    ) -> Result<MonoPool, ExperimentError> {
        let datasets = self
            .mono_ids(manifest, configured, lang)
            .into_iter()
            .map(|id| {
                let e = manifest.get(&id).expect("ids come from the manifest");
                Ok(load_monolingual(
                    &self.paths.cleaned_mono(&id),
                    lang.clone(),
                    &id,
                    &e.source_tag,
                )?)
            })
            .collect::<Result<Vec<_>, ExperimentError>>()?;
        Ok(MonoPool::new(datasets)?)
    }

    fn run_split(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let manifest = self.manifest()?;
        let corpora = self
            .bilingual_ids(&manifest)
            .iter()
            .map(|id| Ok(BilingualCorpus::load_tagged(&self.paths.cleaned_bilingual(id))?))
            .collect::<Result<Vec<_>, ExperimentError>>()?;
        let all = concat_bilingual(&corpora, "bilingual")?;
        let mut split = make_splits(&all, self.config.split_ratios, self.config.split_seed)?;
        split.train = filter_by_source(&split.train, &self.config.data.exclude_tags);
        if let Some(id) = &self.config.data.newtest {
            let extra = BilingualCorpus::load_tagged(&self.paths.cleaned_bilingual(id))?;
            split = expand_eval_sets(&split, &extra)?;
        }
        let mut out = Vec::new();
        let provenance = |part: &str| {
            vec![
                ("split", part.to_string()),
                ("split_seed", split.split_seed.to_string()),
                ("variant", split.variant.as_str().to_string()),
            ]
        };
        for (part, c) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
            let p = self.paths.split(part);
            write_file(&p, "")?;
            c.save_tagged(&p, &provenance(part))?;
            out.push(p);
        }
        let p = self.paths.test_fingerprint();
        write_file(&p, format!("{}\n", split.test_fingerprint()))?;
        out.push(p);
        Ok(out)
    }

    fn load_split(&self) -> Result<DataSplit, ExperimentError> {
        let load = |part: &str| BilingualCorpus::load_tagged(&self.paths.split(part));
        Ok(DataSplit {
            train: load("train")?,
            valid: load("valid")?,
            test: load("test")?,
            split_seed: self.config.split_seed,
            variant: if self.config.data.newtest.is_some() {
                SplitVariant::NewTest
            } else {
                SplitVariant::Default
            },
        })
    }

    fn pools(&self) -> Result<(MonoPool, MonoPool), ExperimentError> {
        let manifest = self.manifest()?;
        let d = &self.config.data;
        Ok((
            self.cleaned_pool(&manifest, &d.mono_source, &d.source_language)?,
            self.cleaned_pool(&manifest, &d.mono_target, &d.target_language)?,
        ))
    }

    fn run_bpe(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let split = self.load_split()?;
        let (src, tgt) = self.pools()?;
        let text = split.train.sources().chain(split.train.targets()).chain(
            src.datasets
                .iter()
                .chain(&tgt.datasets)
                .flat_map(|d| d.sentences.iter().map(String::as_str)),
        );
        let bpe = learn_bpe(text, self.config.bpe_vocab_size)?;
        let p = self.paths.bpe();
        write_file(&p, "")?;
        bpe.save(&p)?;
        Ok(vec![p])
    }

    fn context<'b>(&'b self, split: &'b DataSplit, bpe: &'b BpeModel) -> BtContext<'b, LexicalTrainer> {
        BtContext {
            trainer: &LexicalTrainer,
            split,
            bpe,
            train: &self.config.train,
            bt: &self.config.bt,
        }
    }

    fn save_pair(&self, key: &str, f: &TranslatorModel, b: &TranslatorModel) -> Result<Vec<PathBuf>, ExperimentError> {
        let mut out = Vec::new();
        for m in [f, b] {
            let p = self.paths.model(key, m.direction());
            write_file(&p, "")?;
            m.save(&p)?;
            out.push(p);
        }
        Ok(out)
    }

    fn run_baseline(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let split = self.load_split()?;
        let bpe = BpeModel::load(&self.paths.bpe())?;
        let (f, b) = self.context(&split, &bpe).train_baselines()?;
        self.save_pair("baseline", &f, &b)
    }

    fn run_bt(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let split = self.load_split()?;
        let bpe = BpeModel::load(&self.paths.bpe())?;
        let [fd, bd] = self.directions();
        let base = (
            load_model(&self.paths.model("baseline", &fd))?,
            load_model(&self.paths.model("baseline", &bd))?,
        );
        let ctx = self.context(&split, &bpe);
        let (src_pool, tgt_pool) = self.pools()?;
        let d = &self.config.data;
        let all_src = src_pool.concat(&d.source_language, "mono-source");
        let all_tgt = tgt_pool.concat(&d.target_language, "mono-target");

        let mut stages: Vec<(String, String, TranslatorModel, TranslatorModel)> =
            vec![("Bilingual".into(), "baseline".into(), base.0.clone(), base.1.clone())];
        let keyed = |outcome: &BtOutcome<TranslatorModel>, key: &dyn Fn(&StageModels<TranslatorModel>) -> String| {
            outcome
                .stages
                .iter()
                .skip(1)
                .map(|s| (s.label.clone(), key(s), s.forward.clone(), s.backward.clone()))
                .collect::<Vec<_>>()
        };
        let state: BtRunState = match self.config.bt.strategy {
            Strategy::Standard => {
                let o = standard_bt(&ctx, &all_src, &all_tgt, Some(base.clone()))?;
                stages.extend(keyed(&o, &|_| "standard".into()));
                o.state
            }
            Strategy::Incremental => {
                let o = incremental_bt(
                    &ctx,
                    &all_src,
                    &all_tgt,
                    &self.config.bt.portion_schedule,
                    Some(base.clone()),
                )?;
                stages.extend(keyed(&o, &|s| s.label.replace(' ', "-")));
                o.state
            }
            Strategy::Iterative => {
                let o = iterative_bt(
                    &ctx,
                    &all_src,
                    &all_tgt,
                    self.config.bt.max_iterations,
                    self.config.bt.convergence_epsilon,
                    None,
                    Some(base.clone()),
                )?;
                stages.extend(keyed(&o, &|s| s.label.replace(' ', "-")));
                o.state
            }
            Strategy::OurBt => {
                let o = our_bt(&ctx, &src_pool, &tgt_pool, Some(base.clone()))?;
                let mut state = o.state.clone();
                let pick = |pool: &MonoPool, dir: &Direction, lang: &LanguageTag, id: &str| {
                    let ids = &state.selected[&dir.to_string()];
                    if ids.is_empty() {
                        pool.concat(lang, id)
                    } else {
                        MonoPool {
                            datasets: pool.datasets.iter().filter(|d| ids.contains(&d.id)).cloned().collect(),
                        }
                        .concat(lang, id)
                    }
                };
                let sel_tgt = pick(&tgt_pool, &fd, &d.target_language, "selected-target");
                let sel_src = pick(&src_pool, &bd, &d.source_language, "selected-source");
                if self.config.standard_row {
                    let s = standard_bt(&ctx, &sel_src, &sel_tgt, Some(base.clone()))?;
                    stages.extend(keyed(&s, &|_| "standard".into()));
                }
                stages.extend(keyed(&o, &|_| "ourbt".into()));
                if self.config.iterations_after > 0 {
                    let it = iterative_bt(
                        &ctx,
                        &sel_src,
                        &sel_tgt,
                        self.config.iterations_after,
                        self.config.bt.convergence_epsilon,
                        Some((o.forward.clone(), o.backward.clone())),
                        Some(base.clone()),
                    )?;
                    stages.extend(keyed(&it, &|s| s.label.replace(' ', "-")));
                    state
                        .rows
                        .extend(it.state.rows.into_iter().filter(|r| r.stage != "baseline"));
                    state.synthetic.extend(it.state.synthetic);
                    state.final_models = it.state.final_models;
                }
                state
            }
        };

        let mut out = Vec::new();
        let mut index = String::new();
        for (label, key, f, b) in &stages {
            if key != "baseline" {
                out.extend(self.save_pair(key, f, b)?);
            }
            index.push_str(&format!("{label}\t{key}\n"));
        }
        let p = self.paths.stage_index();
        write_file(&p, index)?;
        out.push(p);
        state.save(&self.paths.root)?;
        out.push(self.paths.root.join("state"));
        out.push(self.paths.root.join("candidates.tsv"));
        Ok(out)
    }

    fn stage_index(&self) -> Result<Vec<StageIndexRow>, ExperimentError> {
        let p = self.paths.stage_index();
        read_file(&p)?
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let (label, key) = l.split_once('\t').ok_or_else(|| ExperimentError::Malformed {
                    path: p.clone(),
                    message: format!("bad line {l:?}"),
                })?;
                Ok(StageIndexRow {
                    label: label.to_string(),
                    key: key.to_string(),
                })
            })
            .collect()
    }

    fn run_evaluate(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let split = self.load_split()?;
        let bpe = BpeModel::load(&self.paths.bpe())?;
        let index = self.stage_index()?;
        let mut rows = Vec::new();
        let mut out = Vec::new();
        for dir in self.directions() {
            let test = if dir == self.forward() {
                split.test.clone()
            } else {
                split.test.swapped()
            };
            let sources: Vec<String> = test.sources().map(str::to_string).collect();
            let refs: Vec<&str> = test.targets().collect();
            let mut baseline = None;
            for (i, s) in index.iter().enumerate() {
                let model = load_model(&self.paths.model(&s.key, &dir))?;
                let hyps = translate(&model, &sources, &self.config.bt.beam, &bpe)?;
                let p = self.paths.hypotheses(&s.key, &dir);
                write_file(&p, hyps.iter().map(|h| format!("{h}\n")).collect::<String>())?;
                out.push(p);
                let r = evaluate_all_with(&hyps, &refs, baseline.as_ref(), &self.config.metric_profile)?;
                if i == 0 {
                    baseline = Some(r.bleu.clone());
                }
                rows.push(ReportRow {
                    direction: dir.to_string(),
                    label: s.label.clone(),
                    bleu: r.bleu.score,
                    sacrebleu: r.sacrebleu.score,
                    chrf2: r.chrf2.score,
                    ter: r.ter.score,
                    baseline: i == 0,
                });
            }
        }
        let p = self.paths.results();
        write_file(&p, results_tsv(&rows))?;
        out.push(p);
        Ok(out)
    }

    fn run_report(&self) -> Result<Vec<PathBuf>, ExperimentError> {
        let rows = parse_results(&self.paths.results())?;
        let table = ReportTable { rows };
        let p = self.paths.report();
        write_file(&p, emit_report(&table, ReportFormat::Tsv, self.config.decimals))?;
        let t = self.paths.report_text();
        write_file(&t, emit_report(&table, ReportFormat::Text, self.config.decimals))?;
        Ok(vec![p, t])
    }

    fn run_stage(&self, stage: Stage) -> Result<Vec<PathBuf>, ExperimentError> {
        match stage {
            Stage::Clean => self.run_clean(),
            Stage::Split => self.run_split(),
            Stage::Bpe => self.run_bpe(),
            Stage::Baseline => self.run_baseline(),
            Stage::Bt => self.run_bt(),
            Stage::Evaluate => self.run_evaluate(),
            Stage::Report => self.run_report(),
        }
    }
}

/// Full-precision evaluation rows, one per model and direction.
fn results_tsv(rows: &[ReportRow]) -> String {
    let mut s = String::from("direction\tmodel\tbleu\tsacrebleu\tchrf2\tter\tbaseline\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.direction, r.label, r.bleu, r.sacrebleu, r.chrf2, r.ter, r.baseline
        ));
    }
    s
}

fn parse_results(path: &Path) -> Result<Vec<ReportRow>, ExperimentError> {
    let text = read_file(path)?;
    let bad = |message: String| ExperimentError::Malformed {
        path: path.to_path_buf(),
        message,
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            if c.len() != 7 {
                return Err(bad(format!("expected 7 columns in {l:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            Ok(ReportRow {
                direction: c[0].to_string(),
                label: c[1].to_string(),
                bleu: num(c[2])?,
                sacrebleu: num(c[3])?,
                chrf2: num(c[4])?,
                ter: num(c[5])?,
                baseline: c[6] == "true",
            })
        })
        .collect()
}

/// Runs every stage of `config` in `run_dir`.
pub fn run_experiment(config: &ExperimentConfig, run_dir: &Path) -> Result<RunRecord, ExperimentError> {
    run_experiment_until(config, run_dir, Stage::Report)
}

/// Runs stages up to and including `last`, skipping those already completed with intact
/// artifacts. Once a stage runs, every later stage runs too.
pub fn run_experiment_until(
    config: &ExperimentConfig,
    run_dir: &Path,
    last: Stage,
) -> Result<RunRecord, ExperimentError> {
    config.validate()?;
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let _lock = Lock::acquire(run_dir)?;
    let paths = RunPaths::new(run_dir);
    let snapshot = config.render();
    if paths.snapshot().exists() {
        if read_file(&paths.snapshot())? != snapshot {
            return Err(ExperimentError::ConfigChanged(run_dir.to_path_buf()));
        }
    } else {
        write_file(&paths.snapshot(), &snapshot)?;
    }
    let runner = Runner {
        config,
        paths: paths.clone(),
    };
    let previous = read_stage_log(&paths.stages_log())?;
    let mut log: Vec<StageEntry> = Vec::new();
    let mut executed = Vec::new();
    let mut dirty = false;
    for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
        if !dirty {
            if let Some(e) = previous.iter().find(|e| e.stage == stage) {
                if entry_intact(&paths, e) {
                    log.push(e.clone());
                    continue;
                }
            }
        }
        dirty = true;
        log::info!("running stage {stage}");
        match runner.run_stage(stage) {
            Ok(artifacts) => {
                let artifacts = artifacts
                    .iter()
                    .map(|p| Ok((paths.rel(p), hash_file(p)?)))
                    .collect::<Result<Vec<_>, ExperimentError>>()?;
                log.push(StageEntry {
                    stage,
                    done: true,
                    timestamp: now(),
                    artifacts,
                    message: None,
                });
                executed.push(stage);
                write_stage_log(&paths.stages_log(), &log)?;
            }
            Err(e) => {
                log.push(StageEntry {
                    stage,
                    done: false,
                    timestamp: now(),
                    artifacts: Vec::new(),
                    message: Some(e.to_string()),
                });
                write_stage_log(&paths.stages_log(), &log)?;
                return Err(e);
            }
        }
    }
    if !dirty {
        // Keep entries of later stages when only a prefix was requested.
        log.extend(previous.into_iter().filter(|e| e.stage > last));
    }
    let mut record = load_record(run_dir)?;
    record.executed = executed;
    Ok(record)
}

/// Reads what a run directory holds so far.
pub fn load_record(run_dir: &Path) -> Result<RunRecord, ExperimentError> {
    let paths = RunPaths::new(run_dir);
    let snapshot = paths.snapshot();
    let config_hash = if snapshot.exists() {
        hash_file(&snapshot)?
    } else {
        String::new()
    };
    let test_fingerprint = if paths.test_fingerprint().exists() {
        read_file(&paths.test_fingerprint())?.trim().to_string()
    } else {
        String::new()
    };
    let rows = if paths.results().exists() {
        parse_results(&paths.results())?
    } else {
        Vec::new()
    };
    Ok(RunRecord {
        run_dir: run_dir.to_path_buf(),
        config_hash,
        test_fingerprint,
        stages: read_stage_log(&paths.stages_log())?,
        executed: Vec::new(),
        rows,
    })
}

fn fmt_num(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    // Avoid "-0.00".
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

/// Gain of each row against the baseline row of its direction.
pub fn gains(rows: &[ReportRow]) -> Vec<Option<f64>> {
    let base: BTreeMap<&str, f64> = rows
        .iter()
        .filter(|r| r.baseline)
        .map(|r| (r.direction.as_str(), r.bleu))
        .collect();
    rows.iter()
        .map(|r| {
            if r.baseline {
                None
            } else {
                base.get(r.direction.as_str()).map(|b| r.bleu - b)
            }
        })
        .collect()
}

pub const REPORT_COLUMNS: [&str; 7] = ["direction", "model", "bleu", "gain", "sacrebleu", "chrf2", "ter"];

/// Renders a table with the baseline row of each direction first and the others in
/// their recorded order. Gain is blank for baseline rows.
pub fn emit_report(table: &ReportTable, format: ReportFormat, decimals: usize) -> String {
    let mut rows: Vec<&ReportRow> = Vec::new();
    let mut directions: Vec<&str> = Vec::new();
    for r in &table.rows {
        if !directions.contains(&r.direction.as_str()) {
            directions.push(&r.direction);
        }
    }
    for d in &directions {
        rows.extend(table.rows.iter().filter(|r| r.direction == *d && r.baseline));
        rows.extend(table.rows.iter().filter(|r| r.direction == *d && !r.baseline));
    }
    // Gain is taken between the displayed BLEU values so the table is self-consistent.
    let shown = |x: f64| fmt_num(x, decimals).parse::<f64>().unwrap_or(x);
    let ordered: Vec<ReportRow> = rows
        .into_iter()
        .map(|r| ReportRow {
            bleu: shown(r.bleu),
            ..r.clone()
        })
        .collect();
    let g = gains(&ordered);
    let cells: Vec<Vec<String>> = ordered
        .iter()
        .zip(&g)
        .map(|(r, gain)| {
            vec![
                r.direction.clone(),
                r.label.clone(),
                fmt_num(r.bleu, decimals),
                gain.map(|x| fmt_num(x, decimals)).unwrap_or_default(),
                fmt_num(r.sacrebleu, decimals),
                fmt_num(r.chrf2, decimals),
                fmt_num(r.ter, decimals),
            ]
        })
        .collect();
    match format {
        ReportFormat::Tsv => {
            let mut s = REPORT_COLUMNS.join("\t");
            s.push('\n');
            for c in &cells {
                s.push_str(&c.join("\t"));
                s.push('\n');
            }
            s
        }
        ReportFormat::Text => {
            let header = ["Direction", "Model", "BLEU", "Gain", "SacreBLEU", "chrF2", "TER"];
            let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
            for c in &cells {
                for (w, x) in widths.iter_mut().zip(c) {
                    *w = (*w).max(x.chars().count());
                }
            }
            let line = |c: &[String]| {
                c.iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (x, w))| if i < 2 { format!("{x:<w$}") } else { format!("{x:>w$}") })
                    .collect::<Vec<_>>()
                    .join(" | ")
                    .trim_end()
                    .to_string()
            };
            let mut s = line(&header.map(String::from));
            s.push('\n');
            s.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
            s.push('\n');
            for c in &cells {
                s.push_str(&line(c));
                s.push('\n');
            }
            s
        }
    }
}

/// Parses a TSV report back into rows. Gain is recomputed, so it is not read.
pub fn parse_report(text: &str) -> Result<ReportTable, ExperimentError> {
    let mut lines = text.lines();
    let bad = |message: String| ExperimentError::Malformed {
        path: PathBuf::from("<report>"),
        message,
    };
    if lines.next() != Some(REPORT_COLUMNS.join("\t").as_str()) {
        return Err(bad("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for l in lines.filter(|l| !l.is_empty()) {
        let c: Vec<&str> = l.split('\t').collect();
        if c.len() != 7 {
            return Err(bad(format!("expected 7 columns in {l:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
        rows.push(ReportRow {
            direction: c[0].to_string(),
            label: c[1].to_string(),
            bleu: num(c[2])?,
            sacrebleu: num(c[4])?,
            chrf2: num(c[5])?,
            ter: num(c[6])?,
            baseline: c[3].is_empty(),
        });
    }
    Ok(ReportTable { rows })
}

/// One row per run: the last evaluated model of `direction`. The first run is the
/// baseline for the gain column. Runs must share a test-set fingerprint.
pub fn compare_runs(records: &[RunRecord], direction: &str) -> Result<ReportTable, ExperimentError> {
    let first = records
        .first()
        .ok_or_else(|| ExperimentError::Invalid("nothing to compare".into()))?;
    for r in &records[1..] {
        if r.test_fingerprint != first.test_fingerprint {
            return Err(ExperimentError::FingerprintMismatch {
                left: first.run_dir.display().to_string(),
                left_fingerprint: first.test_fingerprint.clone(),
                right: r.run_dir.display().to_string(),
                right_fingerprint: r.test_fingerprint.clone(),
            });
        }
    }
    let rows = records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let last = rec.rows.iter().rfind(|r| r.direction == direction).ok_or_else(|| {
                ExperimentError::Invalid(format!("{} has no {direction} results", rec.run_dir.display()))
            })?;
            let name = rec
                .run_dir
                .file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_else(|| rec.run_dir.display().to_string());
            Ok(ReportRow {
                label: format!("{name}:{}", last.label),
                baseline: i == 0,
                ..last.clone()
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(ReportTable { rows })
}

/// The run directory from the CLI flag, else the config, else an error.
pub fn resolve_run_dir(config: &ExperimentConfig, flag: Option<&Path>) -> Result<PathBuf, ExperimentError> {
    flag.map(Path::to_path_buf)
        .or_else(|| config.run_dir.clone())
        .ok_or_else(|| ExperimentError::Invalid("no run directory given (--run-dir or [run] dir)".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(direction: &str, label: &str, bleu: f64, baseline: bool) -> ReportRow {
        ReportRow {
            direction: direction.into(),
            label: label.into(),
            bleu,
            sacrebleu: bleu,
            chrf2: 50.0,
            ter: 40.0,
            baseline,
        }
    }

    #[test]
    fn gain_arithmetic_on_known_values() {
        let t = ReportTable {
            rows: vec![
                row("en-lg", "Bilingual", 29.67, true),
                row("en-lg", "OurBT", 35.94, false),
            ],
        };
        let tsv = emit_report(&t, ReportFormat::Tsv, 2);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "direction\tmodel\tbleu\tgain\tsacrebleu\tchrf2\tter");
        assert_eq!(lines[1], "en-lg\tBilingual\t29.67\t\t29.67\t50.00\t40.00");
        assert_eq!(lines[2], "en-lg\tOurBT\t35.94\t6.27\t35.94\t50.00\t40.00");
        let again = emit_report(&parse_report(&tsv).unwrap(), ReportFormat::Tsv, 2);
        assert_eq!(again, tsv);
    }

    #[test]
    fn baseline_self_gain_is_zero_and_single_row_has_blank_gain() {
        let t = ReportTable {
            rows: vec![row("en-lg", "Bilingual", 29.67, true)],
        };
        assert_eq!(gains(&t.rows), [None]);
        let tsv = emit_report(&t, ReportFormat::Tsv, 2);
        assert_eq!(tsv.lines().nth(1).unwrap().split('\t').nth(3), Some(""));
        let with_self = vec![
            row("en-lg", "Bilingual", 29.67, true),
            row("en-lg", "again", 29.67, false),
        ];
        assert_eq!(gains(&with_self)[1], Some(0.0));
    }

    #[test]
    fn text_report_is_aligned() {
        let t = ReportTable {
            rows: vec![
                row("en-lg", "Bilingual", 29.67, true),
                row("en-lg", "iteration 3", 40.25, false),
            ],
        };
        let text = emit_report(&t, ReportFormat::Text, 2);
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("Direction | Model"));
        assert!(lines[3].contains("10.58"));
        assert_eq!(lines[2].find('|'), lines[0].find('|'));
    }

    #[test]
    fn ini_errors_carry_line_numbers() {
        let p = Path::new("x.ini");
        let e = Ini::parse("[data]\nmanifest\n", p).unwrap_err();
        assert!(matches!(e, ExperimentError::Config { line: 2, .. }));
        let e = Ini::parse("[a]\nk = 1\nk = 2\n", p).unwrap_err();
        assert!(matches!(e, ExperimentError::Config { line: 3, .. }));
    }

    const MINIMAL: &str = "[data]\nmanifest = m.tsv\nsource_language = en\ntarget_language = lg\n\
        [split]\nseed = 1\n[bpe]\nvocab_size = 100\n[train]\nseed = 2\n[bt]\nseed = 3\n";

    #[test]
    fn config_defaults_and_round_trip() {
        let base = Path::new("/tmp/cfg");
        let c = ExperimentConfig::parse(MINIMAL, Path::new("c.ini"), base).unwrap();
        assert_eq!(c.data.manifest, base.join("m.tsv"));
        assert_eq!(c.bt.selection_policy, SelectionPolicy::TopK(3));
        assert_eq!(c.bt.max_iterations, 4);
        assert_eq!(c.bt.convergence_epsilon, 0.5);
        assert_eq!(c.train.batch_size, 1000);
        assert_eq!(c.train.patience, 40);
        let again = ExperimentConfig::parse(&c.render(), Path::new("snap"), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, c);
        let reseeded = c.clone().with_seed(9);
        assert_eq!((reseeded.split_seed, reseeded.train.seed, reseeded.bt.seed), (9, 9, 9));
    }

    #[test]
    fn config_requires_explicit_seeds_and_rejects_unknown_keys() {
        let no_seed = MINIMAL.replace("[bt]\nseed = 3\n", "");
        assert!(matches!(
            ExperimentConfig::parse(&no_seed, Path::new("c"), Path::new(".")),
            Err(ExperimentError::MissingKey(k)) if k == "bt.seed"
        ));
        let typo = format!("{MINIMAL}beam_widht = 3\n");
        assert!(matches!(
            ExperimentConfig::parse(&typo, Path::new("c"), Path::new(".")),
            Err(ExperimentError::Config { .. })
        ));
    }

    #[test]
    fn compare_refuses_different_test_sets() {
        let rec = |dir: &str, fp: &str| RunRecord {
            run_dir: PathBuf::from(dir),
            config_hash: String::new(),
            test_fingerprint: fp.into(),
            stages: Vec::new(),
            executed: Vec::new(),
            rows: vec![row("en-lg", "Bilingual", 30.0, true)],
        };
        let t = compare_runs(&[rec("a", "f1")], "en-lg").unwrap();
        assert_eq!(t.rows.len(), 1);
        let e = compare_runs(&[rec("a", "f1"), rec("b", "f2")], "en-lg").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("f1") && msg.contains("f2"), "{msg}");
    }

    #[test]
    fn stage_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stages.log");
        let entries = vec![
            StageEntry {
                stage: Stage::Clean,
                done: true,
                timestamp: 5,
                artifacts: vec![("splits/clean/a.tsv".into(), "ab".into())],
                message: None,
            },
            StageEntry {
                stage: Stage::Split,
                done: false,
                timestamp: 6,
                artifacts: vec![],
                message: Some("boom".into()),
            },
        ];
        write_stage_log(&p, &entries).unwrap();
        assert_eq!(read_stage_log(&p).unwrap(), entries);
    }

    proptest! {
        #[test]
        fn report_round_trips_and_gain_follows_baseline(
            scores in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0, 0.0f64..150.0), 1..8),
        ) {
            let rows: Vec<ReportRow> = scores
                .iter()
                .enumerate()
                .map(|(i, &(b, s, c, t))| ReportRow {
                    direction: "en-lg".into(),
                    label: format!("stage {i}"),
                    bleu: b,
                    sacrebleu: s,
                    chrf2: c,
                    ter: t,
                    baseline: i == 0,
                })
                .collect();
            let g = gains(&rows);
            prop_assert_eq!(g[0], None);
            for (r, x) in rows.iter().zip(&g).skip(1) {
                prop_assert_eq!(*x, Some(r.bleu - rows[0].bleu));
            }
            let tsv = emit_report(&ReportTable { rows }, ReportFormat::Tsv, 2);
            let again = emit_report(&parse_report(&tsv).unwrap(), ReportFormat::Tsv, 2);
            prop_assert_eq!(again, tsv);
        }
    }
}
