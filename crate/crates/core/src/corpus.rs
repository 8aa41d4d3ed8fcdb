//! Bilingual and monolingual corpora: loading, cleaning, splitting and shuffling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use thiserror::Error;

use crate::hash::sha256_hex;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    Encoding { path: PathBuf, offset: usize },
    #[error("{path}:{line}: expected 2 tab-separated columns, found {found}")]
    ColumnCount { path: PathBuf, line: usize, found: usize },
    #[error("aligned files differ in length: {source_path} has {source_len} lines, {target_path} has {target_len}")]
    AlignmentMismatch {
        source_path: PathBuf,
        source_len: usize,
        target_path: PathBuf,
        target_len: usize,
    },
    #[error("language mismatch: expected {expected}, found {found}")]
    LanguageMismatch { expected: String, found: String },
    #[error("invalid language tag {0:?}")]
    InvalidLanguageTag(String),
    #[error("no corpora given")]
    NoCorpora,
    #[error("no cleaning rule is enabled")]
    NoRulesEnabled,
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios((f64, f64, f64)),
    #[error("corpus has {0} pairs, at least 3 are needed to split")]
    TooSmallToSplit(usize),
    #[error("{} evaluation pair(s) also occur in the training split, first: {:?}", .0.len(), .0.first())]
    TrainOverlap(Vec<(String, String)>),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Identifier of the language a corpus (or one side of it) is written in.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LanguageTag(String);

impl LanguageTag {
    pub fn new(code: impl Into<String>) -> Result<Self, CorpusError> {
        let code = code.into();
        if code.is_empty() || code.chars().any(|c| c.is_whitespace() || c == '>') {
            return Err(CorpusError::InvalidLanguageTag(code));
        }
        Ok(Self(code))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonolingualCorpus {
    pub id: String,
    pub language: LanguageTag,
    pub source_tag: String,
    pub sentences: Vec<String>,
}

impl MonolingualCorpus {
    pub fn new(
        id: impl Into<String>,
        language: LanguageTag,
        source_tag: impl Into<String>,
        sentences: Vec<String>,
    ) -> Self {
        Self {
            id: id.into(),
            language,
            source_tag: source_tag.into(),
            sentences,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Writes one sentence per line.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(s);
            out.push('\n');
        }
        fs::write(path, out).map_err(io_err(path))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    pub source_tag: String,
}

impl SentencePair {
    pub fn new(source: impl Into<String>, target: impl Into<String>, source_tag: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            source_tag: source_tag.into(),
        }
    }

    fn key(&self) -> (&str, &str) {
        (&self.source, &self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BilingualCorpus {
    pub id: String,
    pub source_language: LanguageTag,
    pub target_language: LanguageTag,
    pub pairs: Vec<SentencePair>,
}

impl BilingualCorpus {
    pub fn new(id: impl Into<String>, source_language: LanguageTag, target_language: LanguageTag) -> Self {
        Self {
            id: id.into(),
            source_language,
            target_language,
            pairs: Vec::new(),
        }
    }

    pub fn with_pairs(mut self, pairs: Vec<SentencePair>) -> Self {
        self.pairs = pairs;
        self
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.source.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.target.as_str())
    }

    /// The same pairs viewed in the opposite translation direction.
    pub fn swapped(&self) -> Self {
        Self {
            id: self.id.clone(),
            source_language: self.target_language.clone(),
            target_language: self.source_language.clone(),
            pairs: self
                .pairs
                .iter()
                .map(|p| SentencePair::new(p.target.clone(), p.source.clone(), p.source_tag.clone()))
                .collect(),
        }
    }

    pub fn source_side(&self) -> MonolingualCorpus {
        MonolingualCorpus::new(
            format!("{}.{}", self.id, self.source_language),
            self.source_language.clone(),
            self.id.clone(),
            self.sources().map(str::to_owned).collect(),
        )
    }

    pub fn target_side(&self) -> MonolingualCorpus {
        MonolingualCorpus::new(
            format!("{}.{}", self.id, self.target_language),
            self.target_language.clone(),
            self.id.clone(),
            self.targets().map(str::to_owned).collect(),
        )
    }

    fn serialize_body(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&p.source);
            out.push('\t');
            out.push_str(&p.target);
            out.push('\t');
            out.push_str(&p.source_tag);
            out.push('\n');
        }
        out
    }

    /// Content hash over the language pair and every (source, target, tag) triple.
    pub fn fingerprint(&self) -> String {
        let mut text = format!("{}>{}\n", self.source_language, self.target_language);
        text.push_str(&self.serialize_body());
        sha256_hex(text.as_bytes())[..16].to_string()
    }

    /// Writes a three-column TSV (source, target, tag) preceded by `#!` provenance lines.
    pub fn save_tagged(&self, path: &Path, provenance: &[(&str, String)]) -> Result<(), CorpusError> {
        let mut out = format!(
            "#!corpus\tid={}\tsource_language={}\ttarget_language={}\n",
            self.id, self.source_language, self.target_language
        );
        for (k, v) in provenance {
            out.push_str(&format!("#!{k}\t{v}\n"));
        }
        out.push_str(&self.serialize_body());
        fs::write(path, out).map_err(io_err(path))
    }

    /// Reads a file written by [`BilingualCorpus::save_tagged`].
    pub fn load_tagged(path: &Path) -> Result<Self, CorpusError> {
        let text = read_utf8(path)?;
        let mut id = None;
        let mut src = None;
        let mut tgt = None;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(meta) = line.strip_prefix("#!") {
                if let Some(fields) = meta.strip_prefix("corpus\t") {
                    for field in fields.split('\t') {
                        match field.split_once('=') {
                            Some(("id", v)) => id = Some(v.to_string()),
                            Some(("source_language", v)) => src = Some(LanguageTag::new(v)?),
                            Some(("target_language", v)) => tgt = Some(LanguageTag::new(v)?),
                            _ => {}
                        }
                    }
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(CorpusError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected 3 columns, found {}", cols.len()),
                });
            }
            pairs.push(SentencePair::new(cols[0], cols[1], cols[2]));
        }
        match (id, src, tgt) {
            (Some(id), Some(src), Some(tgt)) => Ok(Self::new(id, src, tgt).with_pairs(pairs)),
            _ => Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "missing #!corpus header".into(),
            }),
        }
    }
}

fn read_utf8(path: &Path) -> Result<String, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    String::from_utf8(bytes).map_err(|e| CorpusError::Encoding {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .enumerate()
        .map(|(i, l)| (i + 1, l))
}

/// Loads a one-sentence-per-line file. Blank lines are skipped.
pub fn load_monolingual(
    path: &Path,
    language: LanguageTag,
    id: &str,
    source_tag: &str,
) -> Result<MonolingualCorpus, CorpusError> {
    let text = read_utf8(path)?;
    let sentences = content_lines(&text)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(_, l)| l.to_string())
        .collect();
    Ok(MonolingualCorpus::new(id, language, source_tag, sentences))
}

/// Loads a `source<TAB>target` file. Blank lines and leading `#!` metadata lines are skipped.
pub fn load_bilingual(
    path: &Path,
    src: LanguageTag,
    tgt: LanguageTag,
    id: &str,
    source_tag: &str,
) -> Result<BilingualCorpus, CorpusError> {
    let text = read_utf8(path)?;
    let mut pairs = Vec::new();
    for (line_no, line) in content_lines(&text) {
        if line.trim().is_empty() || line.starts_with("#!") {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(CorpusError::ColumnCount {
                path: path.to_path_buf(),
                line: line_no,
                found: cols.len(),
            });
        }
        pairs.push(SentencePair::new(cols[0], cols[1], source_tag));
    }
    Ok(BilingualCorpus::new(id, src, tgt).with_pairs(pairs))
}

/// Loads two line-aligned files. Line `k` of one is the translation of line `k` of the other.
pub fn load_bilingual_aligned(
    source_path: &Path,
    target_path: &Path,
    src: LanguageTag,
    tgt: LanguageTag,
    id: &str,
    source_tag: &str,
) -> Result<BilingualCorpus, CorpusError> {
    fn lines(text: &str) -> Vec<&str> {
        let mut v: Vec<&str> = content_lines(text).map(|(_, l)| l).collect();
        if v.last() == Some(&"") {
            v.pop();
        }
        v
    }
    let src_text = read_utf8(source_path)?;
    let tgt_text = read_utf8(target_path)?;
    let s = lines(&src_text);
    let t = lines(&tgt_text);
    if s.len() != t.len() {
        return Err(CorpusError::AlignmentMismatch {
            source_path: source_path.to_path_buf(),
            source_len: s.len(),
            target_path: target_path.to_path_buf(),
            target_len: t.len(),
        });
    }
    let pairs = s
        .into_iter()
        .zip(t)
        .map(|(a, b)| SentencePair::new(a, b, source_tag))
        .collect();
    Ok(BilingualCorpus::new(id, src, tgt).with_pairs(pairs))
}

pub fn concat_bilingual(corpora: &[BilingualCorpus], id: &str) -> Result<BilingualCorpus, CorpusError> {
    let first = corpora.first().ok_or(CorpusError::NoCorpora)?;
    let mut out = BilingualCorpus::new(id, first.source_language.clone(), first.target_language.clone());
    for c in corpora {
        if c.source_language != first.source_language || c.target_language != first.target_language {
            return Err(CorpusError::LanguageMismatch {
                expected: format!("{}>{}", first.source_language, first.target_language),
                found: format!("{}>{}", c.source_language, c.target_language),
            });
        }
        out.pairs.extend(c.pairs.iter().cloned());
    }
    Ok(out)
}

pub const DEFAULT_ALLOWED_PUNCTUATION: &str = ".,;:'\"?!-()";

#[derive(Debug, Clone)]
pub struct CleanRuleSet {
    pub strip_hyperlinks: bool,
    pub strip_special_characters: bool,
    /// Collapses runs of whitespace and trims. Whitespace-only sentences are always dropped.
    pub collapse_whitespace: bool,
    pub drop_code_mixed: bool,
    pub drop_repetitive: bool,
    pub allowed_punctuation: String,
    pub code_mix_threshold: f64,
    word_lists: BTreeMap<LanguageTag, HashSet<String>>,
    word_list_paths: Vec<(LanguageTag, PathBuf)>,
}

impl Default for CleanRuleSet {
    fn default() -> Self {
        Self {
            strip_hyperlinks: true,
            strip_special_characters: true,
            collapse_whitespace: true,
            drop_code_mixed: true,
            drop_repetitive: true,
            allowed_punctuation: DEFAULT_ALLOWED_PUNCTUATION.to_string(),
            code_mix_threshold: 0.3,
            word_lists: BTreeMap::new(),
            word_list_paths: Vec::new(),
        }
    }
}

impl CleanRuleSet {
    pub fn none() -> Self {
        Self {
            strip_hyperlinks: false,
            strip_special_characters: false,
            collapse_whitespace: false,
            drop_code_mixed: false,
            drop_repetitive: false,
            ..Self::default()
        }
    }

    /// Registers words characteristic of `language`. A sentence written in any other language
    /// is code-mixed when enough of its alphabetic tokens are in this list.
    pub fn add_word_list<I, S>(&mut self, language: LanguageTag, words: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set = self.word_lists.entry(language).or_default();
        set.extend(words.into_iter().map(|w| w.as_ref().to_lowercase()));
    }

    /// Loads a word list file (one word per line, or whitespace separated).
    pub fn load_word_list(&mut self, language: LanguageTag, path: &Path) -> Result<(), CorpusError> {
        let text = read_utf8(path)?;
        self.add_word_list(language.clone(), text.split_whitespace());
        self.word_list_paths.push((language, path.to_path_buf()));
        Ok(())
    }

    pub fn word_list_paths(&self) -> &[(LanguageTag, PathBuf)] {
        &self.word_list_paths
    }

    fn any_enabled(&self) -> bool {
        self.strip_hyperlinks
            || self.strip_special_characters
            || self.collapse_whitespace
            || self.drop_code_mixed
            || self.drop_repetitive
    }

    fn is_code_mixed(&self, sentence: &str, language: &LanguageTag) -> bool {
        let foreign: Vec<&HashSet<String>> = self
            .word_lists
            .iter()
            .filter(|(lang, _)| *lang != language)
            .map(|(_, words)| words)
            .collect();
        if foreign.is_empty() {
            return false;
        }
        let tokens: Vec<String> = sentence
            .split_whitespace()
            .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
            .filter(|t| !t.is_empty() && t.chars().all(char::is_alphabetic))
            .map(str::to_lowercase)
            .collect();
        if tokens.is_empty() {
            return false;
        }
        foreign.iter().any(|words| {
            let hits = tokens.iter().filter(|t| words.contains(t.as_str())).count();
            hits as f64 / tokens.len() as f64 >= self.code_mix_threshold
        })
    }
}

/// Per-rule counts produced by [`clean`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CleanReport {
    pub input_size: usize,
    pub output_size: usize,
    pub hyperlinks_modified: usize,
    pub special_characters_modified: usize,
    pub whitespace_modified: usize,
    pub empty_dropped: usize,
    pub code_mixed_dropped: usize,
    pub repetitive_dropped: usize,
}

impl CleanReport {
    pub fn total_dropped(&self) -> usize {
        self.empty_dropped + self.code_mixed_dropped + self.repetitive_dropped
    }

    /// `(rule, dropped, modified)` rows in application order.
    pub fn rows(&self) -> [(&'static str, usize, usize); 6] {
        [
            ("hyperlinks", 0, self.hyperlinks_modified),
            ("special_characters", 0, self.special_characters_modified),
            ("whitespace", 0, self.whitespace_modified),
            ("empty", self.empty_dropped, 0),
            ("code_mixed", self.code_mixed_dropped, 0),
            ("repetitive", self.repetitive_dropped, 0),
        ]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("# input={} output={}\n", self.input_size, self.output_size);
        for (rule, dropped, modified) in self.rows() {
            out.push_str(&format!("{rule}\t{dropped}\t{modified}\n"));
        }
        out
    }
}

fn hyperlink_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(^|\s)(?:[a-z][a-z0-9+.\-]*://|www\.)\S*").unwrap())
}

fn strip_hyperlinks(s: &str) -> String {
    hyperlink_re().replace_all(s, "$1").into_owned()
}

fn strip_special(s: &str, allowed: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace() || allowed.contains(*c))
        .collect()
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Default)]
struct Edits {
    hyperlinks: bool,
    special: bool,
    whitespace: bool,
}

fn normalize(s: &str, rules: &CleanRuleSet) -> (String, Edits) {
    let mut edits = Edits::default();
    let mut cur = s.to_string();
    // Special-character stripping can expose a new link (e.g. "w#ww.x"), so repeat to a fixpoint.
    loop {
        let mut changed = false;
        if rules.strip_hyperlinks {
            let next = strip_hyperlinks(&cur);
            if next != cur {
                edits.hyperlinks = true;
                changed = true;
                cur = next;
            }
        }
        if rules.strip_special_characters {
            let next = strip_special(&cur, &rules.allowed_punctuation);
            if next != cur {
                edits.special = true;
                changed = true;
                cur = next;
            }
        }
        if !changed || !rules.strip_hyperlinks || !rules.strip_special_characters {
            break;
        }
    }
    if rules.collapse_whitespace {
        let next = collapse_ws(&cur);
        if next != cur {
            edits.whitespace = true;
            cur = next;
        }
    }
    (cur, edits)
}

/// Corpus types that [`clean`] knows how to process.
pub trait Cleanable: Sized {
    fn clean_with(&self, rules: &CleanRuleSet) -> (Self, CleanReport);
}

impl Cleanable for MonolingualCorpus {
    fn clean_with(&self, rules: &CleanRuleSet) -> (Self, CleanReport) {
        let mut report = CleanReport {
            input_size: self.len(),
            ..Default::default()
        };
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(self.len());
        for s in &self.sentences {
            let (cleaned, edits) = normalize(s, rules);
            report.hyperlinks_modified += edits.hyperlinks as usize;
            report.special_characters_modified += edits.special as usize;
            report.whitespace_modified += edits.whitespace as usize;
            if cleaned.trim().is_empty() {
                report.empty_dropped += 1;
                continue;
            }
            if rules.drop_code_mixed && rules.is_code_mixed(&cleaned, &self.language) {
                report.code_mixed_dropped += 1;
                continue;
            }
            if rules.drop_repetitive && !seen.insert(cleaned.clone()) {
                report.repetitive_dropped += 1;
                continue;
            }
            out.push(cleaned);
        }
        report.output_size = out.len();
        let corpus = MonolingualCorpus {
            sentences: out,
            ..self.clone()
        };
        (corpus, report)
    }
}

impl Cleanable for BilingualCorpus {
    fn clean_with(&self, rules: &CleanRuleSet) -> (Self, CleanReport) {
        let mut report = CleanReport {
            input_size: self.len(),
            ..Default::default()
        };
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(self.len());
        for p in &self.pairs {
            let (src, es) = normalize(&p.source, rules);
            let (tgt, et) = normalize(&p.target, rules);
            report.hyperlinks_modified += (es.hyperlinks || et.hyperlinks) as usize;
            report.special_characters_modified += (es.special || et.special) as usize;
            report.whitespace_modified += (es.whitespace || et.whitespace) as usize;
            if src.trim().is_empty() || tgt.trim().is_empty() {
                report.empty_dropped += 1;
                continue;
            }
            if rules.drop_code_mixed
                && (rules.is_code_mixed(&src, &self.source_language)
                    || rules.is_code_mixed(&tgt, &self.target_language))
            {
                report.code_mixed_dropped += 1;
                continue;
            }
            if rules.drop_repetitive && !seen.insert((src.clone(), tgt.clone())) {
                report.repetitive_dropped += 1;
                continue;
            }
            out.push(SentencePair::new(src, tgt, p.source_tag.clone()));
        }
        report.output_size = out.len();
        let corpus = BilingualCorpus {
            pairs: out,
            ..self.clone()
        };
        (corpus, report)
    }
}

/// Applies `rules` in fixed order: hyperlinks, special characters, whitespace, empty,
/// code-mixed, exact duplicates (first occurrence kept). For bilingual input a drop removes the pair.
pub fn clean<C: Cleanable>(corpus: &C, rules: &CleanRuleSet) -> Result<(C, CleanReport), CorpusError> {
    if !rules.any_enabled() {
        return Err(CorpusError::NoRulesEnabled);
    }
    Ok(corpus.clean_with(rules))
}

/// Removes every pair whose `source_tag` is in `exclude_tags`, preserving order.
pub fn filter_by_source(corpus: &BilingualCorpus, exclude_tags: &BTreeSet<String>) -> BilingualCorpus {
    let pairs: Vec<SentencePair> = corpus
        .pairs
        .iter()
        .filter(|p| !exclude_tags.contains(&p.source_tag))
        .cloned()
        .collect();
    if pairs.is_empty() && !corpus.is_empty() {
        log::warn!("filtering {} by {:?} removed every pair", corpus.id, exclude_tags);
    }
    BilingualCorpus {
        pairs,
        ..corpus.clone()
    }
}

/// Seeded permutation of `0..len`; depends only on `(seed, len)`.
pub fn permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

pub fn shuffle(corpus: &BilingualCorpus, seed: u64) -> BilingualCorpus {
    let pairs = permutation(corpus.len(), seed)
        .into_iter()
        .map(|i| corpus.pairs[i].clone())
        .collect();
    BilingualCorpus {
        pairs,
        ..corpus.clone()
    }
}

pub fn shuffle_monolingual(corpus: &MonolingualCorpus, seed: u64) -> MonolingualCorpus {
    let sentences = permutation(corpus.len(), seed)
        .into_iter()
        .map(|i| corpus.sentences[i].clone())
        .collect();
    MonolingualCorpus {
        sentences,
        ..corpus.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, valid: f64, test: f64) -> Result<Self, CorpusError> {
        let r = Self { train, valid, test };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let all_positive = [self.train, self.valid, self.test]
            .iter()
            .all(|r| r.is_finite() && *r > 0.0);
        if !all_positive || (self.train + self.valid + self.test - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidRatios((self.train, self.valid, self.test)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitVariant {
    /// Validation and test drawn from the bilingual corpus itself.
    Default,
    /// Validation and test expanded with out-of-corpus pairs.
    NewTest,
}

impl SplitVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitVariant::Default => "default",
            SplitVariant::NewTest => "newtest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train: BilingualCorpus,
    pub valid: BilingualCorpus,
    pub test: BilingualCorpus,
    pub split_seed: u64,
    pub variant: SplitVariant,
}

impl DataSplit {
    /// The same split in the opposite translation direction.
    pub fn swapped(&self) -> Self {
        Self {
            train: self.train.swapped(),
            valid: self.valid.swapped(),
            test: self.test.swapped(),
            split_seed: self.split_seed,
            variant: self.variant,
        }
    }

    pub fn test_fingerprint(&self) -> String {
        self.test.fingerprint()
    }
}

/// Shuffles by `seed`, then partitions contiguously. Validation and test receive
/// `floor(ratio * n)` pairs each; the remainder goes to train.
pub fn make_splits(corpus: &BilingualCorpus, ratios: SplitRatios, seed: u64) -> Result<DataSplit, CorpusError> {
    ratios.validate()?;
    let n = corpus.len();
    if n < 3 {
        return Err(CorpusError::TooSmallToSplit(n));
    }
    let count = |r: f64| (r * n as f64 + 1e-9).floor() as usize;
    let n_valid = count(ratios.valid);
    let n_test = count(ratios.test);
    let n_train = n - n_valid - n_test;

    let shuffled = shuffle(corpus, seed);
    let mut pairs = shuffled.pairs.into_iter();
    let mut part = |suffix: &str, k: usize| {
        BilingualCorpus::new(
            format!("{}.{suffix}", corpus.id),
            corpus.source_language.clone(),
            corpus.target_language.clone(),
        )
        .with_pairs(pairs.by_ref().take(k).collect())
    };
    let train = part("train", n_train);
    let valid = part("valid", n_valid);
    let test = part("test", n_test);
    Ok(DataSplit {
        train,
        valid,
        test,
        split_seed: seed,
        variant: SplitVariant::Default,
    })
}

/// Appends `extra` to the evaluation sets: the first half to validation, the rest to test.
pub fn expand_eval_sets(split: &DataSplit, extra: &BilingualCorpus) -> Result<DataSplit, CorpusError> {
    if extra.source_language != split.train.source_language || extra.target_language != split.train.target_language {
        return Err(CorpusError::LanguageMismatch {
            expected: format!("{}>{}", split.train.source_language, split.train.target_language),
            found: format!("{}>{}", extra.source_language, extra.target_language),
        });
    }
    let train_keys: HashSet<(&str, &str)> = split.train.pairs.iter().map(SentencePair::key).collect();
    let overlap: Vec<(String, String)> = extra
        .pairs
        .iter()
        .filter(|p| train_keys.contains(&p.key()))
        .map(|p| (p.source.clone(), p.target.clone()))
        .collect();
    if !overlap.is_empty() {
        return Err(CorpusError::TrainOverlap(overlap));
    }
    let half = extra.len() / 2;
    let mut out = split.clone();
    out.valid.pairs.extend(extra.pairs[..half].iter().cloned());
    out.test.pairs.extend(extra.pairs[half..].iter().cloned());
    out.variant = SplitVariant::NewTest;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManifestLanguage {
    Monolingual(LanguageTag),
    Bilingual(LanguageTag, LanguageTag),
}

/// One `id <TAB> language <TAB> source_tag <TAB> path` record. Bilingual entries
/// write the language column as `src>tgt` and point at a two-column TSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub language: ManifestLanguage,
    pub source_tag: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Relative paths are resolved against the manifest's directory. `#` starts a comment line.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = read_utf8(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut entries = Vec::new();
        let mut ids = HashSet::new();
        for (line_no, line) in content_lines(&text) {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| CorpusError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(parse_err(format!("expected 4 columns, found {}", cols.len())));
            }
            let language = match cols[1].split_once('>') {
                Some((s, t)) => ManifestLanguage::Bilingual(LanguageTag::new(s)?, LanguageTag::new(t)?),
                None => ManifestLanguage::Monolingual(LanguageTag::new(cols[1])?),
            };
            if !ids.insert(cols[0].to_string()) {
                return Err(parse_err(format!("duplicate id {}", cols[0])));
            }
            let p = Path::new(cols[3]);
            let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                language,
                source_tag: cols[2].to_string(),
                path: p,
            });
        }
        Ok(Self { entries })
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn monolingual(&self, language: &LanguageTag) -> impl Iterator<Item = &ManifestEntry> + '_ {
        let language = language.clone();
        self.entries
            .iter()
            .filter(move |e| e.language == ManifestLanguage::Monolingual(language.clone()))
    }

    pub fn bilingual(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| matches!(e.language, ManifestLanguage::Bilingual(..)))
    }

    pub fn write(&self, out: &mut impl Write) -> std::io::Result<()> {
        for e in &self.entries {
            let lang = match &e.language {
                ManifestLanguage::Monolingual(l) => l.to_string(),
                ManifestLanguage::Bilingual(s, t) => format!("{s}>{t}"),
            };
            writeln!(out, "{}\t{}\t{}\t{}", e.id, lang, e.source_tag, e.path.display())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tag(s: &str) -> LanguageTag {
        LanguageTag::new(s).unwrap()
    }

    fn mono(sentences: &[&str]) -> MonolingualCorpus {
        MonolingualCorpus::new("m", tag("en"), "t", sentences.iter().map(|s| s.to_string()).collect())
    }

    fn bi(n: usize, tag_name: &str) -> BilingualCorpus {
        BilingualCorpus::new("b", tag("en"), tag("lg")).with_pairs(
            (0..n)
                .map(|i| SentencePair::new(format!("s{i}"), format!("t{i}"), tag_name))
                .collect(),
        )
    }

    #[test]
    fn loads_monolingual_in_order_skipping_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        fs::write(&p, "one\ntwo\nthree\n").unwrap();
        let c = load_monolingual(&p, tag("en"), "m", "x").unwrap();
        assert_eq!(c.sentences, ["one", "two", "three"]);

        fs::write(&p, "one\n\ntwo\n").unwrap();
        let c = load_monolingual(&p, tag("en"), "m", "x").unwrap();
        assert_eq!(c.sentences, ["one", "two"]);
    }

    #[test]
    fn reports_invalid_utf8_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        fs::write(&p, b"ok line\nab\xffcd\n").unwrap();
        match load_monolingual(&p, tag("en"), "m", "x") {
            Err(CorpusError::Encoding { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let r = load_monolingual(Path::new("/nonexistent/x.txt"), tag("en"), "m", "x");
        assert!(matches!(r, Err(CorpusError::Io { .. })));
    }

    #[test]
    fn loads_tsv_and_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.tsv");
        fs::write(&p, "hello\tnkulamusizza\nthanks\twebale\n").unwrap();
        let c = load_bilingual(&p, tag("en"), tag("lg"), "b", "news").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.pairs[1], SentencePair::new("thanks", "webale", "news"));

        fs::write(&p, "hello\tnkulamusizza\nbroken row\n").unwrap();
        assert!(matches!(
            load_bilingual(&p, tag("en"), tag("lg"), "b", "news"),
            Err(CorpusError::ColumnCount { line: 2, found: 1, .. })
        ));
    }

    #[test]
    fn aligned_files_must_match_in_length() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("a.src");
        let t = dir.path().join("a.tgt");
        fs::write(&s, "1\n2\n3\n4\n5\n").unwrap();
        fs::write(&t, "1\n2\n3\n4\n").unwrap();
        assert!(matches!(
            load_bilingual_aligned(&s, &t, tag("en"), tag("lg"), "a", "x"),
            Err(CorpusError::AlignmentMismatch {
                source_len: 5,
                target_len: 4,
                ..
            })
        ));
        fs::write(&t, "a\nb\nc\nd\ne\n").unwrap();
        let c = load_bilingual_aligned(&s, &t, tag("en"), tag("lg"), "a", "x").unwrap();
        assert_eq!(c.pairs[4].target, "e");
    }

    #[test]
    fn concat_preserves_order_and_tags() {
        let a = bi(2, "a");
        let mut b = bi(3, "b");
        b.id = "other".into();
        let c = concat_bilingual(&[a.clone(), b], "all").unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(c.pairs[0].source_tag, "a");
        assert_eq!(c.pairs[4].source_tag, "b");
        let only = concat_bilingual(std::slice::from_ref(&a), "b").unwrap();
        assert_eq!(only.pairs, a.pairs);

        let mut wrong = bi(1, "c");
        wrong.target_language = tag("sw");
        assert!(matches!(
            concat_bilingual(&[a, wrong], "x"),
            Err(CorpusError::LanguageMismatch { .. })
        ));
    }

    #[test]
    fn concat_of_table_one_sizes() {
        let sizes = [41070, 15022, 10000, 32291];
        let parts: Vec<BilingualCorpus> = sizes.iter().map(|&n| bi(n, "x")).collect();
        assert_eq!(concat_bilingual(&parts, "all").unwrap().len(), 98383);
    }

    #[test]
    fn strips_links_and_dedups() {
        let rules = CleanRuleSet::default();
        let (c, report) = clean(&mono(&["Visit https://example.com now"]), &rules).unwrap();
        assert_eq!(c.sentences, ["Visit now"]);
        assert_eq!(report.hyperlinks_modified, 1);

        let (c, _) = clean(&mono(&["see www.site.org/x?y=1 today"]), &rules).unwrap();
        assert_eq!(c.sentences, ["see today"]);

        let (c, report) = clean(&mono(&["abc", "abc", "def"]), &rules).unwrap();
        assert_eq!(c.sentences, ["abc", "def"]);
        assert_eq!(report.repetitive_dropped, 1);
        assert_eq!(report.input_size, report.output_size + report.total_dropped());
    }

    #[test]
    fn strips_special_characters_and_whitespace() {
        let (c, report) = clean(
            &mono(&["Hello   #world* (ok)!  ", "   ", "@@@"]),
            &CleanRuleSet::default(),
        )
        .unwrap();
        assert_eq!(c.sentences, ["Hello world (ok)!"]);
        assert_eq!(report.empty_dropped, 2);
    }

    #[test]
    fn link_exposed_by_special_character_removal_is_removed() {
        let rules = CleanRuleSet::default();
        let (once, _) = clean(&mono(&["go w#ww.x.com now"]), &rules).unwrap();
        let (twice, _) = clean(&once, &rules).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.sentences, ["go now"]);
    }

    #[test]
    fn clean_requires_a_rule() {
        assert!(matches!(
            clean(&mono(&["a"]), &CleanRuleSet::none()),
            Err(CorpusError::NoRulesEnabled)
        ));
    }

    #[test]
    fn code_mix_threshold_boundary_by_enumeration() {
        let mut rules = CleanRuleSet::default();
        rules.add_word_list(tag("lg"), ["omusajja", "ekitabo"]);
        // For every sentence length and foreign-token count, the drop decision must
        // equal the exact rational test 10*k >= 3*n.
        for n in 1..=20usize {
            for k in 0..=n {
                let words: Vec<&str> = (0..n).map(|i| if i < k { "omusajja" } else { "house" }).collect();
                let sentence = words.join(" ");
                let (c, report) = clean(&mono(&[&sentence]), &rules).unwrap();
                let expect_drop = 10 * k >= 3 * n;
                assert_eq!(c.is_empty(), expect_drop, "n={n} k={k}");
                assert_eq!(report.code_mixed_dropped, expect_drop as usize);
            }
        }
    }

    #[test]
    fn code_mix_ignores_own_language_list() {
        let mut rules = CleanRuleSet::default();
        rules.add_word_list(tag("en"), ["house"]);
        let (c, _) = clean(&mono(&["house house"]), &rules).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn bilingual_drop_removes_whole_pair() {
        let c = BilingualCorpus::new("b", tag("en"), tag("lg")).with_pairs(vec![
            SentencePair::new("hello", "@@", "x"),
            SentencePair::new("a", "b", "x"),
            SentencePair::new("a", "b", "y"),
            SentencePair::new("a", "c", "x"),
        ]);
        let (out, report) = clean(&c, &CleanRuleSet::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.pairs[0].source_tag, "x");
        assert_eq!(report.empty_dropped, 1);
        assert_eq!(report.repetitive_dropped, 1);
    }

    #[test]
    fn clean_report_tsv() {
        let (_, report) = clean(&mono(&["a", "a"]), &CleanRuleSet::default()).unwrap();
        let tsv = report.to_tsv();
        assert!(tsv.contains("repetitive\t1\t0\n"));
        assert_eq!(tsv.lines().count(), 7);
    }

    #[test]
    fn filter_by_source_cases() {
        let mut c = bi(3, "bible");
        c.pairs.extend(bi(2, "news").pairs);
        let ex: BTreeSet<String> = ["bible".to_string()].into();
        let f = filter_by_source(&c, &ex);
        assert_eq!(f.len(), 2);
        assert!(f.pairs.iter().all(|p| p.source_tag == "news"));
        assert_eq!(filter_by_source(&c, &BTreeSet::new()), c);
        let all: BTreeSet<String> = ["bible".to_string(), "news".to_string()].into();
        assert!(filter_by_source(&c, &all).is_empty());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = bi(10, "x");
        let ratios = SplitRatios::default();
        let s = make_splits(&c, ratios, 7).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, make_splits(&c, ratios, 7).unwrap());

        let big = bi(100, "x");
        let a = make_splits(&big, ratios, 1).unwrap();
        let b = make_splits(&big, ratios, 2).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        assert_ne!(a.train.pairs, b.train.pairs);

        assert!(matches!(
            make_splits(&bi(2, "x"), ratios, 1),
            Err(CorpusError::TooSmallToSplit(2))
        ));
        assert!(SplitRatios::new(0.8, 0.1, 0.2).is_err());
        assert!(SplitRatios::new(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn split_counts_survive_float_rounding() {
        let s = make_splits(&bi(600, "x"), SplitRatios::new(0.5, 1.0 / 6.0, 1.0 / 3.0).unwrap(), 3).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (300, 100, 200));
    }

    #[test]
    fn expand_eval_sets_cases() {
        let split = make_splits(&bi(20, "x"), SplitRatios::default(), 1).unwrap();
        let extra = |n: usize| {
            BilingualCorpus::new("extra", tag("en"), tag("lg")).with_pairs(
                (0..n)
                    .map(|i| SentencePair::new(format!("news{i}"), format!("amawulire{i}"), "news"))
                    .collect(),
            )
        };
        let e = expand_eval_sets(&split, &extra(100)).unwrap();
        assert_eq!(e.valid.len(), split.valid.len() + 50);
        assert_eq!(e.test.len(), split.test.len() + 50);
        assert_eq!(e.train, split.train);
        assert_eq!(e.variant, SplitVariant::NewTest);

        let e = expand_eval_sets(&split, &extra(1)).unwrap();
        assert_eq!(e.valid.len(), split.valid.len());
        assert_eq!(e.test.len(), split.test.len() + 1);

        let mut bad = extra(2);
        bad.pairs.push(split.train.pairs[0].clone());
        match expand_eval_sets(&split, &bad) {
            Err(CorpusError::TrainOverlap(v)) => assert_eq!(v.len(), 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shuffle_small_cases() {
        let one = bi(1, "x");
        assert_eq!(shuffle(&one, 99), one);
        let c = bi(30, "x");
        assert_eq!(shuffle(&c, 5), shuffle(&c, 5));
    }

    #[test]
    fn tagged_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        let c = bi(4, "bible");
        c.save_tagged(&p, &[("generator", "m1".into())]).unwrap();
        assert_eq!(BilingualCorpus::load_tagged(&p).unwrap(), c);
        // The two-column loader skips provenance lines but rejects the tag column.
        assert!(load_bilingual(&p, tag("en"), tag("lg"), "x", "y").is_err());
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.tsv");
        fs::write(&p, "# pool\nbi1\ten>lg\tnews\tbi.tsv\nm1\tlg\tradio\tm1.txt\n").unwrap();
        let m = Manifest::load(&p).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.bilingual().count(), 1);
        assert_eq!(
            m.monolingual(&tag("lg")).next().unwrap().path,
            dir.path().join("m1.txt")
        );
        fs::write(&p, "a\ten\tx\n").unwrap();
        assert!(Manifest::load(&p).is_err());
    }

    fn arb_corpus() -> impl Strategy<Value = BilingualCorpus> {
        prop::collection::vec(("[a-c ]{0,6}", "[a-c ]{0,6}", "[xy]"), 0..40).prop_map(|v| {
            BilingualCorpus::new("p", tag("en"), tag("lg"))
                .with_pairs(v.into_iter().map(|(s, t, g)| SentencePair::new(s, t, g)).collect())
        })
    }

    fn sorted(c: &BilingualCorpus) -> Vec<SentencePair> {
        let mut v = c.pairs.clone();
        v.sort();
        v
    }

    proptest! {
        #[test]
        fn shuffle_preserves_pair_multiset(c in arb_corpus(), seed in any::<u64>()) {
            prop_assert_eq!(sorted(&shuffle(&c, seed)), sorted(&c));
        }

        #[test]
        fn splits_partition_the_input(c in arb_corpus(), seed in any::<u64>()) {
            prop_assume!(c.len() >= 3);
            let s = make_splits(&c, SplitRatios::default(), seed).unwrap();
            let joined = concat_bilingual(&[s.train, s.valid, s.test], "j").unwrap();
            prop_assert_eq!(sorted(&joined), sorted(&c));
        }

        #[test]
        fn cleaning_is_idempotent(
            lines in prop::collection::vec("[a-z #@.:/w]{0,20}", 0..20),
            links in any::<bool>(),
            special in any::<bool>(),
            ws in any::<bool>(),
            dedup in any::<bool>(),
        ) {
            let mut rules = CleanRuleSet {
                strip_hyperlinks: links,
                strip_special_characters: special,
                collapse_whitespace: ws,
                drop_repetitive: dedup,
                ..CleanRuleSet::default()
            };
            rules.add_word_list(tag("lg"), ["ab", "cd"]);
            let c = MonolingualCorpus::new("m", tag("en"), "t", lines);
            let (once, _) = clean(&c, &rules).unwrap();
            let (twice, _) = clean(&once, &rules).unwrap();
            prop_assert_eq!(&once, &twice);
            if dedup {
                let unique: HashSet<&String> = once.sentences.iter().collect();
                prop_assert_eq!(unique.len(), once.len());
            }
        }
    }
}
