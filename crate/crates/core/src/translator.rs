//! The train/translate contract consumed by the back-translation strategies, and a
//! built-in reference model: an EM-trained subword lexical table plus a smoothed
//! target bigram language model, decoded monotonically with beam search.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{BilingualCorpus, LanguageTag};
use crate::hash::sha256_hex;
use crate::subword::{apply_bpe, decode_bpe, BpeError, BpeModel, TokenSeq};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MODEL_HEADER: &str = "#backtrans-model";

/// Probability floor for target tokens the lexical table has never paired with a source.
const LEXICAL_FLOOR: f64 = 1e-10;
/// Lexical score of copying an unknown source token through.
const PASS_THROUGH_PROB: f64 = 1e-6;
const PRUNE_BELOW: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum TranslatorError {
    #[error("training corpus is empty")]
    EmptyTrainingCorpus,
    #[error("model was trained with BPE {model} but {given} was supplied")]
    FingerprintMismatch { model: String, given: String },
    #[error("expected {expected} input, got {found}")]
    LanguageMismatch { expected: String, found: String },
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt model file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("model file {path} has format version {found}, this build reads {MODEL_FORMAT_VERSION}")]
    UnsupportedFormat { path: PathBuf, found: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Pairs per expected-count batch.
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Stop once the relative training log-likelihood gain of an epoch falls below this.
    pub em_tolerance: f64,
    /// Additive smoothing constant of the target bigram model.
    pub lm_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            patience: 40,
            max_epochs: 30,
            seed: 0,
            em_tolerance: 1e-6,
            lm_smoothing: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Output is capped at `ceil(factor * input tokens)`.
    pub max_output_length_factor: f64,
    /// Target candidates considered per source token, best lexical probability first.
    pub candidates_per_token: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 5,
            max_output_length_factor: 1.5,
            candidates_per_token: 8,
        }
    }
}

/// Hyperparameters for an external neural translator. Recorded and passed through only.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalModelSpec {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub dropout: f64,
}

impl Default for ExternalModelSpec {
    fn default() -> Self {
        Self {
            layers: 6,
            d_model: 512,
            d_ff: 2048,
            heads: 8,
            d_k: 64,
            d_v: 64,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Direction {
    pub source: LanguageTag,
    pub target: LanguageTag,
}

impl Direction {
    pub fn new(source: LanguageTag, target: LanguageTag) -> Self {
        Self { source, target }
    }

    pub fn reversed(&self) -> Self {
        Self::new(self.target.clone(), self.source.clone())
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.source, self.target)
    }
}

/// What every back-translation strategy needs from a trained model.
pub trait Translator: Send + Sync {
    fn direction(&self) -> &Direction;
    fn bpe_fingerprint(&self) -> &str;
    fn translate(
        &self,
        sentences: &[String],
        beam: &BeamConfig,
        bpe: &BpeModel,
    ) -> Result<Vec<String>, TranslatorError>;
}

/// Produces [`Translator`]s from parallel data. An external adapter implements this to
/// swap in a different model family.
pub trait Trainer: Sync {
    type Model: Translator + Clone;

    fn train(
        &self,
        pairs: &BilingualCorpus,
        valid: &BilingualCorpus,
        bpe: &BpeModel,
        config: &TrainConfig,
    ) -> Result<Self::Model, TranslatorError>;
}

/// Trains the built-in [`TranslatorModel`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalTrainer;

impl Trainer for LexicalTrainer {
    type Model = TranslatorModel;

    fn train(
        &self,
        pairs: &BilingualCorpus,
        valid: &BilingualCorpus,
        bpe: &BpeModel,
        config: &TrainConfig,
    ) -> Result<TranslatorModel, TranslatorError> {
        train(pairs, valid, bpe, config)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Training log-likelihood of the parameters this epoch started from.
    pub train_log_likelihood: f64,
    /// Validation score after this epoch's update.
    pub valid_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_valid_score: f64,
    pub seed: u64,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
struct LexRow {
    targets: Vec<u32>,
    probs: Vec<f64>,
}

/// Additive-smoothed bigram counts over target tokens. Index `n` (the vocabulary size)
/// stands for the sentence start as a history and the sentence end as a prediction.
#[derive(Debug, Clone, PartialEq)]
struct BigramLm {
    smoothing: f64,
    counts: Vec<HashMap<u32, u64>>,
    totals: Vec<u64>,
    outcomes: usize,
}

impl BigramLm {
    fn new(vocab: usize, smoothing: f64) -> Self {
        Self {
            smoothing,
            counts: vec![HashMap::new(); vocab + 1],
            totals: vec![0; vocab + 1],
            outcomes: vocab + 1,
        }
    }

    fn boundary(&self) -> u32 {
        (self.counts.len() - 1) as u32
    }

    fn add(&mut self, prev: u32, next: u32, c: u64) {
        *self.counts[prev as usize].entry(next).or_default() += c;
        self.totals[prev as usize] += c;
    }

    fn log_prob(&self, prev: Option<u32>, next: Option<u32>) -> f64 {
        let a = self.smoothing;
        let v = self.outcomes as f64;
        let (c, total) = match prev {
            Some(p) => (
                next.and_then(|n| self.counts[p as usize].get(&n).copied()).unwrap_or(0),
                self.totals[p as usize],
            ),
            None => (0, 0),
        };
        if a <= 0.0 && total > 0 {
            return (c as f64 / total as f64).ln();
        }
        if total == 0 && a <= 0.0 {
            return (1.0 / v).ln();
        }
        ((c as f64 + a) / (total as f64 + a * v)).ln()
    }
}

/// The reference translator: `p(target subword | source subword)` plus a target bigram model.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorModel {
    direction: Direction,
    src_vocab: Vec<String>,
    src_index: HashMap<String, u32>,
    tgt_vocab: Vec<String>,
    tgt_index: HashMap<String, u32>,
    lexical: Vec<LexRow>,
    lm: BigramLm,
    bpe_fingerprint: String,
    pub meta: TrainingMeta,
}

fn index_of(vocab: &[String]) -> HashMap<String, u32> {
    vocab.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect()
}

struct EncodedPair {
    src: Vec<u32>,
    tgt: Vec<u32>,
}

/// Flat sparse table: row `s` owns `targets[offsets[s]..offsets[s + 1]]`.
struct Support {
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl Support {
    fn slot(&self, s: u32, t: u32) -> Option<usize> {
        let (lo, hi) = (self.offsets[s as usize], self.offsets[s as usize + 1]);
        self.targets[lo..hi].binary_search(&t).ok().map(|i| lo + i)
    }
}

fn segment_pairs(corpus: &BilingualCorpus, bpe: &BpeModel) -> Vec<(Vec<String>, Vec<String>)> {
    corpus
        .pairs
        .par_iter()
        .map(|p| (apply_bpe(bpe, &p.source).tokens, apply_bpe(bpe, &p.target).tokens))
        .filter(|(s, t)| !s.is_empty() && !t.is_empty())
        .collect()
}

/// Log-likelihood of `pairs` under `probs`, using the uniform alignment prior.
fn pair_log_likelihood(pairs: &[EncodedPair], support: &Support, probs: &[f64]) -> (f64, usize) {
    let mut ll = 0.0;
    let mut tokens = 0;
    for p in pairs {
        let l = p.src.len() as f64;
        for &t in &p.tgt {
            let mass: f64 = p.src.iter().filter_map(|&s| support.slot(s, t)).map(|i| probs[i]).sum();
            ll += (mass / l).max(LEXICAL_FLOOR).ln();
            tokens += 1;
        }
    }
    (ll, tokens)
}

/// Trains the lexical table by IBM-Model-1 style EM over subword pairs and fits the
/// target bigram model on the training target side.
///
/// Expected counts are accumulated batch by batch and merged in batch order, followed by
/// one M-step per epoch, so training log-likelihood never decreases. Pairs are put in a
/// canonical order first, which makes the model a function of the pair multiset.
/// The returned snapshot is the epoch with the best validation score (mean per-token
/// log-likelihood of the validation targets).
pub fn train(
    pairs: &BilingualCorpus,
    valid: &BilingualCorpus,
    bpe: &BpeModel,
    config: &TrainConfig,
) -> Result<TranslatorModel, TranslatorError> {
    let mut segmented = segment_pairs(pairs, bpe);
    if segmented.is_empty() {
        return Err(TranslatorError::EmptyTrainingCorpus);
    }
    segmented.sort_unstable();

    let src_vocab: Vec<String> = segmented
        .iter()
        .flat_map(|(s, _)| s.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let tgt_vocab: Vec<String> = segmented
        .iter()
        .flat_map(|(_, t)| t.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let src_index = index_of(&src_vocab);
    let tgt_index = index_of(&tgt_vocab);

    let encoded: Vec<EncodedPair> = segmented
        .iter()
        .map(|(s, t)| EncodedPair {
            src: s.iter().map(|x| src_index[x]).collect(),
            tgt: t.iter().map(|x| tgt_index[x]).collect(),
        })
        .collect();

    let mut rows: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); src_vocab.len()];
    for p in &encoded {
        for &s in &p.src {
            rows[s as usize].extend(p.tgt.iter().copied());
        }
    }
    let mut offsets = Vec::with_capacity(rows.len() + 1);
    let mut targets = Vec::new();
    offsets.push(0);
    for r in &rows {
        targets.extend(r.iter().copied());
        offsets.push(targets.len());
    }
    drop(rows);
    let support = Support { offsets, targets };

    let valid_encoded: Vec<EncodedPair> = segment_pairs(valid, bpe)
        .into_iter()
        .filter_map(|(s, t)| {
            let src: Vec<u32> = s.iter().filter_map(|x| src_index.get(x).copied()).collect();
            let tgt: Vec<u32> = t
                .iter()
                .map(|x| tgt_index.get(x).copied().unwrap_or(u32::MAX))
                .collect();
            (!src.is_empty()).then_some(EncodedPair { src, tgt })
        })
        .collect();
    let use_train_for_valid = valid_encoded.is_empty();
    if use_train_for_valid {
        log::warn!(
            "validation corpus {} is empty after segmentation; early stopping uses training likelihood",
            valid.id
        );
    }

    let mut probs = vec![1.0 / tgt_vocab.len() as f64; support.targets.len()];
    let batch_size = config.batch_size.max(1);
    let mut best_probs = probs.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut prev_ll: Option<f64> = None;
    let mut log = Vec::new();

    for epoch in 1..=config.max_epochs.max(1) {
        let partials: Vec<(Vec<f64>, f64)> = encoded
            .par_chunks(batch_size)
            .map(|batch| {
                let mut counts = vec![0.0; support.targets.len()];
                let mut ll = 0.0;
                let mut slots = Vec::new();
                for p in batch {
                    let l = p.src.len() as f64;
                    for &t in &p.tgt {
                        slots.clear();
                        slots.extend(p.src.iter().filter_map(|&s| support.slot(s, t)));
                        let mass: f64 = slots.iter().map(|&i| probs[i]).sum();
                        ll += (mass / l).ln();
                        for &i in &slots {
                            counts[i] += probs[i] / mass;
                        }
                    }
                }
                (counts, ll)
            })
            .collect();
        let mut counts = vec![0.0; support.targets.len()];
        let mut train_ll = 0.0;
        for (c, ll) in partials {
            for (acc, x) in counts.iter_mut().zip(c) {
                *acc += x;
            }
            train_ll += ll;
        }
        for s in 0..src_vocab.len() {
            let range = support.offsets[s]..support.offsets[s + 1];
            let total: f64 = counts[range.clone()].iter().sum();
            for i in range {
                probs[i] = counts[i] / total;
            }
        }

        let valid_score = if use_train_for_valid {
            let (ll, n) = pair_log_likelihood(&encoded, &support, &probs);
            ll / n as f64
        } else {
            let (ll, n) = pair_log_likelihood(&valid_encoded, &support, &probs);
            ll / n.max(1) as f64
        };
        log.push(EpochLog {
            epoch,
            train_log_likelihood: train_ll,
            valid_score,
        });
        if valid_score > best_score {
            best_score = valid_score;
            best_probs.clone_from(&probs);
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        let converged =
            prev_ll.is_some_and(|p: f64| ((train_ll - p) / p.abs().max(f64::MIN_POSITIVE)) < config.em_tolerance);
        prev_ll = Some(train_ll);
        if since_best >= config.patience.max(1) || converged {
            break;
        }
    }

    let lexical: Vec<LexRow> = (0..src_vocab.len())
        .map(|s| {
            let range = support.offsets[s]..support.offsets[s + 1];
            let kept: Vec<(u32, f64)> = range
                .map(|i| (support.targets[i], best_probs[i]))
                .filter(|&(_, p)| p >= PRUNE_BELOW)
                .collect();
            let total: f64 = kept.iter().map(|(_, p)| p).sum();
            LexRow {
                targets: kept.iter().map(|&(t, _)| t).collect(),
                probs: kept.iter().map(|&(_, p)| p / total).collect(),
            }
        })
        .collect();

    let mut lm = BigramLm::new(tgt_vocab.len(), config.lm_smoothing);
    let boundary = lm.boundary();
    for p in &encoded {
        let mut prev = boundary;
        for &t in &p.tgt {
            lm.add(prev, t, 1);
            prev = t;
        }
        lm.add(prev, boundary, 1);
    }

    Ok(TranslatorModel {
        direction: Direction::new(pairs.source_language.clone(), pairs.target_language.clone()),
        src_vocab,
        src_index,
        tgt_vocab,
        tgt_index,
        lexical,
        lm,
        bpe_fingerprint: bpe.fingerprint().to_string(),
        meta: TrainingMeta {
            epochs_run: log.len(),
            best_epoch,
            final_valid_score: best_score,
            seed: config.seed,
            log,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Tok {
    Known(u32),
    Unknown(String),
}

#[derive(Debug, Clone)]
struct Hyp {
    score: f64,
    tokens: Vec<Tok>,
}

fn better(a: &Hyp, b: &Hyp) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

impl TranslatorModel {
    pub fn direction(&self) -> &Direction {
        &self.direction
    }

    pub fn bpe_fingerprint(&self) -> &str {
        &self.bpe_fingerprint
    }

    /// `p(target | source)` for two subword tokens; 0 when never paired.
    pub fn lexical_prob(&self, source: &str, target: &str) -> f64 {
        let (Some(&s), Some(&t)) = (self.src_index.get(source), self.tgt_index.get(target)) else {
            return 0.0;
        };
        let row = &self.lexical[s as usize];
        row.targets.binary_search(&t).map(|i| row.probs[i]).unwrap_or(0.0)
    }

    /// The lexical distribution of a source token, most probable first.
    pub fn lexical_row(&self, source: &str) -> Option<Vec<(&str, f64)>> {
        let &s = self.src_index.get(source)?;
        let row = &self.lexical[s as usize];
        let mut v: Vec<(&str, f64)> = row
            .targets
            .iter()
            .zip(&row.probs)
            .map(|(&t, &p)| (self.tgt_vocab[t as usize].as_str(), p))
            .collect();
        v.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(b.0))
        });
        Some(v)
    }

    pub fn source_vocab(&self) -> &[String] {
        &self.src_vocab
    }

    pub fn target_vocab(&self) -> &[String] {
        &self.tgt_vocab
    }

    fn tok_id(&self, t: &Tok) -> Option<u32> {
        match t {
            Tok::Known(id) => Some(*id),
            Tok::Unknown(_) => None,
        }
    }

    fn lm_step(&self, prev: Option<&Tok>, next: Option<&Tok>) -> f64 {
        let boundary = self.lm.boundary();
        let p = match prev {
            None => Some(boundary),
            Some(t) => self.tok_id(t),
        };
        let n = match next {
            None => Some(boundary),
            Some(t) => self.tok_id(t),
        };
        self.lm.log_prob(p, n)
    }

    fn candidates(&self, source: &str, k: usize) -> Vec<(Tok, f64)> {
        match self.src_index.get(source) {
            Some(&s) => {
                let row = &self.lexical[s as usize];
                let mut c: Vec<(Tok, f64)> = row
                    .targets
                    .iter()
                    .zip(&row.probs)
                    .map(|(&t, &p)| (Tok::Known(t), p.ln()))
                    .collect();
                c.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1)
                        .unwrap_or(Ordering::Equal)
                        .then_with(|| a.0.cmp(&b.0))
                });
                c.truncate(k.max(1));
                c
            }
            None => {
                let tok = match self.tgt_index.get(source) {
                    Some(&t) => Tok::Known(t),
                    None => Tok::Unknown(source.to_string()),
                };
                vec![(tok, PASS_THROUGH_PROB.ln())]
            }
        }
    }

    fn lattice(&self, source: &TokenSeq, beam: &BeamConfig) -> Vec<Vec<(Tok, f64)>> {
        let cap = (beam.max_output_length_factor * source.len() as f64).ceil().max(0.0) as usize;
        source
            .tokens
            .iter()
            .take(cap)
            .map(|s| self.candidates(s, beam.candidates_per_token))
            .collect()
    }

    fn beam_search(&self, lattice: &[Vec<(Tok, f64)>], width: usize) -> Hyp {
        let mut beam = vec![Hyp {
            score: 0.0,
            tokens: Vec::new(),
        }];
        for options in lattice {
            let mut best_by_state: HashMap<&Tok, Hyp> = HashMap::new();
            for h in &beam {
                for (tok, lex) in options {
                    let score = h.score + lex + self.lm_step(h.tokens.last(), Some(tok));
                    let keep = match best_by_state.get(tok) {
                        None => true,
                        Some(existing) => {
                            let mut tokens = h.tokens.clone();
                            tokens.push(tok.clone());
                            better(&Hyp { score, tokens }, existing) == Ordering::Less
                        }
                    };
                    if keep {
                        let mut tokens = h.tokens.clone();
                        tokens.push(tok.clone());
                        best_by_state.insert(tok, Hyp { score, tokens });
                    }
                }
            }
            let mut next: Vec<Hyp> = best_by_state.into_values().collect();
            next.sort_by(better);
            next.truncate(width.max(1));
            beam = next;
        }
        let mut finished: Vec<Hyp> = beam
            .into_iter()
            .map(|mut h| {
                h.score += self.lm_step(h.tokens.last(), None);
                h
            })
            .collect();
        finished.sort_by(better);
        finished.into_iter().next().expect("beam is never empty")
    }

    fn render(&self, tokens: &[Tok]) -> TokenSeq {
        TokenSeq {
            tokens: tokens
                .iter()
                .map(|t| match t {
                    Tok::Known(id) => self.tgt_vocab[*id as usize].clone(),
                    Tok::Unknown(s) => s.clone(),
                })
                .collect(),
        }
    }

    /// Monotone decoding of a segmented sentence: one target token per source token,
    /// scored by log lexical probability plus log bigram probability.
    ///
    /// The best hypothesis over every width `1..=beam_width` is returned, so a wider beam
    /// never yields a lower model score than a narrower one.
    pub fn decode_tokens(&self, source: &TokenSeq, beam: &BeamConfig) -> (TokenSeq, f64) {
        let lattice = self.lattice(source, beam);
        let mut best: Option<Hyp> = None;
        for w in 1..=beam.beam_width.max(1) {
            let h = self.beam_search(&lattice, w);
            if best.as_ref().is_none_or(|b| better(&h, b) == Ordering::Less) {
                best = Some(h);
            }
        }
        let best = best.expect("at least one width");
        (self.render(&best.tokens), best.score)
    }

    /// Left-to-right argmax decoding over the same candidates as [`Self::decode_tokens`].
    pub fn greedy_tokens(&self, source: &TokenSeq, beam: &BeamConfig) -> (TokenSeq, f64) {
        let lattice = self.lattice(source, beam);
        let mut tokens: Vec<Tok> = Vec::new();
        let mut score = 0.0;
        for options in &lattice {
            let (tok, s) = options
                .iter()
                .map(|(tok, lex)| (tok, lex + self.lm_step(tokens.last(), Some(tok))))
                .min_by(|a, b| {
                    b.1.partial_cmp(&a.1)
                        .unwrap_or(Ordering::Equal)
                        .then_with(|| a.0.cmp(b.0))
                })
                .expect("every position has a candidate");
            score += s;
            tokens.push(tok.clone());
        }
        score += self.lm_step(tokens.last(), None);
        (self.render(&tokens), score)
    }

    /// Model score of a given target segmentation for a source segmentation of equal length.
    pub fn score_tokens(&self, source: &TokenSeq, target: &TokenSeq) -> f64 {
        let mut prev: Option<Tok> = None;
        let mut score = 0.0;
        for (s, t) in source.tokens.iter().zip(&target.tokens) {
            let tok = match self.tgt_index.get(t) {
                Some(&id) => Tok::Known(id),
                None => Tok::Unknown(t.clone()),
            };
            let lex = if self.src_index.contains_key(s) {
                self.lexical_prob(s, t).max(LEXICAL_FLOOR)
            } else {
                PASS_THROUGH_PROB
            };
            score += lex.ln() + self.lm_step(prev.as_ref(), Some(&tok));
            prev = Some(tok);
        }
        score + self.lm_step(prev.as_ref(), None)
    }

    fn check_bpe(&self, bpe: &BpeModel) -> Result<(), TranslatorError> {
        if bpe.fingerprint() != self.bpe_fingerprint {
            return Err(TranslatorError::FingerprintMismatch {
                model: self.bpe_fingerprint.clone(),
                given: bpe.fingerprint().to_string(),
            });
        }
        Ok(())
    }

    pub fn translate_greedy(
        &self,
        sentences: &[String],
        beam: &BeamConfig,
        bpe: &BpeModel,
    ) -> Result<Vec<String>, TranslatorError> {
        self.check_bpe(bpe)?;
        sentences
            .par_iter()
            .map(|s| Ok(decode_bpe(&self.greedy_tokens(&apply_bpe(bpe, s), beam).0)?))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), TranslatorError> {
        let mut body = format!(
            "{MODEL_HEADER} format={MODEL_FORMAT_VERSION} tool={}\n",
            env!("CARGO_PKG_VERSION")
        );
        body.push_str(&format!(
            "direction\t{}\t{}\n",
            self.direction.source, self.direction.target
        ));
        body.push_str(&format!("bpe_fingerprint\t{}\n", self.bpe_fingerprint));
        body.push_str(&format!("lm_smoothing\t{}\n", self.lm.smoothing));
        body.push_str(&format!(
            "meta\tepochs_run={}\tbest_epoch={}\tvalid_score={}\tseed={}\n",
            self.meta.epochs_run, self.meta.best_epoch, self.meta.final_valid_score, self.meta.seed
        ));
        body.push_str(&format!("[log]\t{}\n", self.meta.log.len()));
        for e in &self.meta.log {
            body.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.train_log_likelihood, e.valid_score));
        }
        let n_lex: usize = self.lexical.iter().map(|r| r.targets.len()).sum();
        body.push_str(&format!("[lexical]\t{n_lex}\n"));
        for (s, row) in self.lexical.iter().enumerate() {
            for (t, p) in row.targets.iter().zip(&row.probs) {
                body.push_str(&format!(
                    "{}\t{}\t{}\n",
                    self.src_vocab[s], self.tgt_vocab[*t as usize], p
                ));
            }
        }
        let boundary = self.lm.boundary();
        let name = |id: u32| {
            if id == boundary {
                ""
            } else {
                self.tgt_vocab[id as usize].as_str()
            }
        };
        let mut bigrams: Vec<(u32, u32, u64)> = self
            .lm
            .counts
            .iter()
            .enumerate()
            .flat_map(|(p, m)| m.iter().map(move |(&n, &c)| (p as u32, n, c)))
            .collect();
        bigrams.sort_unstable();
        body.push_str(&format!("[bigram]\t{}\n", bigrams.len()));
        for (p, n, c) in bigrams {
            body.push_str(&format!("{}\t{}\t{}\n", name(p), name(n), c));
        }
        let checksum = sha256_hex(body.as_bytes());
        body.push_str(&format!("[end]\tsha256={checksum}\n"));
        fs::write(path, body).map_err(|source| TranslatorError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TranslatorError> {
        let text = fs::read_to_string(path).map_err(|source| TranslatorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        parse_model(&text, path)
    }
}

impl Translator for TranslatorModel {
    fn direction(&self) -> &Direction {
        &self.direction
    }

    fn bpe_fingerprint(&self) -> &str {
        &self.bpe_fingerprint
    }

    fn translate(
        &self,
        sentences: &[String],
        beam: &BeamConfig,
        bpe: &BpeModel,
    ) -> Result<Vec<String>, TranslatorError> {
        translate(self, sentences, beam, bpe)
    }
}

/// Translates each sentence independently; output order follows input order.
/// Refuses to run when `bpe` is not the segmentation the model was trained with.
pub fn translate(
    model: &TranslatorModel,
    sentences: &[String],
    beam: &BeamConfig,
    bpe: &BpeModel,
) -> Result<Vec<String>, TranslatorError> {
    model.check_bpe(bpe)?;
    sentences
        .par_iter()
        .map(|s| Ok(decode_bpe(&model.decode_tokens(&apply_bpe(bpe, s), beam).0)?))
        .collect()
}

pub fn save_model(model: &TranslatorModel, path: &Path) -> Result<(), TranslatorError> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<TranslatorModel, TranslatorError> {
    TranslatorModel::load(path)
}

fn parse_model(text: &str, path: &Path) -> Result<TranslatorModel, TranslatorError> {
    let corrupt = |message: String| TranslatorError::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let trailer_at = text
        .rfind("[end]\tsha256=")
        .ok_or_else(|| corrupt("missing end section (truncated?)".into()))?;
    let (body, trailer) = text.split_at(trailer_at);
    let expected = trailer
        .trim_end()
        .strip_prefix("[end]\tsha256=")
        .ok_or_else(|| corrupt("malformed end section".into()))?;
    if sha256_hex(body.as_bytes()) != expected {
        return Err(corrupt("checksum mismatch".into()));
    }

    let mut lines = body.lines();
    let header = lines.next().ok_or_else(|| corrupt("empty file".into()))?;
    let header_fields: HashMap<&str, &str> = header
        .strip_prefix(MODEL_HEADER)
        .ok_or_else(|| corrupt("missing header".into()))?
        .split_whitespace()
        .filter_map(|f| f.split_once('='))
        .collect();
    let format = header_fields.get("format").copied().unwrap_or("");
    if format != MODEL_FORMAT_VERSION.to_string() {
        return Err(TranslatorError::UnsupportedFormat {
            path: path.to_path_buf(),
            found: format.to_string(),
        });
    }

    let mut next_kv = |key: &str| -> Result<Vec<String>, TranslatorError> {
        let line = lines.next().ok_or_else(|| corrupt(format!("missing {key}")))?;
        let mut cols = line.split('\t');
        if cols.next() != Some(key) {
            return Err(corrupt(format!("expected {key} line, found {line:?}")));
        }
        Ok(cols.map(str::to_string).collect())
    };
    let dir = next_kv("direction")?;
    if dir.len() != 2 {
        return Err(corrupt("malformed direction".into()));
    }
    let tag = |s: &str| LanguageTag::new(s).map_err(|e| corrupt(e.to_string()));
    let direction = Direction::new(tag(&dir[0])?, tag(&dir[1])?);
    let bpe_fingerprint = next_kv("bpe_fingerprint")?.into_iter().next().unwrap_or_default();
    let smoothing: f64 = next_kv("lm_smoothing")?
        .first()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("malformed lm_smoothing".into()))?;
    let meta_fields: HashMap<String, String> = next_kv("meta")?
        .iter()
        .filter_map(|f| f.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let meta_num = |k: &str| -> Result<f64, TranslatorError> {
        meta_fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt(format!("malformed meta field {k}")))
    };
    let epochs_run = meta_num("epochs_run")? as usize;
    let best_epoch = meta_num("best_epoch")? as usize;
    let final_valid_score = meta_num("valid_score")?;
    let seed: u64 = meta_fields
        .get("seed")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("malformed meta field seed".into()))?;

    let section = |lines: &mut std::str::Lines<'_>, name: &str| -> Result<Vec<Vec<String>>, TranslatorError> {
        let head = lines
            .next()
            .ok_or_else(|| corrupt(format!("missing [{name}] section")))?;
        let count: usize = head
            .strip_prefix(&format!("[{name}]\t"))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| corrupt(format!("malformed [{name}] header")))?;
        (0..count)
            .map(|_| {
                let l = lines
                    .next()
                    .ok_or_else(|| corrupt(format!("[{name}] section truncated")))?;
                let cols: Vec<String> = l.split('\t').map(str::to_string).collect();
                if cols.len() != 3 {
                    return Err(corrupt(format!("[{name}] row has {} columns", cols.len())));
                }
                Ok(cols)
            })
            .collect()
    };
    let parse_f = |s: &str| s.parse::<f64>().map_err(|_| corrupt(format!("bad number {s:?}")));

    let log_rows = section(&mut lines, "log")?;
    let lex_rows = section(&mut lines, "lexical")?;
    let bigram_rows = section(&mut lines, "bigram")?;

    let log = log_rows
        .iter()
        .map(|r| {
            Ok(EpochLog {
                epoch: r[0].parse().map_err(|_| corrupt("bad epoch".into()))?,
                train_log_likelihood: parse_f(&r[1])?,
                valid_score: parse_f(&r[2])?,
            })
        })
        .collect::<Result<Vec<_>, TranslatorError>>()?;

    let src_vocab: Vec<String> = lex_rows
        .iter()
        .map(|r| r[0].clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let tgt_vocab: Vec<String> = bigram_rows
        .iter()
        .flat_map(|r| [r[0].clone(), r[1].clone()])
        .chain(lex_rows.iter().map(|r| r[1].clone()))
        .filter(|t| !t.is_empty())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let src_index = index_of(&src_vocab);
    let tgt_index = index_of(&tgt_vocab);

    let mut lexical = vec![
        LexRow {
            targets: Vec::new(),
            probs: Vec::new()
        };
        src_vocab.len()
    ];
    for r in &lex_rows {
        let s = src_index[&r[0]] as usize;
        lexical[s].targets.push(tgt_index[&r[1]]);
        lexical[s].probs.push(parse_f(&r[2])?);
    }
    for row in &lexical {
        if row.targets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(corrupt("lexical rows out of order".into()));
        }
    }

    let mut lm = BigramLm::new(tgt_vocab.len(), smoothing);
    let boundary = lm.boundary();
    let id = |s: &str| if s.is_empty() { boundary } else { tgt_index[s] };
    for r in &bigram_rows {
        let c: u64 = r[2].parse().map_err(|_| corrupt("bad bigram count".into()))?;
        lm.add(id(&r[0]), id(&r[1]), c);
    }

    Ok(TranslatorModel {
        direction,
        src_vocab,
        src_index,
        tgt_vocab,
        tgt_index,
        lexical,
        lm,
        bpe_fingerprint,
        meta: TrainingMeta {
            epochs_run,
            best_epoch,
            final_valid_score,
            seed,
            log,
        },
    })
}
