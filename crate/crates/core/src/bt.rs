//! Back-translation strategies: standard, incremental, iterative, and the
//! selection-based variant that scores each monolingual dataset separately.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{
    shuffle, shuffle_monolingual, BilingualCorpus, CorpusError, DataSplit, LanguageTag, MonolingualCorpus, SentencePair,
};
use crate::metrics::{bleu, MetricError, TokenizerProfile};
use crate::subword::BpeModel;
use crate::translator::{BeamConfig, Direction, TrainConfig, Trainer, Translator, TranslatorError};

#[derive(Debug, Error)]
pub enum BtError {
    #[error(transparent)]
    Translator(#[from] TranslatorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid BT configuration: {0}")]
    InvalidConfig(String),
    #[error("reverse model translates from {expected} but the monolingual corpus is {found}")]
    LanguageMismatch { expected: String, found: String },
    #[error("invalid monolingual pool: {0}")]
    InvalidPool(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run state {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Standard,
    Incremental,
    Iterative,
    OurBt,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::Incremental => "incremental",
            Strategy::Iterative => "iterative",
            Strategy::OurBt => "ourbt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "standard" => Strategy::Standard,
            "incremental" => Strategy::Incremental,
            "iterative" => Strategy::Iterative,
            "ourbt" => Strategy::OurBt,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergePolicy {
    /// Shuffle of the bilingual data plus the synthetic pairs.
    WithBilingual,
    SyntheticOnly,
}

impl MergePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            MergePolicy::WithBilingual => "with-bilingual",
            MergePolicy::SyntheticOnly => "synthetic-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "with-bilingual" => Some(MergePolicy::WithBilingual),
            "synthetic-only" => Some(MergePolicy::SyntheticOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionPolicy {
    /// The best `k` candidates that strictly beat the baseline.
    TopK(usize),
    /// Every candidate that strictly beats the baseline.
    AboveBaseline,
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionPolicy::TopK(k) => write!(f, "top-{k}"),
            SelectionPolicy::AboveBaseline => f.write_str("above-baseline"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtConfig {
    pub strategy: Strategy,
    pub merge_policy: MergePolicy,
    pub selection_policy: SelectionPolicy,
    pub max_iterations: usize,
    pub convergence_epsilon: f64,
    pub portion_schedule: Vec<f64>,
    pub beam: BeamConfig,
    pub seed: u64,
}

impl Default for BtConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::OurBt,
            merge_policy: MergePolicy::WithBilingual,
            selection_policy: SelectionPolicy::TopK(3),
            max_iterations: 4,
            convergence_epsilon: 0.5,
            portion_schedule: vec![0.25, 0.5, 1.0],
            beam: BeamConfig::default(),
            seed: 0,
        }
    }
}

impl BtConfig {
    pub fn validate(&self) -> Result<(), BtError> {
        validate_schedule(&self.portion_schedule)?;
        if self.max_iterations == 0 {
            return Err(BtError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if self.selection_policy == SelectionPolicy::TopK(0) {
            return Err(BtError::InvalidConfig("top_k must be at least 1".into()));
        }
        if self.beam.beam_width == 0 {
            return Err(BtError::InvalidConfig("beam_width must be at least 1".into()));
        }
        Ok(())
    }
}

fn validate_schedule(schedule: &[f64]) -> Result<(), BtError> {
    if schedule.is_empty() {
        return Err(BtError::InvalidConfig("portion schedule is empty".into()));
    }
    for (i, &p) in schedule.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(BtError::InvalidConfig(format!("portion {p} is outside (0, 1]")));
        }
        if i > 0 && p < schedule[i - 1] {
            return Err(BtError::InvalidConfig("portion schedule must be nondecreasing".into()));
        }
    }
    Ok(())
}

/// Ordered monolingual datasets of one language.
#[derive(Debug, Clone, PartialEq)]
pub struct MonoPool {
    pub datasets: Vec<MonolingualCorpus>,
}

impl MonoPool {
    pub fn new(datasets: Vec<MonolingualCorpus>) -> Result<Self, BtError> {
        let mut ids = BTreeSet::new();
        for d in &datasets {
            if !ids.insert(d.id.as_str()) {
                return Err(BtError::InvalidPool(format!("duplicate dataset id {}", d.id)));
            }
            if d.language != datasets[0].language {
                return Err(BtError::InvalidPool(format!(
                    "dataset {} is {}, expected {}",
                    d.id, d.language, datasets[0].language
                )));
            }
        }
        Ok(Self { datasets })
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    /// All datasets concatenated in pool order.
    pub fn concat(&self, language: &LanguageTag, id: &str) -> MonolingualCorpus {
        concat_mono(self.datasets.iter(), language, id)
    }
}

fn concat_mono<'a>(
    parts: impl Iterator<Item = &'a MonolingualCorpus>,
    language: &LanguageTag,
    id: &str,
) -> MonolingualCorpus {
    let sentences = parts.flat_map(|d| d.sentences.iter().cloned()).collect();
    MonolingualCorpus::new(id, language.clone(), id, sentences)
}

/// Machine-translated source side paired with real target-side text.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: BilingualCorpus,
    pub generator: String,
    pub beam: BeamConfig,
}

impl SyntheticCorpus {
    pub fn save(&self, path: &Path) -> Result<(), BtError> {
        let provenance = [
            ("generator", self.generator.clone()),
            ("beam_width", self.beam.beam_width.to_string()),
            (
                "max_output_length_factor",
                self.beam.max_output_length_factor.to_string(),
            ),
            ("candidates_per_token", self.beam.candidates_per_token.to_string()),
        ];
        Ok(self.corpus.save_tagged(path, &provenance)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateResult {
    pub dataset_id: String,
    pub dataset_index: usize,
    pub direction: Direction,
    /// Key of the candidate model in [`BtOutcome::candidates`].
    pub model: String,
    pub bleu_on_valid: f64,
    pub baseline_bleu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Indices into the candidate list, best first.
    pub selected: Vec<usize>,
    /// The highest-scoring candidate overall.
    pub best: Option<usize>,
}

/// Picks candidates by validation BLEU. Order is descending BLEU, ties broken by the
/// lower dataset index.
pub fn select_based_on_bleu(candidates: &[CandidateResult], baseline_bleu: f64, policy: SelectionPolicy) -> Selection {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .bleu_on_valid
            .total_cmp(&candidates[a].bleu_on_valid)
            .then(candidates[a].dataset_index.cmp(&candidates[b].dataset_index))
    });
    let best = order.first().copied();
    let mut selected: Vec<usize> = order
        .into_iter()
        .filter(|&i| candidates[i].bleu_on_valid > baseline_bleu)
        .collect();
    if let SelectionPolicy::TopK(k) = policy {
        selected.truncate(k);
    }
    Selection { selected, best }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub stage: String,
    pub direction: Direction,
    pub model: String,
    pub bleu_on_valid: f64,
}

/// Everything a strategy decided, in a form that can be written to and read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct BtRunState {
    pub strategy: Strategy,
    pub seed: u64,
    pub train_seed: u64,
    pub merge_policy: MergePolicy,
    pub selection_policy: SelectionPolicy,
    pub bpe_fingerprint: String,
    pub baseline_bleu: BTreeMap<String, f64>,
    pub candidates: Vec<CandidateResult>,
    /// Selected dataset ids per direction, best first.
    pub selected: BTreeMap<String, Vec<String>>,
    pub best_models: BTreeMap<String, String>,
    pub no_selection: BTreeSet<String>,
    pub final_models: BTreeMap<String, String>,
    pub rows: Vec<EvalRow>,
    pub synthetic: Vec<SyntheticCorpus>,
}

/// Forward and backward models produced by one stage of a strategy.
#[derive(Debug, Clone)]
pub struct StageModels<M> {
    pub label: String,
    pub forward: M,
    pub backward: M,
}

#[derive(Debug, Clone)]
pub struct BtOutcome<M> {
    pub forward: M,
    pub backward: M,
    pub state: BtRunState,
    /// Models in execution order, starting with the bilingual-only baselines.
    pub stages: Vec<StageModels<M>>,
    pub candidates: BTreeMap<String, M>,
}

/// Shared inputs of every strategy. `split` is oriented in the forward direction.
pub struct BtContext<'a, T: Trainer> {
    pub trainer: &'a T,
    pub split: &'a DataSplit,
    pub bpe: &'a BpeModel,
    pub train: &'a TrainConfig,
    pub bt: &'a BtConfig,
}

impl<T: Trainer> BtContext<'_, T> {
    fn forward_direction(&self) -> Direction {
        Direction::new(
            self.split.train.source_language.clone(),
            self.split.train.target_language.clone(),
        )
    }

    fn new_state(&self, strategy: Strategy) -> BtRunState {
        BtRunState {
            strategy,
            seed: self.bt.seed,
            train_seed: self.train.seed,
            merge_policy: self.bt.merge_policy,
            selection_policy: self.bt.selection_policy,
            bpe_fingerprint: self.bpe.fingerprint().to_string(),
            baseline_bleu: BTreeMap::new(),
            candidates: Vec::new(),
            selected: BTreeMap::new(),
            best_models: BTreeMap::new(),
            no_selection: BTreeSet::new(),
            final_models: BTreeMap::new(),
            rows: Vec::new(),
            synthetic: Vec::new(),
        }
    }

    fn valid_for(&self, direction: &Direction) -> BilingualCorpus {
        if *direction == self.forward_direction() {
            self.split.valid.clone()
        } else {
            self.split.valid.swapped()
        }
    }

    fn train_for(&self, direction: &Direction) -> BilingualCorpus {
        if *direction == self.forward_direction() {
            self.split.train.clone()
        } else {
            self.split.train.swapped()
        }
    }

    /// Trains both directions on the bilingual data alone.
    pub fn train_baselines(&self) -> Result<(T::Model, T::Model), BtError> {
        let fwd = self.forward_direction();
        let bwd = fwd.reversed();
        let (f, b) = rayon::join(
            || {
                self.trainer
                    .train(&self.train_for(&fwd), &self.valid_for(&fwd), self.bpe, self.train)
            },
            || {
                self.trainer
                    .train(&self.train_for(&bwd), &self.valid_for(&bwd), self.bpe, self.train)
            },
        );
        Ok((f?, b?))
    }

    /// Corpus BLEU of `model` on its direction's validation split.
    pub fn valid_bleu(&self, model: &T::Model) -> Result<f64, BtError> {
        let valid = self.valid_for(model.direction());
        if valid.is_empty() {
            return Ok(0.0);
        }
        let sources: Vec<String> = valid.sources().map(str::to_string).collect();
        let hyps = model.translate(&sources, &self.bt.beam, self.bpe)?;
        let refs: Vec<&str> = valid.targets().collect();
        Ok(bleu(&hyps, &refs, &TokenizerProfile::plain())?.score)
    }

    fn retrain(&self, direction: &Direction, synthetic: &BilingualCorpus) -> Result<T::Model, BtError> {
        let data = merge(
            &self.train_for(direction),
            synthetic,
            self.bt.merge_policy,
            self.bt.seed,
        )?;
        Ok(self
            .trainer
            .train(&data, &self.valid_for(direction), self.bpe, self.train)?)
    }

    fn baselines_or_train(&self, baselines: Option<(T::Model, T::Model)>) -> Result<(T::Model, T::Model), BtError> {
        match baselines {
            Some(b) => Ok(b),
            None => self.train_baselines(),
        }
    }

    fn record_baselines(&self, state: &mut BtRunState, fwd: &T::Model, bwd: &T::Model) -> Result<(), BtError> {
        for m in [fwd, bwd] {
            let d = m.direction().to_string();
            let score = self.valid_bleu(m)?;
            state.baseline_bleu.insert(d.clone(), score);
            state.rows.push(EvalRow {
                stage: "baseline".into(),
                direction: m.direction().clone(),
                model: format!("baseline/{d}"),
                bleu_on_valid: score,
            });
        }
        Ok(())
    }

    fn push_rows(
        &self,
        state: &mut BtRunState,
        stage: &str,
        key: &str,
        fwd: &T::Model,
        bwd: &T::Model,
    ) -> Result<(f64, f64), BtError> {
        let mut scores = [0.0; 2];
        for (slot, m) in [fwd, bwd].into_iter().enumerate() {
            let d = m.direction().to_string();
            scores[slot] = self.valid_bleu(m)?;
            state.rows.push(EvalRow {
                stage: stage.to_string(),
                direction: m.direction().clone(),
                model: format!("{key}/{d}"),
                bleu_on_valid: scores[slot],
            });
            state.final_models.insert(d.clone(), format!("{key}/{d}"));
        }
        Ok((scores[0], scores[1]))
    }

    /// One round: each direction is retrained on its data plus the monolingual text of
    /// its target language translated by the given reverse model.
    fn bt_round(
        &self,
        state: &mut BtRunState,
        reverse_of_fwd: &T::Model,
        reverse_of_bwd: &T::Model,
        mono_src: &MonolingualCorpus,
        mono_tgt: &MonolingualCorpus,
        fallback: (&T::Model, &T::Model),
    ) -> Result<(T::Model, T::Model), BtError> {
        let fwd_dir = self.forward_direction();
        let bwd_dir = fwd_dir.reversed();
        let run = |reverse: &T::Model, mono: &MonolingualCorpus, dir: &Direction, fallback: &T::Model| {
            if mono.is_empty() {
                log::warn!("monolingual corpus {} is empty; keeping the {dir} model", mono.id);
                return Ok((fallback.clone(), None));
            }
            let synth = synthesize(reverse, mono, &self.bt.beam, self.bpe)?;
            let model = self.retrain(dir, &synth.corpus)?;
            Ok::<_, BtError>((model, Some(synth)))
        };
        let (f, b) = rayon::join(
            || run(reverse_of_fwd, mono_tgt, &fwd_dir, fallback.0),
            || run(reverse_of_bwd, mono_src, &bwd_dir, fallback.1),
        );
        let (f, fs) = f?;
        let (b, bs) = b?;
        state.synthetic.extend(fs);
        state.synthetic.extend(bs);
        Ok((f, b))
    }
}

/// Translates real monolingual text with `reverse` and pairs each translation with its
/// original, producing training data for the opposite direction.
pub fn synthesize<M: Translator>(
    reverse: &M,
    mono: &MonolingualCorpus,
    beam: &BeamConfig,
    bpe: &BpeModel,
) -> Result<SyntheticCorpus, BtError> {
    let dir = reverse.direction();
    if dir.source != mono.language {
        return Err(BtError::LanguageMismatch {
            expected: dir.source.to_string(),
            found: mono.language.to_string(),
        });
    }
    let translations = reverse.translate(&mono.sentences, beam, bpe)?;
    let tag = format!("bt:{}", mono.id);
    let pairs = translations
        .into_iter()
        .zip(&mono.sentences)
        .map(|(src, real)| SentencePair::new(src, real.clone(), tag.clone()))
        .collect();
    Ok(SyntheticCorpus {
        corpus: BilingualCorpus::new(
            format!("synthetic-{}-{}", mono.id, dir.reversed()),
            dir.target.clone(),
            dir.source.clone(),
        )
        .with_pairs(pairs),
        generator: format!("{dir}@{}", reverse.bpe_fingerprint()),
        beam: beam.clone(),
    })
}

pub fn merge(
    bilingual: &BilingualCorpus,
    synthetic: &BilingualCorpus,
    policy: MergePolicy,
    seed: u64,
) -> Result<BilingualCorpus, BtError> {
    if synthetic.source_language != bilingual.source_language || synthetic.target_language != bilingual.target_language
    {
        return Err(BtError::LanguageMismatch {
            expected: format!("{}-{}", bilingual.source_language, bilingual.target_language),
            found: format!("{}-{}", synthetic.source_language, synthetic.target_language),
        });
    }
    let id = format!("{}+{}", bilingual.id, synthetic.id);
    let pairs = match policy {
        MergePolicy::WithBilingual => bilingual.pairs.iter().chain(&synthetic.pairs).cloned().collect(),
        MergePolicy::SyntheticOnly => synthetic.pairs.clone(),
    };
    let merged = BilingualCorpus::new(id, bilingual.source_language.clone(), bilingual.target_language.clone())
        .with_pairs(pairs);
    Ok(shuffle(&merged, seed))
}

fn check_mono(mono: &MonolingualCorpus, expected: &LanguageTag) -> Result<(), BtError> {
    if mono.language != *expected {
        return Err(BtError::LanguageMismatch {
            expected: expected.to_string(),
            found: mono.language.to_string(),
        });
    }
    Ok(())
}

/// Synthesizes with the baselines and retrains both directions once.
pub fn standard_bt<T: Trainer>(
    ctx: &BtContext<'_, T>,
    mono_src: &MonolingualCorpus,
    mono_tgt: &MonolingualCorpus,
    baselines: Option<(T::Model, T::Model)>,
) -> Result<BtOutcome<T::Model>, BtError> {
    ctx.bt.validate()?;
    check_mono(mono_src, &ctx.split.train.source_language)?;
    check_mono(mono_tgt, &ctx.split.train.target_language)?;
    let (base_f, base_b) = ctx.baselines_or_train(baselines)?;
    let mut state = ctx.new_state(Strategy::Standard);
    ctx.record_baselines(&mut state, &base_f, &base_b)?;
    let (f, b) = ctx.bt_round(&mut state, &base_b, &base_f, mono_src, mono_tgt, (&base_f, &base_b))?;
    ctx.push_rows(&mut state, "standard", "standard", &f, &b)?;
    Ok(BtOutcome {
        stages: vec![
            StageModels {
                label: "Bilingual".into(),
                forward: base_f,
                backward: base_b,
            },
            StageModels {
                label: "StandardBT".into(),
                forward: f.clone(),
                backward: b.clone(),
            },
        ],
        forward: f,
        backward: b,
        state,
        candidates: BTreeMap::new(),
    })
}

fn portion_len(p: f64, n: usize) -> usize {
    ((p * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Standard passes over growing prefixes of the (seed-shuffled) monolingual data.
pub fn incremental_bt<T: Trainer>(
    ctx: &BtContext<'_, T>,
    mono_src: &MonolingualCorpus,
    mono_tgt: &MonolingualCorpus,
    schedule: &[f64],
    baselines: Option<(T::Model, T::Model)>,
) -> Result<BtOutcome<T::Model>, BtError> {
    validate_schedule(schedule)?;
    ctx.bt.validate()?;
    check_mono(mono_src, &ctx.split.train.source_language)?;
    check_mono(mono_tgt, &ctx.split.train.target_language)?;
    let (base_f, base_b) = ctx.baselines_or_train(baselines)?;
    let mut state = ctx.new_state(Strategy::Incremental);
    ctx.record_baselines(&mut state, &base_f, &base_b)?;
    let src = shuffle_monolingual(mono_src, ctx.bt.seed);
    let tgt = shuffle_monolingual(mono_tgt, ctx.bt.seed);
    let mut stages = vec![StageModels {
        label: "Bilingual".into(),
        forward: base_f.clone(),
        backward: base_b.clone(),
    }];
    let mut last = (base_f.clone(), base_b.clone());
    for &p in schedule {
        let prefix = |m: &MonolingualCorpus| {
            let mut c = m.clone();
            c.sentences.truncate(portion_len(p, m.len()));
            c
        };
        let (f, b) = ctx.bt_round(
            &mut state,
            &base_b,
            &base_f,
            &prefix(&src),
            &prefix(&tgt),
            (&base_f, &base_b),
        )?;
        let label = format!("portion {p}");
        ctx.push_rows(&mut state, &label, &format!("incremental-{p}"), &f, &b)?;
        stages.push(StageModels {
            label,
            forward: f.clone(),
            backward: b.clone(),
        });
        last = (f, b);
    }
    Ok(BtOutcome {
        forward: last.0,
        backward: last.1,
        state,
        stages,
        candidates: BTreeMap::new(),
    })
}

/// Repeated rounds, each synthesizing with the newest reverse models, until validation
/// BLEU stops improving by `convergence_epsilon` in both directions.
///
/// `initial` seeds the first round (for example the output of [`our_bt`]); when absent,
/// the baselines are used. Rounds use `mono_src` and `mono_tgt` in full.
pub fn iterative_bt<T: Trainer>(
    ctx: &BtContext<'_, T>,
    mono_src: &MonolingualCorpus,
    mono_tgt: &MonolingualCorpus,
    max_iterations: usize,
    convergence_epsilon: f64,
    initial: Option<(T::Model, T::Model)>,
    baselines: Option<(T::Model, T::Model)>,
) -> Result<BtOutcome<T::Model>, BtError> {
    if max_iterations == 0 {
        return Err(BtError::InvalidConfig("max_iterations must be at least 1".into()));
    }
    ctx.bt.validate()?;
    check_mono(mono_src, &ctx.split.train.source_language)?;
    check_mono(mono_tgt, &ctx.split.train.target_language)?;
    let (base_f, base_b) = ctx.baselines_or_train(baselines)?;
    let mut state = ctx.new_state(Strategy::Iterative);
    ctx.record_baselines(&mut state, &base_f, &base_b)?;
    let mut stages = vec![StageModels {
        label: "Bilingual".into(),
        forward: base_f.clone(),
        backward: base_b.clone(),
    }];
    let (mut cur_f, mut cur_b) = initial.unwrap_or_else(|| (base_f.clone(), base_b.clone()));
    let mut prev = (ctx.valid_bleu(&cur_f)?, ctx.valid_bleu(&cur_b)?);
    for t in 1..=max_iterations {
        let (f, b) = ctx.bt_round(&mut state, &cur_b, &cur_f, mono_src, mono_tgt, (&cur_f, &cur_b))?;
        let label = format!("iteration {t}");
        let scores = ctx.push_rows(&mut state, &label, &format!("iteration-{t}"), &f, &b)?;
        stages.push(StageModels {
            label,
            forward: f.clone(),
            backward: b.clone(),
        });
        let converged = scores.0 - prev.0 < convergence_epsilon && scores.1 - prev.1 < convergence_epsilon;
        prev = scores;
        cur_f = f;
        cur_b = b;
        if converged {
            break;
        }
    }
    Ok(BtOutcome {
        forward: cur_f,
        backward: cur_b,
        state,
        stages,
        candidates: BTreeMap::new(),
    })
}

/// Scores every monolingual dataset by the validation BLEU of a model retrained on its
/// back-translation, keeps the best datasets and models, and retrains once on the
/// selection. A direction with no candidate above its baseline keeps the baseline.
///
/// `pool_src` feeds the backward direction and `pool_tgt` the forward one.
pub fn our_bt<T: Trainer>(
    ctx: &BtContext<'_, T>,
    pool_src: &MonoPool,
    pool_tgt: &MonoPool,
    baselines: Option<(T::Model, T::Model)>,
) -> Result<BtOutcome<T::Model>, BtError> {
    ctx.bt.validate()?;
    if pool_src.is_empty() || pool_tgt.is_empty() {
        return Err(BtError::InvalidPool("both pools need at least one dataset".into()));
    }
    let fwd_dir = ctx.forward_direction();
    let bwd_dir = fwd_dir.reversed();
    for d in &pool_src.datasets {
        check_mono(d, &fwd_dir.source)?;
    }
    for d in &pool_tgt.datasets {
        check_mono(d, &fwd_dir.target)?;
    }
    let (base_f, base_b) = ctx.baselines_or_train(baselines)?;
    let mut state = ctx.new_state(Strategy::OurBt);
    ctx.record_baselines(&mut state, &base_f, &base_b)?;

    // (direction, index, dataset, reverse model)
    let tasks: Vec<(&Direction, usize, &MonolingualCorpus, &T::Model)> = pool_tgt
        .datasets
        .iter()
        .enumerate()
        .map(|(i, d)| (&fwd_dir, i, d, &base_b))
        .chain(
            pool_src
                .datasets
                .iter()
                .enumerate()
                .map(|(i, d)| (&bwd_dir, i, d, &base_f)),
        )
        .collect();
    let results: Vec<(CandidateResult, T::Model, SyntheticCorpus)> = tasks
        .par_iter()
        .map(|&(dir, i, mono, reverse)| {
            let synth = synthesize(reverse, mono, &ctx.bt.beam, ctx.bpe)?;
            let model = ctx.retrain(dir, &synth.corpus)?;
            let score = ctx.valid_bleu(&model)?;
            let result = CandidateResult {
                dataset_id: mono.id.clone(),
                dataset_index: i,
                direction: dir.clone(),
                model: format!("candidate/{dir}/{}", mono.id),
                bleu_on_valid: score,
                baseline_bleu: state.baseline_bleu[&dir.to_string()],
            };
            Ok((result, model, synth))
        })
        .collect::<Result<_, BtError>>()?;

    let mut candidates = BTreeMap::new();
    for (r, m, s) in results {
        candidates.insert(r.model.clone(), m);
        state.candidates.push(r);
        state.synthetic.push(s);
    }

    let mut best = BTreeMap::new();
    for dir in [&fwd_dir, &bwd_dir] {
        let key = dir.to_string();
        let subset: Vec<CandidateResult> = state
            .candidates
            .iter()
            .filter(|c| c.direction == *dir)
            .cloned()
            .collect();
        let sel = select_based_on_bleu(&subset, state.baseline_bleu[&key], ctx.bt.selection_policy);
        let ids: Vec<String> = sel.selected.iter().map(|&i| subset[i].dataset_id.clone()).collect();
        if ids.is_empty() {
            state.no_selection.insert(key.clone());
        } else if let Some(b) = sel.best {
            state.best_models.insert(key.clone(), subset[b].model.clone());
            best.insert(key.clone(), candidates[&subset[b].model].clone());
        }
        state.selected.insert(key, ids);
    }

    let best_b = best.get(&bwd_dir.to_string()).unwrap_or(&base_b).clone();
    let best_f = best.get(&fwd_dir.to_string()).unwrap_or(&base_f).clone();
    let chosen = |pool: &MonoPool, dir: &Direction, lang: &LanguageTag| {
        let ids = &state.selected[&dir.to_string()];
        let parts: Vec<&MonolingualCorpus> = ids
            .iter()
            .map(|id| {
                pool.datasets
                    .iter()
                    .find(|d| &d.id == id)
                    .expect("selected ids come from the pool")
            })
            .collect();
        concat_mono(parts.into_iter(), lang, &format!("selected-{dir}"))
    };
    let final_mono_tgt = chosen(pool_tgt, &fwd_dir, &fwd_dir.target);
    let final_mono_src = chosen(pool_src, &bwd_dir, &fwd_dir.source);
    let (f, b) = ctx.bt_round(
        &mut state,
        &best_b,
        &best_f,
        &final_mono_src,
        &final_mono_tgt,
        (&base_f, &base_b),
    )?;
    ctx.push_rows(&mut state, "ourbt", "ourbt", &f, &b)?;

    Ok(BtOutcome {
        stages: vec![
            StageModels {
                label: "Bilingual".into(),
                forward: base_f,
                backward: base_b,
            },
            StageModels {
                label: "OurBT".into(),
                forward: f.clone(),
                backward: b.clone(),
            },
        ],
        forward: f,
        backward: b,
        state,
        candidates,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> BtError + '_ {
    move |source| BtError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_direction(s: &str) -> Option<Direction> {
    let (a, b) = s.split_once('-')?;
    Some(Direction::new(LanguageTag::new(a).ok()?, LanguageTag::new(b).ok()?))
}

impl BtRunState {
    /// Writes `state`, `candidates.tsv` and one TSV per synthetic corpus under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), BtError> {
        fs::create_dir_all(dir.join("synthetic")).map_err(io_err(dir))?;
        let mut s = String::new();
        s.push_str(&format!("strategy = {}\n", self.strategy.as_str()));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("train_seed = {}\n", self.train_seed));
        s.push_str(&format!("merge_policy = {}\n", self.merge_policy.as_str()));
        s.push_str(&format!("selection_policy = {}\n", self.selection_policy));
        s.push_str(&format!("bpe_fingerprint = {}\n", self.bpe_fingerprint));
        for (d, b) in &self.baseline_bleu {
            s.push_str(&format!("baseline_bleu.{d} = {b}\n"));
        }
        for (d, ids) in &self.selected {
            s.push_str(&format!("selected.{d} = {}\n", ids.join(",")));
        }
        for (d, m) in &self.best_models {
            s.push_str(&format!("best_model.{d} = {m}\n"));
        }
        for d in &self.no_selection {
            s.push_str(&format!("no_selection.{d} = true\n"));
        }
        for (d, m) in &self.final_models {
            s.push_str(&format!("final_model.{d} = {m}\n"));
        }
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&format!(
                "row.{i} = {}\t{}\t{}\t{}\n",
                r.stage, r.direction, r.model, r.bleu_on_valid
            ));
        }
        for (i, c) in self.synthetic.iter().enumerate() {
            s.push_str(&format!("synthetic.{i} = synthetic/{}.tsv\n", c.corpus.id));
        }
        let p = dir.join("state");
        fs::write(&p, s).map_err(io_err(&p))?;

        let mut t = String::from("dataset_id\tdataset_index\tdirection\tmodel\tbleu\tbaseline\n");
        for c in &self.candidates {
            t.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                c.dataset_id, c.dataset_index, c.direction, c.model, c.bleu_on_valid, c.baseline_bleu
            ));
        }
        let p = dir.join("candidates.tsv");
        fs::write(&p, t).map_err(io_err(&p))?;

        for c in &self.synthetic {
            c.save(&dir.join("synthetic").join(format!("{}.tsv", c.corpus.id)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, BtError> {
        let p = dir.join("state");
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let bad = |message: String| BtError::Parse {
            path: p.clone(),
            message,
        };
        let mut kv: Vec<(String, String)> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("not a key/value line: {line:?}")))?;
            kv.push((k.to_string(), v.to_string()));
        }
        let get = |k: &str| -> Result<&str, BtError> {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| bad(format!("missing {k}")))
        };
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad number {v:?}")));
        let strategy = Strategy::parse(get("strategy")?).ok_or_else(|| bad("unknown strategy".into()))?;
        let merge_policy =
            MergePolicy::parse(get("merge_policy")?).ok_or_else(|| bad("unknown merge policy".into()))?;
        let sel = get("selection_policy")?;
        let selection_policy = if sel == "above-baseline" {
            SelectionPolicy::AboveBaseline
        } else {
            SelectionPolicy::TopK(
                sel.strip_prefix("top-")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| bad(format!("unknown selection policy {sel:?}")))?,
            )
        };
        let mut state = BtRunState {
            strategy,
            seed: get("seed")?.parse().map_err(|_| bad("bad seed".into()))?,
            train_seed: get("train_seed")?.parse().map_err(|_| bad("bad train_seed".into()))?,
            merge_policy,
            selection_policy,
            bpe_fingerprint: get("bpe_fingerprint")?.to_string(),
            baseline_bleu: BTreeMap::new(),
            candidates: Vec::new(),
            selected: BTreeMap::new(),
            best_models: BTreeMap::new(),
            no_selection: BTreeSet::new(),
            final_models: BTreeMap::new(),
            rows: Vec::new(),
            synthetic: Vec::new(),
        };
        for (k, v) in &kv {
            if let Some(d) = k.strip_prefix("baseline_bleu.") {
                state.baseline_bleu.insert(d.to_string(), num(v)?);
            } else if let Some(d) = k.strip_prefix("selected.") {
                let ids = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(str::to_string).collect()
                };
                state.selected.insert(d.to_string(), ids);
            } else if let Some(d) = k.strip_prefix("best_model.") {
                state.best_models.insert(d.to_string(), v.clone());
            } else if let Some(d) = k.strip_prefix("no_selection.") {
                state.no_selection.insert(d.to_string());
            } else if let Some(d) = k.strip_prefix("final_model.") {
                state.final_models.insert(d.to_string(), v.clone());
            } else if k.starts_with("row.") {
                let cols: Vec<&str> = v.split('\t').collect();
                if cols.len() != 4 {
                    return Err(bad(format!("row needs 4 fields: {v:?}")));
                }
                state.rows.push(EvalRow {
                    stage: cols[0].to_string(),
                    direction: parse_direction(cols[1]).ok_or_else(|| bad(format!("bad direction {:?}", cols[1])))?,
                    model: cols[2].to_string(),
                    bleu_on_valid: num(cols[3])?,
                });
            } else if k.starts_with("synthetic.") {
                let path = dir.join(v);
                let corpus = BilingualCorpus::load_tagged(&path)?;
                let meta = read_provenance(&path)?;
                let field = |name: &str| {
                    meta.get(name)
                        .cloned()
                        .ok_or_else(|| bad(format!("{} lacks {name}", path.display())))
                };
                state.synthetic.push(SyntheticCorpus {
                    corpus,
                    generator: field("generator")?,
                    beam: BeamConfig {
                        beam_width: field("beam_width")?.parse().map_err(|_| bad("bad beam_width".into()))?,
                        max_output_length_factor: num(&field("max_output_length_factor")?)?,
                        candidates_per_token: field("candidates_per_token")?
                            .parse()
                            .map_err(|_| bad("bad candidates_per_token".into()))?,
                    },
                });
            }
        }

        let p = dir.join("candidates.tsv");
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let c: Vec<&str> = line.split('\t').collect();
            if c.len() != 6 {
                return Err(BtError::Parse {
                    path: p.clone(),
                    message: format!("candidate row needs 6 fields: {line:?}"),
                });
            }
            state.candidates.push(CandidateResult {
                dataset_id: c[0].to_string(),
                dataset_index: c[1].parse().map_err(|_| bad("bad dataset index".into()))?,
                direction: parse_direction(c[2]).ok_or_else(|| bad(format!("bad direction {:?}", c[2])))?,
                model: c[3].to_string(),
                bleu_on_valid: num(c[4])?,
                baseline_bleu: num(c[5])?,
            });
        }
        Ok(state)
    }
}

fn read_provenance(path: &Path) -> Result<BTreeMap<String, String>, BtError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .take_while(|l| l.starts_with("#!"))
        .filter_map(|l| l[2..].split_once('\t'))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir() -> Direction {
        Direction::new(LanguageTag::new("en").unwrap(), LanguageTag::new("lg").unwrap())
    }

    fn cands(scores: &[f64]) -> Vec<CandidateResult> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| CandidateResult {
                dataset_id: format!("d{}", i + 1),
                dataset_index: i,
                direction: dir(),
                model: format!("m{}", i + 1),
                bleu_on_valid: s,
                baseline_bleu: 15.0,
            })
            .collect()
    }

    #[test]
    fn selection_examples() {
        let c = cands(&[10.0, 30.0, 20.0]);
        let s = select_based_on_bleu(&c, 15.0, SelectionPolicy::TopK(3));
        let ids: Vec<&str> = s.selected.iter().map(|&i| c[i].dataset_id.as_str()).collect();
        assert_eq!(ids, ["d2", "d3"]);
        assert_eq!(s.best, Some(1));

        let s = select_based_on_bleu(&cands(&[1.0, 2.0]), 15.0, SelectionPolicy::TopK(3));
        assert!(s.selected.is_empty());

        let c = cands(&[20.0, 20.0]);
        let s = select_based_on_bleu(&c, 15.0, SelectionPolicy::TopK(1));
        assert_eq!(s.selected, [0]);
        assert_eq!(s.best, Some(0));

        let c = cands(&[16.0, 17.0, 18.0, 19.0]);
        assert_eq!(
            select_based_on_bleu(&c, 15.0, SelectionPolicy::TopK(3)).selected,
            [3, 2, 1]
        );
        assert_eq!(
            select_based_on_bleu(&c, 15.0, SelectionPolicy::AboveBaseline).selected,
            [3, 2, 1, 0]
        );
        assert!(select_based_on_bleu(&c, 19.0, SelectionPolicy::TopK(3))
            .selected
            .is_empty());
    }

    #[test]
    fn schedule_validation() {
        assert!(validate_schedule(&[0.5, 1.0]).is_ok());
        assert!(validate_schedule(&[0.5, 1.5]).is_err());
        assert!(validate_schedule(&[1.0, 0.5]).is_err());
        assert!(validate_schedule(&[0.0]).is_err());
        assert!(validate_schedule(&[]).is_err());
        assert_eq!(portion_len(0.5, 10), 5);
        assert_eq!(portion_len(1.0, 10), 10);
        assert_eq!(portion_len(0.3, 10), 3);
        assert_eq!(portion_len(0.25, 10), 3);
    }

    #[test]
    fn pools_reject_duplicates_and_mixed_languages() {
        let en = LanguageTag::new("en").unwrap();
        let lg = LanguageTag::new("lg").unwrap();
        let a = MonolingualCorpus::new("a", en.clone(), "a", vec![]);
        assert!(MonoPool::new(vec![a.clone(), a.clone()]).is_err());
        let b = MonolingualCorpus::new("b", lg, "b", vec![]);
        assert!(MonoPool::new(vec![a.clone(), b]).is_err());
        assert_eq!(MonoPool::new(vec![a]).unwrap().len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn selection_is_invariant_under_monotone_rescaling(
                scores in prop::collection::vec(0.0f64..100.0, 1..8),
                baseline in 0.0f64..100.0,
                a in 0.1f64..3.0,
                b in -10.0f64..10.0,
            ) {
                let c = cands(&scores);
                let before = select_based_on_bleu(&c, baseline, SelectionPolicy::TopK(3));
                let mut scaled = c.clone();
                for x in &mut scaled {
                    x.bleu_on_valid = a * x.bleu_on_valid.powi(3) + b;
                }
                let after = select_based_on_bleu(&scaled, a * baseline.powi(3) + b, SelectionPolicy::TopK(3));
                prop_assert_eq!(before, after);
            }
        }
    }
}
