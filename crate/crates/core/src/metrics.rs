//! Corpus-level translation metrics: BLEU, a standardized BLEU profile, ChrF and TER.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("no segments to score")]
    EmptyCorpus,
    #[error("reference segment {0} is empty")]
    EmptyReference(usize),
}

fn check_lengths<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<(), MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hypotheses: hyps.len(),
            references: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(())
}

/// A frozen tokenization recipe. The same `(name, version)` always tokenizes identically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerProfile {
    pub name: String,
    pub version: u32,
    pub nfc: bool,
    pub split_punctuation: bool,
    pub lowercase: bool,
}

impl TokenizerProfile {
    /// Whitespace split only.
    pub fn plain() -> Self {
        Self {
            name: "plain".into(),
            version: 1,
            nfc: false,
            split_punctuation: false,
            lowercase: false,
        }
    }

    /// NFC normalization, punctuation split into separate tokens, case preserved.
    /// A `.` or `,` between two digits stays attached (`3.5`).
    pub fn standard() -> Self {
        Self {
            name: "standard".into(),
            version: 1,
            nfc: true,
            split_punctuation: true,
            lowercase: false,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "plain" => Some(Self::plain()),
            "standard" => Some(Self::standard()),
            _ => None,
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut s: String = if self.nfc {
            text.nfc().collect()
        } else {
            text.to_string()
        };
        if self.lowercase {
            s = s.to_lowercase();
        }
        if !self.split_punctuation {
            return s.split_whitespace().map(str::to_string).collect();
        }
        let chars: Vec<char> = s.chars().collect();
        let mut spaced = String::with_capacity(s.len() + 8);
        for (i, &c) in chars.iter().enumerate() {
            let numeric_sep = (c == '.' || c == ',')
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
            if is_punctuation(c) && !numeric_sep {
                spaced.push(' ');
                spaced.push(c);
                spaced.push(' ');
            } else {
                spaced.push(c);
            }
        }
        spaced.split_whitespace().map(str::to_string).collect()
    }

    fn label(&self) -> String {
        format!("{}.v{}", self.name, self.version)
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || ('\u{2010}'..='\u{2027}').contains(&c)
        || ('\u{2030}'..='\u{205E}').contains(&c)
        || matches!(c, '«' | '»' | '¡' | '¿' | '·')
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    None,
    /// Adds `k` to matches and totals of every order above 1. Intended for sentence-level use.
    AddK(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuConfig {
    pub profile: TokenizerProfile,
    pub max_n: usize,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            profile: TokenizerProfile::plain(),
            max_n: 4,
            smoothing: Smoothing::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuResult {
    /// 0..=100
    pub score: f64,
    pub precisions: Vec<f64>,
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub signature: String,
    /// Every hypothesis was empty; score and brevity penalty are 0 by convention.
    pub empty_hypotheses: bool,
}

impl fmt::Display for BleuResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p: Vec<String> = self.precisions.iter().map(|p| format!("{:.1}", p * 100.0)).collect();
        write!(
            f,
            "BLEU = {:.2} {} (BP = {:.3} hyp_len = {} ref_len = {}) {}",
            self.score,
            p.join("/"),
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len,
            self.signature
        )
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn bleu_named<H: AsRef<str>, R: AsRef<str>>(
    metric: &str,
    hyps: &[H],
    refs: &[R],
    config: &BleuConfig,
) -> Result<BleuResult, MetricError> {
    check_lengths(hyps, refs)?;
    let max_n = config.max_n.max(1);
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        let ht = config.profile.tokenize(h.as_ref());
        let rt = config.profile.tokenize(r.as_ref());
        hyp_len += ht.len();
        ref_len += rt.len();
        for n in 1..=max_n {
            let hc = ngram_counts(&ht, n);
            let rc = ngram_counts(&rt, n);
            totals[n - 1] += ht.len().saturating_sub(n - 1) as u64;
            matches[n - 1] += hc
                .iter()
                .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }
    let signature = format!("{metric}+ngram:{max_n}+{}", config.profile.label());
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            let (m, t) = (matches[i] as f64, totals[i] as f64);
            match config.smoothing {
                Smoothing::AddK(k) if i > 0 => (m + k) / (t + k),
                _ if t == 0.0 => 0.0,
                _ => m / t,
            }
        })
        .collect();
    if hyp_len == 0 {
        return Ok(BleuResult {
            score: 0.0,
            precisions,
            matches,
            totals,
            brevity_penalty: 0.0,
            hyp_len,
            ref_len,
            signature,
            empty_hypotheses: true,
        });
    }
    let brevity_penalty = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.iter().any(|&p| p <= 0.0) {
        0.0
    } else {
        let w = 1.0 / max_n as f64;
        let log_sum: f64 = precisions.iter().map(|p| w * p.ln()).sum();
        100.0 * brevity_penalty * log_sum.exp()
    };
    Ok(BleuResult {
        score,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
        signature,
        empty_hypotheses: false,
    })
}

/// Corpus BLEU: clipped n-gram matches and totals are summed over all segments before
/// dividing, uniform weights, unsmoothed.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
    profile: &TokenizerProfile,
) -> Result<BleuResult, MetricError> {
    bleu_with(
        hypotheses,
        references,
        &BleuConfig {
            profile: profile.clone(),
            ..BleuConfig::default()
        },
    )
}

pub fn bleu_with<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
    config: &BleuConfig,
) -> Result<BleuResult, MetricError> {
    bleu_named("bleu", hypotheses, references, config)
}

/// BLEU under the frozen [`TokenizerProfile::standard`] profile, carrying its signature.
pub fn sacrebleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<BleuResult, MetricError> {
    let config = BleuConfig {
        profile: TokenizerProfile::standard(),
        ..BleuConfig::default()
    };
    bleu_named("sacrebleu", hypotheses, references, &config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyOrders {
    /// Orders with no reference n-grams are left out of the average.
    Skip,
    /// Such orders contribute zero precision and recall.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChrfConfig {
    pub beta: f64,
    pub char_order: usize,
    pub empty_orders: EmptyOrders,
}

impl Default for ChrfConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            char_order: 6,
            empty_orders: EmptyOrders::Skip,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChrfResult {
    pub score: f64,
    pub beta: f64,
    pub char_order: usize,
    /// Mean over segments of the order-averaged character precision.
    pub precision: f64,
    pub recall: f64,
}

/// `(1 + b^2) P R / (b^2 P + R)`, zero when both are zero.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], u64> {
    let mut m = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Returns `(score in [0, 1], avg precision, avg recall)` for one segment.
fn chrf_segment(hyp: &str, reference: &str, config: &ChrfConfig) -> (f64, f64, f64) {
    let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=config.char_order.max(1) {
        let hc = char_ngrams(&h, n);
        let rc = char_ngrams(&r, n);
        let h_total: u64 = hc.values().sum();
        let r_total: u64 = rc.values().sum();
        if r_total == 0 {
            if config.empty_orders == EmptyOrders::Zero {
                orders += 1;
            }
            continue;
        }
        let m: u64 = hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum();
        p_sum += if h_total > 0 { m as f64 / h_total as f64 } else { 0.0 };
        r_sum += m as f64 / r_total as f64;
        orders += 1;
    }
    if orders == 0 || (r.is_empty() && config.empty_orders == EmptyOrders::Zero) {
        return if h.is_empty() && r.is_empty() {
            (1.0, 1.0, 1.0)
        } else {
            (0.0, 0.0, 0.0)
        };
    }
    let p = p_sum / orders as f64;
    let rc = r_sum / orders as f64;
    (f_beta(p, rc, config.beta), p, rc)
}

/// Character n-gram F-score. Whitespace is removed before extracting n-grams and the
/// corpus score is the mean of segment scores.
pub fn chrf<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
    config: &ChrfConfig,
) -> Result<ChrfResult, MetricError> {
    check_lengths(hypotheses, references)?;
    let n = hypotheses.len() as f64;
    let (mut s, mut p, mut r) = (0.0, 0.0, 0.0);
    for (h, rf) in hypotheses.iter().zip(references) {
        let (fs, fp, fr) = chrf_segment(h.as_ref(), rf.as_ref(), config);
        s += fs;
        p += fp;
        r += fr;
    }
    Ok(ChrfResult {
        score: 100.0 * s / n,
        beta: config.beta,
        char_order: config.char_order,
        precision: p / n,
        recall: r / n,
    })
}

pub fn chrf2<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<ChrfResult, MetricError> {
    chrf(hypotheses, references, &ChrfConfig::default())
}

/// Longest block moved by one shift.
pub const MAX_SHIFT_SIZE: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub shifts: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.insertions + self.deletions + self.substitutions + self.shifts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerResult {
    /// 100 * edits / reference words; may exceed 100.
    pub score: f64,
    pub edits: EditCounts,
    pub ref_length: usize,
}

fn edit_table<T: PartialEq>(hyp: &[T], reference: &[T]) -> Vec<Vec<usize>> {
    let (n, m) = (hyp.len(), reference.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

/// Word-level Levenshtein distance.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    edit_table(hyp, reference)[hyp.len()][reference.len()]
}

fn edit_ops<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let d = edit_table(hyp, reference);
    let (mut i, mut j) = (hyp.len(), reference.len());
    let mut counts = EditCounts::default();
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]) {
            if hyp[i - 1] != reference[j - 1] {
                counts.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

fn contains_span<T: PartialEq>(haystack: &[T], needle: &[T]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Finds the block move that most reduces the edit distance. Blocks must occur verbatim
/// in the reference. Ties prefer the shorter block, then the leftmost block, then the
/// leftmost destination.
fn best_shift<T: PartialEq + Clone>(hyp: &[T], reference: &[T], current: usize) -> Option<(Vec<T>, usize)> {
    let mut best: Option<(Vec<T>, usize)> = None;
    let mut best_gain = 0usize;
    for len in 1..=MAX_SHIFT_SIZE.min(hyp.len()) {
        for start in 0..=hyp.len() - len {
            let block = &hyp[start..start + len];
            if !contains_span(reference, block) {
                continue;
            }
            let rest: Vec<T> = hyp[..start].iter().chain(&hyp[start + len..]).cloned().collect();
            for dest in 0..=rest.len() {
                if dest == start {
                    continue;
                }
                let mut candidate = Vec::with_capacity(hyp.len());
                candidate.extend_from_slice(&rest[..dest]);
                candidate.extend_from_slice(block);
                candidate.extend_from_slice(&rest[dest..]);
                let d = edit_distance(&candidate, reference);
                if d < current && current - d > best_gain {
                    best_gain = current - d;
                    best = Some((candidate, d));
                }
            }
        }
    }
    best
}

/// Greedy-shift TER edits for one tokenized segment.
pub fn ter_edits<T: PartialEq + Clone>(hyp: &[T], reference: &[T]) -> EditCounts {
    let mut cur = hyp.to_vec();
    let mut dist = edit_distance(&cur, reference);
    let mut shifts = 0;
    while dist > 0 {
        match best_shift(&cur, reference, dist) {
            Some((next, d)) => {
                cur = next;
                dist = d;
                shifts += 1;
            }
            None => break,
        }
    }
    EditCounts {
        shifts,
        ..edit_ops(&cur, reference)
    }
}

/// Translation edit rate over whitespace tokens: `100 * total edits / total reference words`.
pub fn ter<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<TerResult, MetricError> {
    check_lengths(hypotheses, references)?;
    let mut edits = EditCounts::default();
    let mut ref_length = 0;
    for (i, (h, r)) in hypotheses.iter().zip(references).enumerate() {
        let ht: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rt: Vec<&str> = r.as_ref().split_whitespace().collect();
        if rt.is_empty() {
            return Err(MetricError::EmptyReference(i));
        }
        let e = ter_edits(&ht, &rt);
        edits.insertions += e.insertions;
        edits.deletions += e.deletions;
        edits.substitutions += e.substitutions;
        edits.shifts += e.shifts;
        ref_length += rt.len();
    }
    Ok(TerResult {
        score: 100.0 * edits.total() as f64 / ref_length as f64,
        edits,
        ref_length,
    })
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub bleu: BleuResult,
    pub sacrebleu: BleuResult,
    pub chrf2: ChrfResult,
    pub ter: TerResult,
    /// BLEU minus the baseline's BLEU, when a baseline was given.
    pub gain: Option<f64>,
}

pub fn evaluate_all<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
    baseline: Option<&BleuResult>,
) -> Result<EvalResult, MetricError> {
    evaluate_all_with(hypotheses, references, baseline, &TokenizerProfile::plain())
}

/// [`evaluate_all`] with the BLEU column computed under `profile`.
pub fn evaluate_all_with<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
    baseline: Option<&BleuResult>,
    profile: &TokenizerProfile,
) -> Result<EvalResult, MetricError> {
    let bleu = bleu(hypotheses, references, profile)?;
    let gain = baseline.map(|b| bleu.score - b.score);
    Ok(EvalResult {
        sacrebleu: sacrebleu(hypotheses, references)?,
        chrf2: chrf2(hypotheses, references)?,
        ter: ter(hypotheses, references)?,
        bleu,
        gain,
    })
}
