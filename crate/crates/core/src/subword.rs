//! Byte-pair-encoding subword segmentation.
//!
//! Words are split into characters with the end-of-word marker attached to the last
//! character (`low` becomes `l o w</w>`). Learning greedily merges the most frequent
//! adjacent pair, breaking ties by the lexicographically smallest `(left, right)`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::hash::sha256_hex;

pub const END_OF_WORD: &str = "</w>";

const HEADER_TAG: &str = "#bpe-merges";
const ALPHABET_TAG: &str = "#alphabet";

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("cannot learn BPE from an empty corpus")]
    EmptyCorpus,
    #[error("target vocabulary size {target} is smaller than the {base} base symbols")]
    VocabTooSmall { target: usize, base: usize },
    #[error("input contains the reserved end-of-word marker: {0:?}")]
    ReservedMarker(String),
    #[error("end-of-word marker in illegal position in token {0:?}")]
    MisplacedMarker(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt merges file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

/// A subword segmentation of one sentence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    alphabet: BTreeSet<String>,
    vocab: BTreeSet<String>,
    target_vocab_size: usize,
    fingerprint: String,
    symbol_ids: HashMap<String, u32>,
    names: Vec<String>,
    /// (left, right) -> (rank, merged symbol)
    merge_table: HashMap<(u32, u32), (usize, u32)>,
}

impl PartialEq for BpeModel {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges
            && self.alphabet == other.alphabet
            && self.target_vocab_size == other.target_vocab_size
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn rules_fingerprint(merges: &[(String, String)]) -> String {
    let mut text = String::new();
    for (l, r) in merges {
        text.push_str(l);
        text.push(' ');
        text.push_str(r);
        text.push('\n');
    }
    sha256_hex(text.as_bytes())[..16].to_string()
}

impl BpeModel {
    fn from_parts(merges: Vec<(String, String)>, alphabet: BTreeSet<String>, target_vocab_size: usize) -> Self {
        let mut names: Vec<String> = Vec::new();
        let mut symbol_ids: HashMap<String, u32> = HashMap::new();
        let mut intern = |s: &str, names: &mut Vec<String>| -> u32 {
            if let Some(&id) = symbol_ids.get(s) {
                return id;
            }
            let id = names.len() as u32;
            names.push(s.to_string());
            symbol_ids.insert(s.to_string(), id);
            id
        };
        let mut vocab = alphabet.clone();
        for a in &alphabet {
            intern(a, &mut names);
        }
        let mut merge_table = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let li = intern(l, &mut names);
            let ri = intern(r, &mut names);
            let merged = format!("{l}{r}");
            let mi = intern(&merged, &mut names);
            vocab.insert(merged);
            merge_table.entry((li, ri)).or_insert((rank, mi));
        }
        let fingerprint = rules_fingerprint(&merges);
        Self {
            merges,
            alphabet,
            vocab,
            target_vocab_size,
            fingerprint,
            symbol_ids,
            names,
            merge_table,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    pub fn alphabet(&self) -> &BTreeSet<String> {
        &self.alphabet
    }

    pub fn target_vocab_size(&self) -> usize {
        self.target_vocab_size
    }

    /// Hash of the ordered merge rules. Models trained on differently segmented text
    /// carry different fingerprints.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn segment_word(&self, word: &str, out: &mut Vec<String>) {
        enum Sym {
            Known(u32),
            Raw(String),
        }
        let mut syms: Vec<Sym> = initial_symbols(word)
            .into_iter()
            .map(|s| match self.symbol_ids.get(&s) {
                Some(&id) => Sym::Known(id),
                None => Sym::Raw(s),
            })
            .collect();
        loop {
            let mut best: Option<(usize, (u32, u32), u32)> = None;
            for w in syms.windows(2) {
                if let (Sym::Known(a), Sym::Known(b)) = (&w[0], &w[1]) {
                    if let Some(&(rank, merged)) = self.merge_table.get(&(*a, *b)) {
                        if best.is_none_or(|(r, _, _)| rank < r) {
                            best = Some((rank, (*a, *b), merged));
                        }
                    }
                }
            }
            let Some((_, (a, b), merged)) = best else { break };
            let mut next = Vec::with_capacity(syms.len());
            let mut it = syms.into_iter().peekable();
            while let Some(s) = it.next() {
                if matches!(s, Sym::Known(x) if x == a) && matches!(it.peek(), Some(Sym::Known(y)) if *y == b) {
                    it.next();
                    next.push(Sym::Known(merged));
                } else {
                    next.push(s);
                }
            }
            syms = next;
        }
        out.extend(syms.into_iter().map(|s| match s {
            Sym::Known(id) => self.names[id as usize].clone(),
            Sym::Raw(s) => s,
        }));
    }

    /// Writes the merge-rules file: a header with fingerprint and target size, the base
    /// alphabet, then one `left right` merge per line in learned order.
    pub fn save(&self, path: &Path) -> Result<(), BpeError> {
        let mut out = format!(
            "{HEADER_TAG} fingerprint={} target_vocab_size={} marker={END_OF_WORD}\n",
            self.fingerprint, self.target_vocab_size
        );
        out.push_str(ALPHABET_TAG);
        for a in &self.alphabet {
            out.push(' ');
            out.push_str(a);
        }
        out.push('\n');
        for (l, r) in &self.merges {
            out.push_str(&format!("{l} {r}\n"));
        }
        fs::write(path, out).map_err(|source| BpeError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, BpeError> {
        let corrupt = |message: &str| BpeError::Corrupt {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let text = fs::read_to_string(path).map_err(|source| BpeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| corrupt("empty file"))?;
        let fields: BTreeMap<&str, &str> = header
            .strip_prefix(HEADER_TAG)
            .ok_or_else(|| corrupt("missing header"))?
            .split_whitespace()
            .filter_map(|f| f.split_once('='))
            .collect();
        let fingerprint = fields
            .get("fingerprint")
            .ok_or_else(|| corrupt("missing fingerprint"))?;
        let target: usize = fields
            .get("target_vocab_size")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("missing target_vocab_size"))?;
        if fields.get("marker") != Some(&END_OF_WORD) {
            return Err(corrupt("unsupported end-of-word marker"));
        }
        let alphabet: BTreeSet<String> = lines
            .next()
            .and_then(|l| l.strip_prefix(ALPHABET_TAG))
            .ok_or_else(|| corrupt("missing alphabet line"))?
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let mut merges = Vec::new();
        for line in lines {
            let (l, r) = line.split_once(' ').ok_or_else(|| corrupt("malformed merge line"))?;
            if l.is_empty() || r.is_empty() || r.contains(' ') {
                return Err(corrupt("malformed merge line"));
            }
            merges.push((l.to_string(), r.to_string()));
        }
        let model = Self::from_parts(merges, alphabet, target);
        if model.fingerprint != *fingerprint {
            return Err(corrupt("fingerprint does not match merge rules"));
        }
        Ok(model)
    }
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Learns merges from whitespace-tokenized sentences until the vocabulary reaches
/// `target_vocab_size` or no pair occurs at least twice.
pub fn learn_bpe<I, S>(sentences: I, target_vocab_size: usize) -> Result<BpeModel, BpeError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, i64> = BTreeMap::new();
    for s in sentences {
        let s = s.as_ref();
        if s.contains(END_OF_WORD) {
            return Err(BpeError::ReservedMarker(s.to_string()));
        }
        for w in s.split_whitespace() {
            *word_counts.entry(w.to_string()).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }

    let mut names: Vec<String> = Vec::new();
    let mut ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, names: &mut Vec<String>| -> u32 {
        *ids.entry(s.clone()).or_insert_with(|| {
            names.push(s);
            (names.len() - 1) as u32
        })
    };

    let mut words: Vec<(Vec<u32>, i64)> = Vec::with_capacity(word_counts.len());
    for (w, c) in word_counts {
        let syms = initial_symbols(&w).into_iter().map(|s| intern(s, &mut names)).collect();
        words.push((syms, c));
    }
    let alphabet: BTreeSet<String> = names.iter().cloned().collect();
    if target_vocab_size < alphabet.len() {
        return Err(BpeError::VocabTooSmall {
            target: target_vocab_size,
            base: alphabet.len(),
        });
    }

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for w in syms.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_default() += c;
            pair_words.entry((w[0], w[1])).or_default().insert(wi);
        }
    }
    let candidate = |pair: (u32, u32), count: i64, names: &[String]| Candidate {
        count,
        left: names[pair.0 as usize].clone(),
        right: names[pair.1 as usize].clone(),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts.iter().map(|(&p, &c)| candidate(p, c, &names)).collect();

    let mut vocab = alphabet.clone();
    let mut merges = Vec::new();
    while vocab.len() < target_vocab_size {
        let Some(top) = heap.pop() else { break };
        let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count {
            if current > 0 {
                heap.push(candidate(top.pair, current, &names));
            }
            continue;
        }
        if current < 2 {
            break;
        }
        let (a, b) = top.pair;
        let merged_name = format!("{}{}", top.left, top.right);
        let merged = intern(merged_name.clone(), &mut names);
        merges.push((top.left, top.right));
        vocab.insert(merged_name);

        let affected = pair_words.remove(&top.pair).unwrap_or_default();
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for wi in affected {
            let (syms, c) = &mut words[wi];
            let c = *c;
            if !syms.windows(2).any(|w| w[0] == a && w[1] == b) {
                continue;
            }
            for w in syms.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() -= c;
                touched.insert((w[0], w[1]));
            }
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            for w in next.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += c;
                pair_words.entry((w[0], w[1])).or_default().insert(wi);
                touched.insert((w[0], w[1]));
            }
            *syms = next;
        }
        pair_counts.remove(&top.pair);
        let mut touched: Vec<(u32, u32)> = touched.into_iter().collect();
        touched.sort_unstable();
        for p in touched {
            match pair_counts.get(&p).copied() {
                Some(c) if c > 0 => heap.push(candidate(p, c, &names)),
                Some(_) => {
                    pair_counts.remove(&p);
                }
                None => {}
            }
        }
    }
    Ok(BpeModel::from_parts(merges, alphabet, target_vocab_size))
}

/// Segments `sentence` by replaying the learned merges on each word. Characters never
/// seen during learning pass through as single-character tokens.
pub fn apply_bpe(model: &BpeModel, sentence: &str) -> TokenSeq {
    let mut tokens = Vec::new();
    for w in sentence.split_whitespace() {
        model.segment_word(w, &mut tokens);
    }
    TokenSeq { tokens }
}

/// Joins subword tokens back into whitespace-separated words.
pub fn decode_bpe(tokens: &TokenSeq) -> Result<String, BpeError> {
    let mut words: Vec<String> = Vec::new();
    let mut word = String::new();
    for t in &tokens.tokens {
        match t.strip_suffix(END_OF_WORD) {
            Some(stem) => {
                if stem.contains(END_OF_WORD) {
                    return Err(BpeError::MisplacedMarker(t.clone()));
                }
                word.push_str(stem);
                words.push(std::mem::take(&mut word));
            }
            None => {
                if t.contains(END_OF_WORD) {
                    return Err(BpeError::MisplacedMarker(t.clone()));
                }
                word.push_str(t);
            }
        }
    }
    if !word.is_empty() {
        words.push(word);
    }
    Ok(words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts adjacent symbol pairs over the initial segmentation, independently of the learner.
    fn most_frequent_pair(sentences: &[&str]) -> (String, String) {
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for s in sentences {
            for w in s.split_whitespace() {
                let syms = initial_symbols(w);
                for i in 0..syms.len().saturating_sub(1) {
                    *counts.entry((syms[i].clone(), syms[i + 1].clone())).or_default() += 1;
                }
            }
        }
        let max = *counts.values().max().unwrap();
        counts.into_iter().find(|(_, c)| *c == max).unwrap().0
    }

    #[test]
    fn first_merge_matches_pair_count_oracle() {
        let corpus = ["aa aa ab"];
        let expected = most_frequent_pair(&corpus);
        assert_eq!(expected, ("a".to_string(), format!("a{END_OF_WORD}")));
        let m = learn_bpe(corpus, 5).unwrap();
        assert_eq!(m.merges()[0], expected);
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" both occur twice; ("a", "b</w>") < ("c", "d</w>").
        let m = learn_bpe(["cd ab cd ab"], 100).unwrap();
        assert_eq!(m.merges()[0].0, "a");
        assert_eq!(m.merges()[1].0, "c");
    }

    #[test]
    fn no_merge_when_target_equals_alphabet() {
        let m = learn_bpe(["abc abc"], 3).unwrap();
        assert!(m.merges().is_empty());
        let expected: BTreeSet<String> = ["a", "b", &format!("c{END_OF_WORD}")]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(m.vocab(), &expected);
        assert!(matches!(learn_bpe(["abc"], 2), Err(BpeError::VocabTooSmall { .. })));
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let m = learn_bpe(["abc"], 100).unwrap();
        assert!(m.merges().is_empty());
        assert!(matches!(
            learn_bpe(Vec::<String>::new(), 10),
            Err(BpeError::EmptyCorpus)
        ));
        assert!(matches!(learn_bpe(["  \n "], 10), Err(BpeError::EmptyCorpus)));
    }

    #[test]
    fn learning_is_deterministic() {
        let text = ["the cat sat on the mat", "the bat ate the rat", "a cat and a bat"];
        assert_eq!(
            learn_bpe(text, 40).unwrap().merges(),
            learn_bpe(text, 40).unwrap().merges()
        );
    }

    #[test]
    fn known_word_is_single_token() {
        let m = learn_bpe(["low low low"], 100).unwrap();
        assert_eq!(apply_bpe(&m, "low").tokens, [format!("low{END_OF_WORD}")]);
    }

    #[test]
    fn unseen_characters_pass_through() {
        let m = learn_bpe(["low low"], 100).unwrap();
        assert_eq!(
            apply_bpe(&m, "xyz").tokens,
            ["x", "y", format!("z{END_OF_WORD}").as_str()]
        );
    }

    #[test]
    fn shared_prefix_splits_at_learned_boundary() {
        // Initial pair counts: (l,o)=7 (o,w</w>)=5 (o,w)=2 (w,e)=2 (e,r</w>)=2.
        // Six base symbols, so a budget of 8 allows exactly two merges.
        let m = learn_bpe(["low low low low low lower lower"], 8).unwrap();
        assert_eq!(m.merges().len(), 2);
        assert_eq!(m.merges()[0], ("l".to_string(), "o".to_string()));
        assert_eq!(m.merges()[1], ("lo".to_string(), format!("w{END_OF_WORD}")));
        // "lowest" shares "lo" with the training words but not "low</w>".
        let toks = apply_bpe(&m, "lowest").tokens;
        assert_eq!(toks[0], "lo");
        assert_eq!(decode_bpe(&TokenSeq { tokens: toks }).unwrap(), "lowest");
    }

    #[test]
    fn decode_edge_cases() {
        assert_eq!(decode_bpe(&TokenSeq::default()).unwrap(), "");
        let bad = TokenSeq {
            tokens: vec![format!("a{END_OF_WORD}b")],
        };
        assert!(matches!(decode_bpe(&bad), Err(BpeError::MisplacedMarker(_))));
    }

    #[test]
    fn reserved_marker_rejected() {
        assert!(matches!(
            learn_bpe([format!("a{END_OF_WORD}")], 10),
            Err(BpeError::ReservedMarker(_))
        ));
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bpe.merges");
        let m = learn_bpe(["the cat sat on the mat", "the bat"], 30).unwrap();
        m.save(&p).unwrap();
        let loaded = BpeModel::load(&p).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.fingerprint(), m.fingerprint());
        assert_eq!(apply_bpe(&loaded, "the rat"), apply_bpe(&m, "the rat"));

        let text = fs::read_to_string(&p).unwrap();
        let tampered: String = text
            .lines()
            .take(text.lines().count() - 1)
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(&p, tampered).unwrap();
        assert!(matches!(BpeModel::load(&p), Err(BpeError::Corrupt { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn round_trip_and_vocab_bound(
            corpus in prop::collection::vec("[a-e]{1,6}( [a-e]{1,6}){0,5}", 1..12),
            probe in "[a-g]{1,7}( [a-g]{1,7}){0,6}",
            extra in 0usize..40,
        ) {
            let base = learn_bpe(&corpus, usize::MAX).map(|m| m.alphabet().len()).unwrap();
            let target = base + extra;
            let m = learn_bpe(&corpus, target).unwrap();
            prop_assert!(m.vocab().len() <= target);
            let seq = apply_bpe(&m, &probe);
            prop_assert_eq!(decode_bpe(&seq).unwrap(), probe.split_whitespace().collect::<Vec<_>>().join(" "));
        }
    }
}
