//! Seeded generator for a toy language pair used by fixtures and end-to-end tests.
//!
//! Each concept has one source word. Its target word is a substitution, except for
//! "agreeing" concepts whose target form depends on the class of the preceding concept.
//! The reverse direction is therefore a pure word cipher, while the forward direction
//! needs target-side context.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BilingualCorpus, LanguageTag, MonolingualCorpus, SentencePair};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub concepts: usize,
    /// How many concepts take one of two target forms chosen by agreement.
    pub agreeing: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            concepts: 40,
            agreeing: 10,
            min_len: 4,
            max_len: 8,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Concept {
    source: String,
    /// Form after a class-0 word (or at sentence start) and after a class-1 word.
    targets: [String; 2],
    class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLanguagePair {
    pub source_language: LanguageTag,
    pub target_language: LanguageTag,
    concepts: Vec<Concept>,
    config: SyntheticConfig,
}

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn random_word(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let len = rng.gen_range(min..=max);
    (0..len)
        .map(|_| LETTERS[rng.gen_range(0..LETTERS.len())] as char)
        .collect()
}

impl SyntheticLanguagePair {
    pub fn generate(source_language: LanguageTag, target_language: LanguageTag, config: SyntheticConfig) -> Self {
        assert!(config.agreeing <= config.concepts && config.min_len >= 1 && config.min_len <= config.max_len);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut used = BTreeSet::new();
        let mut fresh = |rng: &mut ChaCha8Rng| loop {
            let w = random_word(rng, 3, 6);
            if used.insert(w.clone()) {
                return w;
            }
        };
        let concepts = (0..config.concepts)
            .map(|i| {
                let source = fresh(&mut rng);
                let first = fresh(&mut rng);
                let second = if i < config.agreeing {
                    fresh(&mut rng)
                } else {
                    first.clone()
                };
                Concept {
                    source,
                    targets: [first, second],
                    class: rng.gen_range(0..2),
                }
            })
            .collect();
        Self {
            source_language,
            target_language,
            concepts,
            config,
        }
    }

    pub fn source_vocab(&self) -> Vec<&str> {
        self.concepts.iter().map(|c| c.source.as_str()).collect()
    }

    pub fn target_vocab(&self) -> Vec<&str> {
        self.concepts
            .iter()
            .flat_map(|c| c.targets.iter().map(String::as_str))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.gen_range(self.config.min_len..=self.config.max_len);
        (0..len).map(|_| rng.gen_range(0..self.concepts.len())).collect()
    }

    fn render_source(&self, seq: &[usize]) -> String {
        seq.iter()
            .map(|&c| self.concepts[c].source.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn render_target(&self, seq: &[usize]) -> String {
        let mut prev_class = 0;
        let mut words = Vec::with_capacity(seq.len());
        for &c in seq {
            words.push(self.concepts[c].targets[prev_class].as_str());
            prev_class = self.concepts[c].class;
        }
        words.join(" ")
    }

    /// The reference translation of a source sentence made of known words.
    pub fn translate_source(&self, sentence: &str) -> Option<String> {
        let seq = sentence
            .split_whitespace()
            .map(|w| self.concepts.iter().position(|c| c.source == w))
            .collect::<Option<Vec<_>>>()?;
        Some(self.render_target(&seq))
    }

    pub fn bilingual(&self, id: &str, n: usize, seed: u64) -> BilingualCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = (0..n)
            .map(|_| {
                let seq = self.sample(&mut rng);
                SentencePair::new(self.render_source(&seq), self.render_target(&seq), id)
            })
            .collect();
        BilingualCorpus::new(id, self.source_language.clone(), self.target_language.clone()).with_pairs(pairs)
    }

    pub fn monolingual_source(&self, id: &str, n: usize, seed: u64) -> MonolingualCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sentences = (0..n).map(|_| self.render_source(&self.sample(&mut rng))).collect();
        MonolingualCorpus::new(id, self.source_language.clone(), id, sentences)
    }

    pub fn monolingual_target(&self, id: &str, n: usize, seed: u64) -> MonolingualCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sentences = (0..n).map(|_| self.render_target(&self.sample(&mut rng))).collect();
        MonolingualCorpus::new(id, self.target_language.clone(), id, sentences)
    }

    /// In-vocabulary words of `language` drawn independently, ignoring agreement.
    pub fn word_salad(&self, id: &str, language: &LanguageTag, n: usize, seed: u64) -> MonolingualCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = if *language == self.source_language {
            self.source_vocab()
        } else {
            self.target_vocab()
        };
        let sentences = (0..n)
            .map(|_| {
                let len = rng.gen_range(self.config.min_len..=self.config.max_len);
                (0..len)
                    .map(|_| *vocab.choose(&mut rng).expect("vocabulary is non-empty"))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        MonolingualCorpus::new(id, language.clone(), id, sentences)
    }

    /// Random letter strings outside the vocabulary.
    pub fn gibberish(&self, id: &str, language: &LanguageTag, n: usize, seed: u64) -> MonolingualCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sentences = (0..n)
            .map(|_| {
                let len = rng.gen_range(self.config.min_len..=self.config.max_len);
                (0..len)
                    .map(|_| random_word(&mut rng, 2, 8))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        MonolingualCorpus::new(id, language.clone(), id, sentences)
    }
}
