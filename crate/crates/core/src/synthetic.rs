//! Synthetic lookup-task corpus.
//!
//! Every fact pairs a random key with a random answer. A fact is written as
//! two chunk-aligned chunks: `@KEYKEY:` followed by the answer and a newline.
//! Fact documents list facts back to back and go into the training split, so
//! every fact is retrievable. Ordinary documents mix filler text with facts:
//! training documents only use training facts, while validation and
//! evaluation documents use held-out facts whose answers exist nowhere else
//! than in the fact documents.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusRecord;
use crate::error::{ensure, Result};

const KEY_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
const ANSWER_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "ru", "sa", "te", "vo", "di", "pa", "qu", "zo", "be", "fi", "gu", "ha", "jo", "wi", "xe", "yu",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub chunk_len: usize,
    /// Chunks per ordinary document.
    pub doc_chunks: usize,
    pub facts_per_doc: usize,
    pub num_fact_docs: usize,
    pub facts_per_fact_doc: usize,
    pub num_train_docs: usize,
    pub num_valid_docs: usize,
    pub num_eval_docs: usize,
    /// Facts held out for validation and for evaluation, each.
    pub held_out_facts: usize,
    pub vocabulary_words: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            chunk_len: 8,
            doc_chunks: 8,
            facts_per_doc: 2,
            num_fact_docs: 1000,
            facts_per_fact_doc: 4,
            num_train_docs: 30_000,
            num_valid_docs: 300,
            num_eval_docs: 500,
            held_out_facts: 400,
            vocabulary_words: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub key: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    /// Ordinary training documents followed by the fact documents.
    pub train: Vec<CorpusRecord>,
    pub valid: Vec<CorpusRecord>,
    pub eval: Vec<CorpusRecord>,
    pub facts: Vec<Fact>,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.chunk_len >= 4, "lookup chunks need at least 4 tokens");
        ensure!(self.facts_per_doc >= 1 && 2 * self.facts_per_doc <= self.doc_chunks, "documents are too short for their facts");
        let total = self.num_fact_docs * self.facts_per_fact_doc;
        ensure!(total > 2 * self.held_out_facts, "held-out facts leave no training facts");
        ensure!(self.held_out_facts > 0 || self.num_eval_docs + self.num_valid_docs == 0, "evaluation documents need held-out facts");
        ensure!(self.vocabulary_words >= 1, "need at least one filler word");
        Ok(())
    }

    pub fn key_len(&self) -> usize {
        self.chunk_len - 2
    }

    pub fn answer_len(&self) -> usize {
        self.chunk_len - 1
    }
}

fn random_string(rng: &mut ChaCha8Rng, alphabet: &[u8], len: usize) -> String {
    (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())] as char).collect()
}

struct Writer<'a> {
    cfg: &'a SyntheticConfig,
    words: Vec<String>,
}

impl Writer<'_> {
    fn filler(&self, rng: &mut ChaCha8Rng, chunks: usize) -> String {
        let len = chunks * self.cfg.chunk_len;
        let mut s = String::new();
        while s.len() < len {
            s.push_str(&self.words[rng.random_range(0..self.words.len())]);
            s.push(' ');
        }
        s.truncate(len);
        s
    }

    fn fact(&self, text: &mut String, spans: &mut Vec<[usize; 2]>, f: &Fact) {
        text.push('@');
        text.push_str(&f.key);
        text.push(':');
        let start = text.len();
        text.push_str(&f.answer);
        spans.push([start, text.len()]);
        text.push('\n');
    }

    /// An ordinary document: filler chunks with facts at random chunk-aligned slots.
    fn document(&self, rng: &mut ChaCha8Rng, id: String, facts: &[&Fact]) -> CorpusRecord {
        let slots = self.cfg.doc_chunks - 2 * facts.len();
        let mut at: Vec<usize> = (0..=slots).collect();
        at.shuffle(rng);
        let mut at: Vec<usize> = at[..facts.len()].to_vec();
        at.sort_unstable();
        let mut text = String::new();
        let mut spans = Vec::new();
        let mut filler_done = 0;
        for (f, &slot) in facts.iter().zip(&at) {
            if slot > filler_done {
                text.push_str(&self.filler(rng, slot - filler_done));
                filler_done = slot;
            }
            self.fact(&mut text, &mut spans, f);
        }
        if slots > filler_done {
            text.push_str(&self.filler(rng, slots - filler_done));
        }
        CorpusRecord { id, text, answer_spans: spans }
    }
}

/// Generates the corpus deterministically from `cfg.seed`.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut words = Vec::with_capacity(cfg.vocabulary_words);
    while words.len() < cfg.vocabulary_words {
        let n = rng.random_range(1..=3);
        let w: String = (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
        if !words.contains(&w) {
            words.push(w);
        }
    }
    let total = cfg.num_fact_docs * cfg.facts_per_fact_doc;
    let mut seen = std::collections::HashSet::new();
    let mut facts = Vec::with_capacity(total);
    while facts.len() < total {
        let key = random_string(&mut rng, KEY_ALPHABET, cfg.key_len());
        if seen.insert(key.clone()) {
            let answer = random_string(&mut rng, ANSWER_ALPHABET, cfg.answer_len());
            facts.push(Fact { key, answer });
        }
    }
    let w = Writer { cfg, words };
    let h = cfg.held_out_facts;
    let (valid_facts, rest) = facts.split_at(h);
    let (eval_facts, train_facts) = rest.split_at(h);
    let pick = |pool: &[Fact], rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut idx: Vec<usize> = Vec::with_capacity(cfg.facts_per_doc);
        while idx.len() < cfg.facts_per_doc.min(pool.len()) {
            let i = rng.random_range(0..pool.len());
            if !idx.contains(&i) {
                idx.push(i);
            }
        }
        idx
    };
    let ordinary = |prefix: &str, n: usize, pool: &[Fact], rng: &mut ChaCha8Rng| -> Vec<CorpusRecord> {
        (0..n)
            .map(|i| {
                let chosen: Vec<&Fact> = pick(pool, rng).into_iter().map(|j| &pool[j]).collect();
                w.document(rng, format!("{prefix}-{i:06}"), &chosen)
            })
            .collect()
    };
    let mut train = ordinary("train", cfg.num_train_docs, train_facts, &mut rng);
    let valid = ordinary("valid", cfg.num_valid_docs, valid_facts, &mut rng);
    let eval = ordinary("eval", cfg.num_eval_docs, eval_facts, &mut rng);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    for (d, group) in order.chunks(cfg.facts_per_fact_doc).enumerate() {
        let mut text = String::new();
        let mut spans = Vec::new();
        for &i in group {
            w.fact(&mut text, &mut spans, &facts[i]);
        }
        train.push(CorpusRecord { id: format!("fact-{d:06}"), text, answer_spans: spans });
    }
    Ok(SyntheticCorpus { train, valid, eval, facts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            num_fact_docs: 50,
            num_train_docs: 200,
            num_valid_docs: 20,
            num_eval_docs: 20,
            held_out_facts: 20,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn layout_is_chunk_aligned() {
        let cfg = small();
        let c = generate(&cfg).unwrap();
        assert_eq!(c.train.len(), 250);
        for r in c.train.iter().chain(&c.valid).chain(&c.eval) {
            let m = cfg.chunk_len;
            if r.id.starts_with("fact") {
                assert_eq!(r.text.len(), 4 * 2 * m);
            } else {
                assert_eq!(r.text.len(), cfg.doc_chunks * m, "{}", r.id);
            }
            for &[s, e] in &r.answer_spans {
                assert_eq!(s % m, 0);
                assert_eq!(e - s, cfg.answer_len());
                assert_eq!(&r.text[s - m..s - m + 1], "@");
                assert_eq!(&r.text[e..e + 1], "\n");
            }
        }
    }

    #[test]
    fn held_out_answers_only_in_fact_docs() {
        let c = generate(&small()).unwrap();
        for r in &c.eval {
            for &[s, e] in &r.answer_spans {
                let ans = &r.text[s..e];
                let holders: Vec<&str> = c.train.iter().filter(|t| t.text.contains(ans)).map(|t| t.id.as_str()).collect();
                assert!(!holders.is_empty());
                assert!(holders.iter().all(|h| h.starts_with("fact")), "{holders:?}");
            }
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SyntheticConfig { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap().train, generate(&other).unwrap().train);
    }
}
