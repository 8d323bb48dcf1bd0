//! Glue between the stages: corpora to sequences, sequences to training
//! examples, and answer-token scoring for lookup corpora.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::corpus::{make_sequences, Chunk, CorpusRecord, Document, Sequence, VOCAB_SIZE};
use crate::embedder::{EmbedderSpec, RandomProjectionEmbedder, DEFAULT_EMBED_DIM};
use crate::error::{ensure, Result};
use crate::eval::{KnnStreamItem, TokenDatastore};
use crate::index::NeighborFile;
use crate::model::{forward, log_likelihood, next_token_targets, ModelConfig};
use crate::numeric::{ParameterStore, Tape};
use crate::train::TrainExample;

pub fn embedder(chunk_len: usize, seed: u64) -> Result<RandomProjectionEmbedder> {
    RandomProjectionEmbedder::new(EmbedderSpec {
        seed,
        dim: DEFAULT_EMBED_DIM,
        chunk_len,
        vocab: VOCAB_SIZE,
    })
}

/// Every chunk of every document, in document order.
pub fn document_chunks(docs: &[Document], m: usize) -> Result<Vec<Chunk>> {
    let per: Vec<Vec<Chunk>> = docs.par_iter().map(|d| d.chunks(m)).collect::<Result<_>>()?;
    Ok(per.concat())
}

/// Non-overlapping `n`-token windows of `docs`.
pub fn sequences(docs: &[Document], cfg: &ModelConfig) -> Result<Vec<Sequence>> {
    make_sequences(docs, cfg.seq_len, cfg.chunk_len, cfg.seq_len)
}

/// Pairs sequences with their precomputed neighbours, checking that both
/// were cut the same way.
pub fn examples(seqs: &[Sequence], neighbors: Option<&NeighborFile>) -> Result<Vec<TrainExample>> {
    let Some(nf) = neighbors else {
        return Ok(seqs.iter().map(|s| TrainExample { tokens: s.tokens.clone(), neighbors: None }).collect());
    };
    ensure!(
        nf.sequences.len() == seqs.len(),
        "neighbour file covers {} sequences but the corpus has {}",
        nf.sequences.len(),
        seqs.len()
    );
    seqs.iter()
        .zip(&nf.sequences)
        .map(|(s, n)| {
            ensure!(
                n.doc_id == s.doc_id && n.start == s.start as u64 && n.chunks.len() * nf.chunk_len == s.tokens.len(),
                "neighbour file does not match sequence (doc {}, start {})",
                s.doc_id,
                s.start
            );
            Ok(TrainExample {
                tokens: s.tokens.clone(),
                neighbors: Some(crate::model::neighbor_values(&n.chunks)),
            })
        })
        .collect()
}

/// Positions, within each sequence, of the planted answer tokens.
pub fn answer_positions(records: &[CorpusRecord], seqs: &[Sequence]) -> Vec<Vec<usize>> {
    let spans: HashMap<u64, &[[usize; 2]]> = records.iter().map(|r| (r.to_document().doc_id, r.answer_spans.as_slice())).collect();
    seqs.iter()
        .map(|s| {
            let end = s.start + s.tokens.len();
            spans
                .get(&s.doc_id)
                .into_iter()
                .flat_map(|sp| sp.iter())
                .flat_map(|&[a, b]| a.max(s.start)..b.min(end))
                .map(|p| p - s.start)
                .collect()
        })
        .collect()
}

/// Mean loss in nats over the given token positions.
pub fn positions_loss(
    store: &ParameterStore<f32>,
    cfg: &ModelConfig,
    data: &[TrainExample],
    positions: &[Vec<usize>],
) -> Result<f64> {
    ensure!(data.len() == positions.len(), "{} examples but {} position lists", data.len(), positions.len());
    let per: Vec<(f64, usize)> = data
        .par_iter()
        .zip(positions)
        .filter(|(_, p)| !p.is_empty())
        .map(|(ex, pos)| {
            let ll = log_likelihood(store, cfg, &ex.tokens, ex.retrieval())?;
            let mut s = 0.0;
            let mut n = 0;
            for &p in pos {
                if let Some(l) = ll.losses[p] {
                    s += l;
                    n += 1;
                }
            }
            Ok((s, n))
        })
        .collect::<Result<_>>()?;
    let (s, n) = per.iter().fold((0.0, 0), |(a, b), &(s, n)| (a + s, b + n));
    ensure!(n > 0, "no answer tokens to score");
    Ok(s / n as f64)
}

struct ContextStates {
    hidden: Vec<f32>,
    /// Model probability of the true next token, per scored position.
    target_probs: Vec<Option<f64>>,
}

fn context_states(store: &ParameterStore<f32>, cfg: &ModelConfig, ex: &TrainExample) -> Result<ContextStates> {
    let mut tape = Tape::new();
    let out = forward(&mut tape, store, cfg, &ex.tokens, ex.retrieval(), None)?;
    let logits = tape.value(out.logits);
    let target_probs = next_token_targets(&ex.tokens)
        .iter()
        .enumerate()
        .map(|(p, t)| {
            t.map(|t| {
                let row = logits.row(p);
                let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                let z: f64 = row.iter().map(|&x| (x as f64 - mx).exp()).sum();
                (row[t as usize] as f64 - mx).exp() / z
            })
        })
        .collect();
    Ok(ContextStates { hidden: tape.value(out.hidden).data().to_vec(), target_probs })
}

/// kNN-LM datastore: the final hidden state at every scored position of
/// `data`, valued by the token that follows it.
pub fn build_datastore(store: &ParameterStore<f32>, cfg: &ModelConfig, data: &[TrainExample]) -> Result<TokenDatastore> {
    let d = cfg.d_model;
    let states: Vec<ContextStates> = data.par_iter().map(|ex| context_states(store, cfg, ex)).collect::<Result<_>>()?;
    let mut ds = TokenDatastore::new(d);
    for (ex, st) in data.iter().zip(&states) {
        for (p, t) in next_token_targets(&ex.tokens).iter().enumerate() {
            if let Some(t) = t {
                ds.push(&st.hidden[p * d..(p + 1) * d], *t);
            }
        }
    }
    Ok(ds)
}

/// Per-token LM probabilities and datastore hits over `data`, in order.
pub fn knn_stream(
    store: &ParameterStore<f32>,
    cfg: &ModelConfig,
    ds: &TokenDatastore,
    data: &[TrainExample],
    k: usize,
) -> Result<Vec<KnnStreamItem>> {
    let d = cfg.d_model;
    let states: Vec<ContextStates> = data.par_iter().map(|ex| context_states(store, cfg, ex)).collect::<Result<_>>()?;
    let mut queries = Vec::new();
    let mut items = Vec::new();
    for (ex, st) in data.iter().zip(&states) {
        for (p, t) in next_token_targets(&ex.tokens).iter().enumerate() {
            if let (Some(t), Some(prob)) = (t, st.target_probs[p]) {
                queries.extend_from_slice(&st.hidden[p * d..(p + 1) * d]);
                items.push(KnnStreamItem { target: *t, lm_prob: prob, hits: Vec::new() });
            }
        }
    }
    for (item, hits) in items.iter_mut().zip(ds.search(&queries, k)) {
        item.hits = hits;
    }
    Ok(items)
}
