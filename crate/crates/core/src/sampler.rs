//! Chunk-wise autoregressive generation with retrieval at chunk boundaries.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, PAD};
use crate::embedder::ChunkEmbedder;
use crate::error::{ensure, Result};
use crate::eval::{annotate_overlap, write_file};
use crate::index::{ChunkIndex, NeighborRecord, SearchMode};
use crate::model::{forward, neighbor_values, ModelConfig, Retrieval};
use crate::numeric::{ParameterStore, Tape};

/// Source of neighbours for a completed chunk.
pub trait Retriever {
    fn retrieve(&mut self, chunk: &[u32]) -> Result<Vec<NeighborRecord>>;
}

/// Retrieves from a [`ChunkIndex`] and counts calls.
pub struct IndexRetriever<'a> {
    pub index: &'a ChunkIndex,
    pub embedder: &'a dyn ChunkEmbedder,
    pub k: usize,
    pub mode: SearchMode,
    pub exclude_doc_id: Option<u64>,
    pub calls: usize,
}

impl<'a> IndexRetriever<'a> {
    pub fn new(index: &'a ChunkIndex, embedder: &'a dyn ChunkEmbedder, k: usize, mode: SearchMode) -> Self {
        Self { index, embedder, k, mode, exclude_doc_id: None, calls: 0 }
    }
}

impl Retriever for IndexRetriever<'_> {
    fn retrieve(&mut self, chunk: &[u32]) -> Result<Vec<NeighborRecord>> {
        self.calls += 1;
        let mut recs = self.index.query_tokens(self.embedder, chunk, self.k, self.exclude_doc_id, self.mode)?.records;
        recs.resize_with(self.k, || NeighborRecord::empty(chunk.len()));
        Ok(recs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature(f64),
}

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub steps: usize,
    pub decoding: Decoding,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledNeighbor {
    pub doc_id: u64,
    pub chunk_index: u32,
    pub distance: f32,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    /// `Ret(C_u)` for every completed chunk `u`.
    pub neighbors: Vec<Vec<NeighborRecord>>,
    /// Natural-log probability of each generated token.
    pub log_probs: Vec<f64>,
    pub retrieval_calls: usize,
}

impl SampleOutput {
    pub fn neighbor_values(&self) -> Vec<Vec<Vec<u32>>> {
        neighbor_values(&self.neighbors)
    }

    pub fn lcp_depths(&self, chunk_len: usize) -> Vec<usize> {
        annotate_overlap(&self.tokens, chunk_len, &self.neighbor_values())
    }
}

/// Serialized sample for external colorizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDump {
    pub tokens: Vec<u32>,
    pub text: String,
    pub prompt_len: usize,
    pub per_chunk_neighbors: Vec<Vec<SampledNeighbor>>,
    pub lcp_depths: Vec<usize>,
}

impl SampleDump {
    pub fn new(out: &SampleOutput, chunk_len: usize) -> Result<Self> {
        let bytes = detokenize(&out.tokens)?;
        Ok(Self {
            tokens: out.tokens.clone(),
            text: String::from_utf8_lossy(&bytes).into_owned(),
            prompt_len: out.prompt_len,
            per_chunk_neighbors: out
                .neighbors
                .iter()
                .map(|c| {
                    c.iter()
                        .map(|r| SampledNeighbor {
                            doc_id: r.source_doc_id,
                            chunk_index: r.source_chunk_index,
                            distance: r.distance,
                            tokens: r.value(),
                        })
                        .collect()
                })
                .collect(),
            lcp_depths: out.lcp_depths(chunk_len),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_vec_pretty(self).expect("sample serializes");
        s.push(b'\n');
        write_file(path, &s)
    }
}

fn log_softmax_at(logits: &[f64], t: usize) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| (x - mx).exp()).sum();
    logits[t] - mx - z.ln()
}

/// Generates up to `opts.steps` tokens after `prompt`, stopping at `n`.
/// Every completed chunk, including complete prompt chunks, is retrieved
/// exactly once. The whole prefix is recomputed for each new token.
pub fn sample(
    store: &ParameterStore<f32>,
    cfg: &ModelConfig,
    prompt: &[u32],
    opts: &SampleOptions,
    retriever: &mut dyn Retriever,
) -> Result<SampleOutput> {
    let m = cfg.chunk_len;
    ensure!(prompt.len() < cfg.seq_len, "prompt of {} tokens leaves no room in n = {}", prompt.len(), cfg.seq_len);
    ensure!(!prompt.contains(&PAD), "prompts must not contain the pad token");
    if let Decoding::Temperature(t) = opts.decoding {
        ensure!(t > 0.0 && t.is_finite(), "temperature must be positive");
    }
    let retrieving = cfg.retrieval_enabled();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tokens = prompt.to_vec();
    let mut neighbors: Vec<Vec<NeighborRecord>> = Vec::new();
    let mut calls = 0;
    let mut catch_up = |tokens: &[u32], neighbors: &mut Vec<Vec<NeighborRecord>>, calls: &mut usize| -> Result<()> {
        while retrieving && neighbors.len() < tokens.len() / m {
            let u = neighbors.len();
            neighbors.push(retriever.retrieve(&tokens[u * m..(u + 1) * m])?);
            *calls += 1;
        }
        Ok(())
    };
    catch_up(&tokens, &mut neighbors, &mut calls)?;
    let mut log_probs = Vec::new();
    for _ in 0..opts.steps {
        if tokens.len() >= cfg.seq_len {
            break;
        }
        let context: Vec<u32> = if tokens.is_empty() { vec![PAD] } else { tokens.clone() };
        let values = neighbor_values(&neighbors);
        let retrieval = if retrieving { Retrieval::On(&values) } else { Retrieval::Off };
        let mut tape = Tape::<f32>::new();
        let out = forward(&mut tape, store, cfg, &context, retrieval, None)?;
        let logits: Vec<f64> = tape.value(out.logits).row(context.len() - 1).iter().map(|&x| x as f64).collect();
        let next = match opts.decoding {
            Decoding::Greedy => argmax_non_pad(&logits),
            Decoding::Temperature(t) => {
                let mx = logits.iter().skip(1).cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().enumerate().map(|(i, &x)| if i == PAD as usize { 0.0 } else { ((x - mx) / t).exp() }).collect();
                let z: f64 = w.iter().sum();
                let mut u = rng.random::<f64>() * z;
                let mut pick = w.len() - 1;
                for (i, &wi) in w.iter().enumerate() {
                    if u < wi {
                        pick = i;
                        break;
                    }
                    u -= wi;
                }
                pick
            }
        };
        log_probs.push(log_softmax_at(&logits, next));
        tokens.push(next as u32);
        catch_up(&tokens, &mut neighbors, &mut calls)?;
    }
    Ok(SampleOutput {
        tokens,
        prompt_len: prompt.len(),
        neighbors,
        log_probs,
        retrieval_calls: calls,
    })
}

fn argmax_non_pad(logits: &[f64]) -> usize {
    let mut best = 1;
    for i in 2..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best
}
