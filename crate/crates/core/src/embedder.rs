//! Frozen chunk embedder used to key the retrieval database.
//!
//! The default embedder is a seeded random-projection table with one row per
//! (position, token) pair; a chunk embeds to the mean of its rows. It never
//! changes after construction, so keys can be computed once and stored.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::VOCAB_SIZE;
use crate::error::{ensure, Result};

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const DEFAULT_EMBED_SEED: u64 = 0x00c0_ffee_5eed_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Everything needed to rebuild an embedder; persisted in index headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub seed: u64,
    pub dim: usize,
    pub chunk_len: usize,
    pub vocab: usize,
}

pub trait ChunkEmbedder: Send + Sync {
    fn spec(&self) -> EmbedderSpec;

    fn embed_chunk(&self, tokens: &[u32]) -> Result<EmbeddingVector>;

    fn dim(&self) -> usize {
        self.spec().dim
    }

    fn chunk_len(&self) -> usize {
        self.spec().chunk_len
    }
}

#[derive(Debug, Clone)]
pub struct RandomProjectionEmbedder {
    spec: EmbedderSpec,
    // [chunk_len][vocab][dim]
    table: Vec<f32>,
}

impl RandomProjectionEmbedder {
    pub fn new(spec: EmbedderSpec) -> Result<Self> {
        ensure!(spec.dim >= 1 && spec.chunk_len >= 1 && spec.vocab >= 1, "embedder dimensions must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let scale = 1.0 / (spec.dim as f64).sqrt();
        let len = spec.chunk_len * spec.vocab * spec.dim;
        let table = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
            .collect();
        Ok(Self { spec, table })
    }

    pub fn with_defaults(chunk_len: usize) -> Result<Self> {
        Self::new(EmbedderSpec {
            seed: DEFAULT_EMBED_SEED,
            dim: DEFAULT_EMBED_DIM,
            chunk_len,
            vocab: VOCAB_SIZE,
        })
    }

    /// Row of the projection table for `token` at `position`.
    pub fn row(&self, position: usize, token: u32) -> &[f32] {
        let d = self.spec.dim;
        let start = (position * self.spec.vocab + token as usize) * d;
        &self.table[start..start + d]
    }
}

impl ChunkEmbedder for RandomProjectionEmbedder {
    fn spec(&self) -> EmbedderSpec {
        self.spec
    }

    fn embed_chunk(&self, tokens: &[u32]) -> Result<EmbeddingVector> {
        let m = self.spec.chunk_len;
        ensure!(tokens.len() == m, "chunk has {} tokens, embedder expects {m}", tokens.len());
        let mut acc = vec![0f64; self.spec.dim];
        for (p, &t) in tokens.iter().enumerate() {
            ensure!((t as usize) < self.spec.vocab, "token {t} outside vocabulary");
            for (a, &v) in acc.iter_mut().zip(self.row(p, t)) {
                *a += v as f64;
            }
        }
        Ok(EmbeddingVector(acc.into_iter().map(|a| (a / m as f64) as f32).collect()))
    }
}
