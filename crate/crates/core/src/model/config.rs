use serde::{Deserialize, Serialize};

use crate::corpus::VOCAB_SIZE;
use crate::error::{ensure, Result};
use crate::numeric::relpos::DEFAULT_REL_FEATURES;

/// Which half of each retrieved `[N, F]` value the encoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    #[default]
    Both,
    NeighborsOnly,
    ContinuationsOnly,
    /// No encoder and no chunked cross-attention: a plain transformer.
    Off,
}

impl NeighborMode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "both" => Self::Both,
            "neighbors_only" | "neighbors-only" => Self::NeighborsOnly,
            "continuations_only" | "continuations-only" => Self::ContinuationsOnly,
            "off" => Self::Off,
            _ => return Err(crate::Error::invalid(format!("unknown neighbour mode {s:?}"))),
        })
    }
}

/// Architecture hyperparameters. Layer indices in `cca_layers` and
/// `enc_ca_layers` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub chunk_len: usize,
    pub num_neighbors: usize,
    pub d_model: usize,
    pub d_enc: usize,
    pub layers: usize,
    pub enc_layers: usize,
    pub cca_layers: Vec<usize>,
    pub enc_ca_layers: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub d_ffw: usize,
    pub enc_d_ffw: usize,
    pub rel_features: usize,
    pub shared_embeddings: bool,
    pub neighbor_mode: NeighborMode,
    pub dropout: f64,
}

/// CCA every third layer from 6 when `layers >= 12`, otherwise from 2.
pub fn default_cca_layers(layers: usize) -> Vec<usize> {
    let start = if layers >= 12 { 6 } else { 2 };
    let v: Vec<usize> = (start..=layers).step_by(3).collect();
    if v.is_empty() && layers >= 1 {
        vec![1]
    } else {
        v
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::small(64, 8, 64, 4)
    }
}

impl ModelConfig {
    /// A toy configuration with default layer placement and encoder.
    pub fn small(seq_len: usize, chunk_len: usize, d_model: usize, layers: usize) -> Self {
        let heads = if d_model >= 64 { 4 } else { 2 };
        Self {
            vocab: VOCAB_SIZE,
            seq_len,
            chunk_len,
            num_neighbors: 2,
            d_model,
            d_enc: d_model,
            layers,
            enc_layers: 2,
            cca_layers: default_cca_layers(layers),
            enc_ca_layers: vec![1],
            heads,
            head_dim: d_model / heads,
            d_ffw: 4 * d_model,
            enc_d_ffw: 4 * d_model,
            rel_features: DEFAULT_REL_FEATURES,
            shared_embeddings: false,
            neighbor_mode: NeighborMode::Both,
            dropout: 0.0,
        }
    }

    pub fn num_chunks(&self) -> usize {
        self.seq_len / self.chunk_len
    }

    /// Length of a retrieved value `[N, F]`.
    pub fn retrieved_len(&self) -> usize {
        2 * self.chunk_len
    }

    /// Retrieved tokens the encoder actually sees and their position offset.
    pub fn active_span(&self) -> (usize, usize) {
        match self.neighbor_mode {
            NeighborMode::NeighborsOnly => (self.chunk_len, 0),
            NeighborMode::ContinuationsOnly => (self.chunk_len, self.chunk_len),
            _ => (2 * self.chunk_len, 0),
        }
    }

    pub fn retrieval_enabled(&self) -> bool {
        self.neighbor_mode != NeighborMode::Off && !self.cca_layers.is_empty()
    }

    pub fn attn_width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Layer after which the encoder runs.
    pub fn condition_layer(&self) -> Option<usize> {
        self.cca_layers.iter().copied().min()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab > VOCAB_SIZE - 1, "vocabulary must include the pad token (at least {VOCAB_SIZE})");
        ensure!(self.chunk_len >= 1, "chunk length must be positive");
        ensure!(
            self.seq_len >= self.chunk_len && self.seq_len % self.chunk_len == 0,
            "sequence length {} must be a positive multiple of chunk length {}",
            self.seq_len,
            self.chunk_len
        );
        ensure!(self.d_model >= 1 && self.d_enc >= 1, "widths must be positive");
        ensure!(self.heads >= 1 && self.head_dim >= 1, "heads and head_dim must be positive");
        ensure!(self.layers >= 1, "at least one decoder layer is required");
        ensure!(self.d_ffw >= 1 && self.enc_d_ffw >= 1, "feed-forward widths must be positive");
        ensure!(self.rel_features >= 2 && self.rel_features % 2 == 0, "relative feature count must be even and positive");
        ensure!(self.num_neighbors >= 1, "k must be positive");
        ensure!((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)");
        check_layers(&self.cca_layers, self.layers, "cca_layers")?;
        check_layers(&self.enc_ca_layers, self.enc_layers, "enc_ca_layers")?;
        if self.retrieval_enabled() {
            ensure!(self.enc_layers >= 1, "retrieval needs at least one encoder layer");
        }
        if self.shared_embeddings {
            ensure!(self.d_enc == self.d_model, "shared embeddings need d_enc == d_model");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| crate::Error::invalid(format!("bad model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_layers(layers: &[usize], count: usize, what: &str) -> Result<()> {
    ensure!(layers.windows(2).all(|w| w[0] < w[1]), "{what} must be strictly increasing");
    ensure!(layers.iter().all(|&p| p >= 1 && p <= count), "{what} must lie in [1, {count}]");
    Ok(())
}
