//! The retrieval-enhanced encoder-decoder.

pub mod config;
pub mod forward;
pub mod init;


pub use config::{default_cca_layers, ModelConfig, NeighborMode};
pub use forward::{
    active_neighbors, ca, cca, encode_neighbors, forward, log_likelihood, loss_on_tape, next_token_logits, next_token_targets,
    ChunkNeighbors, EncodedNeighbors, ForwardOutput, Retrieval, TokenLosses,
};
pub use init::{init_params, is_retrieval_param, retrofit_params, ValueInit};

use crate::index::NeighborRecord;

/// Converts retrieved records into the `[N, F]` token lists the model consumes.
pub fn neighbor_values(chunks: &[Vec<NeighborRecord>]) -> Vec<Vec<Vec<u32>>> {
    chunks.iter().map(|c| c.iter().map(NeighborRecord::value).collect()).collect()
}
