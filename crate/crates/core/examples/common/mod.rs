//! A small lookup world shared by the model-level examples.

#![allow(dead_code)]

use retro_desk::corpus::{documents_from_records, Document, Sequence};
use retro_desk::embedder::RandomProjectionEmbedder;
use retro_desk::index::{precompute_neighbors, ChunkIndex, IndexOptions, SearchMode};
use retro_desk::model::{init_params, ModelConfig, NeighborMode};
use retro_desk::numeric::ParameterStore;
use retro_desk::pipeline::{document_chunks, embedder, examples, sequences};
use retro_desk::synthetic::{generate, SyntheticConfig, SyntheticCorpus};
use retro_desk::train::{train, LrSchedule, TrainConfig, TrainExample, TrainOutputs};

pub const NPROBE: usize = 4;

pub struct World {
    pub corpus: SyntheticCorpus,
    pub train_docs: Vec<Document>,
    pub embedder: RandomProjectionEmbedder,
    pub index: ChunkIndex,
    pub train_seqs: Vec<Sequence>,
    pub eval_seqs: Vec<Sequence>,
    pub train_data: Vec<TrainExample>,
    pub eval_data: Vec<TrainExample>,
}

/// Steps from the first command-line argument, or `default`.
pub fn steps_arg(default: usize) -> usize {
    std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(default)
}

pub fn model_config(retrieval: bool) -> ModelConfig {
    let mut cfg = ModelConfig::small(64, 8, 64, 4);
    cfg.d_enc = 32;
    cfg.enc_d_ffw = 128;
    if !retrieval {
        cfg.neighbor_mode = NeighborMode::Off;
    }
    cfg
}

pub fn build_world(num_train_docs: usize) -> retro_desk::Result<World> {
    let cfg = SyntheticConfig {
        num_train_docs,
        num_fact_docs: 250,
        num_valid_docs: 50,
        num_eval_docs: 100,
        held_out_facts: 100,
        ..SyntheticConfig::default()
    };
    let corpus = generate(&cfg)?;
    let train_docs = documents_from_records(&corpus.train)?;
    let eval_docs = documents_from_records(&corpus.eval)?;
    let embedder = embedder(cfg.chunk_len, 0x00c0_ffee_5eed_0001)?;
    let index = ChunkIndex::build(&document_chunks(&train_docs, cfg.chunk_len)?, &embedder, &IndexOptions::default())?;
    let model = model_config(true);
    let mode = SearchMode::Approximate { nprobe: NPROBE };
    let train_seqs = sequences(&train_docs, &model)?;
    let eval_seqs = sequences(&eval_docs, &model)?;
    let train_nb = precompute_neighbors(&train_seqs, &index, &embedder, model.num_neighbors, mode)?;
    let eval_nb = precompute_neighbors(&eval_seqs, &index, &embedder, model.num_neighbors, mode)?;
    Ok(World {
        train_data: examples(&train_seqs, Some(&train_nb))?,
        eval_data: examples(&eval_seqs, Some(&eval_nb))?,
        corpus,
        train_docs,
        embedder,
        index,
        train_seqs,
        eval_seqs,
    })
}

pub fn train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        max_steps: steps,
        schedule: LrSchedule::WarmupCosine { warmup: steps / 10, peak: 2e-3, min: 2e-4, cosine_len: steps },
        ..TrainConfig::default()
    }
}

/// Trains from scratch, dropping neighbours when `cfg` has retrieval off.
pub fn train_model(cfg: &ModelConfig, data: &[TrainExample], steps: usize) -> retro_desk::Result<ParameterStore<f32>> {
    let mut store = init_params(cfg, 0)?;
    let data = without_neighbors_if_off(cfg, data);
    let log = train(&mut store, cfg, &train_config(steps), &data, &TrainOutputs::default())?;
    if let (Some(a), Some(b)) = (log.first(), log.last()) {
        println!("  loss {:.3} -> {:.3} nats over {} steps", a.loss_nats, b.loss_nats, log.len());
    }
    Ok(store)
}

pub fn without_neighbors_if_off(cfg: &ModelConfig, data: &[TrainExample]) -> Vec<TrainExample> {
    data.iter()
        .map(|e| TrainExample { tokens: e.tokens.clone(), neighbors: if cfg.retrieval_enabled() { e.neighbors.clone() } else { None } })
        .collect()
}
