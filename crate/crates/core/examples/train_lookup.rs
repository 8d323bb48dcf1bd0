//! Trains a retrieval model and a retrieval-off baseline on the synthetic
//! lookup corpus and compares their loss on held-out answers.
//!
//! `cargo run --release --example train_lookup -- 600`

mod common;

use retro_desk::pipeline::{answer_positions, positions_loss};
use retro_desk::train::TrainExample;

fn main() -> retro_desk::Result<()> {
    let steps = common::steps_arg(400);
    let w = common::build_world(6000)?;
    println!("{} training sequences, {} index entries", w.train_data.len(), w.index.len());
    let answers = answer_positions(&w.corpus.eval, &w.eval_seqs);

    let retro_cfg = common::model_config(true);
    println!("retro:");
    let retro = common::train_model(&retro_cfg, &w.train_data, steps)?;
    let base_cfg = common::model_config(false);
    println!("baseline:");
    let base = common::train_model(&base_cfg, &w.train_data, steps)?;

    let blind: Vec<TrainExample> = w.eval_data.iter().map(|e| TrainExample { tokens: e.tokens.clone(), neighbors: None }).collect();
    let on = positions_loss(&retro, &retro_cfg, &w.eval_data, &answers)?;
    let off = positions_loss(&retro, &retro_cfg, &blind, &answers)?;
    let baseline = positions_loss(&base, &base_cfg, &blind, &answers)?;
    println!("answer loss (nats/token): retro {on:.3}, retro without neighbours {off:.3}, baseline {baseline:.3}");
    Ok(())
}
