//! Retrofitting: a retrieval-off model gains frozen-base retrieval blocks
//! whose value projections start at zero, so it first behaves exactly like
//! the base model.

mod common;

use retro_desk::model::{log_likelihood, retrofit_params, Retrieval};
use retro_desk::pipeline::{answer_positions, positions_loss};
use retro_desk::train::{train, TrainExample, TrainOutputs};

fn main() -> retro_desk::Result<()> {
    let steps = common::steps_arg(300);
    let w = common::build_world(6000)?;
    let base_cfg = common::model_config(false);
    println!("base:");
    let base = common::train_model(&base_cfg, &w.train_data, steps)?;

    let cfg = common::model_config(true);
    let mut store = retrofit_params(&base, &base_cfg, &cfg, 1)?;
    let frozen = store.ids().filter(|&id| store.is_frozen(id)).count();
    println!("{} tensors, {frozen} frozen", store.len());

    let ex = &w.eval_data[0];
    let before = log_likelihood(&base, &base_cfg, &ex.tokens, Retrieval::Off)?;
    let after = log_likelihood(&store, &cfg, &ex.tokens, ex.retrieval())?;
    println!("step 0 identical to base: {}", before == after);

    println!("retrofit:");
    let log = train(&mut store, &cfg, &common::train_config(steps), &w.train_data, &TrainOutputs::default())?;
    println!("  loss {:.3} -> {:.3}", log[0].loss_nats, log[log.len() - 1].loss_nats);
    let unchanged = base.names().iter().all(|n| base.tensor(base.id(n).unwrap()) == store.tensor(store.id(n).unwrap()));
    println!("base tensors untouched: {unchanged}");

    let answers = answer_positions(&w.corpus.eval, &w.eval_seqs);
    let blind: Vec<TrainExample> = w.eval_data.iter().map(|e| TrainExample { tokens: e.tokens.clone(), neighbors: None }).collect();
    println!(
        "answer loss: base {:.3}, retrofitted {:.3}",
        positions_loss(&base, &base_cfg, &blind, &answers)?,
        positions_loss(&store, &cfg, &w.eval_data, &answers)?
    );
    Ok(())
}
