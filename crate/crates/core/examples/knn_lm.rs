//! Token-level kNN-LM on top of a retrieval-off model: build a datastore of
//! final hidden states, then tune the mixture weight and temperature.

mod common;

use retro_desk::eval::{knnlm_perplexity, tune_knnlm};
use retro_desk::pipeline::{build_datastore, knn_stream};

fn main() -> retro_desk::Result<()> {
    let steps = common::steps_arg(300);
    let w = common::build_world(3000)?;
    let cfg = common::model_config(false);
    println!("training:");
    let store = common::train_model(&cfg, &w.train_data, steps)?;
    let train = common::without_neighbors_if_off(&cfg, &w.train_data);
    let valid = common::without_neighbors_if_off(&cfg, &w.eval_data);
    let ds = build_datastore(&store, &cfg, &train)?;
    let k = 16;
    let stream = knn_stream(&store, &cfg, &ds, &valid, k)?;
    let mean_d = stream.iter().filter_map(|s| s.hits.first()).map(|h| h.1).sum::<f64>() / stream.len() as f64;
    let (best, trace) = tune_knnlm(&stream, 1.0 / mean_d, k)?;
    println!("{} keys, {} scored tokens, {} grid points", ds.len(), stream.len(), trace.len());
    println!("perplexity: LM {:.3}, kNN-LM {:.3} at lambda {:.2}, alpha {:.4}", knnlm_perplexity(&stream, 0.0, best.alpha), knnlm_perplexity(&stream, best.lambda, best.alpha), best.lambda, best.alpha);
    Ok(())
}
