//! Evaluation-to-train overlap and the bits-per-byte curve it filters.

mod common;

use retro_desk::eval::{default_alphas, filtered_bpb, overlap_histogram, evaluate, OverlapSource};
use retro_desk::index::SearchMode;

fn main() -> retro_desk::Result<()> {
    let steps = common::steps_arg(300);
    let w = common::build_world(6000)?;
    let cfg = common::model_config(true);
    println!("training:");
    let store = common::train_model(&cfg, &w.train_data, steps)?;
    let neighbors: Vec<_> = w.eval_data.iter().map(|e| e.neighbors.clone().expect("retrieval data")).collect();
    let overlap = OverlapSource { index: &w.index, embedder: &w.embedder, k: 10, mode: SearchMode::Approximate { nprobe: common::NPROBE } };
    let records = evaluate(&store, &cfg, &w.eval_seqs, Some(&neighbors), &overlap)?;
    println!("{} evaluation chunks", records.len());
    println!("overlap histogram {:?}", overlap_histogram(&records));
    for alpha in default_alphas() {
        match filtered_bpb(&records, alpha) {
            Ok(p) => println!("alpha {alpha:.3}: {:>5} chunks, {:.4} bits per byte", p.chunks, p.bpb),
            Err(e) => println!("alpha {alpha:.3}: {e}"),
        }
    }
    Ok(())
}
