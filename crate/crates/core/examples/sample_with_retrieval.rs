//! Greedy continuation of a held-out key with and without retrieval. The
//! answer is only in the fact documents, so only the retrieving sampler can
//! copy it.

mod common;

use retro_desk::corpus::{detokenize, tokenize};
use retro_desk::index::SearchMode;
use retro_desk::sampler::{sample, Decoding, IndexRetriever, SampleDump, SampleOptions};

fn main() -> retro_desk::Result<()> {
    let steps = common::steps_arg(400);
    let w = common::build_world(6000)?;
    let cfg = common::model_config(true);
    println!("training:");
    let store = common::train_model(&cfg, &w.train_data, steps)?;
    let mut off_cfg = cfg.clone();
    off_cfg.cca_layers.clear();

    let held_out = &w.corpus.facts[100..105];
    let opts = SampleOptions { steps: cfg.chunk_len - 1, decoding: Decoding::Greedy, seed: 0 };
    let mut copied = 0;
    for f in held_out {
        let prompt = tokenize(format!("@{}:", f.key).as_bytes());
        let mut r = IndexRetriever::new(&w.index, &w.embedder, cfg.num_neighbors, SearchMode::Approximate { nprobe: common::NPROBE });
        let with = sample(&store, &cfg, &prompt, &opts, &mut r)?;
        let without = sample(&store, &off_cfg, &prompt, &opts, &mut r)?;
        let show = |t: &[u32]| detokenize(&t[prompt.len()..]).map(|b| String::from_utf8_lossy(&b).into_owned());
        let got = show(&with.tokens)?;
        copied += usize::from(got == f.answer);
        println!("@{}: answer {} | with retrieval {:?} | without {:?}", f.key, f.answer, got, show(&without.tokens)?);
        if f == &held_out[0] {
            let dump = SampleDump::new(&with, cfg.chunk_len)?;
            println!("  neighbours of the prompt chunk: {:?}", dump.per_chunk_neighbors[0].iter().map(|n| n.doc_id).collect::<Vec<_>>());
            println!("  lcp depths {:?}", dump.lcp_depths);
        }
    }
    println!("{copied}/{} answers copied", held_out.len());
    Ok(())
}
