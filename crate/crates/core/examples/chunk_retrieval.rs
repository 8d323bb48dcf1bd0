//! Building a chunk index and querying it exactly and through the IVF lists.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retro_desk::corpus::Document;
use retro_desk::embedder::ChunkEmbedder;
use retro_desk::index::{recall_at_k, ChunkIndex, IndexOptions, SearchMode};
use retro_desk::pipeline::{document_chunks, embedder};

fn main() -> retro_desk::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let syllables = ["ka", "lo", "mi", "ne", "ru", "sa", "te", "vo", "di", "pa"];
    let words: Vec<String> = (0..400).map(|_| (0..3).map(|_| syllables[rng.random_range(0..10)]).collect()).collect();
    let docs: Vec<Document> = (0..2000u64)
        .map(|d| {
            let text: Vec<&str> = (0..12).map(|_| words[rng.random_range(0..words.len())].as_str()).collect();
            Document::new(d, text.join(" "))
        })
        .collect();
    let m = 8;
    let emb = embedder(m, 1)?;
    let chunks = document_chunks(&docs, m)?;
    let index = ChunkIndex::build(&chunks, &emb, &IndexOptions::default())?;
    println!("{} chunks, {} centroids", index.len(), index.num_centroids());

    let query = &chunks[123].tokens;
    println!("query {:?}", String::from_utf8_lossy(&retro_desk::corpus::detokenize(query)?));
    for mode in [SearchMode::Exact, SearchMode::Approximate { nprobe: 2 }] {
        let res = index.query_tokens(&emb, query, 3, Some(chunks[123].doc_id), mode)?;
        println!("{mode:?}:");
        for r in &res.records {
            println!(
                "  doc {:>4} chunk {} d={:.4} {:?}",
                r.source_doc_id,
                r.source_chunk_index,
                r.distance,
                String::from_utf8_lossy(&retro_desk::corpus::detokenize(&r.value())?)
            );
        }
    }
    let queries: Vec<_> = chunks.iter().step_by(40).map(|c| emb.embed_chunk(&c.tokens)).collect::<Result<_, _>>()?;
    for nprobe in [1, 2, 4, 8] {
        println!("recall@10 nprobe {nprobe}: {:.3}", recall_at_k(&index, &queries, 10, nprobe)?);
    }
    Ok(())
}
