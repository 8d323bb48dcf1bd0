//! Byte-level tokenization, chunking and the token cache.
//!
//! Run with `cargo run --example tokenize_and_ingest`.

use retro_desk::corpus::{
    detokenize, documents_from_records, make_sequences, read_token_cache, split_into_chunks, tokenize, write_token_cache,
    CorpusRecord,
};

fn main() -> retro_desk::Result<()> {
    let text = "Retrieval helps: ünïcödé survives, bytes and all.";
    let tokens = tokenize(text.as_bytes());
    println!("{} bytes -> {} tokens, first five {:?}", text.len(), tokens.len(), &tokens[..5]);
    assert_eq!(detokenize(&tokens)?, text.as_bytes());

    // The last chunk is padded with token 0.
    for c in split_into_chunks(7, &tokens, 16)? {
        println!("chunk {} ({} real bytes): {:?}", c.chunk_index, c.byte_len, String::from_utf8_lossy(&detokenize(&c.tokens)?));
    }

    let records: Vec<CorpusRecord> = ["first document", "a second, somewhat longer document"]
        .iter()
        .enumerate()
        .map(|(i, t)| CorpusRecord { id: format!("doc-{i}"), text: t.to_string(), answer_spans: vec![] })
        .collect();
    let docs = documents_from_records(&records)?;
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("tokens.bin");
    write_token_cache(&path, &docs)?;
    let back = read_token_cache(&path)?;
    assert_eq!(back, docs);
    let seqs = make_sequences(&back, 16, 8, 16)?;
    println!("{} documents, {} sequences of at most 16 tokens", back.len(), seqs.len());
    Ok(())
}
