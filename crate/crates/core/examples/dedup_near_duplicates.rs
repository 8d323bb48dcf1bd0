//! MinHash filtering of training documents that nearly copy an evaluation document.

use retro_desk::corpus::Document;
use retro_desk::dedup::{dedup_filter, MinHasher};

fn main() -> retro_desk::Result<()> {
    let base = "the quick brown fox jumps over the lazy dog while the cat watches from the window sill ".repeat(3);
    let eval = vec![Document::new(100, base.as_bytes())];
    let train = vec![
        Document::new(1, base.as_bytes()),
        Document::new(2, base.replacen("lazy", "sleepy", 1).as_bytes()),
        Document::new(3, "an unrelated document about chunked cross attention and nearest neighbours".repeat(2).as_bytes()),
    ];
    let hasher = MinHasher::default();
    let eval_sig = hasher.signature(&eval[0].tokens).expect("long enough");
    for d in &train {
        let j = hasher.signature(&d.tokens).map(|s| s.estimate_jaccard(&eval_sig)).transpose()?.unwrap_or(0.0);
        println!("doc {}: estimated Jaccard {j:.3}", d.doc_id);
    }
    let kept = dedup_filter(&train, &eval, &hasher, 0.8)?;
    println!("kept {:?}", kept.iter().map(|d| d.doc_id).collect::<Vec<_>>());
    Ok(())
}
