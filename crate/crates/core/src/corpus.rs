//! Document ingestion: byte-level tokenization, chunking, JSONL corpora and
//! the `tokens.bin` token cache.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{check_count, LeReader, LeWriter};
use crate::error::{ensure, Error, Result};

/// Reserved padding id. Bytes are shifted by one so that byte 0 stays distinct.
pub const PAD: u32 = 0;
/// 256 byte values plus the pad id.
pub const VOCAB_SIZE: usize = 257;

/// Maps every byte `b` to token `b + 1`.
pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32 + 1).collect()
}

/// Inverse of [`tokenize`]. Pad tokens are dropped.
pub fn detokenize(tokens: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            PAD => {}
            1..=256 => out.push((t - 1) as u8),
            _ => return Err(Error::invalid(format!("token id {t} outside vocabulary"))),
        }
    }
    Ok(out)
}

/// Number of text bytes encoded by `tokens` (pads excluded).
pub fn byte_count(tokens: &[u32]) -> usize {
    tokens.iter().filter(|&&t| t != PAD).count()
}

/// Stable 64-bit document id derived from a string identifier (FNV-1a).
pub fn doc_id_for(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: u64,
    pub text: Vec<u8>,
    pub tokens: Vec<u32>,
}

impl Document {
    pub fn new(doc_id: u64, text: impl Into<Vec<u8>>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self {
            doc_id,
            text,
            tokens,
        }
    }

    pub fn chunks(&self, m: usize) -> Result<Vec<Chunk>> {
        split_into_chunks(self.doc_id, &self.tokens, m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub doc_id: u64,
    pub chunk_index: u32,
    pub tokens: Vec<u32>,
    pub byte_len: usize,
}

/// Splits a token stream into `ceil(len / m)` chunks of exactly `m` tokens,
/// padding the last one with [`PAD`].
pub fn split_into_chunks(doc_id: u64, tokens: &[u32], m: usize) -> Result<Vec<Chunk>> {
    ensure!(m >= 1, "chunk length must be at least 1");
    Ok(tokens
        .chunks(m)
        .enumerate()
        .map(|(u, piece)| {
            let mut chunk = piece.to_vec();
            chunk.resize(m, PAD);
            Chunk {
                doc_id,
                chunk_index: u as u32,
                byte_len: byte_count(piece),
                tokens: chunk,
            }
        })
        .collect())
}

/// A training or evaluation window: at most `n` tokens cut from one document.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub doc_id: u64,
    /// Token offset of the window inside its document.
    pub start: usize,
    pub tokens: Vec<u32>,
}

/// Cuts documents into non-overlapping windows of `n` tokens. The tail window
/// is padded to a multiple of `m`. With `stride < n`, windows overlap.
pub fn make_sequences(docs: &[Document], n: usize, m: usize, stride: usize) -> Result<Vec<Sequence>> {
    ensure!(m >= 1 && n >= m && n % m == 0, "sequence length {n} must be a positive multiple of chunk length {m}");
    ensure!(stride >= 1 && stride <= n, "stride must lie in [1, n]");
    let mut out = Vec::new();
    for doc in docs {
        let mut start = 0;
        while start < doc.tokens.len() {
            let end = (start + n).min(doc.tokens.len());
            let mut tokens = doc.tokens[start..end].to_vec();
            let padded = tokens.len().div_ceil(m) * m;
            tokens.resize(padded, PAD);
            out.push(Sequence {
                doc_id: doc.doc_id,
                start,
                tokens,
            });
            if end == doc.tokens.len() {
                break;
            }
            start += stride;
        }
    }
    Ok(out)
}

/// One line of a JSONL corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    /// Byte ranges `[start, end)` of planted answers (synthetic corpora only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answer_spans: Vec<[usize; 2]>,
}

impl CorpusRecord {
    pub fn to_document(&self) -> Document {
        Document::new(doc_id_for(&self.id), self.text.as_bytes())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).expect("corpus record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Converts records to documents, rejecting duplicate ids.
pub fn documents_from_records(records: &[CorpusRecord]) -> Result<Vec<Document>> {
    let mut seen = HashSet::new();
    records
        .iter()
        .map(|r| {
            let doc = r.to_document();
            ensure!(seen.insert(doc.doc_id), "duplicate document id {:?}", r.id);
            Ok(doc)
        })
        .collect()
}

const TOKENS_MAGIC: &[u8; 4] = b"RDTK";
const TOKENS_VERSION: u32 = 1;

/// Writes `tokens.bin`: magic, version, doc count, doc ids, offsets
/// (count + 1 entries), then every token as a little-endian u32.
pub fn write_token_cache(path: &Path, docs: &[Document]) -> Result<()> {
    let mut w = LeWriter::create(path)?;
    w.bytes(TOKENS_MAGIC)?;
    w.u32(TOKENS_VERSION)?;
    w.u64(docs.len() as u64)?;
    for d in docs {
        w.u64(d.doc_id)?;
    }
    let mut offset = 0u64;
    w.u64(0)?;
    for d in docs {
        offset += d.tokens.len() as u64;
        w.u64(offset)?;
    }
    for d in docs {
        w.u32s(&d.tokens)?;
    }
    w.finish()
}

pub fn read_token_cache(path: &Path) -> Result<Vec<Document>> {
    let mut r = LeReader::open(path)?;
    r.header(TOKENS_MAGIC, TOKENS_VERSION)?;
    let count = r.u64("doc count")?;
    let count = check_count(&r, count, 1 << 32, "document")?;
    let ids = r.u64s(count, "doc ids")?;
    let offsets = r.u64s(count + 1, "offsets")?;
    if offsets[0] != 0 || offsets.windows(2).any(|w| w[1] < w[0]) {
        return Err(r.format_err("offsets are not monotone from zero"));
    }
    let total = check_count(&r, offsets[count], 1 << 36, "token")?;
    let tokens = r.u32s(total, "tokens")?;
    r.expect_eof()?;
    let mut docs = Vec::with_capacity(count);
    for i in 0..count {
        let toks = tokens[offsets[i] as usize..offsets[i + 1] as usize].to_vec();
        let text = detokenize(&toks).map_err(|e| r.format_err(format!("document {i}: {e}")))?;
        docs.push(Document {
            doc_id: ids[i],
            text,
            tokens: toks,
        });
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        assert!(tokenize(b"").is_empty());
        assert_eq!(tokenize(b"Ab"), vec![66, 99]);
        assert_eq!(detokenize(&[66, PAD, 99]).unwrap(), b"Ab");
        assert!(detokenize(&[300]).is_err());
    }

    #[test]
    fn chunking_examples() {
        let toks: Vec<u32> = (1..=12).collect();
        let chunks = split_into_chunks(7, &toks, 4).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[2].tokens, vec![9, 10, 11, 12]);

        let long = vec![5u32; 2048];
        assert_eq!(split_into_chunks(0, &long, 64).unwrap().len(), 32);

        let one = split_into_chunks(0, &toks[..4], 4).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].tokens, &toks[..4]);

        assert!(split_into_chunks(0, &toks, 0).is_err());
    }

    #[test]
    fn ragged_tail_is_padded() {
        let chunks = split_into_chunks(1, &[3, 4, 5], 2).unwrap();
        assert_eq!(chunks[1].tokens, vec![5, PAD]);
        assert_eq!(chunks[1].byte_len, 1);
        assert_eq!(chunks[1].chunk_index, 1);
    }

    #[test]
    fn sequences_cover_documents() {
        let doc = Document::new(3, vec![b'x'; 10]);
        let seqs = make_sequences(&[doc], 8, 4, 8).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[1].start, 8);
        assert_eq!(seqs[1].tokens.len(), 4);
        assert_eq!(byte_count(&seqs[1].tokens), 2);
    }

    #[test]
    fn token_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.bin");
        let docs = vec![Document::new(1, "hello"), Document::new(9, ""), Document::new(4, vec![0u8, 255])];
        write_token_cache(&path, &docs).unwrap();
        assert_eq!(read_token_cache(&path).unwrap(), docs);

        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_token_cache(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = CorpusRecord {
            id: "a".into(),
            text: "x".into(),
            answer_spans: vec![],
        };
        assert!(documents_from_records(&[r.clone(), r]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip_utf8(s in ".*") {
            let toks = tokenize(s.as_bytes());
            prop_assert_eq!(toks.len(), s.len());
            prop_assert!(toks.iter().all(|&t| (1..VOCAB_SIZE as u32).contains(&t)));
            prop_assert_eq!(detokenize(&toks).unwrap(), s.as_bytes());
        }

        #[test]
        fn chunking_preserves_content(toks in prop::collection::vec(1u32..257, 0..300), m in 1usize..40) {
            let chunks = split_into_chunks(0, &toks, m).unwrap();
            prop_assert_eq!(chunks.len(), toks.len().div_ceil(m));
            let flat: Vec<u32> = chunks.iter().flat_map(|c| c.tokens.iter().copied()).filter(|&t| t != PAD).collect();
            prop_assert_eq!(flat, toks);
            for (u, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.chunk_index as usize, u);
                prop_assert_eq!(c.tokens.len(), m);
            }
        }
    }
}
