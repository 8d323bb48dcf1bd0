//! Bits-per-byte evaluation, train/eval overlap, filtered curves and the
//! kNN-LM baseline.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{byte_count, Sequence, PAD};
use crate::embedder::ChunkEmbedder;
use crate::error::{ensure, Error, Result};
use crate::index::{ChunkIndex, SearchMode};
use crate::model::{log_likelihood, ModelConfig, Retrieval};
use crate::numeric::tensor::{gemm, MatMut, MatRef};
use crate::numeric::ParameterStore;

/// Neighbours retrieved per evaluation chunk when measuring overlap.
pub const OVERLAP_NEIGHBORS: usize = 10;
pub const HISTOGRAM_BINS: usize = 8;

/// Suffix automaton over a token string.
#[derive(Debug, Clone)]
pub struct SuffixAutomaton {
    next: Vec<HashMap<u32, usize>>,
    link: Vec<Option<usize>>,
    len: Vec<usize>,
    last: usize,
}

impl Default for SuffixAutomaton {
    fn default() -> Self {
        Self::new()
    }
}

impl SuffixAutomaton {
    pub fn new() -> Self {
        Self {
            next: vec![HashMap::new()],
            link: vec![None],
            len: vec![0],
            last: 0,
        }
    }

    pub fn build(tokens: &[u32]) -> Self {
        let mut s = Self::new();
        for &t in tokens {
            s.push(t);
        }
        s
    }

    /// Automaton over several texts, each followed by a distinct separator so
    /// that no match spans two texts.
    pub fn build_separated<'a>(texts: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut s = Self::new();
        for (i, text) in texts.into_iter().enumerate() {
            for &t in text {
                s.push(t);
            }
            s.push(u32::MAX - i as u32);
        }
        s
    }

    pub fn push(&mut self, c: u32) {
        let cur = self.len.len();
        self.next.push(HashMap::new());
        self.len.push(self.len[self.last] + 1);
        self.link.push(None);
        let mut p = Some(self.last);
        while let Some(pi) = p {
            if self.next[pi].contains_key(&c) {
                break;
            }
            self.next[pi].insert(c, cur);
            p = self.link[pi];
        }
        match p {
            None => self.link[cur] = Some(0),
            Some(pi) => {
                let q = self.next[pi][&c];
                if self.len[pi] + 1 == self.len[q] {
                    self.link[cur] = Some(q);
                } else {
                    let clone = self.len.len();
                    self.next.push(self.next[q].clone());
                    self.len.push(self.len[pi] + 1);
                    self.link.push(self.link[q]);
                    let mut p = Some(pi);
                    while let Some(pj) = p {
                        if self.next[pj].get(&c) != Some(&q) {
                            break;
                        }
                        self.next[pj].insert(c, clone);
                        p = self.link[pj];
                    }
                    self.link[q] = Some(clone);
                    self.link[cur] = Some(clone);
                }
            }
        }
        self.last = cur;
    }

    /// For every `i`, the length of the longest suffix of `text[..=i]` that
    /// occurs in the automaton's string.
    pub fn matching_statistics(&self, text: &[u32]) -> Vec<usize> {
        let mut out = Vec::with_capacity(text.len());
        let (mut state, mut l) = (0usize, 0usize);
        for &c in text {
            loop {
                if let Some(&n) = self.next[state].get(&c) {
                    state = n;
                    l += 1;
                    break;
                }
                match self.link[state] {
                    Some(p) => {
                        state = p;
                        l = self.len[p];
                    }
                    None => {
                        l = 0;
                        break;
                    }
                }
            }
            out.push(l);
        }
        out
    }

    /// Length of the longest substring of `text` that also occurs in the automaton.
    pub fn longest_common_substring(&self, text: &[u32]) -> usize {
        self.matching_statistics(text).into_iter().max().unwrap_or(0)
    }
}

/// Quadratic dynamic-programming longest common substring.
pub fn lcs_dp(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut best = 0;
    for &x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            if x == y {
                cur[j + 1] = prev[j] + 1;
                best = best.max(cur[j + 1]);
            }
        }
        prev = cur;
    }
    best
}

/// `r(C)`: longest token run shared by `chunk` (pads stripped) and any
/// neighbour, divided by the chunk's actual length.
pub fn chunk_overlap(chunk: &[u32], neighbors: &[Vec<u32>]) -> f64 {
    let chunk = strip_pad(chunk);
    if chunk.is_empty() {
        return 0.0;
    }
    let sam = SuffixAutomaton::build_separated(neighbors.iter().map(|n| strip_pad(n)));
    sam.longest_common_substring(chunk) as f64 / chunk.len() as f64
}

fn strip_pad(t: &[u32]) -> &[u32] {
    let end = t.iter().rposition(|&x| x != PAD).map_or(0, |i| i + 1);
    &t[..end]
}

/// Per-token overlap depth of a sampled sequence: for a token of chunk `u`,
/// the length of the longest run ending at it, starting inside chunk `u`,
/// that occurs in the neighbours of chunk `u - 1`. Chunk 0 is all zero.
pub fn annotate_overlap(tokens: &[u32], chunk_len: usize, neighbors: &[Vec<Vec<u32>>]) -> Vec<usize> {
    let mut out = vec![0; tokens.len()];
    for (u, chunk) in tokens.chunks(chunk_len).enumerate().skip(1) {
        let Some(prev) = neighbors.get(u - 1) else { continue };
        let sam = SuffixAutomaton::build_separated(prev.iter().map(|v| v.as_slice()));
        for (i, d) in sam.matching_statistics(chunk).into_iter().enumerate() {
            out[u * chunk_len + i] = d;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub doc_id: u64,
    pub seq_start: u64,
    pub chunk_index: u32,
    /// Negative log2-likelihood of the chunk's scored tokens.
    pub loss_bits: f64,
    pub byte_count: usize,
    /// `r(C)` in `[0, 1]`.
    pub overlap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpbPoint {
    pub alpha: f64,
    pub bpb: f64,
    pub chunks: usize,
    pub bytes: usize,
}

/// Bits per byte over the chunks with `r(C) <= alpha`.
pub fn filtered_bpb(records: &[EvalRecord], alpha: f64) -> Result<BpbPoint> {
    let (mut bits, mut bytes, mut chunks) = (0.0, 0usize, 0usize);
    for r in records.iter().filter(|r| r.overlap <= alpha) {
        bits += r.loss_bits;
        bytes += r.byte_count;
        chunks += 1;
    }
    if bytes == 0 {
        return Err(Error::Undefined(format!("no evaluation bytes with overlap <= {alpha}")));
    }
    Ok(BpbPoint { alpha, bpb: bits / bytes as f64, chunks, bytes })
}

/// Counts of `r(C)` over 8 equal bins on `[0, 1]`; the last bin includes 1.
pub fn overlap_histogram(records: &[EvalRecord]) -> [usize; HISTOGRAM_BINS] {
    let mut h = [0; HISTOGRAM_BINS];
    for r in records {
        let b = ((r.overlap * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
        h[b] += 1;
    }
    h
}

/// The default threshold grid `0, 1/8, ..., 1`.
pub fn default_alphas() -> Vec<f64> {
    (0..=HISTOGRAM_BINS).map(|i| i as f64 / HISTOGRAM_BINS as f64).collect()
}

/// Writes `alpha,bpb,chunks,bytes`; an empty filtered set leaves `bpb` blank.
pub fn write_bpb_csv(path: &Path, records: &[EvalRecord], alphas: &[f64]) -> Result<()> {
    let mut s = String::from("alpha,bpb,chunks,bytes\n");
    for &a in alphas {
        match filtered_bpb(records, a) {
            Ok(p) => s.push_str(&format!("{a},{},{},{}\n", p.bpb, p.chunks, p.bytes)),
            Err(Error::Undefined(_)) => s.push_str(&format!("{a},,0,0\n")),
            Err(e) => return Err(e),
        }
    }
    write_file(path, s.as_bytes())
}

pub fn write_histogram_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut s = String::from("bin_low,bin_high,count\n");
    for (i, c) in overlap_histogram(records).iter().enumerate() {
        let w = 1.0 / HISTOGRAM_BINS as f64;
        s.push_str(&format!("{},{},{c}\n", i as f64 * w, (i + 1) as f64 * w));
    }
    write_file(path, s.as_bytes())
}

pub fn write_records_jsonl(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// How evaluation chunks obtain neighbours for `r(C)`.
pub struct OverlapSource<'a> {
    pub index: &'a ChunkIndex,
    pub embedder: &'a dyn ChunkEmbedder,
    pub k: usize,
    pub mode: SearchMode,
}

/// Scores every chunk of every sequence. `neighbors[i]`, when given, feeds
/// retrieval for sequence `i`.
pub fn evaluate(
    store: &ParameterStore<f32>,
    cfg: &ModelConfig,
    sequences: &[Sequence],
    neighbors: Option<&[Vec<Vec<Vec<u32>>>]>,
    overlap: &OverlapSource<'_>,
) -> Result<Vec<EvalRecord>> {
    let m = cfg.chunk_len;
    if let Some(nb) = neighbors {
        ensure!(nb.len() == sequences.len(), "{} neighbour sets for {} sequences", nb.len(), sequences.len());
    }
    let per: Vec<Vec<EvalRecord>> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let retrieval = match neighbors {
                Some(nb) => Retrieval::On(&nb[i]),
                None => Retrieval::Off,
            };
            let ll = log_likelihood(store, cfg, &s.tokens, retrieval)?;
            s.tokens
                .chunks(m)
                .enumerate()
                .map(|(u, chunk)| {
                    let nats: f64 = ll.losses[u * m..u * m + chunk.len()].iter().flatten().sum();
                    let res = overlap.index.query_tokens(overlap.embedder, chunk, overlap.k, None, overlap.mode)?;
                    let values: Vec<Vec<u32>> = res.records.iter().map(|r| r.value()).collect();
                    Ok(EvalRecord {
                        doc_id: s.doc_id,
                        seq_start: s.start as u64,
                        chunk_index: u as u32,
                        loss_bits: nats / std::f64::consts::LN_2,
                        byte_count: byte_count(chunk),
                        overlap: chunk_overlap(chunk, &values),
                    })
                })
                .filter(|r| r.as_ref().map_or(true, |r| r.byte_count > 0))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnLmParams {
    pub lambda: f64,
    pub alpha: f64,
    pub k: usize,
}

/// `lambda p_kNN + (1 - lambda) p_LM` with `p_kNN(t)` proportional to the
/// summed `exp(-alpha d)` of hits on `t`. Returns the mixture and whether it
/// fell back to `p_LM` for lack of hits.
pub fn knnlm_mix(lm_probs: &[f64], hits: &[(u32, f64)], params: &KnnLmParams) -> (Vec<f64>, bool) {
    if hits.is_empty() || params.lambda == 0.0 {
        return (lm_probs.to_vec(), hits.is_empty() && params.lambda > 0.0);
    }
    let knn = knn_distribution(hits, params.alpha);
    let mut out: Vec<f64> = lm_probs.iter().map(|&p| (1.0 - params.lambda) * p).collect();
    for (t, p) in knn {
        out[t as usize] += params.lambda * p;
    }
    (out, false)
}

/// Normalized kernel mass per token, in first-occurrence order.
pub fn knn_distribution(hits: &[(u32, f64)], alpha: f64) -> Vec<(u32, f64)> {
    let dmin = hits.iter().map(|h| h.1).fold(f64::INFINITY, f64::min);
    let mut acc: Vec<(u32, f64)> = Vec::new();
    let mut z = 0.0;
    for &(t, d) in hits {
        let w = (-alpha * (d - dmin)).exp();
        z += w;
        match acc.iter_mut().find(|(tt, _)| *tt == t) {
            Some(e) => e.1 += w,
            None => acc.push((t, w)),
        }
    }
    for e in acc.iter_mut() {
        e.1 /= z;
    }
    acc
}

/// One validation token: LM probability of the true next token and the
/// retrieved `(token, distance)` hits.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnStreamItem {
    pub target: u32,
    pub lm_prob: f64,
    pub hits: Vec<(u32, f64)>,
}

/// Perplexity of the mixture on `stream`.
pub fn knnlm_perplexity(stream: &[KnnStreamItem], lambda: f64, alpha: f64) -> f64 {
    let mut nll = 0.0;
    for item in stream {
        let knn = if item.hits.is_empty() {
            0.0
        } else {
            knn_distribution(&item.hits, alpha)
                .iter()
                .find(|(t, _)| *t == item.target)
                .map_or(0.0, |e| e.1)
        };
        let lm_lambda = if item.hits.is_empty() { 0.0 } else { lambda };
        nll -= (lm_lambda * knn + (1.0 - lm_lambda) * item.lm_prob).ln();
    }
    (nll / stream.len().max(1) as f64).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneStep {
    pub lambda: f64,
    pub alpha: f64,
    pub perplexity: f64,
}

/// Coordinate descent: `lambda` over `0, 0.01, ..., 1` at `alpha0`, then
/// `alpha` over `alpha0 * 2^(j/2)` for `j` in `-12..=12` at the best
/// `lambda`. Returns the best pair and every evaluated point.
pub fn tune_knnlm(stream: &[KnnStreamItem], alpha0: f64, k: usize) -> Result<(KnnLmParams, Vec<TuneStep>)> {
    ensure!(!stream.is_empty(), "empty validation stream");
    ensure!(alpha0 > 0.0 && alpha0.is_finite(), "alpha0 must be positive");
    let mut trace = Vec::new();
    let mut best = TuneStep { lambda: 0.0, alpha: alpha0, perplexity: f64::INFINITY };
    for i in 0..=100 {
        let lambda = i as f64 / 100.0;
        let ppl = knnlm_perplexity(stream, lambda, alpha0);
        let s = TuneStep { lambda, alpha: alpha0, perplexity: ppl };
        if ppl < best.perplexity {
            best = s.clone();
        }
        trace.push(s);
    }
    for j in -12..=12 {
        let alpha = alpha0 * 2f64.powf(j as f64 / 2.0);
        let ppl = knnlm_perplexity(stream, best.lambda, alpha);
        let s = TuneStep { lambda: best.lambda, alpha, perplexity: ppl };
        if ppl < best.perplexity {
            best = s.clone();
        }
        trace.push(s);
    }
    Ok((KnnLmParams { lambda: best.lambda, alpha: best.alpha, k }, trace))
}

/// Token-level datastore: one key per context position, valued by the
/// token that followed it.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDatastore {
    dim: usize,
    keys: Vec<f32>,
    norms: Vec<f32>,
    values: Vec<u32>,
}

impl TokenDatastore {
    pub fn new(dim: usize) -> Self {
        Self { dim, keys: Vec::new(), norms: Vec::new(), values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn push(&mut self, key: &[f32], value: u32) {
        assert_eq!(key.len(), self.dim, "datastore key width");
        self.keys.extend_from_slice(key);
        self.norms.push(key.iter().map(|x| x * x).sum());
        self.values.push(value);
    }

    /// `k` nearest keys by squared L2 for each row of `queries`, ascending,
    /// ties broken by insertion order.
    pub fn search(&self, queries: &[f32], k: usize) -> Vec<Vec<(u32, f64)>> {
        let d = self.dim;
        let nq = queries.len() / d;
        let n = self.len();
        const BLOCK: usize = 4096;
        let mut best: Vec<Vec<(f32, usize)>> = vec![Vec::with_capacity(k + 1); nq];
        let mut dots = vec![0f32; nq * BLOCK.min(n.max(1))];
        let qn: Vec<f32> = queries.chunks(d).map(|q| q.iter().map(|x| x * x).sum()).collect();
        for start in (0..n).step_by(BLOCK) {
            let len = BLOCK.min(n - start);
            let kb = MatRef::rows(&self.keys[start * d..(start + len) * d], len, d, d);
            gemm(1.0, MatRef::rows(queries, nq, d, d), kb.t(), 0.0, MatMut::rows(&mut dots[..nq * len], nq, len, len));
            best.par_iter_mut().enumerate().for_each(|(qi, b)| {
                for j in 0..len {
                    let dist = (qn[qi] + self.norms[start + j] - 2.0 * dots[qi * len + j]).max(0.0);
                    let cand = (dist, start + j);
                    if b.len() < k || cand < *b.last().expect("non-empty") {
                        let pos = b.partition_point(|x| *x <= cand);
                        b.insert(pos, cand);
                        b.truncate(k);
                    }
                }
            });
        }
        best.into_iter()
            .map(|b| b.into_iter().map(|(dist, e)| (self.values[e], dist as f64)).collect())
            .collect()
    }
}
