//! Key-value chunk database with exact and IVF (coarse-quantized) L2 search.
//!
//! Keys are frozen chunk embeddings; each value is the neighbour chunk `N`
//! together with its continuation `F` (the next chunk of the same document,
//! all-pad at document end). Distances are squared L2 and are never
//! square-rooted. Results are ordered by `(distance, doc_id, chunk_index)`.

use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{check_count, LeReader, LeWriter};
use crate::corpus::{Chunk, Sequence, PAD};
use crate::embedder::{ChunkEmbedder, EmbedderSpec, EmbeddingVector, RandomProjectionEmbedder};
use crate::error::{ensure, Result};

pub const DEFAULT_KMEANS_ITERS: usize = 25;
pub const DEFAULT_NPROBE: usize = 4;
/// Cap on k-means training points per centroid.
pub const KMEANS_POINTS_PER_CENTROID: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborRecord {
    pub neighbor_tokens: Vec<u32>,
    pub continuation_tokens: Vec<u32>,
    pub source_doc_id: u64,
    pub source_chunk_index: u32,
    pub distance: f32,
}

impl NeighborRecord {
    /// Placeholder used when fewer than `k` neighbours are eligible.
    pub fn empty(m: usize) -> Self {
        Self {
            neighbor_tokens: vec![PAD; m],
            continuation_tokens: vec![PAD; m],
            source_doc_id: u64::MAX,
            source_chunk_index: u32::MAX,
            distance: f32::INFINITY,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.source_doc_id == u64::MAX
    }

    /// `[N, F]`, length `2m`.
    pub fn value(&self) -> Vec<u32> {
        let mut v = self.neighbor_tokens.clone();
        v.extend_from_slice(&self.continuation_tokens);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Exact,
    Approximate { nprobe: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub records: Vec<NeighborRecord>,
    /// Fewer than `k` eligible entries were found.
    pub short: bool,
}

#[derive(Debug, Clone)]
pub struct IndexOptions {
    pub approximate: bool,
    /// Defaults to `round(sqrt(T))`.
    pub num_centroids: Option<usize>,
    pub kmeans_iters: usize,
    pub seed: u64,
    pub default_k: usize,
}

impl Default for IndexOptions {
    fn default() -> Self {
        Self {
            approximate: true,
            num_centroids: None,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
            seed: 0,
            default_k: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkIndex {
    spec: EmbedderSpec,
    default_k: usize,
    // T x d
    keys: Vec<f32>,
    doc_ids: Vec<u64>,
    chunk_indices: Vec<u32>,
    // T x 2m, [N, F] per entry
    values: Vec<u32>,
    // c x d
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
}

/// Squared L2 used for entry distances. Summation order is fixed, so equal
/// inputs always give bit-equal distances.
pub fn entry_distance(q: &[f32], key: &[f32]) -> f32 {
    fast_sq_dist(q, key)
}

// Lane-split f32 squared distance.
fn fast_sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += (x - y) * (x - y);
    }
    s
}

fn nearest_centroid(x: &[f32], centroids: &[f32], d: usize) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (c, cent) in centroids.chunks_exact(d).enumerate() {
        let dist = fast_sq_dist(x, cent);
        if dist < best_d {
            best_d = dist;
            best = c;
        }
    }
    best
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Candidate {
    dist_bits: u32,
    doc_id: u64,
    chunk_index: u32,
    entry: u32,
}

/// k-means++ seeding followed by Lloyd iterations. Returns `c x d` centroids.
fn kmeans(points: &[f32], d: usize, c: usize, iters: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len() / d;
    let point = |i: usize| &points[i * d..(i + 1) * d];
    let mut centroids = Vec::with_capacity(c * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut d2: Vec<f32> = (0..n).into_par_iter().map(|i| fast_sq_dist(point(i), point(first))).collect();
    for _ in 1..c {
        let total: f64 = d2.iter().map(|&v| v as f64).sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                target -= v as f64;
                if target < 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        let start = centroids.len();
        centroids.extend_from_slice(point(pick));
        let newc = centroids[start..].to_vec();
        d2.par_iter_mut().enumerate().for_each(|(i, v)| {
            let dist = fast_sq_dist(point(i), &newc);
            if dist < *v {
                *v = dist;
            }
        });
    }

    let mut assign = vec![usize::MAX; n];
    let norms: Vec<f32> = (0..n).map(|i| point(i).iter().map(|x| x * x).sum()).collect();
    for _ in 0..iters {
        let new_assign = assign_gemm(points, &norms, &centroids, d, c);
        let changed = new_assign != assign;
        assign = new_assign;
        let mut sums = vec![0f64; c * d];
        let mut counts = vec![0usize; c];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * d..(a + 1) * d].iter_mut().zip(point(i)) {
                *s += x as f64;
            }
        }
        for j in 0..c {
            if counts[j] > 0 {
                for k in 0..d {
                    centroids[j * d + k] = (sums[j * d + k] / counts[j] as f64) as f32;
                }
            }
        }
        if !changed {
            break;
        }
    }
    centroids
}

// Nearest centroid through ||x||^2 - 2 x.c + ||c||^2 with one GEMM per block.
fn assign_gemm(points: &[f32], norms: &[f32], centroids: &[f32], d: usize, c: usize) -> Vec<usize> {
    let n = points.len() / d;
    let cnorm: Vec<f32> = centroids.chunks_exact(d).map(|v| v.iter().map(|x| x * x).sum()).collect();
    const BLOCK: usize = 1024;
    let blocks: Vec<Vec<usize>> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let lo = b * BLOCK;
            let rows = (n - lo).min(BLOCK);
            let mut dots = vec![0f32; rows * c];
            unsafe {
                matrixmultiply::sgemm(
                    rows,
                    d,
                    c,
                    1.0,
                    points[lo * d..].as_ptr(),
                    d as isize,
                    1,
                    centroids.as_ptr(),
                    1,
                    d as isize,
                    0.0,
                    dots.as_mut_ptr(),
                    c as isize,
                    1,
                );
            }
            (0..rows)
                .map(|r| {
                    let mut best = 0;
                    let mut best_d = f32::INFINITY;
                    for j in 0..c {
                        let dist = norms[lo + r] - 2.0 * dots[r * c + j] + cnorm[j];
                        if dist < best_d {
                            best_d = dist;
                            best = j;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect();
    blocks.concat()
}

impl ChunkIndex {
    /// Builds the database from chunks. `F` of each entry is the chunk with the
    /// next `chunk_index` of the same document, or all-pad when there is none.
    pub fn build(chunks: &[Chunk], embedder: &dyn ChunkEmbedder, opts: &IndexOptions) -> Result<Self> {
        ensure!(!chunks.is_empty(), "cannot build an index from zero chunks");
        let spec = embedder.spec();
        let m = spec.chunk_len;
        ensure!(chunks.iter().all(|c| c.tokens.len() == m), "all chunks must have length {m}");
        ensure!(opts.default_k >= 1, "default k must be positive");
        let d = spec.dim;
        let position: HashMap<(u64, u32), usize> =
            chunks.iter().enumerate().map(|(i, c)| ((c.doc_id, c.chunk_index), i)).collect();

        let keys: Vec<EmbeddingVector> = chunks
            .par_iter()
            .map(|c| embedder.embed_chunk(&c.tokens))
            .collect::<Result<_>>()?;
        let keys: Vec<f32> = keys.into_iter().flat_map(|k| k.0).collect();

        let t = chunks.len();
        let mut values = Vec::with_capacity(t * 2 * m);
        for c in chunks {
            values.extend_from_slice(&c.tokens);
            match position.get(&(c.doc_id, c.chunk_index + 1)) {
                Some(&next) => values.extend_from_slice(&chunks[next].tokens),
                None => values.extend(std::iter::repeat_n(PAD, m)),
            }
        }

        let (centroids, lists) = if opts.approximate {
            let c = opts
                .num_centroids
                .unwrap_or_else(|| ((t as f64).sqrt().round() as usize).max(1))
                .clamp(1, t);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let cap = KMEANS_POINTS_PER_CENTROID * c;
            let train: Vec<f32> = if t > cap {
                let mut ids: Vec<usize> = (0..t).collect();
                ids.shuffle(&mut rng);
                ids.truncate(cap);
                ids.sort_unstable();
                ids.iter().flat_map(|&i| keys[i * d..(i + 1) * d].iter().copied()).collect()
            } else {
                keys.clone()
            };
            let centroids = kmeans(&train, d, c, opts.kmeans_iters, &mut rng);
            let assign: Vec<usize> = (0..t)
                .into_par_iter()
                .map(|i| nearest_centroid(&keys[i * d..(i + 1) * d], &centroids, d))
                .collect();
            let mut lists = vec![Vec::new(); c];
            for (i, a) in assign.into_iter().enumerate() {
                lists[a].push(i as u32);
            }
            (centroids, lists)
        } else {
            (Vec::new(), Vec::new())
        };

        Ok(Self {
            spec,
            default_k: opts.default_k,
            keys,
            doc_ids: chunks.iter().map(|c| c.doc_id).collect(),
            chunk_indices: chunks.iter().map(|c| c.chunk_index).collect(),
            values,
            centroids,
            lists,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn embedder_spec(&self) -> EmbedderSpec {
        self.spec
    }

    /// The random-projection embedder described by the stored spec.
    pub fn embedder(&self) -> Result<RandomProjectionEmbedder> {
        RandomProjectionEmbedder::new(self.spec)
    }

    pub fn chunk_len(&self) -> usize {
        self.spec.chunk_len
    }

    pub fn default_k(&self) -> usize {
        self.default_k
    }

    pub fn num_centroids(&self) -> usize {
        self.lists.len()
    }

    pub fn posting_lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    pub fn key(&self, entry: usize) -> &[f32] {
        let d = self.spec.dim;
        &self.keys[entry * d..(entry + 1) * d]
    }

    pub fn record(&self, entry: usize, distance: f32) -> NeighborRecord {
        let m = self.spec.chunk_len;
        let v = &self.values[entry * 2 * m..(entry + 1) * 2 * m];
        NeighborRecord {
            neighbor_tokens: v[..m].to_vec(),
            continuation_tokens: v[m..].to_vec(),
            source_doc_id: self.doc_ids[entry],
            source_chunk_index: self.chunk_indices[entry],
            distance,
        }
    }

    fn scan(&self, q: &[f32], entries: impl Iterator<Item = usize>, k: usize, exclude: Option<u64>, heap: &mut BinaryHeap<Candidate>) {
        for e in entries {
            let doc_id = self.doc_ids[e];
            if exclude == Some(doc_id) {
                continue;
            }
            let cand = Candidate {
                dist_bits: entry_distance(q, self.key(e)).to_bits(),
                doc_id,
                chunk_index: self.chunk_indices[e],
                entry: e as u32,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("heap holds k items") {
                heap.pop();
                heap.push(cand);
            }
        }
    }

    /// The `k` nearest entries to `q`, skipping entries of `exclude_doc_id`.
    pub fn query(&self, q: &EmbeddingVector, k: usize, exclude_doc_id: Option<u64>, mode: SearchMode) -> Result<QueryResult> {
        ensure!(q.dim() == self.spec.dim, "query dimension {} does not match index dimension {}", q.dim(), self.spec.dim);
        ensure!(k >= 1, "k must be positive");
        let q = q.as_slice();
        let mut heap = BinaryHeap::with_capacity(k + 1);
        match mode {
            SearchMode::Approximate { nprobe } if !self.lists.is_empty() => {
                ensure!(nprobe >= 1, "nprobe must be positive");
                let d = self.spec.dim;
                let mut order: Vec<(u32, usize)> = self
                    .centroids
                    .chunks_exact(d)
                    .enumerate()
                    .map(|(c, cent)| (fast_sq_dist(q, cent).to_bits(), c))
                    .collect();
                let probe = nprobe.min(order.len());
                order.select_nth_unstable(probe - 1);
                order.truncate(probe);
                order.sort_unstable();
                for &(_, c) in &order {
                    self.scan(q, self.lists[c].iter().map(|&e| e as usize), k, exclude_doc_id, &mut heap);
                }
            }
            _ => self.scan(q, 0..self.len(), k, exclude_doc_id, &mut heap),
        }
        let found = heap.into_sorted_vec();
        let short = found.len() < k;
        Ok(QueryResult {
            records: found
                .into_iter()
                .map(|c| self.record(c.entry as usize, f32::from_bits(c.dist_bits)))
                .collect(),
            short,
        })
    }

    /// Embeds `tokens` with `embedder` and queries.
    pub fn query_tokens(
        &self,
        embedder: &dyn ChunkEmbedder,
        tokens: &[u32],
        k: usize,
        exclude_doc_id: Option<u64>,
        mode: SearchMode,
    ) -> Result<QueryResult> {
        ensure!(embedder.spec() == self.spec, "embedder does not match the index's embedder spec");
        self.query(&embedder.embed_chunk(tokens)?, k, exclude_doc_id, mode)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = self.spec.chunk_len;
        let d = self.spec.dim;
        let mut w = LeWriter::create(path)?;
        w.bytes(INDEX_MAGIC)?;
        w.u32(INDEX_VERSION)?;
        w.u32(m as u32)?;
        w.u32(self.default_k as u32)?;
        w.u32(d as u32)?;
        w.u32(self.spec.vocab as u32)?;
        w.u64(self.spec.seed)?;
        w.u64(self.len() as u64)?;
        w.u64(self.lists.len() as u64)?;
        w.f32s(&self.centroids)?;
        for list in &self.lists {
            w.u64(list.len() as u64)?;
            w.u32s(list)?;
        }
        for e in 0..self.len() {
            w.f32s(self.key(e))?;
            w.u64(self.doc_ids[e])?;
            w.u32(self.chunk_indices[e])?;
            w.u32s(&self.values[e * 2 * m..(e + 1) * 2 * m])?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = LeReader::open(path)?;
        r.header(INDEX_MAGIC, INDEX_VERSION)?;
        let m = r.u32("chunk length")? as usize;
        let default_k = r.u32("default k")? as usize;
        let d = r.u32("embedding dim")? as usize;
        let vocab = r.u32("vocab")? as usize;
        let seed = r.u64("embedder seed")?;
        let t = r.u64("entry count")?;
        let t = check_count(&r, t, 1 << 32, "entry")?;
        let c = r.u64("centroid count")?;
        let c = check_count(&r, c, t as u64, "centroid")?;
        if m == 0 || d == 0 || default_k == 0 {
            return Err(r.format_err("zero chunk length, dimension or default k"));
        }
        let centroids = r.f32s(c * d, "centroids")?;
        let mut lists = Vec::with_capacity(c);
        let mut seen = vec![false; t];
        for _ in 0..c {
            let len = r.u64("posting list length")?;
            let len = check_count(&r, len, t as u64, "posting list")?;
            let list = r.u32s(len, "posting list")?;
            for &e in &list {
                let e = e as usize;
                if e >= t || seen[e] {
                    return Err(r.format_err(format!("posting lists do not partition entries (entry {e})")));
                }
                seen[e] = true;
            }
            lists.push(list);
        }
        if c > 0 && seen.iter().any(|s| !s) {
            return Err(r.format_err("posting lists do not cover every entry"));
        }
        let mut keys = Vec::with_capacity(t * d);
        let mut doc_ids = Vec::with_capacity(t);
        let mut chunk_indices = Vec::with_capacity(t);
        let mut values = Vec::with_capacity(t * 2 * m);
        for _ in 0..t {
            keys.extend(r.f32s(d, "key")?);
            doc_ids.push(r.u64("doc id")?);
            chunk_indices.push(r.u32("chunk index")?);
            values.extend(r.u32s(2 * m, "value tokens")?);
        }
        r.expect_eof()?;
        Ok(Self {
            spec: EmbedderSpec {
                seed,
                dim: d,
                chunk_len: m,
                vocab,
            },
            default_k,
            keys,
            doc_ids,
            chunk_indices,
            values,
            centroids,
            lists,
        })
    }
}

const INDEX_MAGIC: &[u8; 4] = b"RCHX";
const INDEX_VERSION: u32 = 1;
const NEIGHBORS_MAGIC: &[u8; 4] = b"RNBR";
const NEIGHBORS_VERSION: u32 = 1;

/// Neighbours of every chunk of one sequence; each chunk holds exactly `k`
/// records, padded with [`NeighborRecord::empty`] when retrieval came up short.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceNeighbors {
    pub doc_id: u64,
    pub start: u64,
    pub chunks: Vec<Vec<NeighborRecord>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborFile {
    pub chunk_len: usize,
    pub k: usize,
    pub sequences: Vec<SequenceNeighbors>,
}

impl NeighborFile {
    pub fn record_count(&self) -> usize {
        self.sequences.iter().map(|s| s.chunks.len() * self.k).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = LeWriter::create(path)?;
        w.bytes(NEIGHBORS_MAGIC)?;
        w.u32(NEIGHBORS_VERSION)?;
        w.u32(self.chunk_len as u32)?;
        w.u32(self.k as u32)?;
        w.u64(self.sequences.len() as u64)?;
        for s in &self.sequences {
            w.u64(s.doc_id)?;
            w.u64(s.start)?;
            w.u32(s.chunks.len() as u32)?;
            for chunk in &s.chunks {
                for rec in chunk {
                    w.u64(rec.source_doc_id)?;
                    w.u32(rec.source_chunk_index)?;
                    w.f32(rec.distance)?;
                    w.u32s(&rec.neighbor_tokens)?;
                    w.u32s(&rec.continuation_tokens)?;
                }
            }
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = LeReader::open(path)?;
        r.header(NEIGHBORS_MAGIC, NEIGHBORS_VERSION)?;
        let m = r.u32("chunk length")? as usize;
        let k = r.u32("k")? as usize;
        let n = r.u64("sequence count")?;
        let n = check_count(&r, n, 1 << 32, "sequence")?;
        let mut sequences = Vec::with_capacity(n);
        for _ in 0..n {
            let doc_id = r.u64("doc id")?;
            let start = r.u64("start")?;
            let l = r.u32("chunk count")? as usize;
            let mut chunks = Vec::with_capacity(l);
            for _ in 0..l {
                let mut recs = Vec::with_capacity(k);
                for _ in 0..k {
                    let source_doc_id = r.u64("neighbour doc id")?;
                    let source_chunk_index = r.u32("neighbour chunk index")?;
                    let distance = r.f32("distance")?;
                    let neighbor_tokens = r.u32s(m, "neighbour tokens")?;
                    let continuation_tokens = r.u32s(m, "continuation tokens")?;
                    recs.push(NeighborRecord {
                        neighbor_tokens,
                        continuation_tokens,
                        source_doc_id,
                        source_chunk_index,
                        distance,
                    });
                }
                chunks.push(recs);
            }
            sequences.push(SequenceNeighbors { doc_id, start, chunks });
        }
        r.expect_eof()?;
        Ok(Self {
            chunk_len: m,
            k,
            sequences,
        })
    }
}

/// Retrieves `k` neighbours for every chunk of every sequence, excluding the
/// sequence's own document.
pub fn precompute_neighbors(
    sequences: &[Sequence],
    index: &ChunkIndex,
    embedder: &dyn ChunkEmbedder,
    k: usize,
    mode: SearchMode,
) -> Result<NeighborFile> {
    let m = index.chunk_len();
    ensure!(sequences.iter().all(|s| s.tokens.len() % m == 0), "sequences must be chunked with chunk length {m}");
    let out: Vec<SequenceNeighbors> = sequences
        .par_iter()
        .map(|s| {
            let chunks = s
                .tokens
                .chunks(m)
                .map(|c| {
                    let mut res = index.query_tokens(embedder, c, k, Some(s.doc_id), mode)?.records;
                    res.resize_with(k, || NeighborRecord::empty(m));
                    Ok(res)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SequenceNeighbors {
                doc_id: s.doc_id,
                start: s.start as u64,
                chunks,
            })
        })
        .collect::<Result<_>>()?;
    Ok(NeighborFile {
        chunk_len: m,
        k,
        sequences: out,
    })
}

/// `|approx ∩ exact| / (k · |queries|)`, matching entries by `(doc_id, chunk_index)`.
pub fn recall_at_k(index: &ChunkIndex, queries: &[EmbeddingVector], k: usize, nprobe: usize) -> Result<f64> {
    ensure!(!queries.is_empty(), "recall needs at least one query");
    let hits: Vec<usize> = queries
        .par_iter()
        .map(|q| {
            let exact = index.query(q, k, None, SearchMode::Exact)?.records;
            let approx = index.query(q, k, None, SearchMode::Approximate { nprobe })?.records;
            Ok(approx
                .iter()
                .filter(|a| {
                    exact
                        .iter()
                        .any(|e| e.source_doc_id == a.source_doc_id && e.source_chunk_index == a.source_chunk_index)
                })
                .count())
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / (k * queries.len()) as f64)
}
