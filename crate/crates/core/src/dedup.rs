//! MinHash signatures over token 13-grams and train/eval near-duplicate
//! filtering.

use rayon::prelude::*;

use crate::corpus::Document;
use crate::error::{ensure, Result};

pub const DEFAULT_SHINGLE_LEN: usize = 13;
pub const DEFAULT_NUM_HASHES: usize = 256;
pub const DEFAULT_THRESHOLD: f64 = 0.8;
/// Seed of the published hash family.
pub const MINHASH_SEED: u64 = 0x5245_5452_4f5f_4d48;

pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes one shingle (a run of token ids) to 64 bits.
pub fn shingle_hash(tokens: &[u32]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &t in tokens {
        let mut s = h ^ t as u64;
        h = splitmix64(&mut s);
    }
    h
}

/// `H` multiply-add-shift hash functions `x -> ((a x + b) mod 2^128) >> 64`.
#[derive(Debug, Clone)]
pub struct MinHasher {
    shingle_len: usize,
    seed: u64,
    params: Vec<(u128, u128)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinHashSignature {
    pub num_hashes: usize,
    pub shingle_len: usize,
    pub seed: u64,
    pub values: Vec<u64>,
}

impl MinHasher {
    pub fn new(num_hashes: usize, shingle_len: usize, seed: u64) -> Result<Self> {
        ensure!(num_hashes >= 1, "num_hashes must be positive");
        ensure!(shingle_len >= 1, "shingle length must be positive");
        let mut state = seed;
        let mut next128 = || ((splitmix64(&mut state) as u128) << 64) | splitmix64(&mut state) as u128;
        let params = (0..num_hashes).map(|_| (next128() | 1, next128())).collect();
        Ok(Self {
            shingle_len,
            seed,
            params,
        })
    }

    pub fn num_hashes(&self) -> usize {
        self.params.len()
    }

    pub fn shingle_len(&self) -> usize {
        self.shingle_len
    }

    /// Signature of the token sequence, or `None` when it has fewer than
    /// `shingle_len` tokens (empty shingle set).
    pub fn signature(&self, tokens: &[u32]) -> Option<MinHashSignature> {
        if tokens.len() < self.shingle_len {
            return None;
        }
        let mut values = vec![u64::MAX; self.params.len()];
        for shingle in tokens.windows(self.shingle_len) {
            let x = shingle_hash(shingle) as u128;
            for (v, &(a, b)) in values.iter_mut().zip(&self.params) {
                let h = (a.wrapping_mul(x).wrapping_add(b) >> 64) as u64;
                if h < *v {
                    *v = h;
                }
            }
        }
        Some(MinHashSignature {
            num_hashes: self.params.len(),
            shingle_len: self.shingle_len,
            seed: self.seed,
            values,
        })
    }
}

impl Default for MinHasher {
    fn default() -> Self {
        Self::new(DEFAULT_NUM_HASHES, DEFAULT_SHINGLE_LEN, MINHASH_SEED).expect("valid defaults")
    }
}

pub fn minhash_signature(doc: &Document, hasher: &MinHasher) -> Option<MinHashSignature> {
    hasher.signature(&doc.tokens)
}

impl MinHashSignature {
    fn compatible(&self, other: &Self) -> bool {
        self.num_hashes == other.num_hashes && self.shingle_len == other.shingle_len && self.seed == other.seed
    }

    /// Fraction of agreeing minima.
    pub fn estimate_jaccard(&self, other: &Self) -> Result<f64> {
        ensure!(self.compatible(other), "signatures computed with different hash configurations");
        let same = self.values.iter().zip(&other.values).filter(|(a, b)| a == b).count();
        Ok(same as f64 / self.num_hashes as f64)
    }
}

/// Estimated Jaccard where a missing signature (empty shingle set) counts as 0.
pub fn estimate_jaccard(a: Option<&MinHashSignature>, b: Option<&MinHashSignature>) -> Result<f64> {
    match (a, b) {
        (Some(a), Some(b)) => a.estimate_jaccard(b),
        _ => Ok(0.0),
    }
}

/// For each train signature, whether it stays: true iff its estimated
/// Jaccard against every eval signature is below `threshold`.
pub fn dedup_keep_mask(
    train: &[Option<MinHashSignature>],
    eval: &[Option<MinHashSignature>],
    threshold: f64,
) -> Result<Vec<bool>> {
    let reference = train.iter().chain(eval).flatten().next();
    if let Some(r) = reference {
        for s in train.iter().chain(eval).flatten() {
            ensure!(r.compatible(s), "signatures computed with different hash configurations");
        }
    }
    Ok(train
        .par_iter()
        .map(|t| match t {
            None => true,
            Some(t) => eval.iter().flatten().all(|e| {
                let same = t.values.iter().zip(&e.values).filter(|(a, b)| a == b).count();
                (same as f64 / t.num_hashes as f64) < threshold
            }),
        })
        .collect())
}

/// Returns the training documents that are not near-duplicates of any eval document.
pub fn dedup_filter(
    train: &[Document],
    eval: &[Document],
    hasher: &MinHasher,
    threshold: f64,
) -> Result<Vec<Document>> {
    let train_sigs: Vec<_> = train.par_iter().map(|d| hasher.signature(&d.tokens)).collect();
    let eval_sigs: Vec<_> = eval.par_iter().map(|d| hasher.signature(&d.tokens)).collect();
    let keep = dedup_keep_mask(&train_sigs, &eval_sigs, threshold)?;
    Ok(train
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(d, _)| d.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn exact_jaccard(a: &[u32], b: &[u32], k: usize) -> f64 {
        let sa: HashSet<&[u32]> = a.windows(k).collect();
        let sb: HashSet<&[u32]> = b.windows(k).collect();
        if sa.is_empty() && sb.is_empty() {
            return 0.0;
        }
        sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
    }

    fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
        (0..n).map(|_| rng.random_range(1..257)).collect()
    }

    #[test]
    fn identical_documents_match() {
        let h = MinHasher::default();
        let doc = Document::new(1, "the quick brown fox jumps over the lazy dog again");
        let a = minhash_signature(&doc, &h).unwrap();
        let b = minhash_signature(&doc.clone(), &h).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.len(), 256);
        assert_eq!(a.estimate_jaccard(&b).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_documents_estimate_zero() {
        let h = MinHasher::default();
        let a = h.signature(&[5u32; 100]).unwrap();
        let b = h.signature(&[9u32; 100]).unwrap();
        assert_eq!(a.estimate_jaccard(&b).unwrap(), 0.0);
    }

    #[test]
    fn short_documents_have_empty_signal() {
        let h = MinHasher::default();
        assert!(h.signature(&[1; 12]).is_none());
        let b = h.signature(&[1; 20]);
        assert_eq!(estimate_jaccard(None, b.as_ref()).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_configs_rejected() {
        let a = MinHasher::new(64, 13, 1).unwrap().signature(&[1; 20]);
        let b = MinHasher::new(64, 13, 2).unwrap().signature(&[1; 20]);
        assert!(estimate_jaccard(a.as_ref(), b.as_ref()).is_err());
        assert!(dedup_keep_mask(&[a], &[b], 0.8).is_err());
    }

    #[test]
    fn half_shared_shingles_within_three_sigma() {
        // 200-token documents: shared 125-token prefix, independent tails.
        let h = MinHasher::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let shared = random_tokens(&mut rng, 125);
            let mut a = shared.clone();
            a.extend(random_tokens(&mut rng, 75));
            let mut b = shared;
            b.extend(random_tokens(&mut rng, 75));
            let j = exact_jaccard(&a, &b, 13);
            let est = h.signature(&a).unwrap().estimate_jaccard(&h.signature(&b).unwrap()).unwrap();
            let sigma = (j * (1.0 - j) / 256.0).sqrt();
            assert!((est - j).abs() <= 3.0 * sigma + 1e-12, "est {est} exact {j}");
        }
    }

    #[test]
    fn estimator_is_unbiased() {
        let h = MinHasher::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut diffs = Vec::new();
        let mut var = 0.0;
        for _ in 0..1000 {
            let base = random_tokens(&mut rng, 80);
            let cut = rng.random_range(13..80);
            let mut other = base[..cut].to_vec();
            other.extend(random_tokens(&mut rng, 80 - cut));
            let j = exact_jaccard(&base, &other, 13);
            let est = h.signature(&base).unwrap().estimate_jaccard(&h.signature(&other).unwrap()).unwrap();
            diffs.push(est - j);
            var += j * (1.0 - j) / 256.0;
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sigma_mean = var.sqrt() / n;
        assert!(mean.abs() <= 3.0 * sigma_mean.max(1e-4), "mean bias {mean}");
    }

    #[test]
    fn verbatim_copy_removed_disjoint_kept() {
        let h = MinHasher::default();
        let eval = vec![Document::new(100, "an evaluation document with plenty of distinct words in it")];
        let train = vec![
            Document::new(1, eval[0].text.clone()),
            Document::new(2, "completely unrelated training text that shares nothing at all"),
        ];
        let kept = dedup_filter(&train, &eval, &h, 0.8).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].doc_id, 2);

        let kept = dedup_filter(&train[1..], &eval, &h, 0.8).unwrap();
        assert_eq!(kept, train[1..].to_vec());
    }

    #[test]
    fn planted_overlaps_match_exact_oracle() {
        let h = MinHasher::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let eval: Vec<Document> = (0..10)
            .map(|i| Document { doc_id: 1000 + i, text: vec![], tokens: random_tokens(&mut rng, 150) })
            .collect();
        let mut train = Vec::new();
        for i in 0..50u64 {
            let tokens = match i % 3 {
                0 => eval[(i % 10) as usize].tokens.clone(),
                1 => {
                    let mut t = eval[(i % 10) as usize].tokens[..60].to_vec();
                    t.extend(random_tokens(&mut rng, 90));
                    t
                }
                _ => random_tokens(&mut rng, 150),
            };
            train.push(Document { doc_id: i, text: vec![], tokens });
        }
        let kept: HashSet<u64> = dedup_filter(&train, &eval, &h, 0.8).unwrap().iter().map(|d| d.doc_id).collect();
        for d in &train {
            let max_j = eval.iter().map(|e| exact_jaccard(&d.tokens, &e.tokens, 13)).fold(0.0, f64::max);
            if (max_j - 0.8).abs() > 0.05 {
                assert_eq!(kept.contains(&d.doc_id), max_j < 0.8, "doc {} exact J {max_j}", d.doc_id);
            }
        }
    }
}
