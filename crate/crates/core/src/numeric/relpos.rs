//! Relative positional logits: a learned per-head linear map of a fixed cosine
//! feature vector of the integer distance between two positions.

use std::f64::consts::PI;

/// Default length of the cosine feature vector.
pub const DEFAULT_REL_FEATURES: usize = 16;

/// Cosine features of an integer distance. Pairs `cos(w_f d)`,
/// `cos(w_f d - pi/2)` with `w_f = pi / 2^(f + 1/2)`.
pub fn cosine_features(distance: i64, features: usize) -> Vec<f64> {
    (0..features)
        .map(|i| {
            let f = (i / 2) as f64;
            let w = PI / 2f64.powf(f + 0.5);
            let phase = if i % 2 == 0 { 0.0 } else { PI / 2.0 };
            (w * distance as f64 - phase).cos()
        })
        .collect()
}

/// Distance from attending-chunk token `i` to retrieved token `j` (both
/// 0-based), assuming neighbour and chunk start at the same position:
/// `i - j + m - 1`.
pub fn cca_distance(i: usize, j: usize, m: usize) -> i64 {
    i as i64 - j as i64 + m as i64 - 1
}

/// Distance from retrieved token `j` to chunk token `i` in the encoder's
/// cross-attention: `j - i`.
pub fn encoder_distance(j: usize, i: usize) -> i64 {
    j as i64 - i as i64
}

/// Self-attention distance `i - j`.
pub fn self_distance(i: usize, j: usize) -> i64 {
    i as i64 - j as i64
}

/// Integer distances for a `rows x cols` block of logits together with the
/// cosine features of every distinct distance.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceTable {
    pub rows: usize,
    pub cols: usize,
    pub features: usize,
    /// Row-major distances.
    pub dist: Vec<i64>,
    pub min: i64,
    pub max: i64,
    /// `(max - min + 1) x features` feature rows indexed by `d - min`.
    pub basis: Vec<f64>,
}

impl DistanceTable {
    pub fn new(rows: usize, cols: usize, features: usize, f: impl Fn(usize, usize) -> i64) -> Self {
        let mut dist = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                dist.push(f(i, j));
            }
        }
        let min = dist.iter().copied().min().unwrap_or(0);
        let max = dist.iter().copied().max().unwrap_or(0);
        let basis = (min..=max).flat_map(|d| cosine_features(d, features)).collect();
        Self {
            rows,
            cols,
            features,
            dist,
            min,
            max,
            basis,
        }
    }

    pub fn distance(&self, i: usize, j: usize) -> i64 {
        self.dist[i * self.cols + j]
    }

    pub fn num_distances(&self) -> usize {
        (self.max - self.min + 1) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cca_distance_examples() {
        assert_eq!(cca_distance(0, 0, 4), 3);
        assert_eq!(encoder_distance(5, 5), 0);
        // Full table for m = 4 and 2m = 8 retrieved tokens, checked by loop.
        let t = DistanceTable::new(4, 8, 4, |i, j| cca_distance(i, j, 4));
        let (mut lo, mut hi) = (i64::MAX, i64::MIN);
        for i in 0..4 {
            for j in 0..8 {
                let d = i as i64 - j as i64 + 3;
                assert_eq!(t.distance(i, j), d);
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
        assert_eq!((t.min, t.max), (-4, 6));
        assert_eq!((lo, hi), (-4, 6));
        assert_eq!(t.num_distances(), 11);
    }

    #[test]
    fn features_distinguish_sign() {
        let a = cosine_features(1, 16);
        let b = cosine_features(-1, 16);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 0.1));
        assert!(cosine_features(0, 16).iter().step_by(2).all(|&x| x == 1.0));
    }
}
