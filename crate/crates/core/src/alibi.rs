//! Attention with Linear Biases.
//!
//! Instead of position embeddings, a static penalty proportional to the
//! query/key distance is added to every attention score. The per-head slopes
//! form a geometric sequence with ratio `2^(-8/n_heads)`, and the bias for a
//! bidirectional encoder is the symmetric `-m * |i - j|`. Because nothing is
//! learned, the bias extends to any evaluation length with no new parameters.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};

/// Per-head slope constants.
#[derive(Clone, Debug, PartialEq)]
pub struct AlibiSlopes {
    pub n_heads: usize,
    pub slopes: Vec<f64>,
}

/// Materialized distance penalty for one head: `bias[i][j] = -m * |i - j|`.
#[derive(Clone, Debug)]
pub struct AlibiBias {
    pub len: usize,
    pub slope: f64,
    bias: Vec<f64>,
}

impl AlibiBias {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.bias[i * self.len + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.bias
    }
}

/// Head slopes `m_h = 2^(-8(h+1)/n)` for `h = 0..n`.
pub fn alibi_slopes(n_heads: usize) -> Result<AlibiSlopes> {
    if n_heads == 0 {
        return Err(Error::Config("alibi_slopes: n_heads must be >= 1".into()));
    }
    let slopes = (1..=n_heads)
        .map(|h| 2f64.powf(-8.0 * h as f64 / n_heads as f64))
        .collect();
    Ok(AlibiSlopes { n_heads, slopes })
}

/// Distance-penalty matrix for one head at sequence length `len`.
pub fn alibi_bias(len: usize, slope: f64) -> Result<AlibiBias> {
    if len == 0 {
        return Err(Error::Config("alibi_bias: length must be >= 1".into()));
    }
    let mut bias = vec![0.0; len * len];
    for i in 0..len {
        for j in 0..len {
            bias[i * len + j] = -slope * (i as f64 - j as f64).abs();
        }
    }
    Ok(AlibiBias { len, slope, bias })
}

/// Bias for a longer evaluation length. The penalty is a pure function of
/// distance, so extrapolation just evaluates the same formula at `eval_len`;
/// `train_len` is retained for provenance only. The top-left
/// `train_len x train_len` block equals the training bias exactly.
pub fn extend_bias(_train_len: usize, eval_len: usize, slope: f64) -> Result<AlibiBias> {
    alibi_bias(eval_len, slope)
}

/// Cache of per-head bias matrices keyed by `(len, n_heads)`.
///
/// The bias is static, so each `(len, head)` combination is computed once and
/// shared. Reads are concurrent; insertion takes the write lock.
#[derive(Default)]
pub struct AlibiCache {
    #[allow(clippy::type_complexity)]
    inner: RwLock<HashMap<(usize, usize), Arc<Vec<AlibiBias>>>>,
}

impl AlibiCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// All-head biases at a given length.
    pub fn get(&self, len: usize, slopes: &AlibiSlopes) -> Result<Arc<Vec<AlibiBias>>> {
        let key = (len, slopes.n_heads);
        if let Some(hit) = self.inner.read().expect("alibi cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let built: Result<Vec<AlibiBias>> =
            slopes.slopes.iter().map(|&m| alibi_bias(len, m)).collect();
        let built = Arc::new(built?);
        let mut guard = self.inner.write().expect("alibi cache lock");
        Ok(guard.entry(key).or_insert(built).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slopes_for_eight_heads_are_halving() {
        let s = alibi_slopes(8).unwrap();
        let expect = [
            0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625, 0.0078125, 0.00390625,
        ];
        for (got, want) in s.slopes.iter().zip(expect) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn single_head_slope() {
        let s = alibi_slopes(1).unwrap();
        assert_eq!(s.slopes, vec![2f64.powi(-8)]);
    }

    #[test]
    fn twelve_heads_endpoints() {
        let s = alibi_slopes(12).unwrap();
        assert!((s.slopes[0] - 2f64.powf(-2.0 / 3.0)).abs() < 1e-15);
        assert!((s.slopes[0] - 0.6300).abs() < 1e-4);
        assert!((s.slopes[11] - 2f64.powi(-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_heads_rejected() {
        assert!(alibi_slopes(0).is_err());
    }

    #[test]
    fn ratio_is_constant() {
        for n in [1usize, 2, 3, 8, 12, 16, 40] {
            let s = alibi_slopes(n).unwrap();
            let want = 2f64.powf(-8.0 / n as f64);
            for pair in s.slopes.windows(2) {
                assert!((pair[1] / pair[0] - want).abs() < 1e-12);
            }
            assert!(s.slopes.iter().all(|&m| m > 0.0 && m < 1.0));
        }
    }

    #[test]
    fn bias_matrix_values() {
        let b = alibi_bias(3, 1.0).unwrap();
        let want = [0.0, -1.0, -2.0, -1.0, 0.0, -1.0, -2.0, -1.0, 0.0];
        assert_eq!(b.as_slice(), &want);

        let b1 = alibi_bias(1, 0.7).unwrap();
        assert_eq!(b1.as_slice(), &[0.0]);

        let bh = alibi_bias(2, 0.5).unwrap();
        assert_eq!(bh.as_slice(), &[0.0, -0.5, -0.5, 0.0]);
    }

    #[test]
    fn extension_restricts_to_training_bias() {
        let train = alibi_bias(4, 0.25).unwrap();
        let ext = extend_bias(4, 8, 0.25).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(train.get(i, j), ext.get(i, j));
            }
        }
        // Length 128 -> 256 succeeds with no parameter resize involved.
        let long = extend_bias(128, 256, 0.5).unwrap();
        assert_eq!(long.len, 256);
        // eval_len == train_len is the identity.
        let same = extend_bias(4, 4, 0.25).unwrap();
        assert_eq!(same.as_slice(), train.as_slice());
    }

    #[test]
    fn self_position_wins_under_equal_scores() {
        // With equal content scores the zero-penalty diagonal is the argmax.
        let b = alibi_bias(7, 0.3).unwrap();
        for i in 0..7 {
            let row: Vec<f64> = (0..7).map(|j| 1.0 + b.get(i, j)).collect();
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, i);
        }
    }

    #[test]
    fn cache_returns_shared_instances() {
        let cache = AlibiCache::new();
        let slopes = alibi_slopes(4).unwrap();
        let a = cache.get(16, &slopes).unwrap();
        let b = cache.get(16, &slopes).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(a.len(), 4);
        assert_eq!(a[0].len, 16);
    }
}
