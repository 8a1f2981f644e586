//! Weak-annotator error model and the forward-corrected weak loss.
//!
//! `T[i][j]` is the probability that the weak annotator answers coarse class
//! `j` for an instance whose true coarse class is `i`. Training on weak labels
//! pushes the weak head's distribution through `T^T` before the cross-entropy,
//! so the model explains the annotator's noise instead of absorbing it.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{softmax, LOG_FLOOR};

const ROW_TOLERANCE: f64 = 1e-12;
const PROB_TOLERANCE: f64 = 1e-6;

/// Row-stochastic square matrix over the coarse classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    k: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(k: usize) -> Self {
        let mut entries = vec![0.0; k * k];
        for i in 0..k {
            entries[i * k + i] = 1.0;
        }
        TransitionMatrix { k, entries }
    }

    pub fn uniform(k: usize) -> Self {
        TransitionMatrix {
            k,
            entries: vec![1.0 / k as f64; k * k],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 {
            return Err(Error::Domain("transition matrix must be non-empty".into()));
        }
        let mut entries = Vec::with_capacity(k * k);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != k {
                return Err(Error::Domain(format!("row {i} has {} entries, expected {k}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Domain(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::Domain(format!("row {i} sums to {sum}, not 1")));
            }
            entries.extend(row);
        }
        Ok(TransitionMatrix { k, entries })
    }

    /// Builds a matrix from arbitrary non-negative rows, normalizing each.
    pub fn from_weights(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) || row.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Domain(format!("row {i} has no positive mass")));
            }
        }
        let normalized = rows
            .into_iter()
            .map(|row| {
                let sum: f64 = row.iter().sum();
                row.into_iter().map(|v| v / sum).collect()
            })
            .collect();
        let mut m = Self::from_rows_unchecked(normalized)?;
        m.renormalize();
        Ok(m)
    }

    fn from_rows_unchecked(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Domain("transition matrix must be square".into()));
        }
        Ok(TransitionMatrix {
            k,
            entries: rows.into_iter().flatten().collect(),
        })
    }

    /// Pushes each row's rounding residue into its largest entry so rows sum
    /// to one as tightly as floating point allows.
    fn renormalize(&mut self) {
        for i in 0..self.k {
            let row = &mut self.entries[i * self.k..(i + 1) * self.k];
            let sum: f64 = row.iter().sum();
            let top = crate::math::argmax(row);
            row[top] += 1.0 - sum;
        }
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.k..(i + 1) * self.k]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.k)
    }

    /// Mean of the diagonal: the expected weak-label correctness under a
    /// uniform prior over true coarse classes.
    pub fn mean_diagonal(&self) -> f64 {
        (0..self.k).map(|i| self.get(i, i)).sum::<f64>() / self.k as f64
    }

    /// `T^T p`: the distribution of the annotator's answer when the true
    /// class is distributed as `p`.
    pub fn transpose_apply(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for (i, &pi) in p.iter().enumerate() {
            for (o, t) in out.iter_mut().zip(self.row(i)) {
                *o += t * pi;
            }
        }
        out
    }

    /// Entry `y` of `T^T p`.
    pub fn transpose_apply_at(&self, p: &[f64], y: usize) -> f64 {
        p.iter().enumerate().map(|(i, &pi)| self.get(i, y) * pi).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.k {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row = line
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Domain(format!("line {}: invalid number `{f}`", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// A trusted comparison: the coarse label implied by a human fine label, and
/// what the weak annotator said about the same instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrustedPair {
    pub true_coarse: usize,
    /// `None` when the annotator abstained.
    pub vlm_pred: Option<usize>,
}

/// Smoothed count estimate of the transition matrix. Abstentions are
/// skipped; an unobserved row with no smoothing falls back to `e_i`.
pub fn estimate_transition(pairs: &[TrustedPair], k: usize, smoothing: f64) -> Result<TransitionMatrix> {
    if k < 2 {
        return Err(Error::Domain(format!("need at least 2 coarse classes, got {k}")));
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::Domain(format!("smoothing must be finite and >= 0, got {smoothing}")));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for pair in pairs {
        let Some(pred) = pair.vlm_pred else { continue };
        if pair.true_coarse >= k || pred >= k {
            return Err(Error::Domain(format!(
                "trusted pair ({}, {pred}) outside [0, {k})",
                pair.true_coarse
            )));
        }
        counts[pair.true_coarse][pred] += 1;
    }
    let rows = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 && smoothing == 0.0 {
                let mut e = vec![0.0; k];
                e[i] = 1.0;
                return e;
            }
            let denom = total as f64 + smoothing * k as f64;
            row.iter().map(|&c| (c as f64 + smoothing) / denom).collect()
        })
        .collect();
    let mut m = TransitionMatrix::from_rows_unchecked(rows)?;
    m.renormalize();
    Ok(m)
}

fn check_distribution(p: &[f64], k: usize) -> Result<()> {
    if p.len() != k {
        return Err(Error::Domain(format!("probability vector has {} entries, expected {k}", p.len())));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| *v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::Domain(format!("not a probability vector (sum {sum})")));
    }
    Ok(())
}

/// Plain cross-entropy `-ln p[y]` with the same floor as the corrected loss.
pub fn cross_entropy(p: &[f64], y: usize) -> f64 {
    -p[y].max(LOG_FLOOR).ln()
}

/// `-ln((T^T p)[y])`, floored at `LOG_FLOOR` inside the logarithm.
pub fn forward_corrected_loss(p: &[f64], t: &TransitionMatrix, y: usize) -> Result<f64> {
    check_distribution(p, t.dim())?;
    if y >= t.dim() {
        return Err(Error::Domain(format!("weak label {y} outside [0, {})", t.dim())));
    }
    Ok(-t.transpose_apply_at(p, y).max(LOG_FLOOR).ln())
}

/// Gradient of the corrected loss composed with softmax, with respect to
/// the weak-head logits. Writes into `grad` and returns the loss.
///
/// With `u = T^T p`, `dL/dz_k = p_k - p_k T[k][y] / u_y`. Below the floor the
/// loss is constant and the gradient vanishes.
pub(crate) fn corrected_loss_and_grad(p: &[f64], t: &TransitionMatrix, y: usize, grad: &mut [f64]) -> f64 {
    let u_y = t.transpose_apply_at(p, y);
    if u_y < LOG_FLOOR {
        grad.iter_mut().for_each(|g| *g = 0.0);
        return -LOG_FLOOR.ln();
    }
    for (k, g) in grad.iter_mut().enumerate() {
        *g = p[k] - p[k] * t.get(k, y) / u_y;
    }
    -u_y.ln()
}

pub fn corrected_loss_gradient(logits: &[f64], t: &TransitionMatrix, y: usize) -> Result<Vec<f64>> {
    if logits.len() != t.dim() || y >= t.dim() {
        return Err(Error::Domain("logits / label do not match the transition matrix".into()));
    }
    let p = softmax(logits);
    let mut grad = vec![0.0; logits.len()];
    corrected_loss_and_grad(&p, t, y, &mut grad);
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(i: usize, j: usize) -> TrustedPair {
        TrustedPair {
            true_coarse: i,
            vlm_pred: Some(j),
        }
    }

    #[test]
    fn counts_without_smoothing() {
        let mut pairs = vec![pair(0, 0); 3];
        pairs.push(pair(0, 1));
        pairs.extend(vec![pair(1, 1); 4]);
        let t = estimate_transition(&pairs, 2, 0.0).unwrap();
        assert_eq!(t.row(0), &[0.75, 0.25]);
        assert_eq!(t.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn perfect_and_empty_inputs_give_identity() {
        let pairs: Vec<_> = (0..5).map(|i| pair(i, i)).collect();
        assert!(estimate_transition(&pairs, 5, 0.0).unwrap().is_identity());
        assert!(estimate_transition(&[], 4, 0.0).unwrap().is_identity());
    }

    #[test]
    fn abstentions_are_skipped() {
        let pairs = vec![
            pair(0, 0),
            TrustedPair {
                true_coarse: 0,
                vlm_pred: None,
            },
        ];
        assert_eq!(estimate_transition(&pairs, 2, 0.0).unwrap().row(0), &[1.0, 0.0]);
    }

    #[test]
    fn add_one_smoothing() {
        let t = estimate_transition(&[pair(0, 0), pair(0, 0)], 2, 1.0).unwrap();
        assert_eq!(t.row(0), &[0.75, 0.25]);
        assert_eq!(t.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn heavy_smoothing_tends_to_uniform() {
        let pairs: Vec<_> = (0..50).map(|n| pair(n % 3, (n * 7) % 3)).collect();
        let t = estimate_transition(&pairs, 3, 1e9).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((t.get(i, j) - 1.0 / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn estimator_rejects_small_k() {
        assert!(estimate_transition(&[], 1, 1.0).is_err());
    }

    #[test]
    fn hand_computed_corrected_loss() {
        let t = TransitionMatrix::from_rows(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let loss = forward_corrected_loss(&[0.5, 0.5], &t, 0).unwrap();
        assert!((loss - (-(0.55f64).ln())).abs() < 1e-15);
        assert!((loss - 0.5978).abs() < 1e-4);
    }

    #[test]
    fn certainty_gives_zero_loss() {
        let t = TransitionMatrix::from_rows(vec![vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        assert_eq!(forward_corrected_loss(&[1.0, 0.0], &t, 1).unwrap(), 0.0);
        // Zero mass on the observed label hits the floor instead of infinity.
        let floored = forward_corrected_loss(&[1.0, 0.0], &t, 0).unwrap();
        assert_eq!(floored, -LOG_FLOOR.ln());
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let t = TransitionMatrix::identity(2);
        assert!(forward_corrected_loss(&[0.7, 0.7], &t, 0).is_err());
        assert!(forward_corrected_loss(&[0.5, 0.5], &t, 2).is_err());
    }

    #[test]
    fn identity_gradient_is_softmax_ce() {
        let z = [0.3, -1.2, 2.0];
        let g = corrected_loss_gradient(&z, &TransitionMatrix::identity(3), 1).unwrap();
        let p = softmax(&z);
        for k in 0..3 {
            let expected = p[k] - if k == 1 { 1.0 } else { 0.0 };
            assert!((g[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_rows_give_zero_gradient() {
        let g = corrected_loss_gradient(&[0.3, -1.2], &TransitionMatrix::uniform(2), 0).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn csv_round_trip() {
        let t = TransitionMatrix::from_weights(vec![vec![3.0, 1.0, 1.0], vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 7.0]])
            .unwrap();
        assert_eq!(TransitionMatrix::from_csv(&t.to_csv()).unwrap(), t);
        assert!(TransitionMatrix::from_csv("0.5,0.6\n0,1\n").is_err());
    }
}
