//! Online maintenance of a capacity-bounded GP dataset.
//!
//! The score of an element is its kernel linear independence `φ(z_i)`: the
//! noise-free prior variance of `z_i` conditioned on every other element.
//! It equals `1 / (K⁻¹)_ii`, so all scores come out of a single inverse.
//! A score near zero marks an element the others already explain.

use nalgebra::DMatrix;

use super::{factor_with_jitter, gram_of, GpDataset, KernelHyperparams};
use crate::error::{Error, Result};

pub const DEFAULT_QR_THRESHOLD: f64 = 1e-8;

/// Scores within this distance of the minimum (relative to the signal
/// variance) count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct IndependenceScores {
    pub scores: Vec<f64>,
}

impl IndependenceScores {
    /// Index of the element to evict: the minimal score, where exact ties
    /// (e.g. duplicated inputs) resolve to the most recent element.
    pub fn eviction_index(&self, signal_variance: f64) -> Option<usize> {
        let min = self.scores.iter().copied().fold(f64::INFINITY, f64::min);
        if !min.is_finite() {
            return None;
        }
        let tol = TIE_TOLERANCE * signal_variance;
        self.scores.iter().rposition(|s| *s <= min + tol)
    }
}

pub fn independence_scores(data: &GpDataset, hp: &KernelHyperparams) -> Result<IndependenceScores> {
    hp.validate()?;
    data.check_against(hp)?;
    let n = data.len();
    if n <= 1 {
        return Ok(IndependenceScores {
            scores: vec![hp.signal_variance; n],
        });
    }
    let k = gram_of(&data.inputs, hp);
    match factor_with_jitter(&k, 0.0, hp) {
        Ok((chol, shift)) => {
            let inv = chol.inverse();
            let scores = (0..n).map(|i| (1.0 / inv[(i, i)] - shift).max(0.0)).collect();
            Ok(IndependenceScores { scores })
        }
        Err(_) => schur_scores(&k, data, hp),
    }
}

/// Per-element `k_ii - k_iᵀ K_{-i}⁻¹ k_i`, used when the full gram matrix
/// cannot be factored.
fn schur_scores(k: &DMatrix<f64>, data: &GpDataset, hp: &KernelHyperparams) -> Result<IndependenceScores> {
    let n = k.nrows();
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let rest: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let sub = k.select_rows(&rest).select_columns(&rest);
        let ki = k.column(i).select_rows(&rest);
        match factor_with_jitter(&sub, 0.0, hp) {
            Ok((chol, _)) => {
                let v = chol.solve(&ki);
                scores.push((k[(i, i)] - ki.dot(&v)).max(0.0));
            }
            Err(_) => return Err(Error::DuplicateInputs(duplicate_indices(data))),
        }
    }
    Ok(IndependenceScores { scores })
}

fn duplicate_indices(data: &GpDataset) -> Vec<usize> {
    let mut dups = Vec::new();
    for i in 0..data.len() {
        if (0..data.len()).any(|j| j != i && data.inputs[j] == data.inputs[i]) {
            dups.push(i);
        }
    }
    dups
}

/// Removes minimal-score elements one at a time until the dataset fits its
/// capacity. Survivors keep their relative order.
///
/// Scores are recomputed after every removal. Between full refactorizations
/// the inverse of the gram matrix is downdated in `O(n²)` per removal.
pub fn evict_to_capacity(data: &GpDataset, hp: &KernelHyperparams) -> GpDataset {
    let mut out = data.clone();
    // (inverse of K + shift·I, shift, removals since the last factorization)
    let mut cached: Option<(DMatrix<f64>, f64, usize)> = None;
    while out.len() > out.capacity {
        if cached.as_ref().is_none_or(|c| c.2 >= REFACTOR_EVERY) {
            cached = gram_inverse(&out, hp).map(|(inv, shift)| (inv, shift, 0));
        }
        let scored = cached.as_ref().and_then(|(inv, shift, _)| {
            let scores: Vec<f64> = (0..inv.nrows()).map(|i| (1.0 / inv[(i, i)] - shift).max(0.0)).collect();
            let ok = (0..inv.nrows()).all(|i| inv[(i, i)] > 0.0 && inv[(i, i)].is_finite());
            ok.then_some(IndependenceScores { scores })
        });
        let idx = match scored {
            Some(scores) => scores.eviction_index(hp.signal_variance).unwrap_or(0),
            None => {
                cached = None;
                match independence_scores(&out, hp) {
                    Ok(scores) => scores.eviction_index(hp.signal_variance).unwrap_or(0),
                    Err(Error::DuplicateInputs(dups)) if !dups.is_empty() => *dups.last().unwrap(),
                    Err(e) => {
                        log::warn!("independence scoring failed ({e}); evicting the oldest element");
                        0
                    }
                }
            }
        };
        out.remove(idx);
        if let Some((inv, _, count)) = cached.as_mut() {
            *inv = downdate_inverse(inv, idx);
            *count += 1;
        }
    }
    out
}

const REFACTOR_EVERY: usize = 32;

fn gram_inverse(data: &GpDataset, hp: &KernelHyperparams) -> Option<(DMatrix<f64>, f64)> {
    if data.len() <= 1 {
        return None;
    }
    let k = gram_of(&data.inputs, hp);
    factor_with_jitter(&k, 0.0, hp)
        .ok()
        .map(|(chol, shift)| (chol.inverse(), shift))
}

/// Inverse of a matrix with row and column `i` deleted, given the inverse of
/// the full matrix: `B - b bᵀ / B_ii` restricted to the other indices.
fn downdate_inverse(inv: &DMatrix<f64>, i: usize) -> DMatrix<f64> {
    let n = inv.nrows();
    let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let b = inv.column(i).select_rows(&keep);
    let pivot = inv[(i, i)];
    let mut out = inv.select_rows(&keep).select_columns(&keep);
    out.ger(-1.0 / pivot, &b, &b, 1.0);
    out
}

/// Column-pivoted Householder QR of a square matrix. Returns the pivot order
/// and the absolute values of R's diagonal in that order.
pub(crate) fn pivoted_qr_diagonal(m: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    let n = m.ncols();
    let rows = m.nrows();
    let mut a = m.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut diag = Vec::with_capacity(n.min(rows));

    for k in 0..n.min(rows) {
        let mut best = k;
        let mut best_norm = -1.0;
        for j in k..n {
            let norm: f64 = (k..rows).map(|i| a[(i, j)] * a[(i, j)]).sum();
            if norm > best_norm {
                best_norm = norm;
                best = j;
            }
        }
        if best != k {
            a.swap_columns(k, best);
            perm.swap(k, best);
        }
        let alpha = best_norm.max(0.0).sqrt();
        diag.push(alpha);
        if alpha == 0.0 {
            continue;
        }
        // v = x - r e1 with r = -sign(x0)·|x|, H = I - 2vvᵀ/vᵀv
        let x0 = a[(k, k)];
        let r = if x0 >= 0.0 { -alpha } else { alpha };
        let mut v: Vec<f64> = (k..rows).map(|i| a[(i, k)]).collect();
        v[0] -= r;
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv > 0.0 {
            for j in k + 1..n {
                let dot: f64 = v.iter().enumerate().map(|(t, vi)| vi * a[(k + t, j)]).sum();
                let f = 2.0 * dot / vtv;
                for (t, vi) in v.iter().enumerate() {
                    a[(k + t, j)] -= f * vi;
                }
            }
        }
        a[(k, k)] = r;
        for i in k + 1..rows {
            a[(i, k)] = 0.0;
        }
    }
    (perm, diag)
}

/// Drops elements whose pivoted R-diagonal magnitude falls below
/// `rel_threshold` times the largest one. At least one element survives.
pub fn remove_correlated(data: &GpDataset, hp: &KernelHyperparams, rel_threshold: f64) -> GpDataset {
    if data.len() <= 1 {
        return data.clone();
    }
    let k = gram_of(&data.inputs, hp);
    let (perm, diag) = pivoted_qr_diagonal(&k);
    let max = diag.iter().copied().fold(0.0, f64::max);
    let cutoff = rel_threshold * max;
    let mut keep: Vec<usize> = perm
        .iter()
        .zip(&diag)
        .enumerate()
        .filter(|(pos, (_, r))| *pos == 0 || **r >= cutoff)
        .map(|(_, (idx, _))| *idx)
        .collect();
    keep.sort_unstable();
    data.select(&keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(points: &[[f64; 2]]) -> GpDataset {
        GpDataset::from_pairs(
            points.len(),
            points.iter().enumerate().map(|(i, p)| (p.to_vec(), i as f64)),
        )
        .unwrap()
    }

    #[test]
    fn single_element_scores_signal_variance() {
        let mut hp = KernelHyperparams::unit(2);
        hp.signal_variance = 1.7;
        let s = independence_scores(&ds(&[[0.2, 0.4]]), &hp).unwrap();
        assert_eq!(s.scores, vec![1.7]);
    }

    #[test]
    fn duplicates_score_near_zero() {
        let hp = KernelHyperparams::unit(2);
        let d = ds(&[[0.0, 0.0], [1.5, -0.5], [0.0, 0.0]]);
        let s = independence_scores(&d, &hp).unwrap();
        assert!(s.scores[0] <= 1e-6);
        assert!(s.scores[2] <= 1e-6);
        assert!(s.scores[1] > 0.1);
    }

    #[test]
    fn under_capacity_unchanged() {
        let hp = KernelHyperparams::unit(2);
        let d = ds(&[[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(evict_to_capacity(&d, &hp), d);
    }

    #[test]
    fn evicts_later_duplicate() {
        let hp = KernelHyperparams::unit(2);
        let mut d = ds(&[[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 0.0]]);
        d.capacity = 3;
        let out = evict_to_capacity(&d, &hp);
        assert_eq!(out.len(), 3);
        assert_eq!(out.targets, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn correlated_removal_keeps_distinct_points() {
        let hp = KernelHyperparams::unit(2);
        let d = ds(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [3.0, 3.0]]);
        assert_eq!(remove_correlated(&d, &hp, DEFAULT_QR_THRESHOLD), d);
    }

    #[test]
    fn correlated_removal_drops_one_duplicate() {
        let hp = KernelHyperparams::unit(2);
        let d = ds(&[[0.0, 0.0], [3.0, 0.0], [0.0, 0.0], [0.0, 3.0]]);
        let out = remove_correlated(&d, &hp, DEFAULT_QR_THRESHOLD);
        assert_eq!(out.len(), 3);
        let zeros = out.inputs.iter().filter(|z| **z == vec![0.0, 0.0]).count();
        assert_eq!(zeros, 1);
    }

    #[test]
    fn correlated_removal_keeps_one_when_all_identical() {
        let hp = KernelHyperparams::unit(2);
        let d = ds(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(remove_correlated(&d, &hp, 0.5).len(), 1);
    }

    #[test]
    fn qr_diagonal_is_non_increasing() {
        let hp = KernelHyperparams::unit(2);
        let pts: Vec<[f64; 2]> = (0..9)
            .map(|i| [(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()])
            .collect();
        let k = gram_of(&ds(&pts).inputs, &hp);
        let (_, diag) = pivoted_qr_diagonal(&k);
        for w in diag.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }
}
