//! Bottleneck distance between persistence diagrams: binary search over
//! the candidate-cost lattice with a bipartite-matching feasibility test,
//! so the result is exact on that lattice.

use crate::error::{Error, Result};

use super::PersistenceDiagram;

fn linf(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

fn diag_cost(p: (f64, f64)) -> f64 {
    (p.1 - p.0) / 2.0
}

/// Matching feasibility at radius r. Left side: points of P plus one
/// diagonal slot per point of Q; right side mirrors with Q and P. A
/// perfect matching exists iff the bottleneck cost is at most r.
struct Matcher<'a> {
    p: &'a [(f64, f64)],
    q: &'a [(f64, f64)],
    r: f64,
}

impl Matcher<'_> {
    fn left_len(&self) -> usize {
        self.p.len() + self.q.len()
    }

    fn edge(&self, left: usize, right: usize) -> bool {
        let np = self.p.len();
        let nq = self.q.len();
        match (left < np, right < nq) {
            // P point to Q point.
            (true, true) => linf(self.p[left], self.q[right]) <= self.r,
            // P point to its own diagonal slot.
            (true, false) => right - nq == left && diag_cost(self.p[left]) <= self.r,
            // Q diagonal slot to its Q point.
            (false, true) => left - np == right && diag_cost(self.q[right]) <= self.r,
            // Diagonal to diagonal, free.
            (false, false) => true,
        }
    }

    fn try_augment(&self, left: usize, seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for right in 0..self.left_len() {
            if seen[right] || !self.edge(left, right) {
                continue;
            }
            seen[right] = true;
            if owner[right].is_none()
                || self.try_augment(owner[right].unwrap(), seen, owner)
            {
                owner[right] = Some(left);
                return true;
            }
        }
        false
    }

    fn feasible(&self) -> bool {
        let n = self.left_len();
        let mut owner: Vec<Option<usize>> = vec![None; n];
        for left in 0..n {
            let mut seen = vec![false; n];
            if !self.try_augment(left, &mut seen, &mut owner) {
                return false;
            }
        }
        true
    }
}

/// Smallest radius on the candidate lattice at which a perfect matching
/// (points to points or to the diagonal) exists.
pub fn bottleneck_distance(d1: &PersistenceDiagram, d2: &PersistenceDiagram) -> Result<f64> {
    if d1.dim != d2.dim {
        return Err(Error::DimMismatch(d1.dim, d2.dim));
    }
    let p = &d1.pairs;
    let q = &d2.pairs;
    if p.is_empty() && q.is_empty() {
        return Ok(0.0);
    }
    let mut candidates = vec![0.0f64];
    for &a in p {
        candidates.push(diag_cost(a));
        for &b in q {
            candidates.push(linf(a, b));
        }
    }
    for &b in q {
        candidates.push(diag_cost(b));
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
    candidates.dedup();
    let (mut lo, mut hi) = (0usize, candidates.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if (Matcher { p, q, r: candidates[mid] }).feasible() {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(candidates[lo])
}
