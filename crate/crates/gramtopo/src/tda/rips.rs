//! Vietoris-Rips persistence over the clique filtration restricted to
//! simplices of dimension at most 2. Ties in filtration value break by
//! dimension, then lexicographic vertex ids.

use crate::error::{Error, Result};
use crate::model::math::Matrix;

use super::PersistenceDiagram;

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// False when both were already in one component.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

fn sorted_edges(dist: &Matrix) -> Vec<(f64, usize, usize)> {
    let n = dist.rows;
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            edges.push((dist.data[i * n + j], i, j));
        }
    }
    edges.sort_by(|a, b| {
        a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    edges
}

fn sort_pairs(pairs: &mut [(f64, f64)]) {
    pairs.sort_by(|a, b| a.partial_cmp(b).expect("finite persistence pairs"));
}

/// Connected-component persistence: one (0, merge height) bar per
/// single-linkage merge. The one essential class is dropped, as are
/// zero-persistence bars from duplicate points.
pub fn rips_h0(dist: &Matrix) -> PersistenceDiagram {
    let n = dist.rows;
    let edges = sorted_edges(dist);
    let cap = edges.last().map_or(0.0, |e| e.0);
    let mut uf = UnionFind::new(n);
    let mut pairs = Vec::with_capacity(n.saturating_sub(1));
    for (w, i, j) in edges {
        if uf.union(i, j) && w > 0.0 {
            pairs.push((0.0, w));
        }
    }
    sort_pairs(&mut pairs);
    PersistenceDiagram { dim: 0, pairs, cap }
}

fn xor_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// 1-cycle persistence by Z/2 boundary reduction. Triangle columns are
/// reduced in filtration order; each surviving low pairs an edge birth
/// with the triangle's filtration value. Creator edges left unpaired die
/// at `cap`.
pub fn rips_h1(dist: &Matrix, cap: f64) -> Result<PersistenceDiagram> {
    let n = dist.rows;
    let edges = sorted_edges(dist);
    let max_edge = edges.last().map_or(0.0, |e| e.0);
    if cap < max_edge {
        return Err(Error::CapTooSmall { cap, max_edge });
    }
    // Rank of each edge in the global simplex order.
    let mut edge_rank = vec![0usize; n * n];
    for (r, &(_, i, j)) in edges.iter().enumerate() {
        edge_rank[i * n + j] = r;
    }
    // Triangles enter at their longest edge; same-value ties break after
    // edges (higher dimension) and among themselves by vertex ids.
    let mut triangles: Vec<(f64, usize, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            for k in (j + 1)..n {
                let f = dist.data[i * n + j].max(dist.data[i * n + k]).max(dist.data[j * n + k]);
                triangles.push((f, i, j, k));
            }
        }
    }
    triangles.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite distances")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });

    let mut low_owner: Vec<Option<usize>> = vec![None; edges.len()];
    let mut reduced: Vec<Vec<usize>> = Vec::with_capacity(triangles.len());
    let mut killed = vec![false; edges.len()];
    let mut pairs = Vec::new();
    for &(f, i, j, k) in &triangles {
        let mut col = vec![edge_rank[i * n + j], edge_rank[i * n + k], edge_rank[j * n + k]];
        col.sort_unstable();
        while let Some(&low) = col.last() {
            match low_owner[low] {
                Some(owner) => col = xor_sorted(&col, &reduced[owner]),
                None => break,
            }
        }
        if let Some(&low) = col.last() {
            low_owner[low] = Some(reduced.len());
            killed[low] = true;
            let birth = edges[low].0;
            if f > birth {
                pairs.push((birth, f));
            }
        }
        reduced.push(col);
    }
    // Edges that close a loop but were never any triangle's low persist to
    // the top of the filtration.
    let mut uf = UnionFind::new(n);
    for (r, &(w, i, j)) in edges.iter().enumerate() {
        if !uf.union(i, j) && !killed[r] && cap > w {
            pairs.push((w, cap));
        }
    }
    sort_pairs(&mut pairs);
    Ok(PersistenceDiagram { dim: 1, pairs, cap })
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Independent checks: brute-force MST for H0 and textbook full
    //! boundary-matrix reduction for H1.

    use super::*;

    /// Prim's algorithm; returns the multiset of MST edge weights.
    pub fn mst_weights(dist: &Matrix) -> Vec<f64> {
        let n = dist.rows;
        if n == 0 {
            return vec![];
        }
        let mut in_tree = vec![false; n];
        let mut best = vec![f64::INFINITY; n];
        in_tree[0] = true;
        for j in 1..n {
            best[j] = dist.data[j];
        }
        let mut weights = Vec::with_capacity(n - 1);
        for _ in 1..n {
            let (next, _) = best
                .iter()
                .enumerate()
                .filter(|(i, _)| !in_tree[*i])
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            weights.push(best[next]);
            in_tree[next] = true;
            for j in 0..n {
                if !in_tree[j] {
                    best[j] = best[j].min(dist.data[next * n + j]);
                }
            }
        }
        weights.sort_by(|a, b| a.partial_cmp(b).unwrap());
        weights
    }

    #[derive(Clone, PartialEq)]
    enum Simplex {
        Vertex(usize),
        Edge(usize, usize),
        Triangle(usize, usize, usize),
    }

    impl Simplex {
        fn dim(&self) -> usize {
            match self {
                Simplex::Vertex(_) => 0,
                Simplex::Edge(..) => 1,
                Simplex::Triangle(..) => 2,
            }
        }

        fn verts(&self) -> Vec<usize> {
            match *self {
                Simplex::Vertex(a) => vec![a],
                Simplex::Edge(a, b) => vec![a, b],
                Simplex::Triangle(a, b, c) => vec![a, b, c],
            }
        }
    }

    /// Full reduction over the whole ≤2-skeleton in one global order,
    /// with no clearing shortcuts; returns the H1 diagram.
    pub fn naive_h1(dist: &Matrix, cap: f64) -> PersistenceDiagram {
        let n = dist.rows;
        let mut simplices: Vec<(f64, Simplex)> = (0..n).map(|v| (0.0, Simplex::Vertex(v))).collect();
        for i in 0..n {
            for j in (i + 1)..n {
                simplices.push((dist.data[i * n + j], Simplex::Edge(i, j)));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                for k in (j + 1)..n {
                    let f =
                        dist.data[i * n + j].max(dist.data[i * n + k]).max(dist.data[j * n + k]);
                    simplices.push((f, Simplex::Triangle(i, j, k)));
                }
            }
        }
        simplices.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then(a.1.dim().cmp(&b.1.dim()))
                .then(a.1.verts().cmp(&b.1.verts()))
        });
        let index_of = |s: &Simplex| simplices.iter().position(|(_, t)| t == s).unwrap();
        // Boundary columns as sorted index lists.
        let mut cols: Vec<Vec<usize>> = simplices
            .iter()
            .map(|(_, s)| {
                let mut boundary: Vec<usize> = match *s {
                    Simplex::Vertex(_) => vec![],
                    Simplex::Edge(a, b) => {
                        vec![index_of(&Simplex::Vertex(a)), index_of(&Simplex::Vertex(b))]
                    }
                    Simplex::Triangle(a, b, c) => vec![
                        index_of(&Simplex::Edge(a, b)),
                        index_of(&Simplex::Edge(a, c)),
                        index_of(&Simplex::Edge(b, c)),
                    ],
                };
                boundary.sort_unstable();
                boundary
            })
            .collect();
        let mut low_owner: Vec<Option<usize>> = vec![None; simplices.len()];
        let mut paired = vec![false; simplices.len()];
        let mut pairs = Vec::new();
        for idx in 0..cols.len() {
            loop {
                let Some(&low) = cols[idx].last() else { break };
                let Some(owner) = low_owner[low] else { break };
                let merged = xor_sorted(&cols[idx], &cols[owner].clone());
                cols[idx] = merged;
            }
            if let Some(&low) = cols[idx].last() {
                low_owner[low] = Some(idx);
                paired[low] = true;
                paired[idx] = true;
                if simplices[low].1.dim() == 1 {
                    let (birth, death) = (simplices[low].0, simplices[idx].0);
                    if death > birth {
                        pairs.push((birth, death));
                    }
                }
            }
        }
        for (idx, s) in simplices.iter().enumerate() {
            if s.1.dim() == 1 && !paired[idx] && cols[idx].is_empty() && cap > s.0 {
                pairs.push((s.0, cap));
            }
        }
        sort_pairs(&mut pairs);
        PersistenceDiagram { dim: 1, pairs, cap }
    }
}
