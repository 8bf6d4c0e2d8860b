//! Hierarchical navigable small-world graph for approximate nearest-neighbor
//! search over cached features.
//!
//! Each node draws a top layer from a geometric distribution; layer 0 holds
//! every node. Queries descend greedily through the sparse upper layers and
//! run a beam search of width `ef_search` on layer 0. Neighbor lists are
//! pruned with the diversity heuristic and back-filled with the closest
//! discarded candidates so that nodes keep their full degree.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::numcore::{sqdist, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HnswParams {
    /// Max neighbors per node on upper layers; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            ef_search: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Scored {
    dist: f64,
    id: usize,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug)]
pub struct HnswIndex {
    params: HnswParams,
    dim: usize,
    points: Vec<f64>,
    /// `links[node][layer]`
    links: Vec<Vec<Vec<usize>>>,
    entry: usize,
    top_layer: usize,
}

impl HnswIndex {
    /// Builds the graph over the rows of `points`, inserted in row order.
    pub fn build(points: &Tensor, params: HnswParams) -> Self {
        assert!(params.m >= 2, "HNSW needs m >= 2");
        let n = points.rows();
        let dim = points.cols();
        let mut index = HnswIndex {
            params,
            dim,
            points: points.data().to_vec(),
            links: Vec::with_capacity(n),
            entry: 0,
            top_layer: 0,
        };
        let mut rng = Rng::new(params.seed);
        let level_mult = 1.0 / (params.m as f64).ln();
        for id in 0..n {
            let u = 1.0 - rng.uniform();
            let level = (-u.ln() * level_mult).floor() as usize;
            index.insert(id, level);
        }
        index
    }

    pub fn params(&self) -> HnswParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn entry_point(&self) -> usize {
        self.entry
    }

    pub fn top_layer(&self) -> usize {
        self.top_layer
    }

    /// Neighbors of `node` on `layer` (empty above the node's top layer).
    pub fn neighbors(&self, node: usize, layer: usize) -> &[usize] {
        self.links[node].get(layer).map_or(&[], |v| v.as_slice())
    }

    fn point(&self, id: usize) -> &[f64] {
        &self.points[id * self.dim..(id + 1) * self.dim]
    }

    fn dist(&self, q: &[f64], id: usize) -> f64 {
        sqdist(q, self.point(id))
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn insert(&mut self, id: usize, level: usize) {
        self.links.push(vec![Vec::new(); level + 1]);
        if id == 0 {
            self.entry = 0;
            self.top_layer = level;
            return;
        }
        let q = self.point(id).to_vec();
        let mut ep = Scored {
            dist: self.dist(&q, self.entry),
            id: self.entry,
        };
        for layer in (level + 1..=self.top_layer).rev() {
            ep = self.greedy(&q, ep, layer);
        }
        let mut eps = vec![ep];
        for layer in (0..=level.min(self.top_layer)).rev() {
            let found = self.search_layer(&q, &eps, self.params.ef_construction, layer);
            let chosen = self.select(&found, self.params.m);
            self.links[id][layer] = chosen.iter().map(|s| s.id).collect();
            for s in &chosen {
                self.connect(s.id, id, layer);
            }
            eps = found;
        }
        if level > self.top_layer {
            self.top_layer = level;
            self.entry = id;
        }
    }

    fn connect(&mut self, from: usize, to: usize, layer: usize) {
        self.links[from][layer].push(to);
        let cap = self.max_degree(layer);
        if self.links[from][layer].len() > cap {
            let base = self.point(from).to_vec();
            let mut cands: Vec<Scored> = self.links[from][layer]
                .iter()
                .map(|&n| Scored {
                    dist: self.dist(&base, n),
                    id: n,
                })
                .collect();
            cands.sort();
            let kept = self.select(&cands, cap);
            self.links[from][layer] = kept.into_iter().map(|s| s.id).collect();
        }
    }

    /// Diversity heuristic over candidates sorted by distance to the base
    /// point; back-fills from the discarded ones up to `m`.
    fn select(&self, sorted: &[Scored], m: usize) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        let mut dropped = Vec::new();
        for &c in sorted {
            if kept.len() >= m {
                break;
            }
            let pc = self.point(c.id);
            if kept.iter().all(|k| sqdist(pc, self.point(k.id)) > c.dist) {
                kept.push(c);
            } else {
                dropped.push(c);
            }
        }
        for c in dropped {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept
    }

    fn greedy(&self, q: &[f64], mut cur: Scored, layer: usize) -> Scored {
        loop {
            let mut improved = false;
            for &n in self.neighbors(cur.id, layer) {
                let s = Scored {
                    dist: self.dist(q, n),
                    id: n,
                };
                if s < cur {
                    cur = s;
                    improved = true;
                }
            }
            if !improved {
                return cur;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` hits sorted ascending.
    fn search_layer(&self, q: &[f64], entry: &[Scored], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited = vec![false; self.links.len()];
        let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        let mut best: BinaryHeap<Scored> = BinaryHeap::new();
        for &e in entry {
            if !visited[e.id] {
                visited[e.id] = true;
                candidates.push(Reverse(e));
                best.push(e);
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(Reverse(c)) = candidates.pop() {
            if best.len() >= ef && c > *best.peek().unwrap() {
                break;
            }
            for &n in self.neighbors(c.id, layer) {
                if visited[n] {
                    continue;
                }
                visited[n] = true;
                let s = Scored {
                    dist: self.dist(q, n),
                    id: n,
                };
                if best.len() < ef || s < *best.peek().unwrap() {
                    candidates.push(Reverse(s));
                    best.push(s);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Approximate `k` nearest rows to `q` as `(row, squared distance)`,
    /// nearest first.
    pub fn search(&self, q: &[f64], k: usize, ef: Option<usize>) -> Vec<(usize, f64)> {
        if self.links.is_empty() || k == 0 {
            return Vec::new();
        }
        let ef = ef.unwrap_or(self.params.ef_search).max(k);
        let mut ep = Scored {
            dist: self.dist(q, self.entry),
            id: self.entry,
        };
        for layer in (1..=self.top_layer).rev() {
            ep = self.greedy(q, ep, layer);
        }
        self.search_layer(q, &[ep], ef, 0)
            .into_iter()
            .take(k)
            .map(|s| (s.id, s.dist))
            .collect()
    }

    pub fn search_batch(&self, queries: &Tensor, k: usize, ef: Option<usize>) -> Vec<Vec<(usize, f64)>> {
        let rows: Vec<&[f64]> = queries.row_iter().collect();
        rows.par_iter().map(|q| self.search(q, k, ef)).collect()
    }

    /// Number of nodes reachable from the entry point over layer-0 edges.
    pub fn reachable_from_entry(&self) -> usize {
        if self.links.is_empty() {
            return 0;
        }
        let mut seen = vec![false; self.links.len()];
        let mut stack = vec![self.entry];
        seen[self.entry] = true;
        let mut count = 0;
        while let Some(n) = stack.pop() {
            count += 1;
            for &m in self.neighbors(n, 0) {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        count
    }
}

/// Exact `k` nearest rows by scan, ties broken by lower row index.
pub fn exact_knn(points: &Tensor, q: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<Scored> = points
        .row_iter()
        .enumerate()
        .map(|(id, p)| Scored {
            dist: sqdist(q, p),
            id,
        })
        .collect();
    let k = k.min(all.len());
    if k == 0 {
        return Vec::new();
    }
    all.select_nth_unstable(k - 1);
    all.truncate(k);
    all.sort();
    all.into_iter().map(|s| (s.id, s.dist)).collect()
}
