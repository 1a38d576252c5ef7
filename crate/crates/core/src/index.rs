//! Exact KD-tree over embedded descriptors with incremental insertion.
//!
//! Each node stores one point and splits on one axis: points in the left
//! subtree have coordinate `<= split`, points in the right subtree `>= split`.
//! Inserts descend to a leaf and cycle the axis; once the tree depth passes
//! `2·log₂(size) + 8` the whole tree is rebuilt with median splits on the
//! axis of largest spread.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use crate::embedding::EmbeddedDescriptor;
use crate::error::{Error, Result};

const NIL: usize = usize::MAX;

#[derive(Clone, Debug)]
struct Node {
    point: usize,
    axis: usize,
    split: f64,
    left: usize,
    right: usize,
}

#[derive(Clone, Debug)]
pub struct KdIndex {
    dim: usize,
    coords: Vec<f64>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
    root: usize,
    depth: usize,
    known: HashSet<usize>,
    rebuilds: usize,
}

/// A query hit: keyframe id and exact Euclidean distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    d2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KdIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            coords: Vec::new(),
            ids: Vec::new(),
            nodes: Vec::new(),
            root: NIL,
            depth: 0,
            known: HashSet::new(),
            rebuilds: 0,
        }
    }

    /// Bulk construction with a balanced build.
    pub fn from_entries(dim: usize, entries: &[EmbeddedDescriptor]) -> Result<Self> {
        let mut idx = Self::new(dim);
        for e in entries {
            idx.push_point(e)?;
        }
        idx.rebuild();
        Ok(idx)
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn rebuild_count(&self) -> usize {
        self.rebuilds
    }

    fn point(&self, p: usize) -> &[f64] {
        &self.coords[p * self.dim..(p + 1) * self.dim]
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: v.len(),
                location: None,
            });
        }
        Ok(())
    }

    fn push_point(&mut self, e: &EmbeddedDescriptor) -> Result<usize> {
        self.check_dim(&e.phi)?;
        if e.phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding has non-finite components"));
        }
        if !self.known.insert(e.keyframe_id) {
            return Err(Error::Duplicate(format!("keyframe id {}", e.keyframe_id)));
        }
        self.coords.extend_from_slice(&e.phi);
        self.ids.push(e.keyframe_id);
        Ok(self.ids.len() - 1)
    }

    pub fn insert(&mut self, e: &EmbeddedDescriptor) -> Result<()> {
        let p = self.push_point(e)?;
        let node = self.nodes.len();
        if self.root == NIL {
            self.nodes.push(Node {
                point: p,
                axis: 0,
                split: self.point(p)[0],
                left: NIL,
                right: NIL,
            });
            self.root = node;
            self.depth = 1;
            return Ok(());
        }
        let mut cur = self.root;
        let mut depth = 1;
        loop {
            depth += 1;
            let (axis, split) = (self.nodes[cur].axis, self.nodes[cur].split);
            let go_left = self.point(p)[axis] < split;
            let next = if go_left {
                self.nodes[cur].left
            } else {
                self.nodes[cur].right
            };
            if next != NIL {
                cur = next;
                continue;
            }
            let child_axis = (axis + 1) % self.dim;
            self.nodes.push(Node {
                point: p,
                axis: child_axis,
                split: self.point(p)[child_axis],
                left: NIL,
                right: NIL,
            });
            if go_left {
                self.nodes[cur].left = node;
            } else {
                self.nodes[cur].right = node;
            }
            break;
        }
        self.depth = self.depth.max(depth);
        let limit = 2.0 * (self.len() as f64).log2() + 8.0;
        if self.depth as f64 > limit {
            self.rebuild();
        }
        Ok(())
    }

    /// Rebuilds a balanced tree over all stored points.
    pub fn rebuild(&mut self) {
        self.nodes.clear();
        self.nodes.reserve(self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut max_depth = 0;
        self.root = self.build(&mut order, 1, &mut max_depth);
        self.depth = max_depth;
        self.rebuilds += 1;
    }

    fn build(&mut self, pts: &mut [usize], depth: usize, max_depth: &mut usize) -> usize {
        if pts.is_empty() {
            return NIL;
        }
        *max_depth = (*max_depth).max(depth);
        let axis = self.widest_axis(pts);
        pts.sort_by(|&a, &b| {
            self.point(a)[axis]
                .total_cmp(&self.point(b)[axis])
                .then(self.ids[a].cmp(&self.ids[b]))
        });
        let mid = pts.len() / 2;
        let p = pts[mid];
        let node = self.nodes.len();
        self.nodes.push(Node {
            point: p,
            axis,
            split: self.point(p)[axis],
            left: NIL,
            right: NIL,
        });
        let (lo, rest) = pts.split_at_mut(mid);
        let left = self.build(lo, depth + 1, max_depth);
        let right = self.build(&mut rest[1..], depth + 1, max_depth);
        self.nodes[node].left = left;
        self.nodes[node].right = right;
        node
    }

    fn widest_axis(&self, pts: &[usize]) -> usize {
        (0..self.dim)
            .map(|a| {
                let (lo, hi) =
                    pts.iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                            let v = self.point(p)[a];
                            (lo.min(v), hi.max(v))
                        });
                (a, hi - lo)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            })
            .0
    }

    /// All stored points within `eps` of `q`, ascending by distance then id.
    pub fn query_radius(&self, q: &[f64], eps: f64) -> Result<Vec<Neighbor>> {
        self.check_dim(q)?;
        if !(eps >= 0.0) {
            return Err(Error::invalid(format!("radius must be >= 0, got {eps}")));
        }
        let mut hits = Vec::new();
        // a small slack keeps pruning conservative under rounding
        let prune = eps * (1.0 + 1e-12);
        let mut stack = vec![self.root];
        while let Some(n) = stack.pop() {
            if n == NIL {
                continue;
            }
            let node = &self.nodes[n];
            let d2 = sq_dist(q, self.point(node.point));
            if d2.sqrt() <= eps {
                hits.push(Candidate {
                    d2,
                    id: self.ids[node.point],
                });
            }
            let diff = q[node.axis] - node.split;
            let (near, far) = if diff < 0.0 {
                (node.left, node.right)
            } else {
                (node.right, node.left)
            };
            if diff.abs() <= prune {
                stack.push(far);
            }
            stack.push(near);
        }
        hits.sort();
        Ok(hits
            .into_iter()
            .map(|c| Neighbor {
                id: c.id,
                distance: c.d2.sqrt(),
            })
            .collect())
    }

    /// The `min(k, len)` nearest points, ascending by distance then id.
    pub fn query_knn(&self, q: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        Ok(self.query_knn_counted(q, k)?.0)
    }

    /// As [`KdIndex::query_knn`], also returning the number of nodes visited.
    pub fn query_knn_counted(&self, q: &[f64], k: usize) -> Result<(Vec<Neighbor>, usize)> {
        self.check_dim(q)?;
        if k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let mut visits = 0;
        self.knn_visit(self.root, q, k, &mut heap, &mut visits);
        let out = heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                id: c.id,
                distance: c.d2.sqrt(),
            })
            .collect();
        Ok((out, visits))
    }

    fn knn_visit(
        &self,
        n: usize,
        q: &[f64],
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
        visits: &mut usize,
    ) {
        if n == NIL {
            return;
        }
        *visits += 1;
        let node = &self.nodes[n];
        let cand = Candidate {
            d2: sq_dist(q, self.point(node.point)),
            id: self.ids[node.point],
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().unwrap() {
            heap.pop();
            heap.push(cand);
        }
        let diff = q[node.axis] - node.split;
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.knn_visit(near, q, k, heap, visits);
        let bound = if heap.len() < k {
            f64::INFINITY
        } else {
            heap.peek().unwrap().d2
        };
        if diff * diff <= bound {
            self.knn_visit(far, q, k, heap, visits);
        }
    }
}
