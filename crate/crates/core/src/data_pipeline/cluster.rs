use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EmbeddingVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneCluster {
    pub cluster_id: usize,
    /// Sorted ascending.
    pub member_ids: Vec<String>,
    pub representative_id: String,
}

/// Cosine similarity. Bit-identical vectors score exactly 1; any other pair
/// scores strictly below 1 even when rounding would say otherwise, so a
/// threshold of 1.0 only merges exact duplicates.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let below_one = f64::from_bits(1.0f64.to_bits() - 1);
    (dot / (na * nb)).clamp(-1.0, below_one)
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Groups embeddings whose cosine similarity chains reach `threshold`
/// (transitive closure). Clusters are ordered by their smallest member id and
/// initially represented by that member.
pub fn dedup_cluster(embeddings: &[EmbeddingVector], threshold: f64) -> Result<Vec<SceneCluster>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "similarity threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let Some(first) = embeddings.first() else {
        return Ok(Vec::new());
    };
    let dim = first.dim();
    if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
        return Err(Error::DimensionMismatch(format!(
            "embedding `{}` has dimension {}, expected {dim}",
            bad.pair_id,
            bad.dim()
        )));
    }

    let n = embeddings.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if cosine_similarity(&embeddings[i].vector, &embeddings[j].vector) >= threshold {
                uf.union(i, j);
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, e) in embeddings.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(e.pair_id.clone());
    }
    let mut members: Vec<Vec<String>> = groups
        .into_values()
        .map(|mut m| {
            m.sort();
            m
        })
        .collect();
    members.sort_by(|a, b| a[0].cmp(&b[0]));

    Ok(members
        .into_iter()
        .enumerate()
        .map(|(cluster_id, member_ids)| SceneCluster {
            cluster_id,
            representative_id: member_ids[0].clone(),
            member_ids,
        })
        .collect())
}
