//! Online triplet mining and the margin triplet loss.

use serde::{Deserialize, Serialize};

use super::head::{euclidean, Embedding};

pub const DEFAULT_MARGIN: f64 = 1.0;

/// Symmetric matrix of Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

pub fn pairwise_distances(embeddings: &[Embedding]) -> DistanceMatrix {
    let n = embeddings.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(embeddings[i].as_slice(), embeddings[j].as_slice());
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    DistanceMatrix { n, data }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Triplet selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mining {
    /// Every triplet whose negative is strictly closer to the anchor than its positive.
    #[default]
    AllHard,
    /// One triplet per anchor: farthest positive with nearest negative.
    BatchHard,
}

/// Number of (anchor, positive, negative) label-valid index triples in a batch.
pub fn candidate_triplet_count(labels: &[u32]) -> usize {
    labels
        .iter()
        .map(|la| {
            let same = labels.iter().filter(|l| *l == la).count();
            (same - 1) * (labels.len() - same)
        })
        .sum()
}

/// All triplets with `d(a, n) < d(a, p)`, ordered by anchor, then positive, then negative.
pub fn mine_hard_triplets(dist: &DistanceMatrix, labels: &[u32]) -> Vec<Triplet> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let d_ap = dist.get(a, p);
            for neg in 0..n {
                if labels[neg] != labels[a] && dist.get(a, neg) < d_ap {
                    out.push(Triplet { anchor: a, positive: p, negative: neg });
                }
            }
        }
    }
    out
}

/// Farthest positive and nearest negative per anchor (lowest index wins ties).
pub fn mine_batch_hard(dist: &DistanceMatrix, labels: &[u32]) -> Vec<Triplet> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        let mut best_p: Option<usize> = None;
        let mut best_n: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if best_p.is_none_or(|p| dist.get(a, j) > dist.get(a, p)) {
                    best_p = Some(j);
                }
            } else if best_n.is_none_or(|q| dist.get(a, j) < dist.get(a, q)) {
                best_n = Some(j);
            }
        }
        if let (Some(p), Some(q)) = (best_p, best_n) {
            out.push(Triplet { anchor: a, positive: p, negative: q });
        }
    }
    out
}

pub fn mine(dist: &DistanceMatrix, labels: &[u32], mining: Mining) -> Vec<Triplet> {
    match mining {
        Mining::AllHard => mine_hard_triplets(dist, labels),
        Mining::BatchHard => mine_batch_hard(dist, labels),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    /// Gradient with respect to each embedding of the batch.
    pub grad: Vec<Vec<f64>>,
    pub triplets: Vec<Triplet>,
}

/// Mean of `max(0, d_ap - d_an + margin)` over `triplets`, without the gradient.
pub fn hinge_mean(dist: &DistanceMatrix, triplets: &[Triplet], margin: f64) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for t in triplets {
        let hinge = dist.get(t.anchor, t.positive) - dist.get(t.anchor, t.negative) + margin;
        if hinge > 0.0 {
            total += hinge;
        }
    }
    total * (1.0 / triplets.len() as f64)
}

/// Mean of `max(0, d_ap - d_an + margin)` over the mined triplets, with its
/// exact subgradient. An empty mined set gives zero loss and zero gradient.
pub fn triplet_loss(embeddings: &[Embedding], labels: &[u32], margin: f64, mining: Mining) -> TripletLoss {
    let dim = embeddings.first().map_or(0, |e| e.dim());
    let mut grad = vec![vec![0.0; dim]; embeddings.len()];
    let dist = pairwise_distances(embeddings);
    let triplets = mine(&dist, labels, mining);
    if triplets.is_empty() {
        return TripletLoss { loss: 0.0, grad, triplets };
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut total = 0.0;
    for t in &triplets {
        let d_ap = dist.get(t.anchor, t.positive);
        let d_an = dist.get(t.anchor, t.negative);
        let hinge = d_ap - d_an + margin;
        if hinge <= 0.0 {
            continue;
        }
        total += hinge;
        let ea = embeddings[t.anchor].as_slice();
        let ep = embeddings[t.positive].as_slice();
        let en = embeddings[t.negative].as_slice();
        for k in 0..dim {
            // zero-distance pairs contribute the zero subgradient
            let gp = if d_ap > 0.0 { (ea[k] - ep[k]) / d_ap * scale } else { 0.0 };
            let gn = if d_an > 0.0 { (ea[k] - en[k]) / d_an * scale } else { 0.0 };
            grad[t.anchor][k] += gp - gn;
            grad[t.positive][k] -= gp;
            grad[t.negative][k] += gn;
        }
    }
    TripletLoss { loss: total * scale, grad, triplets }
}
