//! Left/right direction classification and two-view fusion of ranked lists.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{CapturePair, Observation, Side};
use crate::error::{ReidError, Result};
use crate::features::{featurize, Backbone, FeatureVector};
use crate::retrieval::{summarize, QueryResult, RankedItem, RankedList, RetrievalMetrics};

/// Logistic model over backbone features; `p(Right) = sigmoid(w . f + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionClassifier {
    pub weight: Vec<f64>,
    pub bias: f64,
}

pub const DIRECTION_MAX_EPOCHS: usize = 500;
pub const DIRECTION_LOSS_DELTA: f64 = 1e-8;
const DIRECTION_LR: f64 = 0.5;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl DirectionClassifier {
    pub fn probability_right(&self, f: &[f64]) -> f64 {
        sigmoid(self.logit(f))
    }

    fn logit(&self, f: &[f64]) -> f64 {
        self.weight.iter().zip(f).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.is_empty() || self.weight.iter().any(|w| !w.is_finite()) || !self.bias.is_finite() {
            return Err(ReidError::invalid("direction classifier parameters must be finite and nonempty"));
        }
        Ok(())
    }
}

/// Full-batch gradient descent on standardized features until the loss changes
/// by less than 1e-8 or 500 epochs pass. The standardization is folded back into
/// the returned weights.
pub fn train_direction(features: &[FeatureVector], labels: &[Side], seed: u64) -> Result<DirectionClassifier> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(ReidError::invalid("need one label per feature vector"));
    }
    if !labels.contains(&Side::Left) || !labels.contains(&Side::Right) {
        return Err(ReidError::config("direction training needs both Left and Right examples"));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(ReidError::invalid("feature vectors must share a nonzero length"));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f.as_slice()) {
            *m += x / n;
        }
    }
    let mut std = vec![0.0; dim];
    for f in features {
        for ((s, x), m) in std.iter_mut().zip(f.as_slice()).zip(&mean) {
            *s += (x - m) * (x - m) / n;
        }
    }
    for s in &mut std {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let z: Vec<Vec<f64>> = features.iter().map(|f| f.as_slice().iter().zip(&mean).zip(&std).map(|((x, m), s)| (x - m) / s).collect()).collect();
    let y: Vec<f64> = labels.iter().map(|s| if *s == Side::Right { 1.0 } else { 0.0 }).collect();

    let normal = Normal::new(0.0, 0.01).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let mut b = 0.0;
    let mut prev = f64::INFINITY;
    let mut gw = vec![0.0; dim];
    for _ in 0..DIRECTION_MAX_EPOCHS {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        let mut loss = 0.0;
        for (zi, &yi) in z.iter().zip(&y) {
            let logit = w.iter().zip(zi).map(|(a, x)| a * x).sum::<f64>() + b;
            loss += softplus(logit) - yi * logit;
            let r = sigmoid(logit) - yi;
            gb += r;
            for (g, x) in gw.iter_mut().zip(zi) {
                *g += r * x;
            }
        }
        loss /= n;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= DIRECTION_LR * g / n;
        }
        b -= DIRECTION_LR * gb / n;
        if (prev - loss).abs() < DIRECTION_LOSS_DELTA {
            break;
        }
        prev = loss;
    }
    let weight: Vec<f64> = w.iter().zip(&std).map(|(wi, s)| wi / s).collect();
    let bias = b - weight.iter().zip(&mean).map(|(wi, m)| wi * m).sum::<f64>();
    let clf = DirectionClassifier { weight, bias };
    clf.validate()?;
    Ok(clf)
}

/// Right iff `p(Right) >= 0.5`.
pub fn classify_direction(clf: &DirectionClassifier, f: &FeatureVector) -> Side {
    if clf.logit(f.as_slice()) >= 0.0 {
        Side::Right
    } else {
        Side::Left
    }
}

pub fn classify_observation_direction(clf: &DirectionClassifier, backbone: &Backbone, obs: &Observation) -> Result<Side> {
    Ok(classify_direction(clf, &featurize(backbone, &obs.image)?))
}

pub fn direction_accuracy(clf: &DirectionClassifier, features: &[FeatureVector], labels: &[Side]) -> f64 {
    if features.is_empty() {
        return 0.0;
    }
    let hits = features.iter().zip(labels).filter(|(f, l)| classify_direction(clf, f) == **l).count();
    hits as f64 / features.len() as f64
}

/// Left and right views of one capture.
pub type PairedQuery = CapturePair;

pub fn validate_pair(p: &PairedQuery) -> Result<()> {
    if p.left.side != Side::Left || p.right.side != Side::Right {
        return Err(ReidError::invalid("paired query must be (Left, Right)"));
    }
    if p.left.individual_id != p.right.individual_id || p.left.capture_day != p.right.capture_day {
        return Err(ReidError::invalid(format!("observations {} and {} are not views of one capture", p.left.obs_id, p.right.obs_id)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Merge both lists by distance; the first item is the global minimum.
    #[default]
    Distance,
    /// Walk both lists position by position; within a position the closer item goes first.
    Rank,
}

/// Both lists merged into one ordering. Distance ties put the left list first, then lower obs_id.
pub fn merge_lists(left: &RankedList, right: &RankedList, mode: FusionMode) -> RankedList {
    let mut tagged: Vec<(usize, u8, RankedItem)> = Vec::with_capacity(left.len() + right.len());
    tagged.extend(left.items.iter().enumerate().map(|(i, it)| (i, 0u8, *it)));
    tagged.extend(right.items.iter().enumerate().map(|(i, it)| (i, 1u8, *it)));
    let by_distance =
        |a: &(usize, u8, RankedItem), b: &(usize, u8, RankedItem)| a.2.distance.total_cmp(&b.2.distance).then(a.1.cmp(&b.1)).then(a.2.obs_id.cmp(&b.2.obs_id));
    match mode {
        FusionMode::Distance => tagged.sort_by(by_distance),
        FusionMode::Rank => tagged.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| by_distance(a, b))),
    }
    RankedList { items: tagged.into_iter().map(|t| t.2).collect() }
}

pub fn fuse_pair(left: &RankedList, right: &RankedList, mode: FusionMode) -> Result<u32> {
    if left.is_empty() || right.is_empty() {
        return Err(ReidError::invalid("both ranked lists must be nonempty"));
    }
    Ok(merge_lists(left, right, mode).items[0].individual_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub left: RetrievalMetrics,
    pub right: RetrievalMetrics,
    pub fused: RetrievalMetrics,
    pub n_pairs: usize,
}

/// Per-side and fused metrics; `left[i]` and `right[i]` must rank views of one capture.
pub fn evaluate_ensemble(left: &[QueryResult], right: &[QueryResult], mode: FusionMode) -> Result<EnsembleReport> {
    if left.len() != right.len() || left.is_empty() {
        return Err(ReidError::invalid("ensemble evaluation needs equally many nonempty left and right results"));
    }
    let mut fused = Vec::with_capacity(left.len());
    for (l, r) in left.iter().zip(right) {
        if l.true_id != r.true_id {
            return Err(ReidError::invalid(format!("queries {} and {} are not paired", l.obs_id, r.obs_id)));
        }
        fused.push(QueryResult { obs_id: l.obs_id, true_id: l.true_id, ranked: merge_lists(&l.ranked, &r.ranked, mode) });
    }
    let fused_metrics = summarize(&fused)?;
    Ok(EnsembleReport { left: summarize(left)?, right: summarize(right)?, fused: fused_metrics, n_pairs: left.len() })
}
