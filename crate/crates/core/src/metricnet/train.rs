//! Two-stage training of the embedding head (and later the backbone's last
//! stage) with PK-sampled batches and plain SGD.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{EmbeddingHead, HeadForward, HeadGrad};
use super::triplet::{pairwise_distances, triplet_loss, DistanceMatrix, Mining, Triplet, DEFAULT_MARGIN};
use crate::datagen::{DatasetSplit, Observation};
use crate::error::{ReidError, Result};
use crate::features::{augment, letterbox, AugmentParams, Backbone, Stage1Output, Stage2Cache, Stage2Grad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub pk_classes: usize,
    pub pk_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub mining: Mining,
    /// Standard deviation of the initial head weights.
    pub init_std: f64,
    /// Recorded for reproducibility; SGD without momentum is the only optimizer.
    #[serde(default = "default_optimizer")]
    pub optimizer: String,
}

fn default_optimizer() -> String {
    "sgd".to_string()
}

pub const DEFAULT_INIT_STD: f64 = 0.001;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            batch_size: 32,
            stage1_epochs: 100,
            stage2_epochs: 100,
            stage1_lr: 1e-3,
            stage2_lr: 1e-4,
            pk_classes: 8,
            pk_samples: 4,
            seed: 0,
            mining: Mining::AllHard,
            init_std: DEFAULT_INIT_STD,
            optimizer: default_optimizer(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pk_classes * self.pk_samples != self.batch_size {
            return Err(ReidError::config(format!(
                "pk_classes x pk_samples ({} x {}) must equal batch_size {}",
                self.pk_classes, self.pk_samples, self.batch_size
            )));
        }
        if self.pk_classes < 2 || self.pk_samples < 2 {
            return Err(ReidError::config("PK sampling needs at least 2 classes and 2 samples per class"));
        }
        if !(self.margin > 0.0) || !(self.stage1_lr > 0.0) || !(self.stage2_lr > 0.0) {
            return Err(ReidError::config("margin and learning rates must be positive"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(ReidError::config("init_std must be positive"));
        }
        if self.optimizer != "sgd" {
            return Err(ReidError::config(format!("unsupported optimizer {:?}", self.optimizer)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based, counted across both stages.
    pub epoch: usize,
    pub stage: u8,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: EmbeddingHead,
    pub backbone: Backbone,
    pub log: Vec<EpochLog>,
}

/// Loss, gradients and a fingerprint of the discrete choices made for one batch.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: f64,
    pub head_grad: HeadGrad,
    pub stage2_grad: Option<Stage2Grad>,
    pub triplets: Vec<Triplet>,
    /// Changes whenever the mined set or a ReLU pattern changes.
    pub signature: u64,
}

/// Forward and backward pass of `triplet_loss` composed with the head and stage 2.
pub fn evaluate_batch(head: &EmbeddingHead, backbone: &Backbone, stage1: &[Stage1Output], labels: &[u32], margin: f64, mining: Mining) -> Result<BatchEval> {
    let mut feats = Vec::with_capacity(stage1.len());
    let mut caches: Vec<Stage2Cache> = Vec::with_capacity(stage1.len());
    let mut fwds: Vec<HeadForward> = Vec::with_capacity(stage1.len());
    for s1 in stage1 {
        let (f, cache) = backbone.stage2_forward(s1);
        fwds.push(head.forward(f.as_slice())?);
        feats.push(f);
        caches.push(cache);
    }
    let embeddings: Vec<_> = fwds.iter().map(|f| f.embedding.clone()).collect();
    let out = triplet_loss(&embeddings, labels, margin, mining);

    let acts: Vec<u64> = caches.iter().map(Backbone::activation_signature).collect();
    let signature = batch_signature(&pairwise_distances(&embeddings), &out.triplets, margin, &acts);
    let mut head_grad = HeadGrad::zeros(head.feature_dim);
    let mut stage2_grad = backbone.stage2_trainable.then(|| Stage2Grad::zeros(&backbone.config));
    if !out.triplets.is_empty() {
        for i in 0..stage1.len() {
            if out.grad[i].iter().all(|g| *g == 0.0) {
                continue;
            }
            let df = head.backward(feats[i].as_slice(), &fwds[i], &out.grad[i], &mut head_grad);
            if let Some(g) = stage2_grad.as_mut() {
                backbone.stage2_backward(&caches[i], &df, g);
            }
        }
    }
    Ok(BatchEval { loss: out.loss, head_grad, stage2_grad, triplets: out.triplets, signature })
}

/// Fingerprint of the mined set, the active hinges and every stage 2 ReLU pattern
/// (given as per-image activation signatures).
pub(crate) fn batch_signature(dist: &DistanceMatrix, triplets: &[Triplet], margin: f64, activations: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut mix = |v: u64| h = (h ^ v).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(17);
    for t in triplets {
        let active = dist.get(t.anchor, t.positive) - dist.get(t.anchor, t.negative) + margin > 0.0;
        mix(((t.anchor as u64) << 43) | ((t.positive as u64) << 22) | ((t.negative as u64) << 1) | active as u64);
    }
    for &a in activations {
        mix(a);
    }
    h
}

fn group_by_class(obs: &[Observation]) -> Vec<(u32, Vec<usize>)> {
    let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, o) in obs.iter().enumerate() {
        map.entry(o.individual_id).or_default().push(i);
    }
    map.into_iter().collect()
}

/// `p` distinct classes with `k` members each; small classes are sampled with replacement.
fn pk_batch(classes: &[(u32, Vec<usize>)], p: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut batch = Vec::with_capacity(p * k);
    for ci in index::sample(rng, classes.len(), p).into_iter() {
        let members = &classes[ci].1;
        if members.len() >= k {
            batch.extend(index::sample(rng, members.len(), k).into_iter().map(|j| members[j]));
        } else {
            batch.extend(members.iter().copied());
            for _ in members.len()..k {
                batch.push(members[rng.random_range(0..members.len())]);
            }
        }
    }
    batch
}

fn apply_stage2_step(backbone: &mut Backbone, grad: &Stage2Grad, lr: f64) {
    for (w, g) in backbone.stage2_weight.iter_mut().zip(&grad.weight) {
        *w -= lr * g;
    }
    for (b, g) in backbone.stage2_bias.iter_mut().zip(&grad.bias) {
        *b -= lr * g;
    }
}

pub fn train_staged(split: &DatasetSplit, backbone: Backbone, config: &TrainConfig, aug: &AugmentParams) -> Result<TrainOutcome> {
    train_staged_with(split, backbone, config, aug, |_| {})
}

/// Stage 1 trains the head with the backbone frozen; stage 2 also trains the
/// backbone's last stage at the lower learning rate. `on_epoch` sees every log row.
pub fn train_staged_with(
    split: &DatasetSplit,
    backbone: Backbone,
    config: &TrainConfig,
    aug: &AugmentParams,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let head = EmbeddingHead::random(backbone.feature_dim(), config.init_std, config.seed)?;
    train_head_from(split, head, backbone, config, aug, on_epoch)
}

/// Like [`train_staged_with`] but starting from the given head.
pub fn train_head_from(
    split: &DatasetSplit,
    mut head: EmbeddingHead,
    mut backbone: Backbone,
    config: &TrainConfig,
    aug: &AugmentParams,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if head.feature_dim != backbone.feature_dim() {
        return Err(ReidError::invalid("head input does not match backbone feature_dim"));
    }
    aug.validate()?;
    let support = &split.support;
    let classes = group_by_class(support);
    if classes.len() < config.pk_classes {
        return Err(ReidError::config(format!("support set has {} classes, PK sampling needs {}", classes.len(), config.pk_classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let batches_per_epoch = support.len().div_ceil(config.batch_size);
    let input = backbone.input_size();
    let mut log = Vec::new();
    let mut epoch_counter = 0;

    let stages = [(1u8, config.stage1_epochs, config.stage1_lr), (2u8, config.stage2_epochs, config.stage2_lr)];
    for (stage, epochs, lr) in stages {
        if epochs == 0 {
            continue;
        }
        backbone.stage2_trainable = stage == 2;
        for _ in 0..epochs {
            let mut total = 0.0;
            for _ in 0..batches_per_epoch {
                let idx = pk_batch(&classes, config.pk_classes, config.pk_samples, &mut rng);
                let mut stage1 = Vec::with_capacity(idx.len());
                let mut labels = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let img = augment(&support[i].image, aug, &mut rng);
                    stage1.push(backbone.stage1(&letterbox(&img, input)?)?);
                    labels.push(support[i].individual_id);
                }
                let eval = evaluate_batch(&head, &backbone, &stage1, &labels, config.margin, config.mining)?;
                total += eval.loss;
                if !eval.triplets.is_empty() {
                    head.sgd_step(&eval.head_grad, lr);
                    if let Some(g) = &eval.stage2_grad {
                        apply_stage2_step(&mut backbone, g, lr);
                    }
                }
            }
            epoch_counter += 1;
            let row = EpochLog { epoch: epoch_counter, stage, mean_loss: total / batches_per_epoch as f64 };
            on_epoch(&row);
            log.push(row);
        }
    }
    backbone.stage2_trainable = false;
    Ok(TrainOutcome { head, backbone, log })
}
