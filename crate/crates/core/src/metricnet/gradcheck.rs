//! Central finite-difference check of the batch loss gradient.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{Embedding, EmbeddingHead, EMBEDDING_DIM};
use super::train::{batch_signature, evaluate_batch};
use super::triplet::{hinge_mean, mine, pairwise_distances, Mining, DEFAULT_MARGIN};
use crate::error::{ReidError, Result};
use crate::features::{Backbone, FeatureVector, Stage1Output, Stage2Cache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamSelection {
    Head,
    Stage2,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Finite-difference step for head parameters.
    pub epsilon: f64,
    /// Step for backbone parameters, whose gradients are orders of magnitude smaller.
    pub backbone_epsilon: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Check a random subset of this many parameters; `None` checks all of them.
    pub max_params: Option<usize>,
    pub selection: ParamSelection,
    pub margin: f64,
    pub mining: Mining,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 5e-5,
            backbone_epsilon: 1e-3,
            floor: 1e-7,
            max_params: Some(256),
            selection: ParamSelection::All,
            margin: DEFAULT_MARGIN,
            mining: Mining::AllHard,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRef {
    HeadWeight(usize),
    HeadBias(usize),
    Stage2Weight(usize),
    Stage2Bias(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Parameters whose perturbation crossed a kink (mined set, hinge or ReLU change).
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<(ParamRef, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// The part of the forward pass a single parameter can change.
#[derive(Clone, Copy)]
enum Reach {
    Nothing,
    HeadOutput(usize),
    Stage2Channel(usize),
}

struct Probe<'a> {
    head: EmbeddingHead,
    backbone: Backbone,
    labels: &'a [u32],
    cfg: &'a GradCheckConfig,
    /// Forward pass with the unperturbed parameters.
    feats: Vec<FeatureVector>,
    caches: Vec<Stage2Cache>,
    activations: Vec<u64>,
    projections: Vec<Vec<f64>>,
}

impl Probe<'_> {
    fn loss_from(&self, embs: &[Embedding], activations: &[u64]) -> Result<(f64, u64)> {
        let dist = pairwise_distances(embs);
        let triplets = mine(&dist, self.labels, self.cfg.mining);
        let loss = hinge_mean(&dist, &triplets, self.cfg.margin);
        Ok((loss, batch_signature(&dist, &triplets, self.cfg.margin, activations)))
    }

    /// Loss and signature with the current parameters, recomputing only what `reach` covers.
    fn loss(&self, reach: Reach) -> Result<(f64, u64)> {
        match reach {
            Reach::Nothing => {
                let embs: Vec<Embedding> = self.projections.iter().map(|v| Embedding::normalize(v.clone())).collect::<Result<_>>()?;
                self.loss_from(&embs, &self.activations)
            }
            Reach::HeadOutput(j) => {
                let embs: Vec<Embedding> = self
                    .projections
                    .iter()
                    .zip(&self.feats)
                    .map(|(v, f)| {
                        let mut v = v.clone();
                        v[j] = self.head.project_one(f.as_slice(), j);
                        Embedding::normalize(v)
                    })
                    .collect::<Result<_>>()?;
                self.loss_from(&embs, &self.activations)
            }
            Reach::Stage2Channel(o) => {
                let mut acts = self.activations.clone();
                let mut embs = Vec::with_capacity(self.feats.len());
                for (i, cache) in self.caches.iter().enumerate() {
                    let (v, sig) = self.backbone.stage2_channel(cache, o);
                    let mut f = self.feats[i].clone();
                    f.0[o] = v;
                    acts[i] = sig;
                    embs.push(self.head.embed(&f)?);
                }
                self.loss_from(&embs, &acts)
            }
        }
    }

    fn slot(&mut self, p: ParamRef) -> &mut f64 {
        match p {
            ParamRef::HeadWeight(i) => &mut self.head.weight[i],
            ParamRef::HeadBias(i) => &mut self.head.bias[i],
            ParamRef::Stage2Weight(i) => &mut self.backbone.stage2_weight[i],
            ParamRef::Stage2Bias(i) => &mut self.backbone.stage2_bias[i],
        }
    }

    /// Five-point central difference, or `None` if any probe lands in another linear region.
    fn central(&mut self, p: ParamRef, eps: f64, base_sig: u64) -> Result<Option<f64>> {
        let f = self.backbone.config.feature_dim;
        let reach = match p {
            ParamRef::HeadWeight(i) => Reach::HeadOutput(i % EMBEDDING_DIM),
            ParamRef::HeadBias(j) => Reach::HeadOutput(j),
            ParamRef::Stage2Weight(i) => Reach::Stage2Channel(i % f),
            ParamRef::Stage2Bias(o) => Reach::Stage2Channel(o),
        };
        let orig = *self.slot(p);
        let mut at = |k: f64| {
            *self.slot(p) = orig + k * eps;
            let r = self.loss(reach);
            *self.slot(p) = orig;
            r
        };
        let probes = [at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?];
        if probes.iter().any(|(_, sig)| *sig != base_sig) {
            return Ok(None);
        }
        let [p2, p1, m1, m2] = probes.map(|(l, _)| l);
        Ok(Some((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps)))
    }
}

/// Compares the analytic gradient of the batch loss with central differences.
pub fn grad_check(head: &EmbeddingHead, backbone: &Backbone, stage1: &[Stage1Output], labels: &[u32], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.epsilon > 0.0) || !(cfg.backbone_epsilon > 0.0) || !(cfg.floor > 0.0) {
        return Err(ReidError::invalid("epsilon and floor must be positive"));
    }
    if stage1.len() != labels.len() {
        return Err(ReidError::invalid("one label per image required"));
    }
    let eval = evaluate_batch(head, backbone, stage1, labels, cfg.margin, cfg.mining)?;

    let mut params: Vec<ParamRef> = Vec::new();
    if matches!(cfg.selection, ParamSelection::Head | ParamSelection::All) {
        params.extend((0..head.weight.len()).map(ParamRef::HeadWeight));
        params.extend((0..head.bias.len()).map(ParamRef::HeadBias));
    }
    if backbone.stage2_trainable && matches!(cfg.selection, ParamSelection::Stage2 | ParamSelection::All) {
        params.extend((0..backbone.stage2_weight.len()).map(ParamRef::Stage2Weight));
        params.extend((0..backbone.stage2_bias.len()).map(ParamRef::Stage2Bias));
    }
    if let Some(k) = cfg.max_params {
        if k < params.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut pick = index::sample(&mut rng, params.len(), k).into_vec();
            pick.sort_unstable();
            params = pick.into_iter().map(|i| params[i]).collect();
        }
    }

    let (feats, caches): (Vec<_>, Vec<_>) = stage1.iter().map(|s| backbone.stage2_forward(s)).unzip();
    let activations = caches.iter().map(Backbone::activation_signature).collect();
    let projections = feats.iter().map(|f| head.project(f.as_slice())).collect::<Result<_>>()?;
    let mut probe = Probe { head: head.clone(), backbone: backbone.clone(), labels, cfg, feats, caches, activations, projections };
    let (_, base_sig) = probe.loss(Reach::Nothing)?;
    let mut report = GradCheckReport { checked: 0, skipped: 0, max_rel_error: 0.0, worst: None };
    for p in params {
        let analytic = match p {
            ParamRef::HeadWeight(i) => eval.head_grad.weight[i],
            ParamRef::HeadBias(i) => eval.head_grad.bias[i],
            ParamRef::Stage2Weight(i) => eval.stage2_grad.as_ref().map_or(0.0, |g| g.weight[i]),
            ParamRef::Stage2Bias(i) => eval.stage2_grad.as_ref().map_or(0.0, |g| g.bias[i]),
        };
        let eps = match p {
            ParamRef::HeadWeight(_) | ParamRef::HeadBias(_) => cfg.epsilon,
            ParamRef::Stage2Weight(_) | ParamRef::Stage2Bias(_) => cfg.backbone_epsilon,
        };
        let Some(numeric) = probe.central(p, eps, base_sig)? else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;
        let err = relative_error(analytic, numeric, cfg.floor);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((p, analytic, numeric));
        }
    }
    Ok(report)
}
