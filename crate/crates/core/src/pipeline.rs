//! End-to-end drivers shared by the command line and the acceptance checks.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{split_dataset, split_pairs, DatasetSplit, Observation, Side};
use crate::ensemble::{evaluate_ensemble, EnsembleReport, FusionMode};
use crate::error::{ReidError, Result};
use crate::features::{AugmentParams, Backbone, BackboneConfig};
use crate::metricnet::{train_staged, EmbeddingHead, TrainConfig, TrainOutcome};
use crate::novelty::OpenSetQuery;
use crate::retrieval::{build_gallery, evaluate_queries, Gallery, QueryResult};

/// Everything besides the data that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub augment: AugmentParams,
    pub split_fraction: f64,
    /// Seed of the support/query split.
    pub split_seed: u64,
    pub fusion: FusionMode,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentParams::default(),
            split_fraction: crate::datagen::DEFAULT_SPLIT_FRACTION,
            split_seed: 0,
            fusion: FusionMode::Distance,
        }
    }
}

/// Training seed of the per-side model; the left model uses the master seed itself.
pub fn side_seed(master: u64, side: Side) -> u64 {
    match side {
        Side::Left => master,
        Side::Right => master ^ 0x9e37_79b9_7f4a_7c15,
    }
}

/// The head a run starts from, i.e. the untrained baseline.
pub fn initial_head(backbone: &Backbone, train: &TrainConfig) -> Result<EmbeddingHead> {
    EmbeddingHead::random(backbone.feature_dim(), train.init_std, train.seed)
}

/// All observations of one side, split into support and query.
pub fn side_split(observations: &[Observation], side: Side, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    let view: Vec<Observation> = observations.iter().filter(|o| o.side == side).cloned().collect();
    split_dataset(&view, fraction, seed)
}

#[derive(Debug, Clone)]
pub struct SideRun {
    pub outcome: TrainOutcome,
    pub gallery: Gallery,
    pub untrained: Vec<QueryResult>,
    pub trained: Vec<QueryResult>,
}

/// Trains on the support set and ranks the queries before and after training.
pub fn run_side(split: &DatasetSplit, backbone: &Backbone, train: &TrainConfig, augment: &AugmentParams) -> Result<SideRun> {
    let head0 = initial_head(backbone, train)?;
    let gallery0 = build_gallery(&head0, backbone, &split.support)?;
    let untrained = evaluate_queries(&head0, backbone, &split.query, &gallery0)?;
    let outcome = train_staged(split, backbone.clone(), train, augment)?;
    let gallery = build_gallery(&outcome.head, &outcome.backbone, &split.support)?;
    let trained = evaluate_queries(&outcome.head, &outcome.backbone, &split.query, &gallery)?;
    Ok(SideRun { outcome, gallery, untrained, trained })
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub left: SideRun,
    pub right: SideRun,
    pub report: EnsembleReport,
}

/// Trains one model per side on whole-capture splits and fuses the paired queries.
pub fn run_ensemble(observations: &[Observation], exp: &Experiment) -> Result<EnsembleRun> {
    let (ls, rs) = split_pairs(observations, exp.split_fraction, exp.split_seed)?;
    let backbone = Backbone::new(exp.backbone)?;
    let run = |split: &DatasetSplit, side: Side| {
        let train = TrainConfig { seed: side_seed(exp.train.seed, side), ..exp.train.clone() };
        run_side(split, &backbone, &train, &exp.augment)
    };
    let left = run(&ls, Side::Left)?;
    let right = run(&rs, Side::Right)?;
    let report = evaluate_ensemble(&left.trained, &right.trained, exp.fusion)?;
    Ok(EnsembleRun { left, right, report })
}

/// Support set with some individuals removed, and queries labelled by whether
/// their individual is absent from it.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetSplit {
    pub support: Vec<Observation>,
    pub queries: Vec<(Observation, bool)>,
    pub held_out: BTreeSet<u32>,
}

/// Holds out `round(new_fraction * n)` of the `n` query individuals. Their
/// support observations move to the query side as first sightings.
pub fn open_set_split(split: &DatasetSplit, new_fraction: f64, seed: u64) -> Result<OpenSetSplit> {
    if !(0.0..1.0).contains(&new_fraction) {
        return Err(ReidError::invalid(format!("new fraction must be in [0, 1), got {new_fraction}")));
    }
    let mut ids: Vec<u32> = split.query.iter().map(|o| o.individual_id).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    ids.shuffle(&mut rng);
    let n_new = (new_fraction * ids.len() as f64).round() as usize;
    let held_out: BTreeSet<u32> = ids[..n_new].iter().copied().collect();
    let (moved, support): (Vec<Observation>, Vec<Observation>) = split.support.iter().cloned().partition(|o| held_out.contains(&o.individual_id));
    if support.is_empty() {
        return Err(ReidError::invalid("holding out these individuals empties the support set"));
    }
    let mut queries: Vec<(Observation, bool)> = split.query.iter().chain(&moved).map(|o| (o.clone(), held_out.contains(&o.individual_id))).collect();
    queries.sort_by_key(|(o, _)| o.obs_id);
    Ok(OpenSetSplit { support, queries, held_out })
}

/// Items tagged with whether they are truly new.
pub type Labelled<T> = Vec<(T, bool)>;

/// Stratified split of open-set queries into calibration and validation halves.
pub fn calibration_split<T: Clone>(queries: &[(T, bool)], calib_fraction: f64, seed: u64) -> Result<(Labelled<T>, Labelled<T>)> {
    if !(calib_fraction > 0.0 && calib_fraction < 1.0) {
        return Err(ReidError::invalid(format!("calibration fraction must be in (0, 1), got {calib_fraction}")));
    }
    let mut by_class: BTreeMap<bool, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        by_class.entry(q.1).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut calib = Vec::new();
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n = (calib_fraction * idx.len() as f64).round() as usize;
        calib.extend_from_slice(&idx[..n]);
    }
    let calib_set: BTreeSet<usize> = calib.into_iter().collect();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, q) in queries.iter().enumerate() {
        if calib_set.contains(&i) {
            a.push(q.clone());
        } else {
            b.push(q.clone());
        }
    }
    Ok((a, b))
}

/// Ranks each open-set query against the gallery.
pub fn rank_open_set(head: &EmbeddingHead, backbone: &Backbone, queries: &[(Observation, bool)], gallery: &Gallery) -> Result<Vec<OpenSetQuery>> {
    let obs: Vec<Observation> = queries.iter().map(|(o, _)| o.clone()).collect();
    let results = evaluate_queries(head, backbone, &obs, gallery)?;
    Ok(results.into_iter().zip(queries).map(|(result, (_, truly_new))| OpenSetQuery { result, truly_new: *truly_new }).collect())
}
