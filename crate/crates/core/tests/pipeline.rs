//! Small end-to-end runs through generation, training, retrieval and novelty.

use reid_core::datagen::{gen_population, Observation, PopulationConfig, Side};
use reid_core::features::{AugmentParams, Backbone, BackboneConfig};
use reid_core::io::{load_gallery, load_observations, save_gallery, save_observations, Checkpoint};
use reid_core::metricnet::{TrainConfig, UNIT_NORM_TOL};
use reid_core::novelty::{calibrate_threshold, evaluate_open_set, Grid};
use reid_core::pipeline::{open_set_split, rank_open_set, run_ensemble, run_side, side_split, Experiment};
use reid_core::retrieval::{build_gallery, embed_observation, summarize};

fn population(seed: u64) -> Vec<Observation> {
    let cfg = PopulationConfig { n_individuals: 16, mean_obs_per_individual: 5.0, image_height: 24, image_width: 24, ..PopulationConfig::desk(seed) };
    gen_population(&cfg).unwrap()
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig { input_size: 24, stage1_pool: 3, feature_dim: 48, ..BackboneConfig::default() }
}

fn short(seed: u64) -> TrainConfig {
    TrainConfig { stage1_epochs: 8, stage2_epochs: 4, seed, ..TrainConfig::default() }
}

#[test]
fn side_run_is_deterministic_and_normalized() {
    let obs = population(1);
    let split = side_split(&obs, Side::Left, 0.3, 1).unwrap();
    let bb = Backbone::new(small_backbone()).unwrap();
    let a = run_side(&split, &bb, &short(1), &AugmentParams::default()).unwrap();
    let b = run_side(&split, &bb, &short(1), &AugmentParams::default()).unwrap();
    assert_eq!(a.gallery.to_bytes(), b.gallery.to_bytes());
    assert_eq!(a.outcome.log, b.outcome.log);
    let ca = Checkpoint { head: a.outcome.head.clone(), backbone: a.outcome.backbone.clone(), direction: None };
    let cb = Checkpoint { head: b.outcome.head, backbone: b.outcome.backbone, direction: None };
    assert_eq!(ca.to_bytes(), cb.to_bytes());
    assert_eq!(a.outcome.log.len(), 12);
    for o in &obs {
        let e = embed_observation(&ca.head, &ca.backbone, o).unwrap();
        assert!((e.norm() - 1.0).abs() <= UNIT_NORM_TOL);
    }
    let m = summarize(&a.trained).unwrap();
    assert!(m.accuracy_at_1 > 0.0 && m.accuracy_at_1 <= 1.0);
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let obs = population(2);
    let path = dir.path().join("obs.jsonl");
    save_observations(&path, &obs).unwrap();
    assert_eq!(load_observations(&path).unwrap(), obs);

    let bb = Backbone::new(small_backbone()).unwrap();
    let head = reid_core::metricnet::EmbeddingHead::random(48, 0.05, 3).unwrap();
    let ckpt = Checkpoint { head, backbone: bb, direction: None };
    let cpath = dir.path().join("model.ckpt");
    ckpt.save(&cpath).unwrap();
    let back = Checkpoint::load(&cpath).unwrap();
    assert_eq!(back.to_bytes(), ckpt.to_bytes());

    let g = build_gallery(&back.head, &back.backbone, &obs).unwrap();
    let gpath = dir.path().join("gallery.bin");
    save_gallery(&gpath, &g).unwrap();
    assert_eq!(load_gallery(&gpath).unwrap().to_bytes(), g.to_bytes());
}

#[test]
fn ensemble_pairs_every_query() {
    let obs = population(3);
    let exp = Experiment { backbone: small_backbone(), train: short(3), split_seed: 3, ..Experiment::default() };
    let run = run_ensemble(&obs, &exp).unwrap();
    assert_eq!(run.report.n_pairs, run.left.trained.len());
    assert_eq!(run.left.trained.len(), run.right.trained.len());
    for (l, r) in run.left.trained.iter().zip(&run.right.trained) {
        assert_eq!(l.true_id, r.true_id);
    }
}

#[test]
fn open_set_threshold_is_calibrated_on_held_out_individuals() {
    let obs = population(4);
    let split = side_split(&obs, Side::Left, 0.3, 4).unwrap();
    let open = open_set_split(&split, 0.25, 4).unwrap();
    assert!(open.support.iter().all(|o| !open.held_out.contains(&o.individual_id)));
    let bb = Backbone::new(small_backbone()).unwrap();
    let head = reid_core::metricnet::EmbeddingHead::random(48, 0.05, 4).unwrap();
    let gallery = build_gallery(&head, &bb, &open.support).unwrap();
    let ranked = rank_open_set(&head, &bb, &open.queries, &gallery).unwrap();
    let scored: Vec<(f64, bool)> = ranked.iter().map(|q| q.scored()).collect();
    assert!(scored.iter().any(|s| s.1) && scored.iter().any(|s| !s.1));
    let cal = calibrate_threshold(&scored, Grid::default()).unwrap();
    let report = evaluate_open_set(&ranked, cal.threshold).unwrap();
    assert_eq!(report.n_queries, ranked.len());
    assert_eq!(report.confusion.tp + report.confusion.fp, report.n_predicted_new);
    assert!((0.0..=1.0).contains(&report.accuracy));
}
