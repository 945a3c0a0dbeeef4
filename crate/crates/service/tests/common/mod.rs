#![allow(dead_code)]

use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{Request, Response};
use axum::Router;
use http_body_util::BodyExt;
use reid_core::datagen::{gen_population, Observation, PopulationConfig};
use reid_core::features::{Backbone, BackboneConfig};
use reid_core::image::HsvImage;
use reid_core::io::Checkpoint;
use reid_core::metricnet::EmbeddingHead;
use reid_core::retrieval::{build_gallery, Gallery};
use serde_json::Value;
use tower::ServiceExt;

pub const SIZE: usize = 16;

pub struct Fixture {
    pub model: Checkpoint,
    pub gallery_obs: Vec<Observation>,
    pub unseen: Vec<Observation>,
    pub base: Gallery,
    pub images: BTreeMap<u32, HsvImage>,
}

pub fn fixture() -> Fixture {
    let backbone = Backbone::new(BackboneConfig { input_size: SIZE, stage1_pool: 2, stage2_stride: 2, feature_dim: 24, ..Default::default() }).unwrap();
    let head = EmbeddingHead::random(24, 0.1, 11).unwrap();
    let cfg = PopulationConfig { n_individuals: 6, mean_obs_per_individual: 3.0, image_height: SIZE, image_width: SIZE, ..PopulationConfig::desk(3) };
    let obs = gen_population(&cfg).unwrap();
    let (gallery_obs, unseen): (Vec<_>, Vec<_>) = obs.into_iter().partition(|o| o.individual_id < 4);
    let base = build_gallery(&head, &backbone, &gallery_obs).unwrap();
    let images = gallery_obs.iter().map(|o| (o.obs_id, o.image.clone())).collect();
    Fixture { model: Checkpoint { head, backbone, direction: None }, gallery_obs, unseen, base, images }
}

pub async fn send(app: &Router, req: Request<Body>) -> Response<Body> {
    app.clone().oneshot(req).await.unwrap()
}

pub async fn body_bytes(resp: Response<Body>) -> Vec<u8> {
    resp.into_body().collect().await.unwrap().to_bytes().to_vec()
}

pub fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

pub fn post_json(uri: &str, body: &Value) -> Request<Body> {
    post_raw(uri, body.to_string())
}

pub fn post_raw(uri: &str, body: impl Into<String>) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(Body::from(body.into())).unwrap()
}

/// Status, gallery-version header and parsed JSON body.
pub async fn call(app: &Router, req: Request<Body>) -> (u16, u64, Value) {
    let resp = send(app, req).await;
    let status = resp.status().as_u16();
    let version = resp.headers()["x-gallery-version"].to_str().unwrap().parse().unwrap();
    let bytes = body_bytes(resp).await;
    (status, version, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

pub fn ingest_body(image: &HsvImage) -> Value {
    serde_json::json!({ "image": image, "capture_day": 9, "side": "L" })
}
