//! Synthetic mark-recapture photo data.
//!
//! A population is a set of individuals, each with a latent vector that seeds
//! a head pattern. Every capture event of an individual produces a Left and a
//! Right photograph; the Right view is the horizontal mirror of the Left view
//! before pixel noise is added. Capture pairs get consecutive `obs_id`s with
//! the Left view first.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::image::{wrap_hue, HsvImage, SV_MAX};

pub const DEFAULT_LATENT_DIM: usize = 16;
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.3;

/// Which flank of the fish faces the camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

impl Side {
    pub fn flag(self) -> u32 {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }

    pub fn from_flag(flag: u32) -> Option<Self> {
        match flag {
            0 => Some(Side::Left),
            1 => Some(Side::Right),
            _ => None,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualSpec {
    pub individual_id: u32,
    pub pattern_latent: Vec<f64>,
    /// Relative scale change per 100 days.
    pub growth_rate: f64,
    /// Latent perturbation scale per 100 days.
    pub drift_rate: f64,
}

impl IndividualSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.growth_rate >= 0.0 && self.growth_rate.is_finite()) {
            return Err(ReidError::invalid("growth_rate must be finite and >= 0"));
        }
        if !(self.drift_rate >= 0.0 && self.drift_rate.is_finite()) {
            return Err(ReidError::invalid("drift_rate must be finite and >= 0"));
        }
        if self.pattern_latent.len() < DEFAULT_LATENT_DIM {
            return Err(ReidError::invalid(format!("pattern_latent needs at least {DEFAULT_LATENT_DIM} entries")));
        }
        if self.pattern_latent.iter().any(|v| !v.is_finite()) {
            return Err(ReidError::invalid("pattern_latent must be finite"));
        }
        Ok(())
    }
}

/// One photographed capture event of one side of one individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub obs_id: u32,
    pub individual_id: u32,
    pub side: Side,
    pub capture_day: u32,
    pub image: HsvImage,
}

/// Nuisance and noise levels used while rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Standard deviation of per-pixel noise (saturation/value units, hue degrees).
    pub noise_std: f64,
    /// Maximum relative lighting gain deviation per capture.
    pub lighting_jitter: f64,
    /// Maximum fish displacement as a fraction of the half-width.
    pub shift_jitter: f64,
    /// Maximum in-plane rotation of the fish in degrees.
    pub angle_jitter: f64,
    /// Per-capture background variation; 0 gives a fixed background.
    pub background_jitter: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { noise_std: 2.0, lighting_jitter: 0.12, shift_jitter: 0.02, angle_jitter: 2.5, background_jitter: 3.0 }
    }
}

impl RenderConfig {
    /// No capture-level randomness at all.
    pub fn clean() -> Self {
        Self { noise_std: 0.0, lighting_jitter: 0.0, shift_jitter: 0.0, angle_jitter: 0.0, background_jitter: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub n_individuals: usize,
    /// Mean number of capture events per individual; each event yields a Left and a Right image.
    pub mean_obs_per_individual: f64,
    pub day_span: u32,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub max_growth_rate: f64,
    pub drift_rate_range: (f64, f64),
    pub render: RenderConfig,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl PopulationConfig {
    /// 60 individuals with about 6 captures each, 64x64 images.
    pub fn desk(seed: u64) -> Self {
        Self {
            n_individuals: 60,
            mean_obs_per_individual: 6.0,
            day_span: 1100,
            image_height: 64,
            image_width: 64,
            seed,
            latent_dim: DEFAULT_LATENT_DIM,
            max_growth_rate: 0.02,
            drift_rate_range: (0.01, 0.03),
            render: RenderConfig::default(),
        }
    }

    /// 513 individuals and about 2113 images in total, 224x224 images.
    pub fn paper_scale(seed: u64) -> Self {
        Self { n_individuals: 513, mean_obs_per_individual: 2113.0 / 513.0 / 2.0, image_height: 224, image_width: 224, ..Self::desk(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 {
            return Err(ReidError::invalid("population needs at least one individual"));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(ReidError::invalid("image size must be positive"));
        }
        if !(self.mean_obs_per_individual >= 1.0 && self.mean_obs_per_individual.is_finite()) {
            return Err(ReidError::invalid("mean_obs_per_individual must be >= 1"));
        }
        if self.latent_dim < DEFAULT_LATENT_DIM {
            return Err(ReidError::invalid(format!("latent_dim must be >= {DEFAULT_LATENT_DIM}")));
        }
        let (lo, hi) = self.drift_rate_range;
        if !(0.0 <= lo && lo <= hi) || self.max_growth_rate < 0.0 {
            return Err(ReidError::invalid("growth/drift ranges must be non-negative and ordered"));
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples one individual's identity parameters.
pub fn sample_individual(individual_id: u32, cfg: &PopulationConfig, rng: &mut impl Rng) -> IndividualSpec {
    let pattern_latent = (0..cfg.latent_dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let growth_rate = rng.random_range(0.0..=cfg.max_growth_rate);
    let (lo, hi) = cfg.drift_rate_range;
    let drift_rate = rng.random_range(lo..=hi);
    IndividualSpec { individual_id, pattern_latent, growth_rate, drift_rate }
}

/// Generates the full population; output is sorted by `obs_id`.
pub fn gen_population(cfg: &PopulationConfig) -> Result<Vec<Observation>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut next_obs = 0u32;
    for i in 0..cfg.n_individuals {
        // Per-individual streams make the output independent of generation order.
        let mut rng = stream_rng(cfg.seed, i as u64);
        let spec = sample_individual(i as u32, cfg, &mut rng);
        let extra = cfg.mean_obs_per_individual - 1.0;
        let n_captures = 1 + if extra > 0.0 { Poisson::new(extra).expect("positive rate").sample(&mut rng) as usize } else { 0 };
        let mut days: Vec<u32> = (0..n_captures).map(|_| rng.random_range(0..=cfg.day_span)).collect();
        days.sort_unstable();
        for day in days {
            let capture_seed: u64 = rng.random();
            for side in [Side::Left, Side::Right] {
                let mut capture_rng = ChaCha8Rng::seed_from_u64(capture_seed);
                let image = render_image(&spec, side, day, cfg.image_height, cfg.image_width, &cfg.render, &mut capture_rng)?;
                out.push(Observation { obs_id: next_obs, individual_id: spec.individual_id, side, capture_day: day, image });
                next_obs += 1;
            }
        }
    }
    Ok(out)
}

/// Renders one view of one capture event as an [`Observation`].
///
/// Capture conditions are drawn from `rng` first, so two calls with clones of
/// the same generator state share pose and drift. Lighting, background and
/// pixel noise are drawn per view.
pub fn render_observation(
    spec: &IndividualSpec,
    side: Side,
    capture_day: u32,
    size: (usize, usize),
    cfg: &RenderConfig,
    obs_id: u32,
    rng: &mut impl Rng,
) -> Result<Observation> {
    let image = render_image(spec, side, capture_day, size.0, size.1, cfg, rng)?;
    Ok(Observation { obs_id, individual_id: spec.individual_id, side, capture_day, image })
}

/// Uniform on `[-a, a]`; no draw when `a` is zero.
fn sym(rng: &mut impl Rng, a: f64) -> f64 {
    if a > 0.0 {
        rng.random_range(-a..=a)
    } else {
        0.0
    }
}

struct Lighting {
    gain: f64,
    bg: [f64; 3],
    bg_slope: f64,
    body_hue_shift: f64,
}

fn sample_lighting(cfg: &RenderConfig, rng: &mut impl Rng) -> Lighting {
    let gain = 1.0 + sym(rng, cfg.lighting_jitter);
    let (bg, bg_slope) = if cfg.background_jitter > 0.0 {
        let j = cfg.background_jitter;
        ([rng.random_range(0.0..360.0), (10.0 + sym(rng, 8.0 * j)).clamp(0.0, SV_MAX), (18.0 + sym(rng, 8.0 * j)).clamp(0.0, SV_MAX)], sym(rng, 6.0 * j))
    } else {
        ([200.0, 20.0, 30.0], 0.0)
    };
    let body_hue_shift = sym(rng, 32.0 * cfg.lighting_jitter);
    Lighting { gain, bg, bg_slope, body_hue_shift }
}

struct Capture {
    dx: f64,
    dy: f64,
    angle: f64,
    latent: Vec<f64>,
    noise_seed: u64,
}

fn sample_capture(spec: &IndividualSpec, day: u32, cfg: &RenderConfig, rng: &mut impl Rng) -> Capture {
    let dx = sym(rng, cfg.shift_jitter);
    let dy = sym(rng, cfg.shift_jitter);
    let angle = sym(rng, cfg.angle_jitter).to_radians();
    let hundreds = day as f64 / 100.0;
    let per_dim = 1.0 / (spec.pattern_latent.len() as f64).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let latent = spec
        .pattern_latent
        .iter()
        .map(|z| {
            let xi: f64 = normal.sample(rng);
            z + spec.drift_rate * hundreds * per_dim * xi
        })
        .collect();
    let noise_seed = rng.random();
    Capture { dx, dy, angle, latent, noise_seed }
}

#[inline]
fn unit(z: f64) -> f64 {
    0.5 * (1.0 + z.tanh())
}

/// Head pattern parameters decoded from a latent vector.
struct Pattern {
    stripe_hue: f64,
    spot_hue: f64,
    stripe_dir: (f64, f64),
    stripe_freq: f64,
    stripe_phase: f64,
    stripe_cut: f64,
    spots: Vec<(f64, f64)>,
    spot_radius: f64,
    body_hue: f64,
    body_value: f64,
    stripe_value: f64,
    spot_value: f64,
    base_scale: f64,
}

impl Pattern {
    fn decode(z: &[f64]) -> Self {
        let stripe_hue = 360.0 * unit(z[0]);
        let spot_hue = stripe_hue + 60.0 + 180.0 * unit(z[1]);
        let theta = std::f64::consts::PI * unit(z[2]);
        let n_spots = 2 + (4.0 * unit(z[6])).floor().min(3.0) as usize;
        let spots = (0..n_spots)
            .map(|j| {
                let a = unit(z[7 + j]);
                let b = unit(z[8 + (j + 2) % 5]);
                (-0.72 + 0.62 * a, -0.32 + 0.64 * ((a * 7.3 + b * 3.1).fract()))
            })
            .collect();
        Self {
            stripe_hue,
            spot_hue: wrap_hue(spot_hue),
            stripe_dir: (theta.cos(), theta.sin()),
            stripe_freq: 2.0 + 3.0 * unit(z[3]),
            stripe_phase: std::f64::consts::TAU * unit(z[4]),
            stripe_cut: 0.1 + 0.5 * unit(z[5]),
            spots,
            spot_radius: 0.05 + 0.05 * unit(z[12]),
            body_hue: 25.0 + 12.0 * z[13].tanh(),
            body_value: 60.0 + 20.0 * unit(z[13] - z[0]),
            stripe_value: 35.0 + 60.0 * unit(z[14]),
            spot_value: 35.0 + 60.0 * unit(0.7 * (z[2] - z[14])),
            base_scale: 0.95 + 0.1 * unit(z[15]),
        }
    }
}

const BODY_A: f64 = 0.82;
const BODY_B: f64 = 0.5;
const HEAD_END: f64 = 0.45;
const EYE: (f64, f64, f64) = (-0.62, -0.16, 0.07);
/// Saturation used for every head-pattern pixel; body and background stay below 60.
pub const PATTERN_SATURATION_MIN: f64 = 85.0;

fn render_image(spec: &IndividualSpec, side: Side, day: u32, height: usize, width: usize, cfg: &RenderConfig, rng: &mut impl Rng) -> Result<HsvImage> {
    spec.validate()?;
    if height == 0 || width == 0 {
        return Err(ReidError::invalid("image size must be positive"));
    }
    let cap = sample_capture(spec, day, cfg, rng);
    let salt = match side {
        Side::Left => 0x4c45_4654,
        Side::Right => 0x5249_4748,
    };
    let mut view_rng = ChaCha8Rng::seed_from_u64(cap.noise_seed ^ salt);
    let light = sample_lighting(cfg, &mut view_rng);
    let pat = Pattern::decode(&cap.latent);
    let scale = (pat.base_scale * (1.0 + spec.growth_rate * day as f64 / 100.0)).min(1.15);
    let (sin_a, cos_a) = cap.angle.sin_cos();
    let half_w = width as f64 / 2.0;
    let half_h = height as f64 / 2.0;
    let mut img = HsvImage::zeros(height, width);

    for y in 0..height {
        for x in 0..width {
            // canvas -> body frame, normalized by the half extents
            let u0 = (x as f64 + 0.5 - half_w) / half_w - cap.dx;
            let v0 = (y as f64 + 0.5 - half_h) / half_h - cap.dy;
            let u = (cos_a * u0 + sin_a * v0) / scale;
            let v = (-sin_a * u0 + cos_a * v0) / scale;
            let px = shade(&pat, &light, u, v, u0);
            img.set_pixel(y, x, px);
        }
    }

    if side == Side::Right {
        img = img.mirrored();
    }

    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("finite noise std");
        for px in img.data.chunks_exact_mut(3) {
            px[0] = wrap_hue(px[0] + normal.sample(&mut view_rng));
            px[1] = (px[1] + normal.sample(&mut view_rng)).clamp(0.0, SV_MAX);
            px[2] = (px[2] + normal.sample(&mut view_rng)).clamp(0.0, SV_MAX);
        }
    }

    for px in img.data.chunks_exact_mut(3) {
        px[0] = wrap_hue(quantize(px[0]));
        px[1] = quantize(px[1]);
        px[2] = quantize(px[2]);
    }
    Ok(img)
}

/// Rounds to one decimal so pixel text stays short and round-trips exactly.
#[inline]
fn quantize(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

fn shade(pat: &Pattern, cap: &Lighting, u: f64, v: f64, canvas_u: f64) -> [f64; 3] {
    let in_body = (u / BODY_A).powi(2) + (v / BODY_B).powi(2) <= 1.0;
    let in_tail = (0.7..=1.0).contains(&u) && v.abs() <= 0.06 + 0.55 * (u - 0.7);
    if !(in_body || in_tail) {
        let [h, s, val] = cap.bg;
        return [h, s, (val + cap.bg_slope * canvas_u).clamp(0.0, SV_MAX)];
    }
    let light = |val: f64| (val * cap.gain).clamp(0.0, SV_MAX);

    let (ex, ey, er) = EYE;
    let eye_d2 = (u - ex).powi(2) + (v - ey).powi(2);
    if eye_d2 <= er * er {
        return [0.0, 0.0, light(8.0)];
    }
    if eye_d2 <= (er * 1.6).powi(2) {
        return [wrap_hue(pat.body_hue + cap.body_hue_shift), 15.0, light(92.0)];
    }

    if in_body && u < HEAD_END {
        for &(sx, sy) in &pat.spots {
            if (u - sx).powi(2) + (v - sy).powi(2) <= pat.spot_radius * pat.spot_radius {
                return [pat.spot_hue, 95.0, light(pat.spot_value)];
            }
        }
        let phase = std::f64::consts::TAU * pat.stripe_freq * (u * pat.stripe_dir.0 + v * pat.stripe_dir.1) + pat.stripe_phase;
        if phase.sin() > pat.stripe_cut {
            return [pat.stripe_hue, 90.0, light(pat.stripe_value)];
        }
    }

    // Body: bright towards the head, darker towards the tail, oblique scale bands.
    let t = ((u + BODY_A) / (2.0 * BODY_A)).clamp(0.0, 1.0);
    let bands = 0.82 + 0.18 * (std::f64::consts::TAU * 5.0 * (0.87 * u + 0.5 * v)).cos();
    let val = pat.body_value * (1.0 - 0.4 * t) * bands;
    [wrap_hue(pat.body_hue + cap.body_hue_shift), 50.0, light(val)]
}

/// Support/query partition of a set of observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub support: Vec<Observation>,
    pub query: Vec<Observation>,
    pub split_fraction: f64,
}

/// Number of query observations for an individual with `n` observations.
pub fn query_count(n: usize, fraction: f64) -> usize {
    if n < 2 {
        return 0;
    }
    ((fraction * n as f64).round() as usize).min(n - 1)
}

/// Per-individual stratified split; both halves come back sorted by `obs_id`.
pub fn split_dataset(observations: &[Observation], fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if observations.is_empty() {
        return Err(ReidError::invalid("cannot split an empty dataset"));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(ReidError::invalid(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let mut by_id: BTreeMap<u32, Vec<&Observation>> = BTreeMap::new();
    for o in observations {
        by_id.entry(o.individual_id).or_default().push(o);
    }
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (id, mut group) in by_id {
        group.sort_by_key(|o| o.obs_id);
        let mut rng = stream_rng(seed, id as u64);
        group.shuffle(&mut rng);
        let nq = query_count(group.len(), fraction);
        query.extend(group[..nq].iter().map(|o| (*o).clone()));
        support.extend(group[nq..].iter().map(|o| (*o).clone()));
    }
    support.sort_by_key(|o| o.obs_id);
    query.sort_by_key(|o| o.obs_id);
    Ok(DatasetSplit { support, query, split_fraction: fraction })
}

/// Left/Right views of the same capture event.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturePair {
    pub left: Observation,
    pub right: Observation,
}

/// Groups observations into capture pairs (consecutive `obs_id`s, Left first).
/// Observations without a partner are dropped.
pub fn pair_observations(observations: &[Observation]) -> Vec<CapturePair> {
    let by_obs: BTreeMap<u32, &Observation> = observations.iter().map(|o| (o.obs_id, o)).collect();
    let mut pairs = Vec::new();
    for (&id, left) in &by_obs {
        if left.side != Side::Left {
            continue;
        }
        let Some(right) = id.checked_add(1).and_then(|r| by_obs.get(&r)) else {
            continue;
        };
        if right.side == Side::Right && right.individual_id == left.individual_id && right.capture_day == left.capture_day {
            pairs.push(CapturePair { left: (*left).clone(), right: (*right).clone() });
        }
    }
    pairs
}

/// Splits whole capture events so that every query pair has both views in the query half.
///
/// Returns the Left-view split and the Right-view split; they correspond pairwise.
pub fn split_pairs(observations: &[Observation], fraction: f64, seed: u64) -> Result<(DatasetSplit, DatasetSplit)> {
    let pairs = pair_observations(observations);
    if pairs.is_empty() {
        return Err(ReidError::invalid("no capture pairs in dataset"));
    }
    let lefts: Vec<Observation> = pairs.iter().map(|p| p.left.clone()).collect();
    let left_split = split_dataset(&lefts, fraction, seed)?;
    let partner: BTreeMap<u32, &Observation> = pairs.iter().map(|p| (p.left.obs_id, &p.right)).collect();
    let map = |side: &[Observation]| side.iter().map(|o| partner[&o.obs_id].clone()).collect::<Vec<_>>();
    let right_split = DatasetSplit { support: map(&left_split.support), query: map(&left_split.query), split_fraction: fraction };
    Ok((left_split, right_split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small(seed: u64) -> PopulationConfig {
        PopulationConfig { n_individuals: 6, mean_obs_per_individual: 3.0, image_height: 24, image_width: 24, ..PopulationConfig::desk(seed) }
    }

    fn spec(growth: f64, drift: f64) -> IndividualSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        IndividualSpec {
            individual_id: 3,
            pattern_latent: (0..16).map(|_| rng.sample(rand_distr::StandardNormal)).collect(),
            growth_rate: growth,
            drift_rate: drift,
        }
    }

    #[test]
    fn single_individual_single_capture() {
        let cfg = PopulationConfig { n_individuals: 1, mean_obs_per_individual: 1.0, day_span: 0, ..small(1) };
        let obs = gen_population(&cfg).unwrap();
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[0].side, Side::Left);
        assert_eq!(obs[1].side, Side::Right);
        assert!(obs.iter().all(|o| o.capture_day == 0 && o.individual_id == 0));
    }

    #[test]
    fn invalid_population_args() {
        assert!(matches!(gen_population(&PopulationConfig { n_individuals: 0, ..small(1) }), Err(ReidError::InvalidArgument(_))));
        assert!(gen_population(&PopulationConfig { image_width: 0, ..small(1) }).is_err());
        assert!(gen_population(&PopulationConfig { mean_obs_per_individual: 0.5, ..small(1) }).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small(7);
        assert_eq!(gen_population(&cfg).unwrap(), gen_population(&cfg).unwrap());
        assert_ne!(gen_population(&cfg).unwrap(), gen_population(&small(8)).unwrap());
    }

    #[test]
    fn rendered_pixels_in_range_and_days_bounded() {
        let cfg = small(3);
        for o in gen_population(&cfg).unwrap() {
            o.image.validate().unwrap();
            assert!(o.capture_day <= cfg.day_span);
            assert_eq!((o.image.h, o.image.w), (24, 24));
        }
    }

    #[test]
    fn views_share_pose_and_mirror() {
        let s = spec(0.01, 0.1);
        let cfg = RenderConfig { noise_std: 0.0, lighting_jitter: 0.0, background_jitter: 0.0, ..RenderConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let left = render_observation(&s, Side::Left, 120, (32, 40), &cfg, 0, &mut rng.clone()).unwrap();
        let right = render_observation(&s, Side::Right, 120, (32, 40), &cfg, 1, &mut rng).unwrap();
        assert_eq!(left.image.mirrored(), right.image);
    }

    #[test]
    fn generated_pairs_mirror_without_per_view_nuisance() {
        let mut cfg = small(2);
        cfg.render = RenderConfig { noise_std: 0.0, lighting_jitter: 0.0, background_jitter: 0.0, ..cfg.render };
        let obs = gen_population(&cfg).unwrap();
        let pairs = pair_observations(&obs);
        assert_eq!(pairs.len() * 2, obs.len());
        for p in pairs {
            assert_eq!(p.left.image.mirrored(), p.right.image);
        }
    }

    #[test]
    fn pure_render_without_drift_or_noise() {
        let s = spec(0.02, 0.0);
        let cfg = RenderConfig::clean();
        let a = render_observation(&s, Side::Left, 40, (32, 32), &cfg, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = render_observation(&s, Side::Left, 40, (32, 32), &cfg, 0, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
    }

    fn pattern_bbox(img: &HsvImage) -> (usize, usize) {
        let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
        for y in 0..img.h {
            for x in 0..img.w {
                if img.pixel(y, x)[1] >= PATTERN_SATURATION_MIN {
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
        }
        assert!(x0 <= x1, "no pattern pixels");
        (x1 - x0 + 1, y1 - y0 + 1)
    }

    #[test]
    fn growth_enlarges_pattern() {
        let s = spec(0.05, 0.0);
        let cfg = RenderConfig::clean();
        let early = render_observation(&s, Side::Left, 0, (64, 64), &cfg, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let late = render_observation(&s, Side::Left, 500, (64, 64), &cfg, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (w0, h0) = pattern_bbox(&early.image);
        let (w1, h1) = pattern_bbox(&late.image);
        assert!(w1 > w0 && h1 > h0, "{w0}x{h0} vs {w1}x{h1}");
    }

    #[test]
    fn split_ten_observations() {
        let obs: Vec<Observation> =
            (0..10).map(|i| Observation { obs_id: i, individual_id: 4, side: Side::Left, capture_day: i, image: HsvImage::zeros(1, 1) }).collect();
        let split = split_dataset(&obs, 0.3, 1).unwrap();
        assert_eq!(split.query.len(), 3);
        assert_eq!(split.support.len(), 7);
    }

    #[test]
    fn singleton_individual_stays_in_support() {
        let obs = vec![Observation { obs_id: 0, individual_id: 1, side: Side::Left, capture_day: 0, image: HsvImage::zeros(1, 1) }];
        let split = split_dataset(&obs, 0.3, 1).unwrap();
        assert_eq!(split.support.len(), 1);
        assert!(split.query.is_empty());
    }

    #[test]
    fn split_errors() {
        assert!(split_dataset(&[], 0.3, 0).is_err());
        let obs = gen_population(&small(1)).unwrap();
        assert!(split_dataset(&obs, 0.0, 0).is_err());
        assert!(split_dataset(&obs, 1.0, 0).is_err());
    }

    #[test]
    fn split_partitions_population() {
        let obs = gen_population(&small(4)).unwrap();
        let split = split_dataset(&obs, 0.3, 9).unwrap();
        let all: BTreeSet<u32> = obs.iter().map(|o| o.obs_id).collect();
        let s: BTreeSet<u32> = split.support.iter().map(|o| o.obs_id).collect();
        let q: BTreeSet<u32> = split.query.iter().map(|o| o.obs_id).collect();
        assert!(s.is_disjoint(&q));
        assert_eq!(&s | &q, all);
        let support_ids: BTreeSet<u32> = split.support.iter().map(|o| o.individual_id).collect();
        assert!(split.query.iter().all(|o| support_ids.contains(&o.individual_id)));
        assert_eq!(split, split_dataset(&obs, 0.3, 9).unwrap());
    }

    #[test]
    fn pair_split_keeps_correspondence() {
        let obs = gen_population(&small(5)).unwrap();
        let (l, r) = split_pairs(&obs, 0.3, 2).unwrap();
        assert_eq!(l.query.len(), r.query.len());
        for (a, b) in l.query.iter().zip(&r.query) {
            assert_eq!(a.obs_id + 1, b.obs_id);
            assert_eq!((a.side, b.side), (Side::Left, Side::Right));
        }
        assert!(l.support.iter().all(|o| o.side == Side::Left));
        assert!(r.support.iter().all(|o| o.side == Side::Right));
    }
}
