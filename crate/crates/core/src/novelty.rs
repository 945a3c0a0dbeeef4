//! Open-set detection: a query is a new individual when its nearest gallery
//! entry is farther than a calibrated threshold.

use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::metricnet::Embedding;
use crate::retrieval::{rank, Gallery, QueryResult, RankedList};

pub fn min_distance(query: &Embedding, gallery: &Gallery) -> Result<f64> {
    if gallery.is_empty() {
        return Err(ReidError::invalid("gallery is empty"));
    }
    Ok(rank(query, gallery)?.items[0].distance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Self { lo: 0.0, hi: 2.0, step: 0.005 }
    }
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(ReidError::invalid(format!("degenerate grid: lo {} > hi {}", self.lo, self.hi)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(ReidError::invalid("grid step must be positive"));
        }
        Ok(())
    }

    /// `lo + i * step` for every point not beyond `hi`.
    pub fn points(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| self.lo + i as f64 * self.step).collect())
    }
}

/// New-vs-known confusion with "new" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn tally(scored: &[(f64, bool)], threshold: f64) -> Self {
        let mut c = Self::default();
        for &(d, truly_new) in scored {
            match (is_new(d, threshold), truly_new) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub t: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub threshold: f64,
    pub f1: f64,
    pub grid: Grid,
    pub per_point: Vec<GridPoint>,
}

/// Strictly greater than the threshold means new.
pub fn is_new(min_distance: f64, threshold: f64) -> bool {
    min_distance > threshold
}

/// Grid point with the best F1 for predicting "new"; ties go to the smallest threshold.
pub fn calibrate_threshold(scored: &[(f64, bool)], grid: Grid) -> Result<ThresholdCalibration> {
    let points = grid.points()?;
    if !scored.iter().any(|s| s.1) || !scored.iter().any(|s| !s.1) {
        return Err(ReidError::invalid("calibration needs both new and known examples"));
    }
    let per_point: Vec<GridPoint> = points
        .into_iter()
        .map(|t| {
            let confusion = Confusion::tally(scored, t);
            GridPoint { t, f1: confusion.f1(), confusion }
        })
        .collect();
    let mut best = per_point[0];
    for p in &per_point[1..] {
        if p.f1 > best.f1 {
            best = *p;
        }
    }
    Ok(ThresholdCalibration { threshold: best.t, f1: best.f1, grid, per_point })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoveltyOutcome {
    pub obs_id: u32,
    pub min_distance: f64,
    pub is_new: bool,
    pub predicted_id: Option<u32>,
}

pub fn detect_ranked(obs_id: u32, ranked: &RankedList, threshold: f64) -> Result<NoveltyOutcome> {
    if !(threshold >= 0.0) {
        return Err(ReidError::invalid("threshold must be >= 0"));
    }
    let top = ranked.top().ok_or_else(|| ReidError::invalid("empty ranked list"))?;
    let new = is_new(top.distance, threshold);
    Ok(NoveltyOutcome { obs_id, min_distance: top.distance, is_new: new, predicted_id: (!new).then_some(top.individual_id) })
}

pub fn detect(obs_id: u32, query: &Embedding, gallery: &Gallery, threshold: f64) -> Result<NoveltyOutcome> {
    detect_ranked(obs_id, &rank(query, gallery)?, threshold)
}

/// A ranked query plus whether its individual is absent from the gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetQuery {
    pub result: QueryResult,
    pub truly_new: bool,
}

impl OpenSetQuery {
    pub fn scored(&self) -> (f64, bool) {
        (self.result.ranked.items[0].distance, self.truly_new)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenSetReport {
    /// Novelty decision correct and, for known queries, identity correct too.
    pub accuracy: f64,
    pub n_predicted_new: usize,
    pub n_queries: usize,
    pub confusion: Confusion,
    pub threshold: f64,
}

pub fn evaluate_open_set(queries: &[OpenSetQuery], threshold: f64) -> Result<OpenSetReport> {
    if queries.is_empty() {
        return Err(ReidError::invalid("no queries"));
    }
    let mut correct = 0;
    let mut n_new = 0;
    let mut scored = Vec::with_capacity(queries.len());
    for q in queries {
        let out = detect_ranked(q.result.obs_id, &q.result.ranked, threshold)?;
        n_new += out.is_new as usize;
        scored.push(q.scored());
        let ok = match (out.is_new, q.truly_new) {
            (true, true) => true,
            (false, false) => out.predicted_id == Some(q.result.true_id),
            _ => false,
        };
        correct += ok as usize;
    }
    Ok(OpenSetReport {
        accuracy: correct as f64 / queries.len() as f64,
        n_predicted_new: n_new,
        n_queries: queries.len(),
        confusion: Confusion::tally(&scored, threshold),
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::RankedItem;

    fn q(obs_id: u32, true_id: u32, top: (u32, f64), truly_new: bool) -> OpenSetQuery {
        let ranked = RankedList {
            items: vec![RankedItem { obs_id: 100, individual_id: top.0, distance: top.1 }, RankedItem { obs_id: 101, individual_id: 99, distance: 1.9 }],
        };
        OpenSetQuery { result: QueryResult { obs_id, true_id, ranked }, truly_new }
    }

    #[test]
    fn table_distances_at_reference_threshold() {
        let t = 0.820;
        assert!(!is_new(0.65, t));
        assert!(is_new(1.27, t));
        assert!(!is_new(0.61, t));
        assert!(is_new(1.46, t));
        assert!(!is_new(0.820, t));
    }

    #[test]
    fn grid_points_are_exact_multiples() {
        let p = Grid::default().points().unwrap();
        assert_eq!(p.len(), 401);
        assert_eq!(p[0], 0.0);
        assert_eq!(*p.last().unwrap(), 2.0);
        assert_eq!(p[164], 164.0 * 0.005);
        assert_eq!(Grid { lo: 1.0, hi: 1.0, step: 0.1 }.points().unwrap(), vec![1.0]);
        assert!(Grid { lo: 1.0, hi: 0.5, step: 0.1 }.points().is_err());
        assert!(Grid { lo: 0.0, hi: 1.0, step: 0.0 }.points().is_err());
    }

    #[test]
    fn separable_scores_calibrate_to_f1_one() {
        let scored = [(0.1, false), (0.3, false), (0.45, false), (0.7, true), (1.2, true)];
        let c = calibrate_threshold(&scored, Grid::default()).unwrap();
        assert_eq!(c.f1, 1.0);
        // smallest threshold that separates is the first grid point >= 0.45
        assert_eq!(c.threshold, 90.0 * 0.005);
        assert_eq!(c.per_point.len(), 401);
    }

    #[test]
    fn calibration_requires_both_classes() {
        assert!(calibrate_threshold(&[(0.1, false)], Grid::default()).is_err());
        assert!(calibrate_threshold(&[(0.1, true)], Grid::default()).is_err());
    }

    #[test]
    fn detect_boundaries() {
        let r = q(0, 1, (1, 0.5), false).result.ranked;
        assert!(!detect_ranked(0, &r, f64::INFINITY).unwrap().is_new);
        let zero = detect_ranked(0, &r, 0.0).unwrap();
        assert!(zero.is_new && zero.predicted_id.is_none());
        let known = detect_ranked(0, &r, 0.5).unwrap();
        assert_eq!(known.predicted_id, Some(1));
        assert!(detect_ranked(0, &r, -1.0).is_err());
    }

    #[test]
    fn six_query_hand_tally() {
        let t = 0.8;
        let qs = vec![
            q(0, 1, (1, 0.3), false), // known, correct id
            q(1, 2, (5, 0.4), false), // known, wrong id
            q(2, 3, (3, 0.9), false), // known, flagged new
            q(3, 7, (1, 1.1), true),  // new, flagged new
            q(4, 8, (2, 0.5), true),  // new, missed
            q(5, 9, (4, 1.3), true),  // new, flagged new
        ];
        let rep = evaluate_open_set(&qs, t).unwrap();
        assert_eq!(rep.confusion, Confusion { tp: 2, fp: 1, fn_: 1, tn: 2 });
        assert_eq!(rep.n_predicted_new, 3);
        assert!((rep.accuracy - 3.0 / 6.0).abs() < 1e-15);
        let json = serde_json::to_value(rep.confusion).unwrap();
        assert_eq!(json["fn"], 1);
    }

    #[test]
    fn all_known_and_correct_is_perfect() {
        let qs: Vec<_> = (0..4).map(|i| q(i, i, (i, 0.2), false)).collect();
        let rep = evaluate_open_set(&qs, 1.0).unwrap();
        assert_eq!(rep.accuracy, 1.0);
        assert_eq!(rep.n_predicted_new, 0);
    }
}
