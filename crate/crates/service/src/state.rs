//! Review state as a fold of journal events over the base gallery.

use std::collections::BTreeMap;

use reid_core::datagen::Side;
use reid_core::image::HsvImage;
use reid_core::metricnet::Embedding;
use reid_core::novelty::is_new;
use reid_core::retrieval::{rank, Gallery, GalleryEntry};
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Confirmed,
    RejectedAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// 1-based position in the ranked list.
    pub rank: usize,
    pub obs_id: u32,
    pub individual_id: u32,
    /// Rounded to 6 decimals, the precision served to clients.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Novelty {
    pub is_new: bool,
    /// `None` when the gallery was empty.
    pub min_distance: Option<f64>,
    pub threshold: f64,
}

/// A reviewer's decision on a pending task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Decision {
    Confirm { individual_id: u32 },
    NewIndividual,
    RejectAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub decision: Decision,
    /// Identity the query was filed under, if any.
    pub individual_id: Option<u32>,
    pub actor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: u64,
    pub obs_id: u32,
    pub side: Side,
    pub capture_day: u32,
    pub candidates: Vec<Candidate>,
    pub novelty: Novelty,
    pub status: TaskStatus,
    pub resolution: Option<Resolution>,
    /// Gallery version the candidates were ranked against.
    pub ranked_at_version: u64,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    TaskCreated { task: Task, image: HsvImage },
    IdentityConfirmed { task_id: u64, entry: GalleryEntry },
    IndividualCreated { task_id: u64, entry: GalleryEntry },
    AllRejected { task_id: u64 },
}

/// One line of the journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub actor: String,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub tasks: usize,
    pub pending: usize,
    pub confirmations: usize,
    pub new_individuals: usize,
    pub rejections: usize,
    pub gallery_size: usize,
    pub gallery_version: u64,
}

pub fn round6(d: f64) -> f64 {
    format!("{d:.6}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceState {
    pub gallery: Gallery,
    pub tasks: Vec<Task>,
    /// Images of known observations, for thumbnails.
    pub images: BTreeMap<u32, HsvImage>,
    /// Number of gallery mutations since the base gallery.
    pub gallery_version: u64,
    /// Sequence number of the last applied record, 0 before any.
    pub last_seq: u64,
    confirmations: usize,
    new_individuals: usize,
    rejections: usize,
}

impl ServiceState {
    pub fn new(gallery: Gallery, images: BTreeMap<u32, HsvImage>) -> Self {
        Self { gallery, tasks: Vec::new(), images, gallery_version: 0, last_seq: 0, confirmations: 0, new_individuals: 0, rejections: 0 }
    }

    /// Rebuilds the state from the base gallery and every record in order.
    pub fn replay(base: Gallery, images: BTreeMap<u32, HsvImage>, records: &[JournalRecord]) -> Result<Self, ServiceError> {
        let mut s = Self::new(base, images);
        for r in records {
            s.apply(r)?;
        }
        Ok(s)
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            tasks: self.tasks.len(),
            pending: self.tasks.iter().filter(|t| t.status == TaskStatus::Pending).count(),
            confirmations: self.confirmations,
            new_individuals: self.new_individuals,
            rejections: self.rejections,
            gallery_size: self.gallery.len(),
            gallery_version: self.gallery_version,
        }
    }

    pub fn task(&self, task_id: u64) -> Option<&Task> {
        usize::try_from(task_id).ok().and_then(|i| self.tasks.get(i))
    }

    /// One past the largest obs_id in the gallery or among the tasks.
    pub fn next_obs_id(&self) -> u32 {
        let g = self.gallery.max_obs_id();
        let t = self.tasks.iter().map(|t| t.obs_id).max();
        g.max(t).map_or(0, |m| m + 1)
    }

    /// `max(existing ids) + 1`, or 0 for an empty gallery.
    pub fn next_individual_id(&self) -> u32 {
        self.gallery.max_individual_id().map_or(0, |m| m + 1)
    }

    /// Ranks a query against the current gallery and packages it as a new task.
    pub fn build_task(&self, obs_id: u32, side: Side, capture_day: u32, embedding: Embedding, top_k: usize, threshold: f64) -> Result<Task, ServiceError> {
        let embedding = embedding.quantized();
        let (candidates, min_distance) = if self.gallery.is_empty() {
            (Vec::new(), None)
        } else {
            let ranked = rank(&embedding, &self.gallery)?;
            let candidates: Vec<Candidate> = ranked
                .items
                .iter()
                .take(top_k)
                .enumerate()
                .map(|(i, it)| Candidate { rank: i + 1, obs_id: it.obs_id, individual_id: it.individual_id, distance: round6(it.distance) })
                .collect();
            (candidates, Some(round6(ranked.items[0].distance)))
        };
        // decided on the served value so clients reproduce it exactly
        let novelty = Novelty { is_new: min_distance.is_none_or(|d| is_new(d, threshold)), min_distance, threshold };
        Ok(Task {
            task_id: self.tasks.len() as u64,
            obs_id,
            side,
            capture_day,
            candidates,
            novelty,
            status: TaskStatus::Pending,
            resolution: None,
            ranked_at_version: self.gallery_version,
            embedding,
        })
    }

    /// Validates a decision and returns the event that records it.
    pub fn plan_decision(&self, task_id: u64, decision: &Decision) -> Result<Event, ServiceError> {
        let task = self.task(task_id).ok_or(ServiceError::TaskNotFound(task_id))?;
        if task.status != TaskStatus::Pending {
            return Err(ServiceError::AlreadyDecided(task_id));
        }
        let entry = |individual_id| GalleryEntry {
            obs_id: task.obs_id,
            individual_id,
            side: task.side,
            capture_day: task.capture_day,
            embedding: task.embedding.clone(),
        };
        Ok(match decision {
            Decision::Confirm { individual_id } => {
                if !self.gallery.individuals().contains(individual_id) {
                    return Err(ServiceError::UnknownIndividual(*individual_id));
                }
                Event::IdentityConfirmed { task_id, entry: entry(*individual_id) }
            }
            Decision::NewIndividual => Event::IndividualCreated { task_id, entry: entry(self.next_individual_id()) },
            Decision::RejectAll => Event::AllRejected { task_id },
        })
    }

    pub fn apply(&mut self, record: &JournalRecord) -> Result<(), ServiceError> {
        self.apply_with(record, true)
    }

    /// Applies one record; with `touch_gallery` false the gallery itself is left
    /// alone (it comes from a snapshot) but versions and counters still advance.
    pub(crate) fn apply_with(&mut self, record: &JournalRecord, touch_gallery: bool) -> Result<(), ServiceError> {
        if record.seq != self.last_seq + 1 {
            return Err(ServiceError::Journal(format!("expected seq {}, found {}", self.last_seq + 1, record.seq)));
        }
        match &record.event {
            Event::TaskCreated { task, image } => {
                if task.task_id != self.tasks.len() as u64 {
                    return Err(ServiceError::Journal(format!("task {} created out of order", task.task_id)));
                }
                self.images.insert(task.obs_id, image.clone());
                self.tasks.push(task.clone());
            }
            Event::IdentityConfirmed { task_id, entry } | Event::IndividualCreated { task_id, entry } => {
                let created = matches!(record.event, Event::IndividualCreated { .. });
                self.resolve(*task_id, &record.actor, entry.individual_id, created)?;
                if touch_gallery {
                    self.gallery.push(entry.clone())?;
                }
                self.gallery_version += 1;
                if created {
                    self.new_individuals += 1;
                } else {
                    self.confirmations += 1;
                }
            }
            Event::AllRejected { task_id } => {
                let task = self.pending_mut(*task_id)?;
                task.status = TaskStatus::RejectedAll;
                task.resolution = Some(Resolution { decision: Decision::RejectAll, individual_id: None, actor: record.actor.clone() });
                self.rejections += 1;
            }
        }
        self.last_seq = record.seq;
        Ok(())
    }

    fn pending_mut(&mut self, task_id: u64) -> Result<&mut Task, ServiceError> {
        let task = usize::try_from(task_id)
            .ok()
            .and_then(|i| self.tasks.get_mut(i))
            .ok_or_else(|| ServiceError::Journal(format!("decision for unknown task {task_id}")))?;
        if task.status != TaskStatus::Pending {
            return Err(ServiceError::Journal(format!("task {task_id} decided twice")));
        }
        Ok(task)
    }

    fn resolve(&mut self, task_id: u64, actor: &str, individual_id: u32, created: bool) -> Result<(), ServiceError> {
        let task = self.pending_mut(task_id)?;
        task.status = TaskStatus::Confirmed;
        let decision = if created { Decision::NewIndividual } else { Decision::Confirm { individual_id } };
        task.resolution = Some(Resolution { decision, individual_id: Some(individual_id), actor: actor.to_string() });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(i: usize) -> Embedding {
        let mut v = vec![0.0; 128];
        v[i] = 1.0;
        Embedding::from_unit(v).unwrap()
    }

    fn base() -> Gallery {
        Gallery::from_entries((0..3).map(|i| GalleryEntry {
            obs_id: i as u32 * 10,
            individual_id: i as u32 + 1,
            side: Side::Left,
            capture_day: 0,
            embedding: unit(i),
        }))
        .unwrap()
    }

    fn record(seq: u64, event: Event) -> JournalRecord {
        JournalRecord { seq, timestamp_ms: 0, actor: "t".into(), event }
    }

    #[test]
    fn round6_keeps_six_decimals() {
        assert_eq!(round6(0.1234564), 0.123456);
        assert_eq!(round6(0.1234566), 0.123457);
        assert_eq!(format!("{:.6}", round6(1.0 / 3.0)), "0.333333");
    }

    #[test]
    fn task_candidates_sorted_and_truncated() {
        let s = ServiceState::new(base(), BTreeMap::new());
        let t = s.build_task(31, Side::Left, 4, unit(1), 2, 0.82).unwrap();
        assert_eq!(t.candidates.len(), 2);
        assert_eq!((t.candidates[0].individual_id, t.candidates[0].distance), (2, 0.0));
        assert_eq!(t.candidates[1].distance, round6(2f64.sqrt()));
        assert!(!t.novelty.is_new);
        let empty = ServiceState::new(Gallery::new(), BTreeMap::new());
        let t = empty.build_task(0, Side::Right, 0, unit(0), 5, 0.82).unwrap();
        assert!(t.candidates.is_empty() && t.novelty.is_new && t.novelty.min_distance.is_none());
    }

    #[test]
    fn id_allocation() {
        let s = ServiceState::new(base(), BTreeMap::new());
        assert_eq!(s.next_obs_id(), 21);
        assert_eq!(s.next_individual_id(), 4);
        let e = ServiceState::new(Gallery::new(), BTreeMap::new());
        assert_eq!((e.next_obs_id(), e.next_individual_id()), (0, 0));
    }

    #[test]
    fn decisions_and_conflicts() {
        let mut s = ServiceState::new(base(), BTreeMap::new());
        let task = s.build_task(s.next_obs_id(), Side::Left, 0, unit(2), 5, 0.82).unwrap();
        s.apply(&record(1, Event::TaskCreated { task, image: HsvImage::zeros(1, 1) })).unwrap();
        assert!(matches!(s.plan_decision(0, &Decision::Confirm { individual_id: 99 }), Err(ServiceError::UnknownIndividual(99))));
        assert!(matches!(s.plan_decision(5, &Decision::RejectAll), Err(ServiceError::TaskNotFound(5))));
        let ev = s.plan_decision(0, &Decision::NewIndividual).unwrap();
        s.apply(&record(2, ev)).unwrap();
        assert_eq!(s.gallery.max_individual_id(), Some(4));
        assert_eq!(s.gallery_version, 1);
        assert!(matches!(s.plan_decision(0, &Decision::RejectAll), Err(ServiceError::AlreadyDecided(0))));
        let m = s.metrics();
        assert_eq!((m.tasks, m.pending, m.new_individuals, m.gallery_size), (1, 0, 1, 4));
    }

    #[test]
    fn out_of_order_records_rejected() {
        let mut s = ServiceState::new(base(), BTreeMap::new());
        assert!(s.apply(&record(2, Event::AllRejected { task_id: 0 })).is_err());
        assert!(s.apply(&record(1, Event::AllRejected { task_id: 0 })).is_err());
    }

    #[test]
    fn record_json_is_flat() {
        let r = record(3, Event::AllRejected { task_id: 7 });
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["event"], "all_rejected");
        assert_eq!(v["task_id"], 7);
        let back: JournalRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }
}
