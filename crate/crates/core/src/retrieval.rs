//! Gallery storage, nearest-neighbour ranking and retrieval metrics.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::datagen::{Observation, Side};
use crate::error::{ReidError, Result};
use crate::features::{featurize, Backbone};
use crate::metricnet::{Embedding, EmbeddingHead, EMBEDDING_DIM};

pub const GALLERY_MAGIC: &[u8; 8] = b"REIDGAL1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub obs_id: u32,
    pub individual_id: u32,
    pub side: Side,
    pub capture_day: u32,
    pub embedding: Embedding,
}

/// Labelled embeddings with unique observation ids. Stored embeddings are
/// rounded to `f32` so the binary format round-trips exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gallery {
    entries: Vec<GalleryEntry>,
    ids: BTreeSet<u32>,
}

impl Gallery {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = GalleryEntry>) -> Result<Self> {
        let mut g = Self::new();
        for e in entries {
            g.push(e)?;
        }
        Ok(g)
    }

    pub fn push(&mut self, mut entry: GalleryEntry) -> Result<()> {
        if entry.embedding.dim() != EMBEDDING_DIM {
            return Err(ReidError::invalid(format!("gallery embeddings must have dim {EMBEDDING_DIM}")));
        }
        if !self.ids.insert(entry.obs_id) {
            return Err(ReidError::invalid(format!("duplicate obs_id {}", entry.obs_id)));
        }
        entry.embedding = entry.embedding.quantized();
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        EMBEDDING_DIM
    }

    pub fn contains_obs(&self, obs_id: u32) -> bool {
        self.ids.contains(&obs_id)
    }

    pub fn individuals(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.individual_id).collect()
    }

    pub fn max_individual_id(&self) -> Option<u32> {
        self.entries.iter().map(|e| e.individual_id).max()
    }

    pub fn max_obs_id(&self) -> Option<u32> {
        self.ids.last().copied()
    }

    pub fn write_bin(&self, mut w: impl Write) -> Result<()> {
        w.write_all(GALLERY_MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        w.write_all(&(EMBEDDING_DIM as u32).to_le_bytes())?;
        for e in &self.entries {
            for v in [e.obs_id, e.individual_id, e.side.flag(), e.capture_day] {
                w.write_all(&v.to_le_bytes())?;
            }
            for &x in e.embedding.as_slice() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.len() * (16 + 4 * EMBEDDING_DIM));
        self.write_bin(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_bin(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GALLERY_MAGIC {
            return Err(ReidError::format("not a gallery file (bad magic)"));
        }
        let count = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        if dim != EMBEDDING_DIM {
            return Err(ReidError::format(format!("gallery dim {dim}, expected {EMBEDDING_DIM}")));
        }
        let mut g = Self::new();
        for _ in 0..count {
            let obs_id = read_u32(&mut r)?;
            let individual_id = read_u32(&mut r)?;
            let side = Side::from_flag(read_u32(&mut r)?).ok_or_else(|| ReidError::format("bad side flag"))?;
            let capture_day = read_u32(&mut r)?;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                v.push(f32::from_le_bytes(b) as f64);
            }
            let embedding = Embedding::from_unit(v).map_err(|e| ReidError::format(format!("entry {obs_id}: {e}")))?;
            g.push(GalleryEntry { obs_id, individual_id, side, capture_day, embedding }).map_err(|e| ReidError::format(e.to_string()))?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(ReidError::format("trailing bytes after gallery entries"));
        }
        Ok(g)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Letterboxed, un-augmented embedding at gallery precision.
pub fn embed_observation(head: &EmbeddingHead, backbone: &Backbone, obs: &Observation) -> Result<Embedding> {
    Ok(head.embed(&featurize(backbone, &obs.image)?)?.quantized())
}

pub fn entry_for(head: &EmbeddingHead, backbone: &Backbone, obs: &Observation) -> Result<GalleryEntry> {
    Ok(GalleryEntry {
        obs_id: obs.obs_id,
        individual_id: obs.individual_id,
        side: obs.side,
        capture_day: obs.capture_day,
        embedding: embed_observation(head, backbone, obs)?,
    })
}

pub fn build_gallery(head: &EmbeddingHead, backbone: &Backbone, support: &[Observation]) -> Result<Gallery> {
    if support.is_empty() {
        return Err(ReidError::invalid("cannot build a gallery from an empty support set"));
    }
    Gallery::from_entries(support.iter().map(|o| entry_for(head, backbone, o)).collect::<Result<Vec<_>>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub obs_id: u32,
    pub individual_id: u32,
    pub distance: f64,
}

/// Whole gallery by ascending distance, ties by ascending obs_id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub items: Vec<RankedItem>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn top(&self) -> Option<&RankedItem> {
        self.items.first()
    }

    /// 1-based position of the first entry of `individual_id`.
    pub fn first_rank_of(&self, individual_id: u32) -> Option<usize> {
        self.items.iter().position(|i| i.individual_id == individual_id).map(|p| p + 1)
    }
}

pub(crate) fn ranking_order(a: &RankedItem, b: &RankedItem) -> std::cmp::Ordering {
    a.distance.total_cmp(&b.distance).then(a.obs_id.cmp(&b.obs_id))
}

pub fn rank(query: &Embedding, gallery: &Gallery) -> Result<RankedList> {
    if gallery.is_empty() {
        return Err(ReidError::invalid("gallery is empty"));
    }
    if query.dim() != gallery.dim() {
        return Err(ReidError::invalid(format!("query dim {} does not match gallery dim {}", query.dim(), gallery.dim())));
    }
    let mut items: Vec<RankedItem> =
        gallery.entries().iter().map(|e| RankedItem { obs_id: e.obs_id, individual_id: e.individual_id, distance: query.distance(&e.embedding) }).collect();
    items.sort_by(ranking_order);
    Ok(RankedList { items })
}

pub fn classify(query: &Embedding, gallery: &Gallery) -> Result<u32> {
    Ok(rank(query, gallery)?.items[0].individual_id)
}

/// A ranked list together with the query's true identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub obs_id: u32,
    pub true_id: u32,
    pub ranked: RankedList,
}

/// Fraction of queries whose true class is among the first `k` items.
pub fn accuracy_at_k(results: &[QueryResult], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(ReidError::invalid("k must be >= 1"));
    }
    if results.is_empty() {
        return Err(ReidError::invalid("no query results"));
    }
    let hits = results.iter().filter(|r| r.ranked.items.iter().take(k).any(|i| i.individual_id == r.true_id)).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Average precision over the top five items, normalized by `min(R, 5)` where
/// `R` counts the true class in the list. A list without the class scores 0.
pub fn average_precision_at_5(ranked: &RankedList, true_id: u32) -> f64 {
    let r = ranked.items.iter().filter(|i| i.individual_id == true_id).count();
    if r == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, item) in ranked.items.iter().take(5).enumerate() {
        if item.individual_id == true_id {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / r.min(5) as f64
}

pub fn map_at_5(results: &[QueryResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().map(|r| average_precision_at_5(&r.ranked, r.true_id)).sum::<f64>() / results.len() as f64
}

/// `(k, accuracy@k)` for every k from 1 to the longest ranked list.
pub fn accuracy_curve(results: &[QueryResult]) -> Result<Vec<(usize, f64)>> {
    if results.is_empty() {
        return Err(ReidError::invalid("no query results"));
    }
    let max_len = results.iter().map(|r| r.ranked.len()).max().unwrap_or(0);
    // first hit position per query, then a cumulative count
    let mut first_hit = vec![0usize; max_len + 1];
    for r in results {
        if let Some(p) = r.ranked.first_rank_of(r.true_id) {
            first_hit[p] += 1;
        }
    }
    let n = results.len() as f64;
    let mut acc = 0;
    Ok((1..=max_len)
        .map(|k| {
            acc += first_hit[k];
            (k, acc as f64 / n)
        })
        .collect())
}

pub fn curve_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("k,accuracy\n");
    for (k, a) in curve {
        s.push_str(&format!("{k},{a}\n"));
    }
    s
}

/// Ranks every query against the gallery.
pub fn evaluate_queries(head: &EmbeddingHead, backbone: &Backbone, queries: &[Observation], gallery: &Gallery) -> Result<Vec<QueryResult>> {
    queries
        .iter()
        .map(|q| {
            let e = embed_observation(head, backbone, q)?;
            Ok(QueryResult { obs_id: q.obs_id, true_id: q.individual_id, ranked: rank(&e, gallery)? })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub accuracy_at_1: f64,
    pub accuracy_at_5: f64,
    pub map_at_5: f64,
}

pub fn summarize(results: &[QueryResult]) -> Result<RetrievalMetrics> {
    Ok(RetrievalMetrics { accuracy_at_1: accuracy_at_k(results, 1)?, accuracy_at_5: accuracy_at_k(results, 5)?, map_at_5: map_at_5(results) })
}
