//! On-disk formats: JSON-lines datasets, model checkpoints and CSV logs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::datagen::Observation;
use crate::ensemble::DirectionClassifier;
use crate::error::{ReidError, Result};
use crate::features::{Backbone, BackboneConfig, FeatureVector};
use crate::metricnet::{EmbeddingHead, EpochLog, EMBEDDING_DIM};
use crate::retrieval::Gallery;

pub const HEAD_MAGIC: &[u8] = b"REIDHEAD1";
pub const BACKBONE_MAGIC: &[u8] = b"REIDBB2";
pub const DIRECTION_MAGIC: &[u8] = b"REIDDIR1";

pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ReidError::format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn save_observations(path: &Path, obs: &[Observation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, obs)?;
    w.flush()?;
    Ok(())
}

/// Reads and validates observations; ids must be unique and images well formed.
pub fn load_observations(path: &Path) -> Result<Vec<Observation>> {
    let obs: Vec<Observation> = read_jsonl(BufReader::new(File::open(path)?))?;
    let mut seen = std::collections::BTreeSet::new();
    for o in &obs {
        o.image.validate().map_err(|e| ReidError::format(format!("observation {}: {e}", o.obs_id)))?;
        if !seen.insert(o.obs_id) {
            return Err(ReidError::format(format!("duplicate obs_id {}", o.obs_id)));
        }
    }
    Ok(obs)
}

/// One line of `features.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub obs_id: u32,
    pub f: Vec<f64>,
}

impl FeatureRecord {
    pub fn new(obs_id: u32, features: &FeatureVector) -> Self {
        Self { obs_id, f: features.as_slice().to_vec() }
    }
}

pub fn save_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

/// Trained model: head, backbone and optionally the direction classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: EmbeddingHead,
    pub backbone: Backbone,
    pub direction: Option<DirectionClassifier>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| ReidError::format("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8]) -> Result<()> {
        if self.take(m.len())? != m {
            return Err(ReidError::format(format!("expected section {}", String::from_utf8_lossy(m))));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| ReidError::format("size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(HEAD_MAGIC);
        put_u32(&mut b, self.head.feature_dim);
        put_u32(&mut b, EMBEDDING_DIM);
        put_f64s(&mut b, &self.head.weight);
        put_f64s(&mut b, &self.head.bias);

        let c = &self.backbone.config;
        b.extend_from_slice(BACKBONE_MAGIC);
        for v in [c.input_size, c.stage1_channels, c.stage1_pool, c.feature_dim, c.stage2_stride] {
            put_u32(&mut b, v);
        }
        b.extend_from_slice(&c.seed.to_le_bytes());
        put_f64s(&mut b, &self.backbone.stage2_weight);
        put_f64s(&mut b, &self.backbone.stage2_bias);

        if let Some(d) = &self.direction {
            b.extend_from_slice(DIRECTION_MAGIC);
            put_u32(&mut b, d.weight.len());
            put_f64s(&mut b, &d.weight);
            put_f64s(&mut b, &[d.bias]);
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        c.magic(HEAD_MAGIC)?;
        let f = c.u32()?;
        let d = c.u32()?;
        if d != EMBEDDING_DIM {
            return Err(ReidError::format(format!("head output dim {d}, expected {EMBEDDING_DIM}")));
        }
        let weight = c.f64s(f * d)?;
        let bias = c.f64s(d)?;
        let head = EmbeddingHead::from_parts(f, weight, bias).map_err(|e| ReidError::format(e.to_string()))?;

        c.magic(BACKBONE_MAGIC)?;
        let config = BackboneConfig {
            input_size: c.u32()?,
            stage1_channels: c.u32()?,
            stage1_pool: c.u32()?,
            feature_dim: c.u32()?,
            stage2_stride: c.u32()?,
            seed: c.u64()?,
        };
        if config.feature_dim != f {
            return Err(ReidError::format("backbone feature_dim does not match head input"));
        }
        let mut backbone = Backbone::new(config).map_err(|e| ReidError::format(e.to_string()))?;
        backbone.stage2_weight = c.f64s(config.stage2_fan_in() * config.feature_dim)?;
        backbone.stage2_bias = c.f64s(config.feature_dim)?;

        let direction = if c.at_end() {
            None
        } else {
            c.magic(DIRECTION_MAGIC)?;
            let n = c.u32()?;
            let weight = c.f64s(n)?;
            let bias = c.f64s(1)?[0];
            let clf = DirectionClassifier { weight, bias };
            clf.validate().map_err(|e| ReidError::format(e.to_string()))?;
            Some(clf)
        };
        if !c.at_end() {
            return Err(ReidError::format("trailing bytes in checkpoint"));
        }
        Ok(Self { head, backbone, direction })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_gallery(path: &Path, gallery: &Gallery) -> Result<()> {
    std::fs::write(path, gallery.to_bytes())?;
    Ok(())
}

pub fn load_gallery(path: &Path) -> Result<Gallery> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    Gallery::read_bin(bytes.as_slice())
}

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,stage,mean_loss\n");
    for r in log {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.stage, r.mean_loss));
    }
    s
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}
