//! On-disk persistence: an append-only JSON-lines journal plus periodic
//! gallery snapshots, all inside one state directory.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use reid_core::image::HsvImage;
use reid_core::retrieval::Gallery;

use crate::error::ServiceError;
use crate::state::{JournalRecord, ServiceState};

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const BASE_FILE: &str = "base_gallery.bin";
pub const SNAPSHOT_FILE: &str = "snapshot.bin";

/// Gallery as of journal record `seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub seq: u64,
    pub gallery_version: u64,
    pub gallery: Gallery,
}

impl Snapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.seq.to_le_bytes());
        b.extend_from_slice(&self.gallery_version.to_le_bytes());
        b.extend_from_slice(&self.gallery.to_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ServiceError> {
        if bytes.len() < 16 {
            return Err(ServiceError::Journal("snapshot truncated".into()));
        }
        let seq = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let gallery_version = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let gallery = Gallery::read_bin(&bytes[16..])?;
        Ok(Self { seq, gallery_version, gallery })
    }
}

/// Reads every committed record. A final line without its newline is a torn
/// write and is ignored; any other unparsable line is an error.
pub fn read_journal(path: &Path) -> Result<Vec<JournalRecord>, ServiceError> {
    Ok(read_committed(path)?.0)
}

fn read_committed(path: &Path) -> Result<(Vec<JournalRecord>, u64), ServiceError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e.into()),
    };
    let committed = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut out = Vec::new();
    for (i, line) in bytes[..committed].split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let rec = serde_json::from_slice(line).map_err(|e| ServiceError::Journal(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok((out, committed as u64))
}

pub fn read_snapshot(path: &Path) -> Result<Option<Snapshot>, ServiceError> {
    match fs::read(path) {
        Ok(b) => Snapshot::from_bytes(&b).map(Some),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Rebuilds the state, taking the gallery from the snapshot when there is one.
/// The result equals a full replay from the base gallery.
pub fn restore(base: Gallery, images: BTreeMap<u32, HsvImage>, records: &[JournalRecord], snapshot: Option<Snapshot>) -> Result<ServiceState, ServiceError> {
    let Some(snap) = snapshot else {
        return ServiceState::replay(base, images, records);
    };
    if snap.seq > records.last().map_or(0, |r| r.seq) {
        return Err(ServiceError::Journal("snapshot is newer than the journal".into()));
    }
    let mut state = ServiceState::new(base, images);
    let mut swap = Some(snap);
    for r in records {
        if swap.as_ref().is_some_and(|s| r.seq > s.seq) {
            install(&mut state, swap.take().expect("checked"))?;
        }
        state.apply_with(r, swap.is_none())?;
    }
    if let Some(s) = swap {
        install(&mut state, s)?;
    }
    Ok(state)
}

fn install(state: &mut ServiceState, snap: Snapshot) -> Result<(), ServiceError> {
    if state.gallery_version != snap.gallery_version || state.last_seq != snap.seq {
        return Err(ServiceError::Journal("snapshot does not match the journal".into()));
    }
    state.gallery = snap.gallery;
    Ok(())
}

/// Open handle on a state directory.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    journal: File,
}

impl Store {
    /// Opens (or initializes) `dir` and returns the restored state.
    ///
    /// The base gallery is copied into the directory on first use; later opens
    /// must pass the same gallery.
    pub fn open(dir: &Path, base: Gallery, images: BTreeMap<u32, HsvImage>) -> Result<(Self, ServiceState), ServiceError> {
        fs::create_dir_all(dir)?;
        let base_path = dir.join(BASE_FILE);
        let base_bytes = base.to_bytes();
        match fs::read(&base_path) {
            Ok(existing) if existing != base_bytes => {
                return Err(ServiceError::Journal(format!("{} holds a different base gallery", dir.display())));
            }
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => write_atomic(&base_path, &base_bytes)?,
            Err(e) => return Err(e.into()),
        }
        let journal_path = dir.join(JOURNAL_FILE);
        let (records, committed) = read_committed(&journal_path)?;
        let snapshot = read_snapshot(&dir.join(SNAPSHOT_FILE))?;
        let state = restore(base, images, &records, snapshot)?;
        let journal = OpenOptions::new().create(true).append(true).open(&journal_path)?;
        // drop a torn tail so new records start on a fresh line
        journal.set_len(committed)?;
        Ok((Self { dir: dir.to_path_buf(), journal }, state))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Appends and syncs one record.
    pub fn append(&mut self, record: &JournalRecord) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(record).map_err(|e| ServiceError::Journal(e.to_string()))?;
        line.push(b'\n');
        self.journal.write_all(&line)?;
        self.journal.sync_data()?;
        Ok(())
    }

    pub fn write_snapshot(&self, state: &ServiceState) -> Result<(), ServiceError> {
        let snap = Snapshot { seq: state.last_seq, gallery_version: state.gallery_version, gallery: state.gallery.clone() };
        write_atomic(&self.dir.join(SNAPSHOT_FILE), &snap.to_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
