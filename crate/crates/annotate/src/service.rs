//! Session operations on top of the event log.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::Utc;
use g3dhf_core::model::{parse_category, validate_category_set, DatasetManifest, ItemId, ManifestItem, Point, SCORE_MAX, SCORE_MIN};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AnnotateError, Result};
use crate::event::{Durability, Event, EventLog, LogRecord, SessionState, Submission};
use crate::store::{export, Export, ExportOptions, Session, StoreState};

pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
const MAX_DESCRIPTION: usize = 4096;
const MAX_MARKS: usize = 1024;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub durability: Durability,
    pub export: ExportOptions,
    /// Compact into a snapshot after this many appended records.
    pub compact_every: Option<u64>,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_dir: data_dir.into(),
            durability: Durability::Fsync,
            export: ExportOptions::default(),
            compact_every: None,
        }
    }
}

/// What the annotator sees for the item under the cursor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemDescriptor {
    pub session_id: String,
    pub state: SessionState,
    pub position: usize,
    pub total: usize,
    pub item_id: ItemId,
    pub model_tag: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub video: Option<String>,
    /// Composite of the three snapshot angles.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_width: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_height: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRequest {
    pub item_id: ItemId,
    #[serde(default)]
    pub quality: Option<f64>,
    #[serde(default)]
    pub authenticity: Option<f64>,
    #[serde(default)]
    pub marks: Vec<Point>,
    #[serde(default)]
    pub categories: Vec<String>,
    #[serde(default)]
    pub description: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub session_id: String,
    pub item_id: ItemId,
    pub seq: u64,
    pub lsn: u64,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    lsn: u64,
    state: StoreState,
}

struct Inner {
    log: EventLog,
    state: StoreState,
    since_snapshot: u64,
}

pub struct Service {
    manifest: DatasetManifest,
    index: HashMap<ItemId, usize>,
    config: ServiceConfig,
    inner: Mutex<Inner>,
}

fn media_url(path: &Path) -> String {
    let parts: Vec<String> = path.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    format!("/media/{}", parts.join("/"))
}

impl Service {
    /// Opens the store in `config.data_dir`, replaying snapshot and log.
    pub fn open(manifest: DatasetManifest, config: ServiceConfig) -> Result<Service> {
        std::fs::create_dir_all(&config.data_dir).map_err(AnnotateError::io(&config.data_dir))?;
        let snap_path = config.data_dir.join(SNAPSHOT_FILE);
        let mut state = match std::fs::read(&snap_path) {
            Ok(bytes) => {
                let snap: Snapshot = serde_json::from_slice(&bytes).map_err(|source| AnnotateError::BadRecord { line: 0, source })?;
                debug_assert_eq!(snap.lsn, snap.state.lsn);
                snap.state
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => StoreState::default(),
            Err(e) => return Err(AnnotateError::io(&snap_path)(e)),
        };
        let (log, records) = EventLog::open(&config.data_dir.join(LOG_FILE), config.durability)?;
        let mut replayed = 0;
        for r in &records {
            if r.lsn > state.lsn {
                state.apply(r)?;
                replayed += 1;
            }
        }
        log::info!("replayed {replayed} records, lsn {}", state.lsn);
        let index = manifest.items.iter().enumerate().map(|(i, m)| (m.id.clone(), i)).collect();
        Ok(Service {
            manifest,
            index,
            config,
            inner: Mutex::new(Inner {
                log,
                state,
                since_snapshot: replayed,
            }),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn item(&self, id: &ItemId) -> Option<&ManifestItem> {
        self.index.get(id).map(|i| &self.manifest.items[*i])
    }

    fn append(&self, inner: &mut Inner, event: Event) -> Result<u64> {
        let rec = LogRecord {
            lsn: inner.state.lsn + 1,
            at: Utc::now(),
            event,
        };
        inner.log.append(&rec)?;
        inner.state.apply(&rec)?;
        inner.since_snapshot += 1;
        if self.config.compact_every.is_some_and(|n| inner.since_snapshot >= n) {
            self.compact_locked(inner)?;
        }
        Ok(rec.lsn)
    }

    /// Starts a session for `subject_id` with the manifest shuffled by `seed`.
    /// Asking again with the same subject and seed returns the existing session.
    pub fn create_session(&self, subject_id: &str, seed: u64) -> Result<Session> {
        if self.manifest.is_empty() {
            return Err(AnnotateError::EmptyManifest);
        }
        let subject_id = subject_id.trim();
        if subject_id.is_empty() || subject_id.len() > 128 {
            return Err(AnnotateError::Validation("subject_id must be 1 to 128 characters".into()));
        }
        let mut inner = self.lock();
        if let Some(s) = inner.state.find_by_subject(subject_id).find(|s| s.seed == seed) {
            return Ok(s.clone());
        }
        if let Some(s) = inner.state.find_by_subject(subject_id).find(|s| s.state == SessionState::Active) {
            return Err(AnnotateError::DuplicateActiveSession {
                subject: subject_id.to_owned(),
                session: s.session_id.clone(),
            });
        }
        let mut queue: Vec<ItemId> = self.manifest.items.iter().map(|i| i.id.clone()).collect();
        queue.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let session_id = format!("S{:06}", inner.state.sessions.len() + 1);
        self.append(
            &mut inner,
            Event::SessionCreated {
                session_id: session_id.clone(),
                subject_id: subject_id.to_owned(),
                seed,
                queue,
            },
        )?;
        Ok(inner.state.sessions[&session_id].clone())
    }

    pub fn session(&self, session_id: &str) -> Result<Session> {
        self.lock().state.session(session_id).cloned()
    }

    fn describe(&self, s: &Session) -> ItemDescriptor {
        let position = s.cursor.min(s.queue.len() - 1);
        let item_id = s.queue[position].clone();
        let item = self.item(&item_id);
        ItemDescriptor {
            session_id: s.session_id.clone(),
            state: s.state,
            position,
            total: s.queue.len(),
            model_tag: item.map(|i| i.model_tag.clone()).unwrap_or_default(),
            video: item.and_then(|i| i.video.as_deref()).map(media_url),
            snapshot: item.and_then(|i| i.snapshot.as_deref()).map(media_url),
            snapshot_width: item.and_then(|i| i.snapshot_width),
            snapshot_height: item.and_then(|i| i.snapshot_height),
            item_id,
        }
    }

    fn active<'a>(state: &'a StoreState, session_id: &str) -> Result<&'a Session> {
        let s = state.session(session_id)?;
        if s.state == SessionState::Complete {
            return Err(AnnotateError::SessionComplete(session_id.to_owned()));
        }
        Ok(s)
    }

    pub fn current(&self, session_id: &str) -> Result<ItemDescriptor> {
        let inner = self.lock();
        Ok(self.describe(Self::active(&inner.state, session_id)?))
    }

    /// Moves to the next item. Moving past the last item completes the
    /// session and returns the last item with state `complete`.
    pub fn advance(&self, session_id: &str) -> Result<ItemDescriptor> {
        let mut inner = self.lock();
        let s = Self::active(&inner.state, session_id)?;
        let cursor = s.cursor + 1;
        let state = if cursor >= s.queue.len() {
            SessionState::Complete
        } else {
            SessionState::Active
        };
        self.append(
            &mut inner,
            Event::Navigated {
                session_id: session_id.to_owned(),
                cursor,
                state,
            },
        )?;
        Ok(self.describe(&inner.state.sessions[session_id]))
    }

    /// Moves back one item; a no-op on the first item.
    pub fn retreat(&self, session_id: &str) -> Result<ItemDescriptor> {
        let mut inner = self.lock();
        let s = Self::active(&inner.state, session_id)?;
        if s.cursor > 0 {
            let cursor = s.cursor - 1;
            self.append(
                &mut inner,
                Event::Navigated {
                    session_id: session_id.to_owned(),
                    cursor,
                    state: SessionState::Active,
                },
            )?;
        }
        Ok(self.describe(&inner.state.sessions[session_id]))
    }

    fn validate(&self, s: &Session, req: &SubmitRequest) -> Result<Submission> {
        let invalid = |m: String| AnnotateError::Validation(m);
        let current = s.current_item().expect("active session has a current item");
        if &req.item_id != current {
            return Err(AnnotateError::StaleItem {
                session: s.session_id.clone(),
                current: current.to_string(),
                submitted: req.item_id.to_string(),
            });
        }
        for (name, v) in [("quality", req.quality), ("authenticity", req.authenticity)] {
            if let Some(v) = v {
                if !(v.is_finite() && (SCORE_MIN..=SCORE_MAX).contains(&v)) {
                    return Err(invalid(format!("{name} score {v} outside [{SCORE_MIN}, {SCORE_MAX}]")));
                }
            }
        }
        let description = req.description.as_deref().filter(|d| !d.trim().is_empty()).map(str::to_owned);
        if description.as_ref().is_some_and(|d| d.len() > MAX_DESCRIPTION) {
            return Err(invalid(format!("description longer than {MAX_DESCRIPTION} bytes")));
        }
        let mut image_size = None;
        if !req.marks.is_empty() {
            if req.marks.len() > MAX_MARKS {
                return Err(invalid(format!("more than {MAX_MARKS} marks")));
            }
            let item = self.item(current);
            let (w, h) = match item.and_then(|i| i.snapshot_width.zip(i.snapshot_height)) {
                Some(d) => d,
                None => return Err(invalid(format!("item {current} has no snapshot size, marks cannot be checked"))),
            };
            if let Some(p) = req.marks.iter().find(|p| p.x < 0 || p.y < 0 || p.x >= w as i64 || p.y >= h as i64) {
                return Err(invalid(format!("mark ({}, {}) outside the {w}x{h} snapshot", p.x, p.y)));
            }
            image_size = Some((w, h));
        }
        let categories = req
            .categories
            .iter()
            .map(|c| parse_category(c))
            .collect::<Result<_, _>>()
            .map_err(|e| invalid(e.to_string()))?;
        if !req.categories.is_empty() {
            validate_category_set(current, &categories).map_err(|e| invalid(e.to_string()))?;
        } else if !req.marks.is_empty() || description.is_some() {
            return Err(invalid("marks and descriptions need at least one distortion category".into()));
        }
        let sub = Submission {
            session_id: s.session_id.clone(),
            subject_id: s.subject_id.clone(),
            item_id: current.clone(),
            seq: s.last_seq + 1,
            quality: req.quality,
            authenticity: req.authenticity,
            marks: req.marks.clone(),
            image_size,
            categories,
            description,
        };
        if sub.quality.is_none() && sub.authenticity.is_none() && !sub.has_distortion_part() {
            return Err(invalid("submission carries no ratings, marks or categories".into()));
        }
        Ok(sub)
    }

    /// Validates and durably appends a submission for the current item.
    pub fn submit(&self, session_id: &str, req: &SubmitRequest) -> Result<SubmitAck> {
        let mut inner = self.lock();
        let s = Self::active(&inner.state, session_id)?;
        let sub = self.validate(s, req)?;
        let (seq, item_id) = (sub.seq, sub.item_id.clone());
        let lsn = self.append(&mut inner, Event::Submitted(sub))?;
        Ok(SubmitAck {
            session_id: session_id.to_owned(),
            item_id,
            seq,
            lsn,
        })
    }

    pub fn export(&self) -> Export {
        export(&self.lock().state, self.config.export)
    }

    pub fn state(&self) -> StoreState {
        self.lock().state.clone()
    }

    /// Writes a snapshot of the current state and trims the log behind it.
    pub fn compact(&self) -> Result<()> {
        let mut inner = self.lock();
        self.compact_locked(&mut inner)
    }

    fn compact_locked(&self, inner: &mut Inner) -> Result<()> {
        let path = self.config.data_dir.join(SNAPSHOT_FILE);
        let tmp = path.with_extension("json.tmp");
        let snap = Snapshot {
            lsn: inner.state.lsn,
            state: inner.state.clone(),
        };
        {
            let f = std::fs::File::create(&tmp).map_err(AnnotateError::io(&tmp))?;
            serde_json::to_writer(&f, &snap).map_err(|e| AnnotateError::io(&tmp)(e.into()))?;
            f.sync_all().map_err(AnnotateError::io(&tmp))?;
        }
        std::fs::rename(&tmp, &path).map_err(AnnotateError::io(&path))?;
        inner.log.retain_after(snap.lsn)?;
        inner.since_snapshot = 0;
        log::info!("compacted at lsn {}", snap.lsn);
        Ok(())
    }
}
