//! In-memory state rebuilt by folding log records, and the export built
//! from it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use g3dhf_core::model::{write_ratings_jsonl, Dimension, DistortionLabel, FixationAnnotation, ItemId, RatingRecord};
use serde::{Deserialize, Serialize};

use crate::error::{AnnotateError, Result};
use crate::event::{Event, LogRecord, SessionState, Submission};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub subject_id: String,
    pub seed: u64,
    pub queue: Vec<ItemId>,
    /// Index into `queue`; equals `queue.len()` once complete.
    pub cursor: usize,
    pub state: SessionState,
    /// Sequence number of the last accepted submission.
    pub last_seq: u64,
}

impl Session {
    pub fn current_item(&self) -> Option<&ItemId> {
        self.queue.get(self.cursor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredSubmission {
    pub lsn: u64,
    pub at: DateTime<Utc>,
    pub submission: Submission,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreState {
    /// LSN of the last applied record.
    pub lsn: u64,
    pub sessions: BTreeMap<String, Session>,
    /// Full submission history in log order.
    pub submissions: Vec<StoredSubmission>,
}

impl StoreState {
    pub fn session(&self, id: &str) -> Result<&Session> {
        self.sessions.get(id).ok_or_else(|| AnnotateError::UnknownSession(id.to_owned()))
    }

    pub fn find_by_subject<'a>(&'a self, subject: &'a str) -> impl Iterator<Item = &'a Session> + 'a {
        self.sessions.values().filter(move |s| s.subject_id == subject)
    }

    /// Applies one record. Records at or below the current LSN are skipped,
    /// which makes replay after a snapshot idempotent.
    pub fn apply(&mut self, rec: &LogRecord) -> Result<()> {
        if rec.lsn <= self.lsn {
            return Ok(());
        }
        let corrupt = |message: String| AnnotateError::Corrupt { lsn: rec.lsn, message };
        match &rec.event {
            Event::SessionCreated {
                session_id,
                subject_id,
                seed,
                queue,
            } => {
                if self.sessions.contains_key(session_id) {
                    return Err(corrupt(format!("session {session_id} created twice")));
                }
                self.sessions.insert(
                    session_id.clone(),
                    Session {
                        session_id: session_id.clone(),
                        subject_id: subject_id.clone(),
                        seed: *seed,
                        queue: queue.clone(),
                        cursor: 0,
                        state: SessionState::Active,
                        last_seq: 0,
                    },
                );
            }
            Event::Navigated { session_id, cursor, state } => {
                let s = self
                    .sessions
                    .get_mut(session_id)
                    .ok_or_else(|| corrupt(format!("unknown session {session_id}")))?;
                if *cursor > s.queue.len() {
                    return Err(corrupt(format!("cursor {cursor} past queue of {}", s.queue.len())));
                }
                s.cursor = *cursor;
                s.state = *state;
            }
            Event::Submitted(sub) => {
                let s = self
                    .sessions
                    .get_mut(&sub.session_id)
                    .ok_or_else(|| corrupt(format!("unknown session {}", sub.session_id)))?;
                if sub.seq <= s.last_seq {
                    return Err(corrupt(format!("sequence {} after {}", sub.seq, s.last_seq)));
                }
                s.last_seq = sub.seq;
                self.submissions.push(StoredSubmission {
                    lsn: rec.lsn,
                    at: rec.at,
                    submission: sub.clone(),
                });
            }
        }
        self.lsn = rec.lsn;
        Ok(())
    }

    pub fn replay<'a>(records: impl IntoIterator<Item = &'a LogRecord>) -> Result<StoreState> {
        let mut state = StoreState::default();
        for r in records {
            state.apply(r)?;
        }
        Ok(state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportOptions {
    /// Ratings come only from sessions that reached the end of their queue.
    pub complete_only: bool,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions { complete_only: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Export {
    pub ratings: Vec<RatingRecord>,
    pub fixations: Vec<FixationAnnotation>,
    pub labels: Vec<DistortionLabel>,
}

pub const RATINGS_FILE: &str = "ratings.jsonl";
pub const FIXATIONS_FILE: &str = "fixations.json";
pub const LABELS_FILE: &str = "labels.json";

/// Latest-wins fold over the submission history. Each rating dimension and
/// the distortion part (marks, categories, description) resolve separately
/// to the newest submission that carried them, per (subject, item).
pub fn export(state: &StoreState, opts: ExportOptions) -> Export {
    type Key = (String, ItemId);
    let mut quality: BTreeMap<Key, &StoredSubmission> = BTreeMap::new();
    let mut authenticity: BTreeMap<Key, &StoredSubmission> = BTreeMap::new();
    let mut distortion: BTreeMap<Key, &StoredSubmission> = BTreeMap::new();

    for stored in &state.submissions {
        let sub = &stored.submission;
        let key = (sub.subject_id.clone(), sub.item_id.clone());
        let complete = state
            .sessions
            .get(&sub.session_id)
            .is_some_and(|s| s.state == SessionState::Complete);
        if complete || !opts.complete_only {
            if sub.quality.is_some() {
                quality.insert(key.clone(), stored);
            }
            if sub.authenticity.is_some() {
                authenticity.insert(key.clone(), stored);
            }
        }
        if sub.has_distortion_part() {
            distortion.insert(key, stored);
        }
    }

    let mut ratings = Vec::new();
    for (dimension, picked) in [(Dimension::Quality, &quality), (Dimension::Authenticity, &authenticity)] {
        for ((subject, item), stored) in picked {
            let score = match dimension {
                Dimension::Quality => stored.submission.quality,
                Dimension::Authenticity => stored.submission.authenticity,
            };
            ratings.push(RatingRecord {
                subject_id: subject.clone(),
                item_id: item.clone(),
                dimension,
                score: score.expect("picked only when present"),
                timestamp: stored.at,
            });
        }
    }
    ratings.sort_by(|a, b| (&a.subject_id, &a.item_id, a.dimension).cmp(&(&b.subject_id, &b.item_id, b.dimension)));

    let mut fixations = Vec::new();
    let mut labels = Vec::new();
    for ((subject, item), stored) in &distortion {
        let sub = &stored.submission;
        if let (false, Some((w, h))) = (sub.marks.is_empty(), sub.image_size) {
            fixations.push(FixationAnnotation {
                item_id: item.clone(),
                annotator_id: subject.clone(),
                image_width: w,
                image_height: h,
                points: sub.marks.clone(),
            });
        }
        if !sub.categories.is_empty() {
            // categories were validated at submission time
            if let Ok(label) = DistortionLabel::new(item.clone(), subject.clone(), sub.categories.clone(), sub.description.clone().unwrap_or_default()) {
                labels.push(label);
            }
        }
    }
    let by_item = |a: &ItemId, aa: &str, b: &ItemId, bb: &str| (a, aa).cmp(&(b, bb));
    fixations.sort_by(|a, b| by_item(&a.item_id, &a.annotator_id, &b.item_id, &b.annotator_id));
    labels.sort_by(|a, b| by_item(&a.item_id, &a.annotator_id, &b.item_id, &b.annotator_id));

    Export { ratings, fixations, labels }
}

impl Export {
    pub fn ratings_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_ratings_jsonl(&mut buf, &self.ratings).expect("writing to memory");
        buf
    }

    pub fn fixations_json(&self) -> Vec<u8> {
        let mut buf = serde_json::to_vec_pretty(&self.fixations).expect("fixations serialize");
        buf.push(b'\n');
        buf
    }

    pub fn labels_json(&self) -> Vec<u8> {
        let mut buf = serde_json::to_vec_pretty(&self.labels).expect("labels serialize");
        buf.push(b'\n');
        buf
    }

    /// Writes the three export files into `dir`, creating it if needed.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(AnnotateError::io(dir))?;
        for (name, bytes) in [
            (RATINGS_FILE, self.ratings_jsonl()),
            (FIXATIONS_FILE, self.fixations_json()),
            (LABELS_FILE, self.labels_json()),
        ] {
            let path = dir.join(name);
            let mut f = std::fs::File::create(&path).map_err(AnnotateError::io(&path))?;
            f.write_all(&bytes).map_err(AnnotateError::io(&path))?;
        }
        Ok(())
    }
}
