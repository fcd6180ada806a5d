//! Session and rating logic over the durable log.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::store::{Entry, Partition, RatingRecord, Recovery, SessionRecord, Store};
use super::{ModelTag, SampleItem, SampleSet};
use crate::error::{Error, Result};
use crate::pipeline::types::Task;

pub const LOG_FILE: &str = "ratings.ndjson";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub evaluator_id: String,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Rate only every `count`-th item starting at `index`; all by default.
    #[serde(default)]
    pub partition: Option<Partition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub evaluator_id: String,
    pub item_order: Vec<String>,
    pub cursor: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePayload {
    pub blind_id: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemPayload {
    pub item_id: String,
    pub task: Task,
    pub instruction: String,
    pub source: String,
    pub candidates: Vec<CandidatePayload>,
    /// Blind ids of this item already rated in the session.
    pub rated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextPayload {
    pub session_id: String,
    pub done: bool,
    pub cursor: usize,
    pub total: usize,
    pub item: Option<ItemPayload>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitRating {
    pub session_id: String,
    pub item_id: String,
    pub blind_id: String,
    pub rating: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ack {
    Stored,
    Duplicate,
}

/// Per-session random token for a candidate; unguessable because the
/// session id is random.
pub fn blind_id(session_id: &str, item_id: &str, model: ModelTag) -> String {
    let mut h = Sha256::new();
    for part in [session_id, item_id, model.name()] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..8])
}

/// Candidates of an item as a session sees them, ordered by blind id.
pub fn blinded(session_id: &str, item: &SampleItem) -> Vec<(String, ModelTag, String)> {
    let mut v: Vec<_> = item
        .candidates
        .iter()
        .map(|c| (blind_id(session_id, &item.item_id, c.model), c.model, c.image.clone()))
        .collect();
    v.sort();
    v
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

type RatingKey = (String, String, String);

struct State {
    store: Store,
    sessions: HashMap<String, SessionRecord>,
    /// Insertion order of `ratings`.
    order: Vec<RatingKey>,
    ratings: HashMap<RatingKey, RatingRecord>,
}

impl State {
    fn apply(&mut self, e: Entry) {
        match e {
            Entry::Session(s) => {
                self.sessions.insert(s.session_id.clone(), s);
            }
            Entry::Rating(r) => {
                let key = (r.session_id.clone(), r.item_id.clone(), r.blind_id.clone());
                if !self.ratings.contains_key(&key) {
                    self.order.push(key.clone());
                    self.ratings.insert(key, r);
                }
            }
        }
    }
}

pub struct RatingService {
    samples: SampleSet,
    state: Mutex<State>,
    recovery: Recovery,
}

impl RatingService {
    /// Opens `<state_dir>/ratings.ndjson`, replaying it.
    pub fn open(samples: SampleSet, state_dir: &Path) -> Result<Self> {
        let (store, entries, recovery) = Store::open(&state_dir.join(LOG_FILE))?;
        let mut st = State {
            store,
            sessions: HashMap::new(),
            order: Vec::new(),
            ratings: HashMap::new(),
        };
        for e in entries {
            st.apply(e);
        }
        Ok(Self {
            samples,
            state: Mutex::new(st),
            recovery,
        })
    }

    pub fn recovery(&self) -> &Recovery {
        &self.recovery
    }

    pub fn samples(&self) -> &SampleSet {
        &self.samples
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn create_session(&self, req: &CreateSession) -> Result<SessionView> {
        let evaluator = req.evaluator_id.trim();
        if evaluator.is_empty() {
            return Err(Error::invalid("evaluator_id must be non-empty"));
        }
        let mut ids: Vec<String> = self.samples.items.iter().map(|i| i.item_id.clone()).collect();
        if let Some(p) = &req.partition {
            if p.count == 0 || p.index >= p.count {
                return Err(Error::invalid("partition needs 0 <= index < count"));
            }
            ids = ids.into_iter().enumerate().filter(|(i, _)| i % p.count == p.index).map(|(_, id)| id).collect();
            if ids.is_empty() {
                return Err(Error::invalid("partition selects no items"));
            }
        }
        let seed = req.seed.unwrap_or_else(rand::random);
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let rec = SessionRecord {
            session_id: uuid::Uuid::new_v4().simple().to_string(),
            evaluator_id: evaluator.to_string(),
            seed,
            item_order: ids,
            partition: req.partition.clone(),
            created_ms: now_ms(),
        };
        let mut st = self.lock();
        st.store.append(&Entry::Session(rec.clone()))?;
        let view = SessionView {
            session_id: rec.session_id.clone(),
            evaluator_id: rec.evaluator_id.clone(),
            item_order: rec.item_order.clone(),
            cursor: 0,
        };
        st.apply(Entry::Session(rec));
        Ok(view)
    }

    fn item(&self, id: &str) -> Result<&SampleItem> {
        self.samples.item(id).ok_or_else(|| Error::NotFound(format!("item {id:?}")))
    }

    fn rated_in(st: &State, session: &str, item: &SampleItem) -> Vec<String> {
        blinded(session, item)
            .into_iter()
            .map(|(b, _, _)| b)
            .filter(|b| st.ratings.contains_key(&(session.to_string(), item.item_id.clone(), b.clone())))
            .collect()
    }

    pub fn next_item(&self, session_id: &str) -> Result<NextPayload> {
        let st = self.lock();
        let s = st
            .sessions
            .get(session_id)
            .ok_or_else(|| Error::NotFound(format!("session {session_id:?}")))?;
        let total = s.item_order.len();
        for (cursor, id) in s.item_order.iter().enumerate() {
            let item = self.item(id)?;
            let rated = Self::rated_in(&st, session_id, item);
            if rated.len() < item.candidates.len() {
                let candidates = blinded(session_id, item)
                    .into_iter()
                    .map(|(b, _, _)| CandidatePayload {
                        image: format!("/media/{session_id}/{}/{b}", item.item_id),
                        blind_id: b,
                    })
                    .collect();
                return Ok(NextPayload {
                    session_id: session_id.to_string(),
                    done: false,
                    cursor,
                    total,
                    item: Some(ItemPayload {
                        item_id: item.item_id.clone(),
                        task: item.task,
                        instruction: item.instruction.clone(),
                        source: format!("/media/{session_id}/{}/source", item.item_id),
                        candidates,
                        rated,
                    }),
                });
            }
        }
        Ok(NextPayload {
            session_id: session_id.to_string(),
            done: true,
            cursor: total,
            total,
            item: None,
        })
    }

    /// Stored durably before returning. Exact repeats are acknowledged as
    /// duplicates; a different rating for a rated tuple is a conflict.
    pub fn submit_rating(&self, req: &SubmitRating) -> Result<Ack> {
        if !(1..=5).contains(&req.rating) {
            return Err(Error::invalid(format!("rating {} outside 1..=5", req.rating)));
        }
        let mut st = self.lock();
        let s = st
            .sessions
            .get(&req.session_id)
            .ok_or_else(|| Error::NotFound(format!("session {:?}", req.session_id)))?;
        if !s.item_order.contains(&req.item_id) {
            return Err(Error::invalid(format!("item {:?} is not part of this session", req.item_id)));
        }
        let item = self.item(&req.item_id)?;
        if !blinded(&req.session_id, item).iter().any(|(b, _, _)| *b == req.blind_id) {
            return Err(Error::invalid(format!("unknown candidate {:?}", req.blind_id)));
        }
        let key = (req.session_id.clone(), req.item_id.clone(), req.blind_id.clone());
        if let Some(prev) = st.ratings.get(&key) {
            return if i64::from(prev.rating) == req.rating {
                Ok(Ack::Duplicate)
            } else {
                Err(Error::Conflict(format!("candidate already rated {}", prev.rating)))
            };
        }
        let rec = RatingRecord {
            session_id: req.session_id.clone(),
            evaluator_id: s.evaluator_id.clone(),
            item_id: req.item_id.clone(),
            blind_id: req.blind_id.clone(),
            rating: req.rating as u8,
            timestamp_ms: now_ms(),
        };
        st.store.append(&Entry::Rating(rec.clone()))?;
        st.apply(Entry::Rating(rec));
        Ok(Ack::Stored)
    }

    /// Ratings joined with their hidden model tag and task.
    pub fn resolved(&self) -> Result<Vec<(ModelTag, Task, u8)>> {
        let st = self.lock();
        st.order.iter().map(|k| resolve(&self.samples, &st.ratings[k])).collect()
    }

    pub fn report(&self) -> Result<super::RatingReport> {
        Ok(super::aggregate(&self.resolved()?))
    }

    /// File behind an opaque media URL.
    pub fn media_path(&self, session_id: &str, item_id: &str, which: &str) -> Result<std::path::PathBuf> {
        if !self.lock().sessions.contains_key(session_id) {
            return Err(Error::NotFound(format!("session {session_id:?}")));
        }
        let item = self.item(item_id)?;
        let rel = if which == "source" {
            item.source.clone()
        } else {
            blinded(session_id, item)
                .into_iter()
                .find(|(b, _, _)| b == which)
                .map(|(_, _, img)| img)
                .ok_or_else(|| Error::NotFound(format!("media {which:?}")))?
        };
        self.samples.resolve(&rel)
    }

    /// Rewrites the log with sessions first, then ratings in arrival order.
    pub fn compact(&self) -> Result<usize> {
        let mut st = self.lock();
        let mut sessions: Vec<&SessionRecord> = st.sessions.values().collect();
        sessions.sort_by(|a, b| (a.created_ms, &a.session_id).cmp(&(b.created_ms, &b.session_id)));
        let mut entries: Vec<Entry> = sessions.into_iter().cloned().map(Entry::Session).collect();
        entries.extend(st.order.iter().map(|k| Entry::Rating(st.ratings[k].clone())));
        st.store.compact(&entries)?;
        Ok(entries.len())
    }
}

/// De-anonymizes one record through the server-side blind map.
pub fn resolve(samples: &SampleSet, r: &RatingRecord) -> Result<(ModelTag, Task, u8)> {
    let item = samples
        .item(&r.item_id)
        .ok_or_else(|| Error::NotFound(format!("rated item {:?} is not in the sample set", r.item_id)))?;
    let model = item
        .candidates
        .iter()
        .map(|c| c.model)
        .find(|&m| blind_id(&r.session_id, &r.item_id, m) == r.blind_id)
        .ok_or_else(|| Error::NotFound(format!("blind id {:?} matches no candidate", r.blind_id)))?;
    Ok((model, item.task, r.rating))
}
