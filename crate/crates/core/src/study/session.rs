use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::deck::{DeckItem, StudyDeck};
use crate::error::bail_arg;
use crate::{Error, Result};

pub const RESPONSE_LEVELS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_DEADLINE_SECS: f64 = 12.0;
pub const GRACE_SECS: f64 = 1.0;
/// Value stored for late or missing responses ("unsure").
pub const TIMEOUT_VALUE: f64 = 0.5;

/// Milliseconds since the Unix epoch.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Test clock; clones share the same time.
#[derive(Debug, Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(Arc::new(AtomicU64::new(start_ms)))
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Active,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub image_id: String,
    pub value: f64,
    /// As reported by the client; informational only.
    pub elapsed_ms: u64,
    /// Server time from delivery to receipt.
    pub server_elapsed_ms: u64,
    pub timed_out: bool,
    /// What the client sent when the stored value was coerced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitted_value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Delivery {
    delivered_ms: u64,
    deadline_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NextItem {
    Item {
        item: DeckItem,
        index: usize,
        total: usize,
        deadline_epoch_ms: u64,
    },
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySession {
    pub id: String,
    pub observer: String,
    pub deck: StudyDeck,
    pub cursor: usize,
    pub responses: Vec<Response>,
    pub deadline_secs: f64,
    pub state: SessionState,
    current: Option<Delivery>,
}

pub(crate) fn validate_level(value: f64) -> Result<()> {
    if !RESPONSE_LEVELS.contains(&value) {
        bail_arg!("response {value} is not one of 0, 0.25, 0.5, 0.75, 1");
    }
    Ok(())
}

impl StudySession {
    pub fn new(id: impl Into<String>, observer: impl Into<String>, deck: StudyDeck, deadline_secs: f64) -> Result<Self> {
        if deck.is_empty() {
            bail_arg!("cannot start a session on an empty deck");
        }
        if !(deadline_secs > 0.0 && deadline_secs.is_finite()) {
            bail_arg!("per-image deadline must be positive, got {deadline_secs}");
        }
        Ok(Self {
            id: id.into(),
            observer: observer.into(),
            deck,
            cursor: 0,
            responses: Vec::new(),
            deadline_secs,
            state: SessionState::Active,
            current: None,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.state == SessionState::Complete
    }

    fn deadline_ms(&self) -> u64 {
        (self.deadline_secs * 1000.0).round() as u64
    }

    fn grace_ms() -> u64 {
        (GRACE_SECS * 1000.0) as u64
    }

    fn push(&mut self, response: Response) {
        self.responses.push(response);
        self.cursor += 1;
        self.current = None;
        if self.cursor == self.deck.len() {
            self.state = SessionState::Complete;
        }
    }

    /// Records a timeout for the current item if its deadline plus grace has
    /// passed. Returns whether anything changed.
    pub fn expire_overdue(&mut self, now_ms: u64) -> bool {
        let Some(d) = self.current else { return false };
        if now_ms <= d.deadline_ms + Self::grace_ms() {
            return false;
        }
        let image_id = self.deck.items[self.cursor].image_id.clone();
        self.push(Response {
            image_id,
            value: TIMEOUT_VALUE,
            elapsed_ms: 0,
            server_elapsed_ms: now_ms.saturating_sub(d.delivered_ms),
            timed_out: true,
            submitted_value: None,
        });
        true
    }

    /// The current item, stamping its deadline on first delivery. Re-fetching
    /// returns the same item and deadline; an item whose deadline has passed
    /// is recorded as timed out first.
    pub fn next_item(&mut self, now_ms: u64) -> NextItem {
        self.expire_overdue(now_ms);
        if self.is_complete() {
            return NextItem::Done;
        }
        let deadline = self.deadline_ms();
        let d = *self.current.get_or_insert(Delivery { delivered_ms: now_ms, deadline_ms: now_ms + deadline });
        NextItem::Item {
            item: self.deck.items[self.cursor].clone(),
            index: self.cursor,
            total: self.deck.len(),
            deadline_epoch_ms: d.deadline_ms,
        }
    }

    pub fn record_response(&mut self, image_id: &str, value: f64, elapsed_ms: u64, now_ms: u64) -> Result<Outcome> {
        if self.responses.iter().any(|r| r.image_id == image_id) {
            return Err(Error::Conflict(format!("image {image_id} already answered")));
        }
        if self.deck.find(image_id).is_none() {
            return Err(Error::NotFound(format!("image {image_id} is not in this deck")));
        }
        if self.is_complete() {
            return Err(Error::State("session is complete".into()));
        }
        let expected = &self.deck.items[self.cursor].image_id;
        if expected != image_id {
            return Err(Error::Sequencing(format!("expected a response for {expected}, got {image_id}")));
        }
        let Some(d) = self.current else {
            return Err(Error::Sequencing(format!("image {image_id} has not been delivered yet")));
        };
        validate_level(value)?;
        let timed_out = now_ms > d.deadline_ms + Self::grace_ms();
        self.push(Response {
            image_id: image_id.to_string(),
            value: if timed_out { TIMEOUT_VALUE } else { value },
            elapsed_ms,
            server_elapsed_ms: now_ms.saturating_sub(d.delivered_ms),
            timed_out,
            submitted_value: timed_out.then_some(value),
        });
        Ok(if timed_out { Outcome::TimedOut } else { Outcome::Accepted })
    }

    /// Raw responses with their truths, one row per answered item.
    pub fn transcript_csv(&self) -> String {
        let mut s = String::from("index,image_id,file_ref,truth,value,elapsed_ms,server_elapsed_ms,timed_out\n");
        for (k, r) in self.responses.iter().enumerate() {
            let item = self.deck.find(&r.image_id).expect("responses refer to deck items");
            s.push_str(&format!(
                "{k},{},{},{},{},{},{},{}\n",
                r.image_id, item.file_ref, item.truth, r.value, r.elapsed_ms, r.server_elapsed_ms, r.timed_out
            ));
        }
        s
    }
}
