//! The timed real-vs-fake observer study: deck construction, per-image
//! deadlines, five-level responses, fractional scoring and persistence.

mod deck;
mod scoring;
mod session;
mod store;

pub use deck::{build_deck, DeckItem, StudyDeck};
pub use scoring::{score_responses, session_roc, vertical_average_roc, SessionReport};
pub use session::{
    Clock, ManualClock, NextItem, Outcome, Response, SessionState, StudySession, SystemClock,
    DEFAULT_DEADLINE_SECS, GRACE_SECS, RESPONSE_LEVELS, TIMEOUT_VALUE,
};
pub use store::{SessionStore, SESSION_SCHEMA_VERSION};
