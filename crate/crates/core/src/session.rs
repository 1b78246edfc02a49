//! The capture protocol: up to four attempts per session, acceptance on the
//! first good photo, best-of fallback on exhaustion, and an append-only event
//! log that can be replayed into identical session states.
//!
//! Time is passed in as milliseconds since the Unix epoch so the state
//! machine stays deterministic and runs without a system clock.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::ensemble::Verdict;
use crate::stats::{LabeledAttempt, PilotSession};

pub const DEFAULT_ATTEMPT_CAP: u32 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("session {0} is already {1}")]
    SessionTerminal(String, SessionState),
    #[error("attempt cap must be at least 1")]
    InvalidCap,
    #[error("malformed event log: {0}")]
    MalformedLog(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Accepted,
    Exhausted,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        self != SessionState::Active
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Active => "active",
            SessionState::Accepted => "accepted",
            SessionState::Exhausted => "exhausted",
        }
    }
}

impl std::fmt::Display for SessionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt_number: u32,
    /// Content-addressed image id (hex SHA-256 of the uploaded bytes).
    pub image_ref: String,
    pub verdict: Verdict,
    pub received_at_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureSession {
    pub session_id: String,
    pub state: SessionState,
    pub attempt_cap: u32,
    pub attempts: Vec<AttemptRecord>,
    /// Index into `attempts`; set exactly when the session is terminal.
    pub final_attempt_index: Option<usize>,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub attempt_number: u32,
    pub accepted: bool,
    pub reasons: Vec<String>,
    pub remaining_attempts: u32,
    pub session_state: SessionState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SessionCreated,
    AttemptSubmitted,
    VerdictReturned,
    SessionFinalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventLogEntry {
    pub timestamp_ms: u64,
    pub session_id: String,
    pub event: EventKind,
    pub payload: Value,
}

/// Read-only snapshot with derived timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub session: CaptureSession,
    pub remaining_attempts: u32,
    pub extra_time_s: f64,
}

/// Index of the attempt with the lowest overall poor-score; earliest wins ties.
pub fn best_attempt(attempts: &[AttemptRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, a) in attempts.iter().enumerate() {
        if best.map_or(true, |b| a.verdict.overall_score < attempts[b].verdict.overall_score) {
            best = Some(i);
        }
    }
    best
}

impl CaptureSession {
    pub fn create(session_id: String, attempt_cap: u32, now_ms: u64) -> Result<(Self, EventLogEntry), SessionError> {
        if attempt_cap == 0 {
            return Err(SessionError::InvalidCap);
        }
        let s = Self { session_id, state: SessionState::Active, attempt_cap, attempts: Vec::new(), final_attempt_index: None, created_at_ms: now_ms, updated_at_ms: now_ms };
        let entry = s.entry(now_ms, EventKind::SessionCreated, json!({ "attempt_cap": attempt_cap }));
        Ok((s, entry))
    }

    fn entry(&self, timestamp_ms: u64, event: EventKind, payload: Value) -> EventLogEntry {
        EventLogEntry { timestamp_ms, session_id: self.session_id.clone(), event, payload }
    }

    pub fn remaining_attempts(&self) -> u32 {
        if self.state.is_terminal() {
            0
        } else {
            self.attempt_cap - self.attempts.len() as u32
        }
    }

    /// Seconds between the first and last attempt.
    pub fn extra_time_s(&self) -> f64 {
        match (self.attempts.first(), self.attempts.last()) {
            (Some(a), Some(b)) => (b.received_at_ms - a.received_at_ms) as f64 / 1000.0,
            _ => 0.0,
        }
    }

    pub fn view(&self) -> SessionView {
        SessionView { session: self.clone(), remaining_attempts: self.remaining_attempts(), extra_time_s: self.extra_time_s() }
    }

    pub fn final_attempt(&self) -> Option<&AttemptRecord> {
        self.final_attempt_index.map(|i| &self.attempts[i])
    }

    /// Record an assessed attempt. Timestamps are clamped to be monotone.
    pub fn submit(&mut self, image_ref: String, verdict: Verdict, now_ms: u64) -> Result<(SubmitOutcome, Vec<EventLogEntry>), SessionError> {
        if self.state.is_terminal() {
            return Err(SessionError::SessionTerminal(self.session_id.clone(), self.state));
        }
        let now = now_ms.max(self.updated_at_ms);
        let attempt_number = self.attempts.len() as u32 + 1;
        let mut log = vec![self.entry(now, EventKind::AttemptSubmitted, json!({ "attempt_number": attempt_number, "image_ref": image_ref }))];
        let accepted = !verdict.is_poor;
        let reasons: Vec<String> = verdict.reason_names().into_iter().map(String::from).collect();
        log.push(self.entry(now, EventKind::VerdictReturned, json!({ "attempt_number": attempt_number, "verdict": verdict })));
        self.attempts.push(AttemptRecord { attempt_number, image_ref, verdict, received_at_ms: now });
        self.updated_at_ms = now;

        if accepted {
            self.state = SessionState::Accepted;
            self.final_attempt_index = Some(self.attempts.len() - 1);
        } else if attempt_number >= self.attempt_cap {
            self.state = SessionState::Exhausted;
            self.final_attempt_index = best_attempt(&self.attempts);
        }
        if self.state.is_terminal() {
            let final_attempt = self.final_attempt_index.map(|i| self.attempts[i].attempt_number);
            log.push(self.entry(now, EventKind::SessionFinalized, json!({ "state": self.state, "final_attempt_number": final_attempt })));
        }
        let outcome = SubmitOutcome { attempt_number, accepted, reasons, remaining_attempts: self.remaining_attempts(), session_state: self.state };
        Ok((outcome, log))
    }

    /// Pair the session's attempts with clinician grades for the pilot report.
    pub fn to_pilot(&self, grades: &[u8]) -> Option<PilotSession> {
        if grades.len() != self.attempts.len() || !self.state.is_terminal() {
            return None;
        }
        let t0 = self.attempts.first()?.received_at_ms;
        Some(PilotSession {
            session_id: self.session_id.clone(),
            attempts: self
                .attempts
                .iter()
                .zip(grades)
                .map(|(a, &quality)| LabeledAttempt { quality, elapsed_s: (a.received_at_ms - t0) as f64 / 1000.0 })
                .collect(),
            final_index: self.final_attempt_index?,
            accepted: self.state == SessionState::Accepted,
        })
    }
}

pub fn to_jsonl(entries: &[EventLogEntry]) -> String {
    entries.iter().map(|e| serde_json::to_string(e).expect("log entries serialize") + "\n").collect()
}

pub fn parse_jsonl(text: &str) -> Result<Vec<EventLogEntry>, SessionError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| SessionError::MalformedLog(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Rebuild every session by re-running the state machine over the log, and
/// check that each recorded finalization matches the replayed one.
pub fn replay(entries: &[EventLogEntry]) -> Result<BTreeMap<String, CaptureSession>, SessionError> {
    let bad = |m: String| SessionError::MalformedLog(m);
    let mut sessions: BTreeMap<String, CaptureSession> = BTreeMap::new();
    let mut pending: BTreeMap<String, (u32, String)> = BTreeMap::new();
    for e in entries {
        let id = &e.session_id;
        match e.event {
            EventKind::SessionCreated => {
                let cap = e.payload.get("attempt_cap").and_then(Value::as_u64).ok_or_else(|| bad(format!("{id}: created without attempt_cap")))?;
                let (s, _) = CaptureSession::create(id.clone(), cap as u32, e.timestamp_ms)?;
                if sessions.insert(id.clone(), s).is_some() {
                    return Err(bad(format!("{id}: created twice")));
                }
            }
            EventKind::AttemptSubmitted => {
                let n = e.payload.get("attempt_number").and_then(Value::as_u64).ok_or_else(|| bad(format!("{id}: attempt without number")))?;
                let image_ref = e.payload.get("image_ref").and_then(Value::as_str).ok_or_else(|| bad(format!("{id}: attempt without image_ref")))?;
                pending.insert(id.clone(), (n as u32, image_ref.to_string()));
            }
            EventKind::VerdictReturned => {
                let s = sessions.get_mut(id).ok_or_else(|| SessionError::SessionNotFound(id.clone()))?;
                let (n, image_ref) = pending.remove(id).ok_or_else(|| bad(format!("{id}: verdict without attempt")))?;
                let verdict: Verdict = serde_json::from_value(e.payload.get("verdict").cloned().unwrap_or(Value::Null)).map_err(|err| bad(format!("{id}: {err}")))?;
                let (outcome, _) = s.submit(image_ref, verdict, e.timestamp_ms)?;
                if outcome.attempt_number != n {
                    return Err(bad(format!("{id}: attempt {n} replayed as {}", outcome.attempt_number)));
                }
            }
            EventKind::SessionFinalized => {
                let s = sessions.get(id).ok_or_else(|| SessionError::SessionNotFound(id.clone()))?;
                let state: SessionState = serde_json::from_value(e.payload.get("state").cloned().unwrap_or(Value::Null)).map_err(|err| bad(format!("{id}: {err}")))?;
                let final_number = e.payload.get("final_attempt_number").and_then(Value::as_u64);
                if state != s.state || final_number != s.final_attempt().map(|a| a.attempt_number as u64) {
                    return Err(bad(format!("{id}: recorded finalization disagrees with replay")));
                }
            }
        }
    }
    Ok(sessions)
}
