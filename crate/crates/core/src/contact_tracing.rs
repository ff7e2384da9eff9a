//! Consent-gated tracing requests.
//!
//! A request moves `submitted → consent-pending → consented → approved |
//! rejected`, and an approved request runs the two-hop search and becomes
//! `completed`. Results name people only by invite code.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::config::TracingConfig;
use crate::edges::{EdgeRow, EdgeSource};
use crate::identity::{ChallengeState, ConsentPhase, IdentityStore, InviteCodeId, OtpError, Resolution, UniqueId};
use crate::tempgraph::{build_interval_graph, t_bfs, ContactPredicate, ContactSet};
use crate::wire::DeviceId;

const SECS_PER_DAY: u64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceState {
    Submitted,
    ConsentPending,
    Consented,
    Approved,
    Rejected,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clinical {
    #[serde(default)]
    pub symptoms: String,
    #[serde(default)]
    pub test_info: String,
}

/// What the health center enters at intake.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSubmission {
    pub unique_id: String,
    pub device_suffix: String,
    pub phone: String,
    #[serde(flatten)]
    pub clinical: Clinical,
    pub window_start: u64,
    pub window_end: u64,
    #[serde(default)]
    pub predicate: Option<ContactPredicate>,
    #[serde(default)]
    pub submitted_by: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub approved: bool,
    pub by: String,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub invite_code: InviteCodeId,
    pub minutes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceResult {
    pub primary: Vec<TraceEntry>,
    pub secondary: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub id: u64,
    pub subject: UniqueId,
    pub device_suffix: String,
    pub clinical: Clinical,
    pub window_start: u64,
    pub window_end: u64,
    pub predicate: ContactPredicate,
    pub state: TraceState,
    pub submitted_by: String,
    /// Every state entered, with the time it was entered.
    pub history: Vec<(TraceState, u64)>,
    pub decision: Option<Decision>,
    pub result: Option<TraceResult>,
}

impl TraceRequest {
    fn enter(&mut self, state: TraceState, now: u64) {
        self.state = state;
        self.history.push((state, now));
    }

    pub fn has_consent(&self) -> bool {
        self.history.iter().any(|(s, _)| *s == TraceState::Consented)
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            id: self.id,
            state: self.state,
            clinical: self.clinical.clone(),
            window_start: self.window_start,
            window_end: self.window_end,
            submitted_by: self.submitted_by.clone(),
            history: self.history.clone(),
            decision: self.decision.clone(),
        }
    }
}

/// Queue view of a request, without the subject's identifiers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub id: u64,
    pub state: TraceState,
    pub clinical: Clinical,
    pub window_start: u64,
    pub window_end: u64,
    pub submitted_by: String,
    pub history: Vec<(TraceState, u64)>,
    pub decision: Option<Decision>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("details do not match a registered user")]
    IdentityMismatch,
    #[error("no phone number on record; the user must add one in the app first")]
    NoPhoneOnRecord,
    #[error("window must satisfy start < end")]
    InvalidWindow,
    #[error("window reaches back more than {max_days} days")]
    WindowTooOld { max_days: u64 },
    #[error("no trace request {0}")]
    UnknownRequest(u64),
    #[error("cannot {action} a request in state {state:?}")]
    InvalidTransition { state: TraceState, action: &'static str },
    #[error("consent: {0}")]
    Otp(#[from] OtpError),
    #[error("edge data: {0}")]
    Edges(String),
}

pub struct TracingService {
    cfg: TracingConfig,
    identity: Arc<IdentityStore>,
    edges: Arc<dyn EdgeSource>,
    clock: Arc<dyn Clock>,
    requests: Mutex<BTreeMap<u64, TraceRequest>>,
}

impl TracingService {
    pub fn new(
        cfg: TracingConfig,
        identity: Arc<IdentityStore>,
        edges: Arc<dyn EdgeSource>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        TracingService {
            cfg,
            identity,
            edges,
            clock,
            requests: Mutex::new(BTreeMap::new()),
        }
    }

    /// Checks the subject's details and sends them a consent OTP. Nothing is
    /// stored and no OTP is sent unless the details match.
    pub fn submit_trace(&self, sub: &TraceSubmission) -> Result<TraceRequest, TraceError> {
        let now = self.clock.now();
        if sub.window_start >= sub.window_end {
            return Err(TraceError::InvalidWindow);
        }
        let lookback = self.cfg.max_lookback_days * SECS_PER_DAY;
        if sub.window_start < now.saturating_sub(lookback) {
            return Err(TraceError::WindowTooOld {
                max_days: self.cfg.max_lookback_days,
            });
        }
        let unique_id = UniqueId(sub.unique_id.trim().to_ascii_lowercase());
        let ident = self.identity.identity(&unique_id).ok_or(TraceError::IdentityMismatch)?;
        let suffix = sub.device_suffix.trim().to_ascii_lowercase();
        let suffix_ok =
            suffix.len() == self.cfg.suffix_len && ident.device_ids.iter().any(|(d, _)| d.to_hex().ends_with(&suffix));
        if !suffix_ok {
            return Err(TraceError::IdentityMismatch);
        }
        if !ident.has_phone() {
            return Err(TraceError::NoPhoneOnRecord);
        }
        if !self.identity.phone_matches(&unique_id, &sub.phone) {
            return Err(TraceError::IdentityMismatch);
        }

        let mut requests = self.requests.lock().expect("requests lock");
        let id = requests.keys().next_back().map_or(1, |k| k + 1);
        let mut req = TraceRequest {
            id,
            subject: unique_id.clone(),
            device_suffix: suffix,
            clinical: sub.clinical.clone(),
            window_start: sub.window_start,
            window_end: sub.window_end,
            predicate: sub.predicate.unwrap_or(self.cfg.predicate()),
            state: TraceState::Submitted,
            submitted_by: sub.submitted_by.clone(),
            history: vec![(TraceState::Submitted, now)],
            decision: None,
            result: None,
        };
        match self.identity.consent_otp(&unique_id, ConsentPhase::Issue, now) {
            Ok(_) => {}
            Err(OtpError::NoPhoneOnRecord) => return Err(TraceError::NoPhoneOnRecord),
            Err(e) => return Err(e.into()),
        }
        req.enter(TraceState::ConsentPending, now);
        requests.insert(id, req.clone());
        log::info!("trace request {id} awaiting consent");
        Ok(req)
    }

    pub fn record_consent(&self, id: u64, otp: &str) -> Result<TraceState, TraceError> {
        let now = self.clock.now();
        let mut requests = self.requests.lock().expect("requests lock");
        let req = requests.get_mut(&id).ok_or(TraceError::UnknownRequest(id))?;
        if req.state != TraceState::ConsentPending {
            return Err(TraceError::InvalidTransition {
                state: req.state,
                action: "consent to",
            });
        }
        match self
            .identity
            .consent_otp(&req.subject, ConsentPhase::Verify(otp), now)?
        {
            ChallengeState::Granted => {
                req.enter(TraceState::Consented, now);
                Ok(req.state)
            }
            ChallengeState::Issued { .. } => Ok(req.state),
        }
    }

    /// Sends a fresh OTP for a request still waiting on consent.
    pub fn reissue_otp(&self, id: u64) -> Result<ChallengeState, TraceError> {
        let now = self.clock.now();
        let requests = self.requests.lock().expect("requests lock");
        let req = requests.get(&id).ok_or(TraceError::UnknownRequest(id))?;
        if req.state != TraceState::ConsentPending {
            return Err(TraceError::InvalidTransition {
                state: req.state,
                action: "reissue an OTP for",
            });
        }
        Ok(self.identity.consent_otp(&req.subject, ConsentPhase::Issue, now)?)
    }

    /// Records a board decision. Exactly one decision wins per request; an
    /// approval runs the trace before returning.
    pub fn decide_request(&self, id: u64, approve: bool, by: &str) -> Result<TraceRequest, TraceError> {
        let now = self.clock.now();
        {
            let mut requests = self.requests.lock().expect("requests lock");
            let req = requests.get_mut(&id).ok_or(TraceError::UnknownRequest(id))?;
            if req.state != TraceState::Consented {
                return Err(TraceError::InvalidTransition {
                    state: req.state,
                    action: "decide",
                });
            }
            req.decision = Some(Decision {
                approved: approve,
                by: by.to_string(),
                at: now,
            });
            req.enter(
                if approve {
                    TraceState::Approved
                } else {
                    TraceState::Rejected
                },
                now,
            );
            if !approve {
                return Ok(req.clone());
            }
        }
        self.execute_trace(id)?;
        self.request(id)
    }

    /// Runs the search for an approved request and stores the result.
    pub fn execute_trace(&self, id: u64) -> Result<TraceResult, TraceError> {
        let req = self.request(id)?;
        if req.state != TraceState::Approved || !req.has_consent() {
            return Err(TraceError::InvalidTransition {
                state: req.state,
                action: "execute",
            });
        }
        let result = self.run_search(&req)?;
        let mut requests = self.requests.lock().expect("requests lock");
        let stored = requests.get_mut(&id).ok_or(TraceError::UnknownRequest(id))?;
        if stored.state != TraceState::Approved {
            return Err(TraceError::InvalidTransition {
                state: stored.state,
                action: "execute",
            });
        }
        stored.result = Some(result.clone());
        stored.enter(TraceState::Completed, self.clock.now());
        log::info!(
            "trace request {id} completed: {} primary, {} secondary",
            result.primary.len(),
            result.secondary.len()
        );
        Ok(result)
    }

    fn run_search(&self, req: &TraceRequest) -> Result<TraceResult, TraceError> {
        let (from, to) = (req.window_start, req.window_end);
        let ident = self
            .identity
            .identity(&req.subject)
            .ok_or(TraceError::IdentityMismatch)?;
        let seeds: Vec<DeviceId> = ident
            .device_ids
            .iter()
            .filter(|(_, created)| *created < to)
            .map(|(d, _)| *d)
            .collect();
        let Some(&person) = seeds.first() else {
            return Ok(TraceResult::default());
        };
        // All of the subject's installs act as one node, so exposure split
        // across a reinstall still adds up.
        let as_person = |d: DeviceId| if seeds.contains(&d) { person } else { d };
        let rows: Vec<EdgeRow> = self
            .edges
            .rows_in(from, to)
            .map_err(|e| TraceError::Edges(e.to_string()))?
            .into_iter()
            .map(|r| EdgeRow {
                src: as_person(r.src),
                sink: as_person(r.sink),
                ..r
            })
            .filter(|r| r.src != r.sink)
            .collect();
        let graph = build_interval_graph(&rows, from, to);
        let (hop1, hop2) = t_bfs(&graph, &[person], (from, to), req.predicate);

        let primary = self.to_codes(&hop1, &req.subject, &BTreeMap::new());
        let secondary = self.to_codes(&hop2, &req.subject, &primary);
        let entries = |m: BTreeMap<InviteCodeId, u64>| {
            m.into_iter()
                .map(|(invite_code, minutes)| TraceEntry { invite_code, minutes })
                .collect()
        };
        Ok(TraceResult {
            primary: entries(primary),
            secondary: entries(secondary),
        })
    }

    /// Invite code → summed minutes, skipping beacons, unknown devices, the
    /// subject and codes already listed in `exclude`.
    fn to_codes(
        &self,
        set: &ContactSet,
        subject: &UniqueId,
        exclude: &BTreeMap<InviteCodeId, u64>,
    ) -> BTreeMap<InviteCodeId, u64> {
        let ids: Vec<DeviceId> = set.members.iter().map(|m| m.device_id).collect();
        let mut out = BTreeMap::new();
        for (member, res) in set.members.iter().zip(self.identity.resolve_identity(&ids)) {
            if let Resolution::Registered { invite_code, unique_id } = res {
                if &unique_id == subject || exclude.contains_key(&invite_code) {
                    continue;
                }
                *out.entry(invite_code).or_insert(0) += member.minutes;
            }
        }
        out
    }

    pub fn request(&self, id: u64) -> Result<TraceRequest, TraceError> {
        self.requests
            .lock()
            .expect("requests lock")
            .get(&id)
            .cloned()
            .ok_or(TraceError::UnknownRequest(id))
    }

    pub fn queue(&self, state: Option<TraceState>) -> Vec<TraceSummary> {
        self.requests
            .lock()
            .expect("requests lock")
            .values()
            .filter(|r| state.is_none_or(|s| r.state == s))
            .map(TraceRequest::summary)
            .collect()
    }

    pub fn result(&self, id: u64) -> Result<TraceResult, TraceError> {
        let req = self.request(id)?;
        req.result.ok_or(TraceError::InvalidTransition {
            state: req.state,
            action: "fetch the result of",
        })
    }
}
