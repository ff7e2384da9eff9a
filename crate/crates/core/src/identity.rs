//! Invite code → unique ID → device ID indirection, reinstalls, phone
//! protection and consent OTPs.
//!
//! On-disk layout (one JSON object per line, one file per table):
//!
//! ```text
//! codes.jsonl       {"code","issued_at","expires_at","used"}
//! identities.jsonl  {"unique_id","invite_code","pin","phone_hash","phone_sealed","make_model","registered_at"}
//! device_ids.jsonl  {"device_id","unique_id","created_at"}
//! ```
//!
//! Phone numbers are only ever held as a salted SHA-256 hex digest and as a
//! sealed blob that the deployment cannot open.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::IdentityConfig;
use crate::sealing::{Sealed, SealingKey};
use crate::wire::{beacon_versions, derive_device_key, DeviceId, DeviceKey};

const CODE_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const CODE_LEN: usize = 8;
const SECS_PER_DAY: u64 = 86_400;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UniqueId(pub String);

impl fmt::Display for UniqueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Canonical (upper-case) invite code.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InviteCodeId(pub String);

impl InviteCodeId {
    pub fn normalize(raw: &str) -> Self {
        InviteCodeId(raw.trim().to_ascii_uppercase())
    }
}

impl fmt::Display for InviteCodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InviteCode {
    pub code: InviteCodeId,
    pub issued_at: u64,
    pub expires_at: u64,
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: DeviceId,
    pub unique_id: UniqueId,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceIdentity {
    pub unique_id: UniqueId,
    pub invite_code: InviteCodeId,
    pub pin: String,
    pub phone_hash: Option<String>,
    pub phone_sealed: Option<Sealed>,
    pub make_model: String,
    pub registered_at: u64,
    /// Oldest first; the last entry is the current device.
    #[serde(skip)]
    pub device_ids: Vec<(DeviceId, u64)>,
}

impl DeviceIdentity {
    pub fn current_device(&self) -> Option<DeviceId> {
        self.device_ids.last().map(|(d, _)| *d)
    }

    pub fn has_phone(&self) -> bool {
        self.phone_hash.is_some()
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub unique_id: UniqueId,
    pub device_id: DeviceId,
    pub pin: String,
    pub device_key: DeviceKey,
}

impl fmt::Debug for Registration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registration")
            .field("unique_id", &self.unique_id)
            .field("device_id", &self.device_id)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistrationError {
    #[error("unknown invite code")]
    UnknownCode,
    #[error("invite code already used")]
    CodeUsed,
    #[error("invite code expired")]
    CodeExpired,
    #[error("too many failed attempts today")]
    Throttled,
    #[error("no identity matches the given phone and PIN")]
    NoMatch,
    #[error("could not protect phone number")]
    Sealing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OtpPurpose {
    Consent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OtpChallenge {
    pub unique_id: UniqueId,
    pub otp: String,
    pub issued_at: u64,
    pub attempts_left: u8,
    pub purpose: OtpPurpose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsentPhase<'a> {
    Issue,
    Verify(&'a str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum ChallengeState {
    Issued { expires_at: u64, attempts_left: u8 },
    Granted,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "kebab-case")]
pub enum OtpError {
    #[error("no such user")]
    UnknownUser,
    #[error("no phone number on record; the user must add one in the app")]
    NoPhoneOnRecord,
    #[error("no active challenge")]
    NoActiveChallenge,
    #[error("challenge expired")]
    Expired,
    #[error("wrong OTP, {attempts_left} attempts left")]
    Mismatch { attempts_left: u8 },
    #[error("no attempts left; issue a new OTP")]
    AttemptsExhausted,
}

/// An OTP "sent" to a user. There is no SMS gateway; messages are kept here
/// for operators and tests to read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OtpMessage {
    pub unique_id: UniqueId,
    pub otp: String,
    pub sent_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Resolution {
    Registered {
        invite_code: InviteCodeId,
        unique_id: UniqueId,
    },
    Beacon {
        major: u16,
        minor: u16,
    },
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationSummary {
    /// UTC day start → registrations that day.
    pub per_day: BTreeMap<u64, usize>,
    pub make_model: BTreeMap<String, usize>,
    pub total_identities: usize,
    pub total_devices: usize,
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line} of {file}: {source}")]
    Json {
        file: &'static str,
        line: usize,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Integrity(String),
}

pub struct IdentitySecrets {
    pub device_salt: Vec<u8>,
    pub phone_salt: String,
    pub sealing_key: SealingKey,
}

#[derive(Default)]
struct Tables {
    codes: BTreeMap<InviteCodeId, InviteCode>,
    identities: BTreeMap<UniqueId, DeviceIdentity>,
    devices: BTreeMap<DeviceId, DeviceRecord>,
    by_code: HashMap<InviteCodeId, UniqueId>,
    by_phone: HashMap<String, UniqueId>,
}

pub struct IdentityStore {
    cfg: IdentityConfig,
    secrets: IdentitySecrets,
    tables: RwLock<Tables>,
    failures: Mutex<HashMap<(String, u64), u32>>,
    challenges: Mutex<HashMap<UniqueId, OtpChallenge>>,
    outbox: Mutex<Vec<OtpMessage>>,
    rng: Mutex<ChaCha20Rng>,
}

pub fn hash_phone(phone: &str, salt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(normalize_phone(phone).as_bytes());
    hasher.update(salt.as_bytes());
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Keeps digits and a leading `+`.
pub fn normalize_phone(phone: &str) -> String {
    let trimmed = phone.trim();
    let mut out = String::with_capacity(trimmed.len());
    if trimmed.starts_with('+') {
        out.push('+');
    }
    out.extend(trimmed.chars().filter(|c| c.is_ascii_digit()));
    out
}

impl IdentityStore {
    pub fn new(cfg: IdentityConfig, secrets: IdentitySecrets) -> Self {
        Self::with_rng(cfg, secrets, ChaCha20Rng::from_entropy())
    }

    /// Deterministic identifiers, for simulations.
    pub fn with_seed(cfg: IdentityConfig, secrets: IdentitySecrets, seed: u64) -> Self {
        Self::with_rng(cfg, secrets, ChaCha20Rng::seed_from_u64(seed))
    }

    fn with_rng(cfg: IdentityConfig, secrets: IdentitySecrets, rng: ChaCha20Rng) -> Self {
        IdentityStore {
            cfg,
            secrets,
            tables: RwLock::new(Tables::default()),
            failures: Mutex::new(HashMap::new()),
            challenges: Mutex::new(HashMap::new()),
            outbox: Mutex::new(Vec::new()),
            rng: Mutex::new(rng),
        }
    }

    pub fn device_salt(&self) -> &[u8] {
        &self.secrets.device_salt
    }

    fn random_string(&self, alphabet: &[u8], len: usize) -> String {
        let mut rng = self.rng.lock().expect("rng lock");
        (0..len)
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char)
            .collect()
    }

    fn random_device_id(&self) -> DeviceId {
        let bytes: [u8; 16] = self.rng.lock().expect("rng lock").gen();
        DeviceId::from_random_bytes(bytes)
    }

    pub fn issue_invite_codes(&self, count: usize, now: u64) -> Vec<InviteCodeId> {
        let mut out = Vec::with_capacity(count);
        let expires_at = now + self.cfg.invite_expiry_days * SECS_PER_DAY;
        while out.len() < count {
            let code = InviteCodeId(self.random_string(CODE_ALPHABET, CODE_LEN));
            let mut t = self.tables.write().expect("tables lock");
            if t.codes.contains_key(&code) {
                continue;
            }
            t.codes.insert(
                code.clone(),
                InviteCode {
                    code: code.clone(),
                    issued_at: now,
                    expires_at,
                    used: false,
                },
            );
            out.push(code);
        }
        out
    }

    fn throttled(&self, source: &str, now: u64) -> bool {
        let failures = self.failures.lock().expect("failures lock");
        failures
            .get(&(source.to_string(), now / SECS_PER_DAY))
            .is_some_and(|&n| n >= self.cfg.max_failed_registrations_per_day)
    }

    fn record_failure(&self, source: &str, now: u64) {
        let mut failures = self.failures.lock().expect("failures lock");
        *failures.entry((source.to_string(), now / SECS_PER_DAY)).or_insert(0) += 1;
    }

    fn seal_phone(&self, phone: &str) -> Result<(String, Sealed), RegistrationError> {
        let hash = hash_phone(phone, &self.secrets.phone_salt);
        let mut rng = self.rng.lock().expect("rng lock");
        let sealed = self
            .secrets
            .sealing_key
            .seal(&mut *rng, normalize_phone(phone).as_bytes())
            .map_err(|_| RegistrationError::Sealing)?;
        Ok((hash, sealed))
    }

    /// `source` identifies the caller (e.g. client address) for throttling.
    pub fn register_device(
        &self,
        source: &str,
        invite_code: &str,
        phone: Option<&str>,
        make_model: &str,
        now: u64,
    ) -> Result<Registration, RegistrationError> {
        if self.throttled(source, now) {
            return Err(RegistrationError::Throttled);
        }
        let code = InviteCodeId::normalize(invite_code);
        let protected = match phone.filter(|p| !normalize_phone(p).is_empty()) {
            Some(p) => Some(self.seal_phone(p)?),
            None => None,
        };
        let unique_id = UniqueId(self.random_string(b"0123456789abcdef", 16));
        let device_id = self.random_device_id();
        let pin = self.random_string(b"0123456789", 6);

        let mut t = self.tables.write().expect("tables lock");
        let failure = match t.codes.get(&code) {
            None => Some(RegistrationError::UnknownCode),
            Some(c) if c.used => Some(RegistrationError::CodeUsed),
            Some(c) if now >= c.expires_at => Some(RegistrationError::CodeExpired),
            Some(_) => None,
        };
        if let Some(err) = failure {
            drop(t);
            self.record_failure(source, now);
            return Err(err);
        }
        if t.identities.contains_key(&unique_id) || t.devices.contains_key(&device_id) {
            // 64/122 random bits; a collision means the RNG is broken.
            panic!("identifier collision");
        }
        t.codes.get_mut(&code).expect("checked above").used = true;
        let (phone_hash, phone_sealed) = match protected {
            Some((h, s)) => (Some(h), Some(s)),
            None => (None, None),
        };
        if let Some(h) = &phone_hash {
            t.by_phone.insert(h.clone(), unique_id.clone());
        }
        t.by_code.insert(code.clone(), unique_id.clone());
        t.devices.insert(
            device_id,
            DeviceRecord {
                device_id,
                unique_id: unique_id.clone(),
                created_at: now,
            },
        );
        t.identities.insert(
            unique_id.clone(),
            DeviceIdentity {
                unique_id: unique_id.clone(),
                invite_code: code,
                pin: pin.clone(),
                phone_hash,
                phone_sealed,
                make_model: make_model.to_string(),
                registered_at: now,
                device_ids: vec![(device_id, now)],
            },
        );
        Ok(Registration {
            device_key: derive_device_key(&device_id, &self.secrets.device_salt),
            unique_id,
            device_id,
            pin,
        })
    }

    /// Issues a fresh device id to the identity matching `phone` and `pin`.
    /// Earlier device ids stay mapped for historical tracing.
    pub fn reinstall_device(
        &self,
        source: &str,
        phone: &str,
        pin: &str,
        now: u64,
    ) -> Result<Registration, RegistrationError> {
        if self.throttled(source, now) {
            return Err(RegistrationError::Throttled);
        }
        let hash = hash_phone(phone, &self.secrets.phone_salt);
        let device_id = self.random_device_id();
        let mut t = self.tables.write().expect("tables lock");
        let unique_id = match t.by_phone.get(&hash) {
            Some(u) if t.identities[u].pin == pin => u.clone(),
            _ => {
                drop(t);
                self.record_failure(source, now);
                return Err(RegistrationError::NoMatch);
            }
        };
        let ident = t.identities.get_mut(&unique_id).expect("indexed identity");
        let last = ident.device_ids.last().map_or(0, |(_, ts)| *ts);
        let created_at = now.max(last + 1);
        ident.device_ids.push((device_id, created_at));
        let pin = ident.pin.clone();
        t.devices.insert(
            device_id,
            DeviceRecord {
                device_id,
                unique_id: unique_id.clone(),
                created_at,
            },
        );
        Ok(Registration {
            device_key: derive_device_key(&device_id, &self.secrets.device_salt),
            unique_id,
            device_id,
            pin,
        })
    }

    pub fn resolve_identity(&self, device_ids: &[DeviceId]) -> Vec<Resolution> {
        let t = self.tables.read().expect("tables lock");
        device_ids
            .iter()
            .map(|d| {
                if let Some((major, minor)) = beacon_versions(d) {
                    return Resolution::Beacon { major, minor };
                }
                match t.devices.get(d) {
                    Some(rec) => Resolution::Registered {
                        invite_code: t.identities[&rec.unique_id].invite_code.clone(),
                        unique_id: rec.unique_id.clone(),
                    },
                    None => Resolution::Unknown,
                }
            })
            .collect()
    }

    pub fn identity(&self, unique_id: &UniqueId) -> Option<DeviceIdentity> {
        self.tables
            .read()
            .expect("tables lock")
            .identities
            .get(unique_id)
            .cloned()
    }

    pub fn owner_of(&self, device_id: &DeviceId) -> Option<UniqueId> {
        self.tables
            .read()
            .expect("tables lock")
            .devices
            .get(device_id)
            .map(|r| r.unique_id.clone())
    }

    pub fn is_registered(&self, device_id: &DeviceId) -> bool {
        self.tables.read().expect("tables lock").devices.contains_key(device_id)
    }

    pub fn phone_matches(&self, unique_id: &UniqueId, phone: &str) -> bool {
        let hash = hash_phone(phone, &self.secrets.phone_salt);
        self.identity(unique_id)
            .and_then(|i| i.phone_hash)
            .is_some_and(|h| h == hash)
    }

    /// Drops the hashed and sealed phone number of a user.
    pub fn purge_phone(&self, unique_id: &UniqueId) -> bool {
        let mut t = self.tables.write().expect("tables lock");
        let Some(ident) = t.identities.get_mut(unique_id) else {
            return false;
        };
        let hash = ident.phone_hash.take();
        let had = hash.is_some() || ident.phone_sealed.is_some();
        ident.phone_sealed = None;
        if let Some(h) = hash {
            t.by_phone.remove(&h);
        }
        had
    }

    pub fn consent_otp(
        &self,
        unique_id: &UniqueId,
        phase: ConsentPhase<'_>,
        now: u64,
    ) -> Result<ChallengeState, OtpError> {
        match phase {
            ConsentPhase::Issue => {
                let ident = self.identity(unique_id).ok_or(OtpError::UnknownUser)?;
                if !ident.has_phone() {
                    return Err(OtpError::NoPhoneOnRecord);
                }
                let otp = self.random_string(b"0123456789", 6);
                let challenge = OtpChallenge {
                    unique_id: unique_id.clone(),
                    otp: otp.clone(),
                    issued_at: now,
                    attempts_left: self.cfg.otp_attempts,
                    purpose: OtpPurpose::Consent,
                };
                self.challenges
                    .lock()
                    .expect("challenge lock")
                    .insert(unique_id.clone(), challenge);
                log::info!("consent OTP issued for user {unique_id}");
                self.outbox.lock().expect("outbox lock").push(OtpMessage {
                    unique_id: unique_id.clone(),
                    otp,
                    sent_at: now,
                });
                Ok(ChallengeState::Issued {
                    expires_at: now + self.cfg.otp_validity_secs,
                    attempts_left: self.cfg.otp_attempts,
                })
            }
            ConsentPhase::Verify(otp) => {
                let mut challenges = self.challenges.lock().expect("challenge lock");
                let ch = challenges.get_mut(unique_id).ok_or(OtpError::NoActiveChallenge)?;
                if now >= ch.issued_at + self.cfg.otp_validity_secs {
                    return Err(OtpError::Expired);
                }
                if ch.attempts_left == 0 {
                    return Err(OtpError::AttemptsExhausted);
                }
                if ch.otp == otp.trim() {
                    challenges.remove(unique_id);
                    return Ok(ChallengeState::Granted);
                }
                ch.attempts_left -= 1;
                Err(OtpError::Mismatch {
                    attempts_left: ch.attempts_left,
                })
            }
        }
    }

    pub fn active_challenge(&self, unique_id: &UniqueId) -> Option<OtpChallenge> {
        self.challenges.lock().expect("challenge lock").get(unique_id).cloned()
    }

    /// All OTP messages "sent" so far, oldest first.
    pub fn sent_otps(&self) -> Vec<OtpMessage> {
        self.outbox.lock().expect("outbox lock").clone()
    }

    pub fn last_otp_for(&self, unique_id: &UniqueId) -> Option<String> {
        self.outbox
            .lock()
            .expect("outbox lock")
            .iter()
            .rev()
            .find(|m| &m.unique_id == unique_id)
            .map(|m| m.otp.clone())
    }

    pub fn registration_summary(&self) -> RegistrationSummary {
        let t = self.tables.read().expect("tables lock");
        let mut per_day = BTreeMap::new();
        let mut make_model = BTreeMap::new();
        for ident in t.identities.values() {
            *per_day
                .entry(ident.registered_at / SECS_PER_DAY * SECS_PER_DAY)
                .or_insert(0) += 1;
            *make_model.entry(ident.make_model.clone()).or_insert(0) += 1;
        }
        RegistrationSummary {
            per_day,
            make_model,
            total_identities: t.identities.len(),
            total_devices: t.devices.len(),
        }
    }

    pub fn codes(&self) -> Vec<InviteCode> {
        self.tables
            .read()
            .expect("tables lock")
            .codes
            .values()
            .cloned()
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), PersistError> {
        fs::create_dir_all(dir)?;
        let t = self.tables.read().expect("tables lock");
        write_jsonl(&dir.join("codes.jsonl"), t.codes.values())?;
        write_jsonl(&dir.join("identities.jsonl"), t.identities.values())?;
        write_jsonl(&dir.join("device_ids.jsonl"), t.devices.values())?;
        Ok(())
    }

    /// Replaces the in-memory tables with those stored in `dir`.
    pub fn load(&self, dir: &Path) -> Result<(), PersistError> {
        let codes: Vec<InviteCode> = read_jsonl(&dir.join("codes.jsonl"), "codes.jsonl")?;
        let idents: Vec<DeviceIdentity> = read_jsonl(&dir.join("identities.jsonl"), "identities.jsonl")?;
        let devices: Vec<DeviceRecord> = read_jsonl(&dir.join("device_ids.jsonl"), "device_ids.jsonl")?;

        let mut t = Tables::default();
        for c in codes {
            t.codes.insert(c.code.clone(), c);
        }
        for i in idents {
            if !t.codes.contains_key(&i.invite_code) {
                return Err(PersistError::Integrity(format!(
                    "identity {} references unknown code",
                    i.unique_id
                )));
            }
            if let Some(h) = &i.phone_hash {
                t.by_phone.insert(h.clone(), i.unique_id.clone());
            }
            t.by_code.insert(i.invite_code.clone(), i.unique_id.clone());
            t.identities.insert(i.unique_id.clone(), i);
        }
        let mut devices = devices;
        devices.sort_by_key(|d| d.created_at);
        for d in devices {
            let ident = t
                .identities
                .get_mut(&d.unique_id)
                .ok_or_else(|| PersistError::Integrity(format!("device {} has no identity", d.device_id)))?;
            ident.device_ids.push((d.device_id, d.created_at));
            t.devices.insert(d.device_id, d);
        }
        *self.tables.write().expect("tables lock") = t;
        Ok(())
    }
}

fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, rows: impl Iterator<Item = &'a T>) -> Result<(), PersistError> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        for row in rows {
            serde_json::to_writer(&mut w, row).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, file: &'static str) -> Result<Vec<T>, PersistError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| PersistError::Json {
            file,
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}
