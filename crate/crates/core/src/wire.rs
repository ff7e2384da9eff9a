//! Binary contact-batch codec, device keys, request signatures and beacon IDs.
//!
//! Contact batch layout (all integers big-endian):
//!
//! ```text
//! offset  size      field
//! 0       16        source device id
//! then, repeated until the end of the buffer, one scan record:
//! +0      4         scan epoch, UNIX seconds (u32)
//! +4      1         contact count n (0..=255)
//! +5      17 * n    n x (16-byte device id, 1-byte RSSI as two's-complement i8)
//! ```
//!
//! A batch has no length prefix and no record count; the record stream is
//! terminated by the end of the buffer. The serialized length is therefore
//! always `16 + sum(5 + 17 * n_i)`.

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEVICE_ID_LEN: usize = 16;
pub const RECORD_HEADER_LEN: usize = 5;
pub const CONTACT_LEN: usize = 17;
pub const MAX_CONTACTS_PER_RECORD: usize = 255;

/// Default replay window for signed requests, in seconds.
pub const DEFAULT_FRESHNESS_WINDOW: u64 = 300;

/// First 12 bytes of every beacon-derived device id. The UUID version nibble
/// is zero, so no random (v4) device id can ever carry this prefix.
pub const BEACON_TEMPLATE_PREFIX: [u8; 12] = [0xbe, 0xac, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00];

/// A 128-bit device identifier. Displays as a lowercase hyphenated UUID.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct DeviceId(pub [u8; DEVICE_ID_LEN]);

impl DeviceId {
    pub fn from_random_bytes(bytes: [u8; DEVICE_ID_LEN]) -> Self {
        DeviceId(*uuid::Builder::from_random_bytes(bytes).as_uuid().as_bytes())
    }

    pub fn as_bytes(&self) -> &[u8; DEVICE_ID_LEN] {
        &self.0
    }

    pub fn to_uuid(self) -> uuid::Uuid {
        uuid::Uuid::from_bytes(self.0)
    }

    /// Lowercase hex without hyphens.
    pub fn to_hex(self) -> String {
        self.to_uuid().simple().to_string()
    }

    pub fn is_beacon(&self) -> bool {
        self.0[..12] == BEACON_TEMPLATE_PREFIX
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_uuid().hyphenated())
    }
}

impl fmt::Debug for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeviceId({self})")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid device id: {0:?}")]
pub struct ParseDeviceIdError(pub String);

impl FromStr for DeviceId {
    type Err = ParseDeviceIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        uuid::Uuid::parse_str(s.trim())
            .map(|u| DeviceId(*u.as_bytes()))
            .map_err(|_| ParseDeviceIdError(s.to_string()))
    }
}

impl Serialize for DeviceId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DeviceId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub device_id: DeviceId,
    pub rssi: i8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub epoch: u32,
    pub contacts: Vec<Contact>,
}

impl ScanRecord {
    pub fn encoded_len(&self) -> usize {
        RECORD_HEADER_LEN + CONTACT_LEN * self.contacts.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactBatch {
    pub source: DeviceId,
    pub records: Vec<ScanRecord>,
}

impl ContactBatch {
    pub fn new(source: DeviceId) -> Self {
        ContactBatch {
            source,
            records: Vec::new(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        DEVICE_ID_LEN + self.records.iter().map(ScanRecord::encoded_len).sum::<usize>()
    }
}

/// Splits one scan into as many records as needed to keep each at or below
/// [`MAX_CONTACTS_PER_RECORD`]. An empty scan still yields one empty record.
pub fn split_scan(epoch: u32, contacts: &[Contact]) -> Vec<ScanRecord> {
    if contacts.is_empty() {
        return vec![ScanRecord {
            epoch,
            contacts: Vec::new(),
        }];
    }
    contacts
        .chunks(MAX_CONTACTS_PER_RECORD)
        .map(|chunk| ScanRecord {
            epoch,
            contacts: chunk.to_vec(),
        })
        .collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("record {record} has {count} contacts; at most 255 fit in one record")]
    TooManyContacts { record: usize, count: usize },
}

pub fn encode_contact_batch(batch: &ContactBatch) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(batch.encoded_len());
    out.extend_from_slice(batch.source.as_bytes());
    for (i, record) in batch.records.iter().enumerate() {
        let count = record.contacts.len();
        if count > MAX_CONTACTS_PER_RECORD {
            return Err(EncodeError::TooManyContacts { record: i, count });
        }
        out.extend_from_slice(&record.epoch.to_be_bytes());
        out.push(count as u8);
        for contact in &record.contacts {
            out.extend_from_slice(contact.device_id.as_bytes());
            out.push(contact.rssi as u8);
        }
    }
    Ok(out)
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    #[error("buffer of {len} bytes is too short for the 16-byte source id")]
    MissingSourceId { len: usize },
    #[error("truncated scan record header at offset {offset}")]
    TruncatedRecordHeader { offset: usize },
    #[error("truncated contact entry at offset {offset}")]
    TruncatedContact { offset: usize },
}

impl DecodeError {
    pub fn offset(&self) -> usize {
        match *self {
            DecodeError::MissingSourceId { .. } => 0,
            DecodeError::TruncatedRecordHeader { offset } | DecodeError::TruncatedContact { offset } => offset,
        }
    }
}

fn read_id(buf: &[u8], at: usize) -> DeviceId {
    let mut id = [0u8; DEVICE_ID_LEN];
    id.copy_from_slice(&buf[at..at + DEVICE_ID_LEN]);
    DeviceId(id)
}

/// Decodes a whole buffer. Any bytes that do not form a complete record are an
/// error, reported at the offset where the incomplete element starts.
pub fn decode_contact_batch(buf: &[u8]) -> Result<ContactBatch, DecodeError> {
    if buf.len() < DEVICE_ID_LEN {
        return Err(DecodeError::MissingSourceId { len: buf.len() });
    }
    let mut batch = ContactBatch::new(read_id(buf, 0));
    let mut pos = DEVICE_ID_LEN;
    while pos < buf.len() {
        if buf.len() - pos < RECORD_HEADER_LEN {
            return Err(DecodeError::TruncatedRecordHeader { offset: pos });
        }
        let epoch = u32::from_be_bytes([buf[pos], buf[pos + 1], buf[pos + 2], buf[pos + 3]]);
        let count = buf[pos + 4] as usize;
        pos += RECORD_HEADER_LEN;
        let mut contacts = Vec::with_capacity(count);
        for _ in 0..count {
            if buf.len() - pos < CONTACT_LEN {
                return Err(DecodeError::TruncatedContact { offset: pos });
            }
            contacts.push(Contact {
                device_id: read_id(buf, pos),
                rssi: buf[pos + DEVICE_ID_LEN] as i8,
            });
            pos += CONTACT_LEN;
        }
        batch.records.push(ScanRecord { epoch, contacts });
    }
    Ok(batch)
}

/// Base64 of `SHA256(device_id || salt)`, returned to a device at registration.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceKey(pub String);

impl DeviceKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for DeviceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DeviceKey(..)")
    }
}

pub fn derive_device_key(device_id: &DeviceId, salt: &[u8]) -> DeviceKey {
    let mut hasher = Sha256::new();
    hasher.update(device_id.as_bytes());
    hasher.update(salt);
    DeviceKey(BASE64.encode(hasher.finalize()))
}

/// Base64 of `SHA256(device_id || decimal(timestamp) || device_key)`.
pub fn sign_request(device_id: &DeviceId, timestamp: u64, key: &DeviceKey) -> String {
    let mut hasher = Sha256::new();
    hasher.update(device_id.as_bytes());
    hasher.update(timestamp.to_string().as_bytes());
    hasher.update(key.0.as_bytes());
    BASE64.encode(hasher.finalize())
}

/// Authentication fields carried by every device call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedRequest {
    pub device_id: DeviceId,
    pub timestamp: u64,
    pub signature: String,
}

impl SignedRequest {
    pub fn sign(device_id: DeviceId, timestamp: u64, key: &DeviceKey) -> Self {
        SignedRequest {
            device_id,
            timestamp,
            signature: sign_request(&device_id, timestamp, key),
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuthReject {
    #[error("bad signature")]
    BadSignature,
    #[error("stale timestamp")]
    StaleTimestamp,
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

/// Recomputes the device key from the claimed id and checks the signature,
/// then the timestamp freshness. No identity lookup is involved.
pub fn verify_request(req: &SignedRequest, now: u64, salt: &[u8], freshness_window: u64) -> Result<(), AuthReject> {
    let key = derive_device_key(&req.device_id, salt);
    let expected = sign_request(&req.device_id, req.timestamp, &key);
    if !constant_time_eq(expected.as_bytes(), req.signature.as_bytes()) {
        return Err(AuthReject::BadSignature);
    }
    if now.abs_diff(req.timestamp) > freshness_window {
        return Err(AuthReject::StaleTimestamp);
    }
    Ok(())
}

/// Embeds iBeacon (major, minor) into the beacon template UUID.
pub fn beacon_device_id(major: u16, minor: u16) -> DeviceId {
    let mut id = [0u8; DEVICE_ID_LEN];
    id[..12].copy_from_slice(&BEACON_TEMPLATE_PREFIX);
    id[12..14].copy_from_slice(&major.to_be_bytes());
    id[14..16].copy_from_slice(&minor.to_be_bytes());
    DeviceId(id)
}

/// Inverse of [`beacon_device_id`]; `None` for ids outside the template.
pub fn beacon_versions(id: &DeviceId) -> Option<(u16, u16)> {
    id.is_beacon().then(|| {
        (
            u16::from_be_bytes([id.0[12], id.0[13]]),
            u16::from_be_bytes([id.0[14], id.0[15]]),
        )
    })
}
