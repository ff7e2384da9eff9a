//! Public-key sealing for phone numbers and exact coordinates.
//!
//! Deployments hold only the [`SealingKey`] (an X25519 public key). The
//! matching [`OpeningKey`] lives offline; nothing in the running platform can
//! open a sealed blob.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use crypto_box::aead::rand_core::CryptoRngCore;
use crypto_box::{PublicKey, SecretKey};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SealError {
    #[error("invalid key material")]
    InvalidKey,
    #[error("sealing failed")]
    Seal,
    #[error("ciphertext could not be opened")]
    Open,
}

/// Base64-encoded sealed-box ciphertext.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sealed(pub String);

#[derive(Clone)]
pub struct SealingKey(PublicKey);

impl SealingKey {
    pub fn from_base64(s: &str) -> Result<Self, SealError> {
        let bytes: [u8; 32] = BASE64
            .decode(s.trim())
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or(SealError::InvalidKey)?;
        Ok(SealingKey(PublicKey::from(bytes)))
    }

    pub fn to_base64(&self) -> String {
        BASE64.encode(self.0.as_bytes())
    }

    pub fn seal(&self, rng: &mut impl CryptoRngCore, plaintext: &[u8]) -> Result<Sealed, SealError> {
        self.0
            .seal(rng, plaintext)
            .map(|ct| Sealed(BASE64.encode(ct)))
            .map_err(|_| SealError::Seal)
    }
}

impl std::fmt::Debug for SealingKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SealingKey({})", self.to_base64())
    }
}

/// The offline private half. Only tooling and tests construct one.
pub struct OpeningKey(SecretKey);

impl OpeningKey {
    pub fn generate(rng: &mut impl CryptoRngCore) -> Self {
        OpeningKey(SecretKey::generate(rng))
    }

    pub fn from_base64(s: &str) -> Result<Self, SealError> {
        let bytes: [u8; 32] = BASE64
            .decode(s.trim())
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or(SealError::InvalidKey)?;
        Ok(OpeningKey(SecretKey::from(bytes)))
    }

    pub fn to_base64(&self) -> String {
        BASE64.encode(self.0.to_bytes())
    }

    pub fn sealing_key(&self) -> SealingKey {
        SealingKey(self.0.public_key())
    }

    pub fn open(&self, sealed: &Sealed) -> Result<Vec<u8>, SealError> {
        let ct = BASE64.decode(&sealed.0).map_err(|_| SealError::Open)?;
        self.0.unseal(&ct).map_err(|_| SealError::Open)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seal_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opening = OpeningKey::generate(&mut rng);
        let sealing = SealingKey::from_base64(&opening.sealing_key().to_base64()).unwrap();
        let blob = sealing.seal(&mut rng, b"+91 98450 00000").unwrap();
        assert!(!blob.0.contains("98450"));
        assert_eq!(opening.open(&blob).unwrap(), b"+91 98450 00000");

        let other = OpeningKey::generate(&mut rng);
        assert_eq!(other.open(&blob), Err(SealError::Open));
    }

    #[test]
    fn bad_key_text() {
        assert!(SealingKey::from_base64("abc").is_err());
    }
}
