//! Platform configuration file (TOML).
//!
//! Every section is optional; missing keys take the documented defaults.
//! Secrets are referenced, never embedded, except through the explicit
//! `inline` form intended for local development.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::ScoreParams;
use crate::tempgraph::ContactPredicate;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serializing config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
    #[error("invalid value for {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

/// Where a secret comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecretRef {
    Env(String),
    File(PathBuf),
    Inline(String),
}

impl SecretRef {
    pub fn resolve(&self) -> Result<String, ConfigError> {
        match self {
            SecretRef::Env(name) => std::env::var(name).map_err(|_| ConfigError::MissingEnv(name.clone())),
            SecretRef::File(path) => std::fs::read_to_string(path)
                .map(|s| s.trim_end_matches(['\n', '\r']).to_string())
                .map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                }),
            SecretRef::Inline(v) => Ok(v.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    pub data_dir: PathBuf,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1:8080".parse().expect("static address"),
            data_dir: PathBuf::from("data"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecretsConfig {
    pub device_salt: SecretRef,
    pub phone_salt: SecretRef,
    /// Base64 X25519 public key used to seal phone numbers and coordinates.
    pub sealing_key: SecretRef,
}

impl Default for SecretsConfig {
    fn default() -> Self {
        SecretsConfig {
            device_salt: SecretRef::Env("PROXTRACE_DEVICE_SALT".into()),
            phone_salt: SecretRef::Env("PROXTRACE_PHONE_SALT".into()),
            sealing_key: SecretRef::Env("PROXTRACE_SEALING_KEY".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuthConfig {
    pub freshness_window_secs: u64,
}

impl Default for AuthConfig {
    fn default() -> Self {
        AuthConfig {
            freshness_window_secs: crate::wire::DEFAULT_FRESHNESS_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentityConfig {
    pub invite_expiry_days: u64,
    pub max_failed_registrations_per_day: u32,
    pub otp_validity_secs: u64,
    pub otp_attempts: u8,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        IdentityConfig {
            invite_expiry_days: 30,
            max_failed_registrations_per_day: 10,
            otp_validity_secs: 600,
            otp_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// Length of one binary log segment; segments are aligned to multiples of it.
    pub segment_secs: u64,
    pub preprocess_interval_secs: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            segment_secs: 7200,
            preprocess_interval_secs: 7200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub delta: i8,
    pub min_contact_minutes: u32,
    pub background_minutes: u32,
    /// Offset of local time from UTC; the daily score runs at local midnight.
    pub utc_offset_minutes: i32,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            delta: -78,
            min_contact_minutes: 15,
            background_minutes: 240,
            utc_offset_minutes: 330,
        }
    }
}

impl ScoringConfig {
    pub fn params(&self) -> Result<ScoreParams, ConfigError> {
        ScoreParams::new(self.delta, self.min_contact_minutes, self.background_minutes).map_err(|e| {
            ConfigError::Invalid {
                field: "scoring",
                reason: e.to_string(),
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProximityAlertConfig {
    pub trigger_count: usize,
    pub privacy_floor: usize,
    pub cooldown_secs: u64,
}

impl Default for ProximityAlertConfig {
    fn default() -> Self {
        ProximityAlertConfig {
            trigger_count: 5,
            privacy_floor: 3,
            cooldown_secs: 3600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TracingConfig {
    pub delta: i8,
    pub min_contact_minutes: u32,
    pub max_lookback_days: u64,
    pub suffix_len: usize,
}

impl Default for TracingConfig {
    fn default() -> Self {
        TracingConfig {
            delta: -78,
            min_contact_minutes: 15,
            max_lookback_days: 30,
            suffix_len: 4,
        }
    }
}

impl TracingConfig {
    pub fn predicate(&self) -> ContactPredicate {
        ContactPredicate {
            delta: self.delta,
            min_minutes: self.min_contact_minutes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyticsEndpoint {
    pub name: String,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticsConfig {
    pub endpoints: Vec<AnalyticsEndpoint>,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        let ep = |name: &str, url: &str| AnalyticsEndpoint {
            name: name.into(),
            url: url.into(),
        };
        AnalyticsConfig {
            endpoints: vec![
                ep("heatmap", "/analytics/heatmap"),
                ep("neighbourhood-tree", "/analytics/neighbourhood"),
                ep("contact-buckets", "/analytics/contact-buckets"),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PortalRole {
    HealthCenter,
    AdvisoryBoard,
    Ops,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PortalConfig {
    /// Static bearer token → role.
    pub tokens: BTreeMap<String, PortalRole>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatformConfig {
    pub server: ServerConfig,
    pub secrets: SecretsConfig,
    pub auth: AuthConfig,
    pub identity: IdentityConfig,
    pub ingest: IngestConfig,
    pub scoring: ScoringConfig,
    pub proximity_alert: ProximityAlertConfig,
    pub tracing: TracingConfig,
    pub analytics: AnalyticsConfig,
    pub portal: PortalConfig,
}

impl PlatformConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PlatformConfig = toml::from_str(text)?;
        cfg.scoring.params()?;
        if cfg.ingest.segment_secs == 0 {
            return Err(ConfigError::Invalid {
                field: "ingest.segment_secs",
                reason: "must be positive".into(),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml()?).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PlatformConfig::from_toml("").unwrap();
        let p = cfg.scoring.params().unwrap();
        assert_eq!((p.delta, p.min_contact_minutes, p.background_minutes), (-78, 15, 240));
        assert_eq!(cfg.analytics.endpoints.len(), 3);
        assert_eq!(cfg.auth.freshness_window_secs, 300);
        assert_eq!(cfg.identity.max_failed_registrations_per_day, 10);
    }

    #[test]
    fn secrets_and_overrides() {
        let cfg = PlatformConfig::from_toml(
            r#"
            [secrets]
            device_salt = { inline = "s1" }
            phone_salt = { env = "SOME_UNSET_VARIABLE_FOR_TEST" }
            sealing_key = { file = "/nonexistent/key" }

            [scoring]
            delta = -60
            min_contact_minutes = 30
            background_minutes = 180

            [analytics]
            endpoints = []

            [portal.tokens]
            board-token = "advisory-board"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.secrets.device_salt.resolve().unwrap(), "s1");
        assert!(matches!(
            cfg.secrets.phone_salt.resolve(),
            Err(ConfigError::MissingEnv(_))
        ));
        assert!(cfg.secrets.sealing_key.resolve().is_err());
        assert_eq!(cfg.scoring.params().unwrap().delta, -60);
        assert!(cfg.analytics.endpoints.is_empty());
        assert_eq!(cfg.portal.tokens["board-token"], PortalRole::AdvisoryBoard);
        let again = PlatformConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_score_params_rejected() {
        let err = PlatformConfig::from_toml("[scoring]\nmin_contact_minutes = 300\n");
        assert!(matches!(err, Err(ConfigError::Invalid { .. })));
    }
}
