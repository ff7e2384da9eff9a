//! Proximity contact tracing: device identity, the binary upload format,
//! ingestion, temporal contact graphs, analytics and tracing.

pub mod analytics;
pub mod clock;
pub mod config;
pub mod contact_tracing;
pub mod edges;
pub mod geohash;
pub mod identity;
pub mod ingest;
pub mod platform;
pub mod rssi;
pub mod sealing;
pub mod simfleet;
pub mod tempgraph;
pub mod wire;
