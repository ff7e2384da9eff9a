//! HTTP front end: the device-facing ingest endpoints, the analytics
//! documents, and the routing endpoints the portal talks to.
//!
//! Device calls carry `device-id`, `timestamp` and `signature` headers.
//! Routing calls carry `Authorization: Bearer <token>`; the token's role
//! comes from `[portal.tokens]` in the platform config.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{ConnectInfo, FromRequestParts, Path, Query, State};
use axum::http::request::Parts;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use proxtrace_core::analytics::{
    daily_score_window, density_heatmap, hourly_contact_buckets, neighbourhood_tree, scan_progress,
    social_distancing_score,
};
use proxtrace_core::config::PortalRole;
use proxtrace_core::contact_tracing::{TraceError, TraceState, TraceSubmission};
use proxtrace_core::geohash;
use proxtrace_core::identity::OtpError;
use proxtrace_core::ingest::{GpsRequest, IngestError, LivelinessRequest, RegisterRequest, ReinstallRequest};
use proxtrace_core::platform::{Platform, PlatformError};
use proxtrace_core::wire::{DeviceId, SignedRequest};

const HOUR: u64 = 3600;
const DAY: u64 = 86_400;

pub const DEVICE_ID_HEADER: &str = "device-id";
pub const TIMESTAMP_HEADER: &str = "timestamp";
pub const SIGNATURE_HEADER: &str = "signature";

/// Error body: `{"error": "..."}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            log::error!("{}", self.message);
        }
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        ApiError::new(status, e.to_string())
    }
}

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        match e {
            PlatformError::Ingest(e) => e.into(),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl From<TraceError> for ApiError {
    fn from(e: TraceError) -> Self {
        let status = match &e {
            TraceError::IdentityMismatch
            | TraceError::NoPhoneOnRecord
            | TraceError::InvalidWindow
            | TraceError::WindowTooOld { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            TraceError::UnknownRequest(_) => StatusCode::NOT_FOUND,
            TraceError::InvalidTransition { .. } => StatusCode::CONFLICT,
            TraceError::Otp(OtpError::UnknownUser | OtpError::NoPhoneOnRecord) => StatusCode::UNPROCESSABLE_ENTITY,
            TraceError::Otp(_) => StatusCode::FORBIDDEN,
            TraceError::Edges(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone)]
pub struct AppState {
    pub platform: Arc<Platform>,
}

/// The three signing headers, parsed but not yet verified.
pub struct Signed(pub SignedRequest);

impl<S: Send + Sync> FromRequestParts<S> for Signed {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, Self::Rejection> {
        let h = |name: &str| {
            parts
                .headers
                .get(name)
                .and_then(|v| v.to_str().ok())
                .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, format!("missing {name} header")))
        };
        let device_id: DeviceId = h(DEVICE_ID_HEADER)?
            .parse()
            .map_err(|_| ApiError::new(StatusCode::UNAUTHORIZED, "malformed device-id header"))?;
        let timestamp: u64 = h(TIMESTAMP_HEADER)?
            .trim()
            .parse()
            .map_err(|_| ApiError::new(StatusCode::UNAUTHORIZED, "malformed timestamp header"))?;
        let signature = h(SIGNATURE_HEADER)?.to_string();
        Ok(Signed(SignedRequest {
            device_id,
            timestamp,
            signature,
        }))
    }
}

/// Portal caller, identified by bearer token.
pub struct Caller(pub PortalRole);

impl Caller {
    fn require(&self, allowed: &[PortalRole]) -> Result<(), ApiError> {
        if allowed.contains(&self.0) {
            Ok(())
        } else {
            Err(ApiError::new(StatusCode::FORBIDDEN, "role not allowed here"))
        }
    }

    fn label(&self) -> &'static str {
        match self.0 {
            PortalRole::HealthCenter => "health-center",
            PortalRole::AdvisoryBoard => "advisory-board",
            PortalRole::Ops => "ops",
        }
    }
}

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, Self::Rejection> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing bearer token"))?;
        state
            .platform
            .config
            .portal
            .tokens
            .get(token.trim())
            .map(|r| Caller(*r))
            .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unknown token"))
    }
}

pub fn router(platform: Arc<Platform>) -> Router {
    Router::new()
        .route("/register", post(register))
        .route("/reinstall", post(reinstall))
        .route("/contacts", post(add_contacts))
        .route("/gps", post(add_gps))
        .route("/liveliness", post(add_liveliness))
        .route("/notifications", get(notifications))
        .route("/analytics", get(analytics_manifest))
        .route("/analytics/contact-buckets", get(contact_buckets))
        .route("/analytics/neighbourhood", get(neighbourhood))
        .route("/analytics/heatmap", get(heatmap))
        .route("/analytics/score", get(score))
        .route("/analytics/scan-progress", get(scan_progress_doc))
        .route("/trace/submit", post(trace_submit))
        .route("/trace/queue", get(trace_queue))
        .route("/trace/{id}", get(trace_summary))
        .route("/trace/{id}/consent", post(trace_consent))
        .route("/trace/{id}/reissue-otp", post(trace_reissue))
        .route("/trace/{id}/decide", post(trace_decide))
        .route("/trace/{id}/result", get(trace_result))
        .route("/ops/liveliness-summary", get(ops_liveliness))
        .route("/ops/registrations", get(ops_registrations))
        .with_state(AppState { platform })
}

/// Throttling key for registration attempts: the peer address when known.
fn source(headers: &HeaderMap, peer: Option<&ConnectInfo<SocketAddr>>) -> String {
    if let Some(ConnectInfo(addr)) = peer {
        return addr.ip().to_string();
    }
    headers
        .get("x-forwarded-for")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.split(',').next())
        .map(|v| v.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

async fn register(
    State(s): State<AppState>,
    peer: Option<axum::Extension<ConnectInfo<SocketAddr>>>,
    headers: HeaderMap,
    Json(req): Json<RegisterRequest>,
) -> Result<Response, ApiError> {
    let reg = s.platform.ingest.register(&source(&headers, peer.as_deref()), &req)?;
    s.platform.save_identity()?;
    Ok((StatusCode::CREATED, Json(reg)).into_response())
}

async fn reinstall(
    State(s): State<AppState>,
    peer: Option<axum::Extension<ConnectInfo<SocketAddr>>>,
    headers: HeaderMap,
    Json(req): Json<ReinstallRequest>,
) -> Result<Response, ApiError> {
    let reg = s.platform.ingest.reinstall(&source(&headers, peer.as_deref()), &req)?;
    s.platform.save_identity()?;
    Ok((StatusCode::CREATED, Json(reg)).into_response())
}

async fn add_contacts(State(s): State<AppState>, Signed(req): Signed, body: Bytes) -> ApiResult<impl Serialize> {
    Ok(Json(s.platform.ingest.add_contacts(&req, &body)?))
}

async fn add_gps(
    State(s): State<AppState>,
    Signed(req): Signed,
    Json(gps): Json<GpsRequest>,
) -> ApiResult<impl Serialize> {
    Ok(Json(s.platform.ingest.add_gps(&req, &gps)?))
}

async fn add_liveliness(
    State(s): State<AppState>,
    Signed(req): Signed,
    Json(body): Json<LivelinessRequest>,
) -> ApiResult<impl Serialize> {
    Ok(Json(s.platform.ingest.add_liveliness(&req, &body)?))
}

async fn notifications(State(s): State<AppState>, Signed(req): Signed) -> ApiResult<impl Serialize> {
    Ok(Json(s.platform.ingest.poll_notifications(&req)?))
}

async fn analytics_manifest(State(s): State<AppState>, Signed(req): Signed) -> ApiResult<impl Serialize> {
    Ok(Json(s.platform.ingest.analytics_manifest(&req)?))
}

/// Verifies the caller and returns (device, now).
fn device_call(s: &AppState, req: &SignedRequest) -> Result<(DeviceId, u64), ApiError> {
    s.platform.ingest.authenticate(req)?;
    Ok((req.device_id, s.platform.ingest.now()))
}

async fn contact_buckets(State(s): State<AppState>, Signed(req): Signed) -> ApiResult<impl Serialize> {
    let (dev, now) = device_call(&s, &req)?;
    let from = (now / HOUR * HOUR).saturating_sub(23 * HOUR);
    let g = s.platform.graph(from, now + 1)?;
    Ok(Json(hourly_contact_buckets(&g, dev, now)))
}

async fn neighbourhood(State(s): State<AppState>, Signed(req): Signed) -> ApiResult<impl Serialize> {
    let (dev, now) = device_call(&s, &req)?;
    let g = s.platform.graph(now.saturating_sub(DAY), now + 1)?;
    Ok(Json(neighbourhood_tree(&g, dev).anonymized()))
}

#[derive(Debug, Deserialize)]
struct Center {
    lat: Option<f64>,
    lon: Option<f64>,
}

async fn heatmap(
    State(s): State<AppState>,
    Signed(req): Signed,
    Query(c): Query<Center>,
) -> Result<Response, ApiError> {
    let (dev, now) = device_call(&s, &req)?;
    let points = s.platform.ingest.gps_points();
    let center = match (c.lat, c.lon) {
        (Some(lat), Some(lon)) => {
            geohash::check_coordinates(lat, lon).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
            (lat, lon)
        }
        _ => {
            // The cell of the device's latest fix; the exact point is sealed.
            let Some(last) = points.iter().filter(|p| p.device_id == dev).max_by_key(|p| p.timestamp) else {
                return Err(ApiError::new(
                    StatusCode::NOT_FOUND,
                    "no location shared yet; pass lat and lon",
                ));
            };
            geohash::decode_bbox(&last.geohash7)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
                .center()
        }
    };
    Ok(Json(density_heatmap(&points, center, now)).into_response())
}

#[derive(Debug, Serialize)]
struct ScoreDoc {
    window_start: u64,
    window_end: u64,
    score: u8,
}

async fn score(State(s): State<AppState>, Signed(req): Signed) -> ApiResult<ScoreDoc> {
    let (dev, now) = device_call(&s, &req)?;
    let (from, to) = daily_score_window(now, s.platform.config.scoring.utc_offset_minutes);
    let params = s
        .platform
        .config
        .scoring
        .params()
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let g = s.platform.graph(from, to)?;
    Ok(Json(ScoreDoc {
        window_start: from,
        window_end: to,
        score: social_distancing_score(&g, dev, params).score,
    }))
}

async fn scan_progress_doc(State(s): State<AppState>, Signed(req): Signed) -> ApiResult<impl Serialize> {
    let (dev, now) = device_call(&s, &req)?;
    Ok(Json(scan_progress(&s.platform.ingest.liveliness_reports(), dev, now)))
}

async fn trace_submit(
    State(s): State<AppState>,
    caller: Caller,
    Json(mut sub): Json<TraceSubmission>,
) -> Result<Response, ApiError> {
    caller.require(&[PortalRole::HealthCenter])?;
    if sub.submitted_by.trim().is_empty() {
        sub.submitted_by = caller.label().into();
    }
    let req = s.platform.tracing.submit_trace(&sub)?;
    Ok((StatusCode::CREATED, Json(req.summary())).into_response())
}

#[derive(Debug, Deserialize)]
struct QueueFilter {
    state: Option<TraceState>,
}

async fn trace_queue(
    State(s): State<AppState>,
    caller: Caller,
    Query(f): Query<QueueFilter>,
) -> ApiResult<impl Serialize> {
    caller.require(&[PortalRole::HealthCenter, PortalRole::AdvisoryBoard])?;
    Ok(Json(s.platform.tracing.queue(f.state)))
}

async fn trace_summary(State(s): State<AppState>, caller: Caller, Path(id): Path<u64>) -> ApiResult<impl Serialize> {
    caller.require(&[PortalRole::HealthCenter, PortalRole::AdvisoryBoard])?;
    Ok(Json(s.platform.tracing.request(id)?.summary()))
}

#[derive(Debug, Deserialize)]
struct ConsentBody {
    otp: String,
}

async fn trace_consent(
    State(s): State<AppState>,
    caller: Caller,
    Path(id): Path<u64>,
    Json(body): Json<ConsentBody>,
) -> ApiResult<impl Serialize> {
    caller.require(&[PortalRole::HealthCenter])?;
    let state = s.platform.tracing.record_consent(id, &body.otp)?;
    Ok(Json(serde_json::json!({ "id": id, "state": state })))
}

async fn trace_reissue(State(s): State<AppState>, caller: Caller, Path(id): Path<u64>) -> ApiResult<impl Serialize> {
    caller.require(&[PortalRole::HealthCenter])?;
    Ok(Json(s.platform.tracing.reissue_otp(id)?))
}

#[derive(Debug, Deserialize)]
struct DecideBody {
    approve: bool,
    #[serde(default)]
    member: Option<String>,
}

async fn trace_decide(
    State(s): State<AppState>,
    caller: Caller,
    Path(id): Path<u64>,
    Json(body): Json<DecideBody>,
) -> ApiResult<impl Serialize> {
    caller.require(&[PortalRole::AdvisoryBoard])?;
    let by = body.member.unwrap_or_else(|| caller.label().into());
    let tracing = s.platform.tracing.clone();
    // An approval runs the search, which reads edge files.
    let req = tokio::task::spawn_blocking(move || tracing.decide_request(id, body.approve, &by))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(req.summary()))
}

async fn trace_result(State(s): State<AppState>, caller: Caller, Path(id): Path<u64>) -> ApiResult<impl Serialize> {
    caller.require(&[PortalRole::HealthCenter, PortalRole::AdvisoryBoard])?;
    Ok(Json(s.platform.tracing.result(id)?))
}

async fn ops_liveliness(State(s): State<AppState>, caller: Caller) -> ApiResult<impl Serialize> {
    caller.require(&[PortalRole::Ops])?;
    Ok(Json(s.platform.ingest.liveliness_summary()))
}

#[derive(Debug, Serialize)]
struct RegistrationsDoc {
    #[serde(flatten)]
    summary: proxtrace_core::identity::RegistrationSummary,
    unused_codes: usize,
    codes_by_day: BTreeMap<u64, usize>,
}

async fn ops_registrations(State(s): State<AppState>, caller: Caller) -> ApiResult<RegistrationsDoc> {
    caller.require(&[PortalRole::Ops])?;
    let codes = s.platform.identity.codes();
    let mut codes_by_day = BTreeMap::new();
    for c in &codes {
        *codes_by_day.entry(c.issued_at / DAY * DAY).or_insert(0) += 1;
    }
    Ok(Json(RegistrationsDoc {
        summary: s.platform.identity.registration_summary(),
        unused_codes: codes.iter().filter(|c| !c.used).count(),
        codes_by_day,
    }))
}

/// One pass of the periodic jobs: edge extraction, then the daily scores.
pub fn run_jobs_once(platform: &Platform) -> Result<(), PlatformError> {
    let reports = platform.preprocess_pending()?;
    for r in &reports {
        if !r.skipped.is_empty() {
            log::warn!("{}: skipped {} corrupt entries", r.csv_path.display(), r.skipped.len());
        }
    }
    platform.run_daily_scores()?;
    Ok(())
}

/// Runs [`run_jobs_once`] every `every` on the blocking pool.
pub fn spawn_jobs(platform: Arc<Platform>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            let p = platform.clone();
            match tokio::task::spawn_blocking(move || run_jobs_once(&p)).await {
                Ok(Err(e)) => log::error!("periodic jobs failed: {e}"),
                Err(e) => log::error!("periodic jobs panicked: {e}"),
                Ok(Ok(())) => {}
            }
        }
    })
}

/// Serves until ctrl-c.
pub async fn serve(platform: Arc<Platform>) -> std::io::Result<()> {
    let bind = platform.config.server.bind;
    // Extraction only touches closed segments, so polling more often than
    // the configured interval is harmless and keeps the score push timely.
    let every = Duration::from_secs(platform.config.ingest.preprocess_interval_secs.clamp(60, 600));
    let jobs = spawn_jobs(platform.clone(), every);
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let app = router(platform).into_make_service_with_connect_info::<SocketAddr>();
    let result = axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    jobs.abort();
    result
}
