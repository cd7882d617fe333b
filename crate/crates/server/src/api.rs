//! JSON API served to the selection UI.
//!
//! | route                     | method | body / result                                  |
//! |---------------------------|--------|------------------------------------------------|
//! | `/api/session/round`      | GET    | open round, started on demand                  |
//! | `/api/image/{id}`         | GET    | anonymized PNG of one candidate                |
//! | `/api/session/select`     | POST   | `{"round_id", "candidate_id"}` -> loss + stats |
//! | `/api/session/stats`      | GET    | selection shares, loss history, timing         |
//!
//! Every numeric value in a response body is a decimal string. Every non-2xx
//! response carries one [`ApiError`] body.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, PoisonError, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use albf_core::beamform::Method;
use albf_core::session::{
    selection_criteria_text, CandidateSet, FrameSource, Session, SessionError, SessionStats, TimingSummary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    BadRound,
    UnknownCandidate,
    Sequencing,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError { code, message: message.into() }
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(ErrorCode::Internal, message.to_string())
    }

    pub fn status(&self) -> StatusCode {
        match self.code {
            ErrorCode::BadRound | ErrorCode::Sequencing => StatusCode::CONFLICT,
            ErrorCode::UnknownCandidate => StatusCode::NOT_FOUND,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<albf_core::Error> for ApiError {
    fn from(e: albf_core::Error) -> Self {
        match e {
            albf_core::Error::Session(s) => {
                let code = match s {
                    SessionError::BadRound { .. } => ErrorCode::BadRound,
                    SessionError::UnknownCandidate(_) => ErrorCode::UnknownCandidate,
                    SessionError::Sequencing(_) => ErrorCode::Sequencing,
                };
                ApiError::new(code, s.to_string())
            }
            other => ApiError::internal(other),
        }
    }
}

impl<T> From<PoisonError<T>> for ApiError {
    fn from(_: PoisonError<T>) -> Self {
        ApiError::internal("session state is unavailable after an earlier failure")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateView {
    pub id: String,
    pub image_url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundView {
    pub round_id: String,
    pub state: String,
    pub candidates: Vec<CandidateView>,
    pub criteria: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareView {
    pub method: String,
    pub count: String,
    pub percent: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossView {
    pub round_id: String,
    pub loss: String,
    pub step_skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingView {
    pub count: String,
    pub mean_s: String,
    pub sd_s: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsView {
    pub rounds: String,
    pub shares: Vec<ShareView>,
    pub losses: Vec<LossView>,
    pub train_timing: Option<TimingView>,
    pub round_timing: Option<TimingView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevealView {
    pub id: String,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectView {
    pub round_id: String,
    pub method: String,
    pub loss: String,
    pub step_skipped: bool,
    pub checkpoint_id: String,
    /// Method of every candidate of the closed round.
    pub revealed: Vec<RevealView>,
    pub stats: StatsView,
}

fn timing_view(t: &TimingSummary) -> TimingView {
    TimingView { count: t.count.to_string(), mean_s: t.mean_s.to_string(), sd_s: t.sd_s.to_string() }
}

impl From<&SessionStats> for StatsView {
    fn from(s: &SessionStats) -> Self {
        StatsView {
            rounds: s.rounds.to_string(),
            shares: s
                .shares
                .iter()
                .map(|m| ShareView {
                    method: m.method.tag().to_string(),
                    count: m.count.to_string(),
                    percent: m.percent.to_string(),
                })
                .collect(),
            losses: s
                .losses
                .iter()
                .map(|l| LossView {
                    round_id: l.round_id.to_string(),
                    loss: l.loss.to_string(),
                    step_skipped: l.step_skipped,
                })
                .collect(),
            train_timing: s.train_timing.as_ref().map(timing_view),
            round_timing: s.round_timing.as_ref().map(timing_view),
        }
    }
}

fn round_view(set: &CandidateSet) -> RoundView {
    RoundView {
        round_id: set.round_id.to_string(),
        state: "awaiting_selection".into(),
        candidates: set
            .candidates
            .iter()
            .map(|c| CandidateView { id: c.id.clone(), image_url: format!("/api/image/{}", c.id) })
            .collect(),
        criteria: selection_criteria_text().iter().map(|s| s.to_string()).collect(),
    }
}

struct Driver {
    session: Session,
    source: Box<dyn FrameSource>,
}

struct Shared {
    driver: Mutex<Driver>,
    /// PNGs of the most recent round, by candidate id.
    images: RwLock<HashMap<String, Arc<Vec<u8>>>>,
}

/// Server state: one session fed by one frame source.
#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    pub fn new(session: Session, source: Box<dyn FrameSource>) -> Self {
        AppState {
            shared: Arc::new(Shared {
                driver: Mutex::new(Driver { session, source }),
                images: RwLock::new(HashMap::new()),
            }),
        }
    }

    /// The open round, or a new one from the next frame.
    pub fn round(&self) -> Result<RoundView, ApiError> {
        let mut driver = self.shared.driver.lock()?;
        if let Some(set) = driver.session.current() {
            return Ok(round_view(&set));
        }
        let Driver { session, source } = &mut *driver;
        let set = session
            .next_round(source.as_mut())?
            .ok_or_else(|| ApiError::new(ErrorCode::Sequencing, "the frame source is exhausted; the session is over"))?;
        let images = set.candidates.iter().map(|c| (c.id.clone(), c.png.clone())).collect();
        *self.shared.images.write()? = images;
        Ok(round_view(&set))
    }

    pub fn image(&self, id: &str) -> Result<Arc<Vec<u8>>, ApiError> {
        self.shared
            .images
            .read()?
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownCandidate, format!("no image with id {id}")))
    }

    pub fn select(&self, round_id: u64, candidate_id: &str) -> Result<SelectView, ApiError> {
        let mut driver = self.shared.driver.lock()?;
        let revealed: Vec<RevealView> = match driver.session.current() {
            Some(set) if set.round_id == round_id => set
                .candidates
                .iter()
                .filter_map(|c| {
                    driver.session.reveal(&c.id).map(|m| RevealView { id: c.id.clone(), method: m.tag().into() })
                })
                .collect(),
            _ => Vec::new(),
        };
        let out = driver.session.submit_selection(round_id, candidate_id)?;
        Ok(SelectView {
            round_id: out.round_id.to_string(),
            method: out.method.tag().into(),
            loss: out.loss.to_string(),
            step_skipped: out.step_skipped,
            checkpoint_id: out.checkpoint_id,
            revealed,
            stats: StatsView::from(&out.stats),
        })
    }

    pub fn stats(&self) -> Result<StatsView, ApiError> {
        Ok(StatsView::from(&self.shared.driver.lock()?.session.stats()))
    }

    /// Method behind a candidate of the open round; server-side only.
    pub fn reveal(&self, id: &str) -> Option<Method> {
        self.shared.driver.lock().ok()?.session.reveal(id)
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn get_round(State(state): State<AppState>) -> Result<Json<RoundView>, ApiError> {
    blocking(move || state.round()).await.map(Json)
}

async fn get_image(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let png = state.image(&id)?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], png.as_ref().clone()).into_response())
}

/// Accepts the round id as a decimal string or a JSON integer.
fn parse_select(body: &[u8]) -> Result<(u64, String), ApiError> {
    let value: serde_json::Value = serde_json::from_slice(body).unwrap_or(serde_json::Value::Null);
    let round_id = match value.get("round_id") {
        Some(serde_json::Value::String(s)) => s.trim().parse::<u64>().ok(),
        Some(serde_json::Value::Number(n)) => n.as_u64(),
        _ => None,
    }
    .ok_or_else(|| ApiError::new(ErrorCode::BadRound, "request needs a round_id (decimal string)"))?;
    let candidate = value
        .get("candidate_id")
        .and_then(|v| v.as_str())
        .ok_or_else(|| ApiError::new(ErrorCode::UnknownCandidate, "request needs a candidate_id string"))?;
    Ok((round_id, candidate.to_string()))
}

/// A body that cannot be parsed is rejected with 400 before the session sees it.
async fn post_select(State(state): State<AppState>, body: Bytes) -> Response {
    let (round_id, candidate) = match parse_select(&body) {
        Ok(v) => v,
        Err(e) => return (StatusCode::BAD_REQUEST, Json(e)).into_response(),
    };
    match blocking(move || state.select(round_id, &candidate)).await {
        Ok(v) => Json(v).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn get_stats(State(state): State<AppState>) -> Result<Json<StatsView>, ApiError> {
    blocking(move || state.stats()).await.map(Json)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/session/round", get(get_round))
        .route("/api/image/{id}", get(get_image))
        .route("/api/session/select", post(post_select))
        .route("/api/session/stats", get(get_stats))
        .fallback(|| async { (StatusCode::NOT_FOUND, Json(ApiError::internal("no such endpoint"))) })
        .method_not_allowed_fallback(|| async {
            (StatusCode::METHOD_NOT_ALLOWED, Json(ApiError::internal("method not allowed on this endpoint")))
        })
        .with_state(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_body_accepts_string_or_integer_round() {
        assert_eq!(parse_select(br#"{"round_id":"3","candidate_id":"ab"}"#).unwrap(), (3, "ab".into()));
        assert_eq!(parse_select(br#"{"round_id":3,"candidate_id":"ab"}"#).unwrap(), (3, "ab".into()));
        assert_eq!(parse_select(b"not json").unwrap_err().code, ErrorCode::BadRound);
        assert_eq!(parse_select(br#"{"round_id":"x","candidate_id":"ab"}"#).unwrap_err().code, ErrorCode::BadRound);
        assert_eq!(parse_select(br#"{"round_id":"1"}"#).unwrap_err().code, ErrorCode::UnknownCandidate);
    }

    #[test]
    fn error_codes_serialize_in_screaming_case() {
        let e = ApiError::new(ErrorCode::UnknownCandidate, "x");
        assert_eq!(serde_json::to_value(&e).unwrap()["code"], "UNKNOWN_CANDIDATE");
        assert_eq!(e.status(), StatusCode::NOT_FOUND);
    }
}
