use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Map, Value};

use brickseq::Error;

/// A JSON error response: `{"ok": false, "error": kind, "message": ..}`
/// plus any route-specific fields.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
    pub extra: Map<String, Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self { status, kind, message: message.into(), extra: Map::new() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", message)
    }

    pub fn conflict(kind: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, kind, message)
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::InvalidChoice(_) => Self::conflict("InvalidChoice", message),
            Error::NoValidCandidate => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "NoValidCandidate", message),
            Error::UnknownPart(_)
            | Error::InvalidModel(_)
            | Error::NoValidOrdering(_)
            | Error::MalformedStream(_)
            | Error::Json(_) => Self::bad_request(message),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "ok": false, "error": self.kind, "message": self.message });
        if let Value::Object(map) = &mut body {
            map.extend(self.extra);
        }
        (self.status, Json(body)).into_response()
    }
}
