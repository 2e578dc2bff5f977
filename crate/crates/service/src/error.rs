//! JSON error bodies: `{ "error": code, "message": text }`.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use delta_recourse::delta::DeltaError;
use delta_recourse::explain::ExplainError;
use delta_recourse::preprocess::PreprocessError;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, error: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                message: message.into(),
            },
        }
    }

    /// Library errors render as `Code: message`; split that into the body.
    fn from_display(status: StatusCode, err: &dyn std::fmt::Display) -> Self {
        let text = err.to_string();
        match text.split_once(": ") {
            Some((code, msg)) if !code.contains(' ') => Self::new(status, code, msg),
            _ => Self::new(status, "Error", text),
        }
    }

    pub fn not_found(error: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, error, message)
    }

    pub fn bad_request(error: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<PreprocessError> for ApiError {
    fn from(e: PreprocessError) -> Self {
        Self::from_display(StatusCode::BAD_REQUEST, &e)
    }
}

impl From<DeltaError> for ApiError {
    fn from(e: DeltaError) -> Self {
        let status = match e {
            DeltaError::FingerprintMismatch { .. } => StatusCode::CONFLICT,
            DeltaError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::from_display(status, &e)
    }
}

impl From<ExplainError> for ApiError {
    fn from(e: ExplainError) -> Self {
        let status = match e {
            ExplainError::InfeasibleConstraints(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ExplainError::FingerprintMismatch { .. } => StatusCode::CONFLICT,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::from_display(status, &e)
    }
}

impl From<axum::extract::rejection::JsonRejection> for ApiError {
    fn from(e: axum::extract::rejection::JsonRejection) -> Self {
        Self::bad_request("InvalidRequest", e.body_text())
    }
}

impl From<axum::extract::rejection::QueryRejection> for ApiError {
    fn from(e: axum::extract::rejection::QueryRejection) -> Self {
        Self::bad_request("InvalidRequest", e.body_text())
    }
}
