use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use maskfit_core::api::ErrorBody;
use maskfit_core::Error;

/// An HTTP status plus the JSON error body.
#[derive(Debug, thiserror::Error)]
#[error("{status}: {}", body.error)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: message.into(),
                field: None,
                rule: None,
            },
        }
    }

    pub fn not_found(kind: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {kind} `{id}`"))
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    pub fn internal(e: impl std::fmt::Display) -> Self {
        tracing::error!(error = %e, "internal error");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::Validation { field, rule, .. } => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: ErrorBody {
                    error: message,
                    field: Some(field),
                    rule: Some(rule),
                },
            },
            Error::Format { .. }
            | Error::Truncated { .. }
            | Error::Geometry(_)
            | Error::Shape(_)
            | Error::Argument(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, message),
            _ => Self::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
