use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;
use viewfield::percept::ParseError;

#[derive(Debug, Error)]
pub enum ApiError {
    /// Malformed or invalid input. `offset` points into the offending string
    /// for target and metric syntax errors.
    #[error("{message}")]
    BadRequest {
        message: String,
        offset: Option<usize>,
    },

    #[error("{0}")]
    NotFound(String),

    /// Nothing loaded yet, or the request did not finish within the timeout.
    #[error("{0}")]
    Unavailable(String),

    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn bad(message: impl Into<String>) -> Self {
        ApiError::BadRequest {
            message: message.into(),
            offset: None,
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest { .. } => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<ParseError> for ApiError {
    fn from(e: ParseError) -> Self {
        ApiError::BadRequest {
            message: e.message,
            offset: Some(e.offset),
        }
    }
}

impl From<viewfield::Error> for ApiError {
    fn from(e: viewfield::Error) -> Self {
        use viewfield::Error as E;
        match e {
            E::Expr(p) => p.into(),
            E::UnknownBuilding(_) => ApiError::NotFound(e.to_string()),
            E::InvalidArgument(_)
            | E::Validation(_)
            | E::DegenerateCamera(_)
            | E::NonFinite { .. }
            | E::AtViewpoint { .. }
            | E::EmptyRegion(_) => ApiError::bad(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    offset: Option<usize>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let offset = match &self {
            ApiError::BadRequest { offset, .. } => *offset,
            _ => None,
        };
        if let ApiError::Internal(msg) = &self {
            log::error!("internal error: {msg}");
        }
        let message = self.to_string();
        let body = ErrorBody {
            error: &message,
            offset,
        };
        (self.status(), Json(body)).into_response()
    }
}
