use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use reid_core::ReidError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("malformed request: {0}")]
    BadRequest(String),

    #[error("unprocessable image: {0}")]
    WrongImageSize(String),

    #[error("task {0} not found")]
    TaskNotFound(u64),

    #[error("observation {0} has no stored image")]
    ObservationNotFound(u32),

    #[error("task {0} is already decided")]
    AlreadyDecided(u64),

    #[error("unknown individual_id {0}")]
    UnknownIndividual(u32),

    #[error("journal: {0}")]
    Journal(String),

    #[error(transparent)]
    Core(#[from] ReidError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest(_) | Self::UnknownIndividual(_) => StatusCode::BAD_REQUEST,
            Self::WrongImageSize(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::TaskNotFound(_) | Self::ObservationNotFound(_) => StatusCode::NOT_FOUND,
            Self::AlreadyDecided(_) => StatusCode::CONFLICT,
            Self::Journal(_) | Self::Core(_) | Self::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}
