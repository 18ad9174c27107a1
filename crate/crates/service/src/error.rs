use thiserror::Error;

/// Failures surfaced to API clients and the command line.
#[derive(Debug, Error)]
pub enum ServiceError {
    /// Bad input from the caller: undecodable image, invalid parameter,
    /// malformed upload.
    #[error("{0}")]
    BadRequest(String),

    #[error("upload exceeds the {limit}-byte limit")]
    PayloadTooLarge { limit: usize },

    #[error("model not loaded yet")]
    NotReady,

    #[error("{0}")]
    NotFound(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::BadRequest(_) => 400,
            ServiceError::NotFound(_) => 404,
            ServiceError::PayloadTooLarge { .. } => 413,
            ServiceError::NotReady => 503,
            ServiceError::Internal(_) => 500,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::PayloadTooLarge { .. } => "payload_too_large",
            ServiceError::NotReady => "not_ready",
            ServiceError::Internal(_) => "internal",
        }
    }

    /// Whether the failure is the caller's fault (exit code 1) rather than
    /// ours (exit code 2).
    pub fn is_user_error(&self) -> bool {
        !matches!(self, ServiceError::Internal(_))
    }
}

impl From<pavescan::Error> for ServiceError {
    fn from(e: pavescan::Error) -> Self {
        use pavescan::Error as E;
        match e {
            E::Invalid(_) | E::Config(_) | E::Image { .. } | E::Label(_) | E::Checkpoint(_) | E::Io { .. } => {
                ServiceError::BadRequest(e.to_string())
            }
            E::Tensor(_) | E::NonFiniteLoss { .. } => ServiceError::Internal(e.to_string()),
        }
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;
