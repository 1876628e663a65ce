use thiserror::Error;

/// Failure of a single transport attempt.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("image unresolvable: {uri}: {reason}")]
    Image { uri: String, reason: String },
}

impl TransportError {
    /// 429, 5xx, timeouts and connection failures are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            TransportError::Timeout | TransportError::Connect(_) => true,
            TransportError::Protocol(_) | TransportError::Image { .. } => false,
        }
    }

    pub fn is_auth(&self) -> bool {
        matches!(self, TransportError::Status { status: 401 | 403, .. })
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ChatError {
    #[error("backend {backend} unreachable after {attempts} attempts: {last}")]
    BackendUnreachable {
        backend: String,
        attempts: u32,
        last: String,
    },
    #[error("backend {backend} rejected credentials: {detail}")]
    AuthRejected { backend: String, detail: String },
    #[error("image unresolvable: {uri}: {reason}")]
    ImageUnresolvable { uri: String, reason: String },
    #[error("backend {backend} lacks capability {capability}")]
    CapabilityMissing { backend: String, capability: String },
    #[error("backend {backend} request failed: {detail}")]
    RequestRejected { backend: String, detail: String },
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("invalid generation params: {0}")]
    InvalidParams(String),
    #[error("invalid backend descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("cache I/O: {0}")]
    Cache(String),
}
