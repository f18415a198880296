use recall_core::domain::DomainError;
use recall_core::model::ModelError;
use recall_core::policy::PolicyError;
use recall_core::testmode::TestModeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("startup failed for {path}: {reason}")]
    Startup { path: String, reason: String },
    #[error("cannot bind {addr}: {reason}")]
    Bind { addr: String, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("unknown card {0}")]
    UnknownCard(String),
    #[error("record at {record} precedes the user's last study at {last}")]
    OutOfOrderTimestamp { last: i64, record: i64 },
    #[error("no candidate cards")]
    EmptyCandidates,
    #[error("{0}")]
    PhaseViolation(String),
    #[error("no test-mode session for user {0}")]
    NoSession(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("log write failed: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Startup { .. } => "startup",
            Self::Bind { .. } => "bind",
            Self::Config(_) => "config",
            Self::UnknownUser(_) => "unknown_user",
            Self::UnknownCard(_) => "unknown_card",
            Self::OutOfOrderTimestamp { .. } => "out_of_order_timestamp",
            Self::EmptyCandidates => "empty_candidates",
            Self::PhaseViolation(_) => "phase_violation",
            Self::NoSession(_) => "no_test_session",
            Self::InvalidRequest(_) => "invalid_request",
            Self::Model(_) => "model_error",
            Self::Io(_) => "io_error",
        }
    }
}

impl From<PolicyError> for ServiceError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::EmptyCandidates => Self::EmptyCandidates,
            PolicyError::InvalidConfig(m) => Self::InvalidRequest(m),
            PolicyError::Model(m) => Self::Model(m),
        }
    }
}

impl From<TestModeError> for ServiceError {
    fn from(e: TestModeError) -> Self {
        match e {
            TestModeError::InvalidTestSet(_) => Self::InvalidRequest(e.to_string()),
            TestModeError::PhaseViolation(m) => Self::PhaseViolation(m),
        }
    }
}

impl From<DomainError> for ServiceError {
    fn from(e: DomainError) -> Self {
        match e {
            DomainError::OutOfOrderTimestamp { last, record } => Self::OutOfOrderTimestamp {
                last: last.seconds(),
                record: record.seconds(),
            },
            other => Self::InvalidRequest(other.to_string()),
        }
    }
}
