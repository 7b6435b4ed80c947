//! Exact federated class-incremental learning on frozen features.
//!
//! Clients fit a regularized least-squares head on their own embeddings and
//! send the solution plus their Gram matrix. The server folds these into a
//! running knowledge matrix so that, after any number of rounds, the
//! recovered head equals the ridge solution on the union of all client data.

pub mod bench;
pub mod client;
pub mod experiment;
pub mod federation;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod partition;
pub mod registry;
pub mod server;
pub mod synth;
pub mod verify;

use thiserror::Error;

pub use client::{local_train, FeatureBundle, LocalUpdate};
pub use linalg::{LinalgError, Matrix};
pub use registry::{ClassId, ClassRegistry, EncoderMap, SplitResult};
pub use server::{AggregationMode, GlobalModel, ServerState};

/// Everything that can stop a run, grouped by exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Registry(#[from] registry::RegistryError),
    #[error(transparent)]
    Client(#[from] client::ClientError),
    #[error(transparent)]
    Server(#[from] server::ServerError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    Partition(#[from] partition::PartitionError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Format(#[from] io::FormatError),
    #[error(transparent)]
    File(#[from] io::FileError),
    #[error(transparent)]
    Protocol(#[from] io::ProtocolError),
    #[error(transparent)]
    Participation(#[from] federation::ParticipationError),
    #[error("{0}")]
    Config(String),
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VALIDATION: i32 = 1;
    pub const NUMERICAL: i32 = 2;
    pub const PROTOCOL: i32 = 3;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        use federation::ParticipationError as P;
        match self {
            Error::Linalg(_) => exit::NUMERICAL,
            Error::Client(e) => client_code(e),
            Error::Server(e) => server_code(e),
            Error::Oracle(oracle::OracleError::Linalg(_)) => exit::NUMERICAL,
            Error::Protocol(_) => exit::PROTOCOL,
            Error::Participation(P::Client(e)) => client_code(e),
            Error::Participation(P::Refused(io::AckStatus::NumericalFailure)) => exit::NUMERICAL,
            Error::Participation(_) => exit::PROTOCOL,
            _ => exit::VALIDATION,
        }
    }
}

fn client_code(e: &client::ClientError) -> i32 {
    match e {
        client::ClientError::Linalg(_) => exit::NUMERICAL,
        _ => exit::VALIDATION,
    }
}

fn server_code(e: &server::ServerError) -> i32 {
    match e {
        server::ServerError::Linalg(_) => exit::NUMERICAL,
        _ => exit::VALIDATION,
    }
}
