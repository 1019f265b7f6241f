use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch in {context}: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    ShapeMismatch {
        context: &'static str,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },

    #[error("shape mismatch for client {client_id}: {detail}")]
    ClientShape { client_id: usize, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("infeasible partition: {clients} clients x {min_per_client} minimum exceeds {samples} samples")]
    InfeasiblePartition {
        clients: usize,
        min_per_client: usize,
        samples: usize,
    },

    #[error("partition retries exhausted after {attempts} attempts: could not give every client at least {min_per_client} samples")]
    PartitionRetriesExhausted {
        attempts: usize,
        min_per_client: usize,
    },

    #[error("public set has no labels but warm-up requires them")]
    MissingLabels,

    #[error("every client is flagged; no trusted contributors remain")]
    AllClientsFlagged,

    #[error("no contributing clients for aggregation")]
    NoContributors,
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
