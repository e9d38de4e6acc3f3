use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] diffinfo::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest check failed: {0}")]
    Manifest(String),
    #[error("{context}: {source}")]
    Cell {
        context: String,
        #[source]
        source: diffinfo::Error,
    },
}

impl CliError {
    /// Process exit status: 2 for configuration problems, 3 for numerical
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use diffinfo::Error as E;
        let numeric = |e: &E| {
            matches!(
                e,
                E::NonFinite { .. } | E::Divergence { .. } | E::NotPositiveDefinite(_) | E::Singular(_)
            )
        };
        match self {
            CliError::Config(_) => 2,
            CliError::Model(E::InvalidParameter { .. } | E::DimensionMismatch { .. }) => 2,
            CliError::Model(e) | CliError::Cell { source: e, .. } if numeric(e) => 3,
            _ => 1,
        }
    }

    pub(crate) fn in_cell(context: impl Into<String>) -> impl FnOnce(diffinfo::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Cell { context, source }
    }
}
