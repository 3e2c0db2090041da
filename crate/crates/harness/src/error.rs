use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: cpl_core::Error,
    },
}

impl HarnessError {
    pub fn core(context: impl Into<String>) -> impl FnOnce(cpl_core::Error) -> Self {
        let context = context.into();
        move |source| HarnessError::Core { context, source }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use cpl_core::Error as E;
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Core { source, .. } => match source {
                E::Parameter(_) => 2,
                E::NonFinite { .. } | E::Numeric { .. } => 4,
                E::Contract(_) => 1,
                _ => 3,
            },
        }
    }
}

impl From<cpl_core::Error> for HarnessError {
    fn from(source: cpl_core::Error) -> Self {
        HarnessError::Core {
            context: "core".into(),
            source,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> HarnessError {
    HarnessError::Data(format!("{}: {e}", path.display()))
}
