use std::fmt;

/// Exit status classes: bad input or flags (2) versus failures while running (1).
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

pub trait Classify<T> {
    /// Marks an error as a validation failure.
    fn invalid(self) -> CliResult<T>;
    fn invalid_ctx(self, ctx: impl fmt::Display) -> CliResult<T>;
    /// Marks an error as a runtime failure with context.
    fn runtime(self, ctx: impl fmt::Display) -> CliResult<T>;
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: std::error::Error + Send + Sync + 'static,
{
    fn invalid(self) -> CliResult<T> {
        self.map_err(|e| Failure::Validation(e.into()))
    }

    fn invalid_ctx(self, ctx: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| Failure::Validation(anyhow::Error::new(e).context(ctx.to_string())))
    }

    fn runtime(self, ctx: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| Failure::Runtime(anyhow::Error::new(e).context(ctx.to_string())))
    }
}

pub fn invalid<T>(msg: impl fmt::Display) -> CliResult<T> {
    Err(Failure::Validation(anyhow::anyhow!("{msg}")))
}
