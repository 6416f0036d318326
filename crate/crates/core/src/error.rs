use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("scenario `{scenario}` is over-constrained: object {object} not placed after {attempts} attempts")]
    PlacementFailed {
        scenario: String,
        object: usize,
        attempts: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown skill `{0}`")]
    UnknownSkill(String),

    #[error("unsolvable layout: {0}")]
    Unsolvable(String),

    #[error("retention rate {rate:.3} below 0.5 ({retained}/{attempted} episodes succeeded)")]
    LowRetention {
        rate: f64,
        retained: usize,
        attempted: usize,
    },

    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("divergent return during skill training: {0}")]
    Divergent(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
