use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("invalid world spec: {0}")]
    InvalidWorld(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("segmentation produced no patches ({0}); lower the mask threshold")]
    EmptySegmentation(String),

    #[error("only {found} clusters survived (need {needed}); census: {census}")]
    TooFewConcepts {
        found: usize,
        needed: usize,
        census: String,
    },

    #[error("incompatible feature dimension: bank has {bank}, teacher has {teacher}")]
    IncompatibleBank { bank: usize, teacher: usize },

    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("concept {concept} of class {class} is not detected")]
    NotDetected { class: usize, concept: usize },

    #[error("unknown class {0}")]
    UnknownClass(usize),

    #[error("unknown format {0:?}")]
    UnknownFormat(String),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
