use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: {what} ({value}) is not divisible by {divisor}")]
    Divisibility {
        op: &'static str,
        what: &'static str,
        value: usize,
        divisor: usize,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar output, got shape {0}")]
    NonScalar(Shape),

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("variable was not recorded on this tape")]
    NotRecorded,

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: [usize; 4],
        found: [usize; 4],
    },

    #[error("{path}:{line}: {msg}")]
    Label {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("class id {class_id} outside configured range 0..{num_classes}")]
    ClassOutOfRange { class_id: usize, num_classes: usize },

    #[error("loss component `{component}` is not finite (box={box_loss}, obj={obj_loss}, cls={cls_loss})")]
    LossNotFinite {
        component: &'static str,
        box_loss: f64,
        obj_loss: f64,
        cls_loss: f64,
    },

    #[error("training diverged at step {step}: total loss {total}")]
    Diverged { step: usize, total: f64 },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Self::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Self::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    /// NaN/Inf or divergence, as opposed to bad input or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::NonFinite { .. } | Self::LossNotFinite { .. } | Self::Diverged { .. }
        )
    }
}

pub(crate) fn ensure_divisible(
    op: &'static str,
    what: &'static str,
    value: usize,
    divisor: usize,
) -> Result<()> {
    if divisor == 0 || value % divisor != 0 {
        return Err(Error::Divisibility {
            op,
            what,
            value,
            divisor,
        });
    }
    Ok(())
}
