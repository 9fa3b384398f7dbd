use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HyprError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HyprError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value{}", location(*.layer, *.neuron, *.step))]
    NonFinite {
        layer: Option<usize>,
        neuron: Option<usize>,
        step: Option<usize>,
    },

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn location(layer: Option<usize>, neuron: Option<usize>, step: Option<usize>) -> String {
    let mut parts = Vec::new();
    if let Some(l) = layer {
        parts.push(format!("layer {l}"));
    }
    if let Some(n) = neuron {
        parts.push(format!("neuron {n}"));
    }
    if let Some(s) = step {
        parts.push(format!("step {s}"));
    }
    if parts.is_empty() {
        String::new()
    } else {
        format!(" at {}", parts.join(", "))
    }
}

impl HyprError {
    pub fn config(msg: impl Into<String>) -> Self {
        HyprError::Config(msg.into())
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        HyprError::Dimension(msg.into())
    }

    pub fn non_finite() -> Self {
        HyprError::NonFinite {
            layer: None,
            neuron: None,
            step: None,
        }
    }

    /// Fills in missing location context on a numeric error.
    pub fn at(self, layer: usize, neuron: Option<usize>, step: usize) -> Self {
        match self {
            HyprError::NonFinite {
                layer: l,
                neuron: n,
                step: s,
            } => HyprError::NonFinite {
                layer: l.or(Some(layer)),
                neuron: n.or(neuron),
                step: s.or(Some(step)),
            },
            other => other,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HyprError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by configuration or input data rather than
    /// by the numerics of a run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HyprError::Config(_)
                | HyprError::Dimension(_)
                | HyprError::ConfigLine { .. }
                | HyprError::Parse { .. }
                | HyprError::Checksum(_)
                | HyprError::Version { .. }
                | HyprError::EmptyDataset
                | HyprError::Io { .. }
        )
    }
}
