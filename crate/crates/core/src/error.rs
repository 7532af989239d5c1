use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("instruction `{instr}`: {message}")]
    Semantic { instr: String, message: String },
    #[error("cycle detected through instructions: {}", ids.join(", "))]
    Cycle { ids: Vec<String> },
    #[error("unknown instruction `{0}`")]
    UnknownInstruction(String),
}

impl IrError {
    pub fn semantic(instr: &str, message: impl Into<String>) -> Self {
        IrError::Semantic {
            instr: instr.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PerfLibError {
    #[error("malformed performance record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("performance library I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Failures of the block simulator. Every variant is a pipeline bug, never a
/// user error.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("missing input for parameter `{0}`")]
    MissingInput(String),
    #[error("input `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("output `{instr}` element {element} written twice")]
    DoubleWrite { instr: String, element: usize },
    #[error("output `{instr}` element {element} never written")]
    Uncovered { instr: String, element: usize },
    #[error("stale shared read of `{instr}` at offset {offset}: buffer holds `{holder}`")]
    StaleRead {
        instr: String,
        offset: usize,
        holder: String,
    },
    #[error("canary observed reading `{instr}` at element {element}")]
    Canary { instr: String, element: usize },
    #[error("`{instr}` read at element {element} outside the chunk materialized by block {block}")]
    OutsideChunk {
        instr: String,
        element: usize,
        block: usize,
    },
    #[error("no generator bound for `{0}`")]
    Unbound(String),
    #[error("illegal program: {0}")]
    Illegal(String),
}

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error("plan inconsistency at `{instr}`: {message}")]
    Inconsistent { instr: String, message: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    PerfLib(#[from] PerfLibError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Codegen(#[from] CodegenError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("kernel for `{computation}` (root schedules {schedules}): {source}")]
    Kernel {
        computation: String,
        schedules: String,
        source: ExecError,
    },
    #[error("internal: {0}")]
    Internal(String),
}

impl Error {
    /// Bad input from the caller, as opposed to a broken invariant.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Ir(_) | Error::PerfLib(_) | Error::Invalid(_) | Error::Io(_) => true,
            Error::Exec(e) => matches!(e, ExecError::MissingInput(_) | ExecError::ShapeMismatch { .. }),
            Error::Codegen(_) | Error::Kernel { .. } | Error::Internal(_) => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
