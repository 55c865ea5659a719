use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Which hard limit of [`GroundingLimits`](crate::ground::GroundingLimits) was hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Limit {
    MaxDepth,
    MaxNodes,
    MaxParentProduct,
}

impl fmt::Display for Limit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Limit::MaxDepth => "max_depth",
            Limit::MaxNodes => "max_nodes",
            Limit::MaxParentProduct => "max_parent_product",
        })
    }
}

/// Pipeline stage an error was raised in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Model,
    Local,
    Grounding,
    Inference,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Model => "model",
            Stage::Local => "local-distribution",
            Stage::Grounding => "grounding",
            Stage::Inference => "inference",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    InvalidIdentifier(String),
    DuplicateIdentifier(String),
    UnknownType(String),
    UnknownIdentifier(String),
    UnknownRv(String),
    UnknownState { rv: String, state: String },
    ArityMismatch { rv: String, expected: usize, found: usize },
    UnboundParameter { rv: String, param: String },
    TypeViolation { param: String, expected: String, found: String, id: String },
    NotBoolean(String),
    EmptyDomain(String),
    IncompleteWorld(String),
    NegativeResidual(f64),
    MassError(f64),
    UnresolvableContext(String),
    LimitExceeded { limit: Limit, value: u64 },
    InconsistentEvidence(Vec<String>),
    StateSpaceTooLarge(u64),
    UnknownTarget(String),
}

impl Error {
    pub fn stage(&self) -> Stage {
        match self {
            Error::IncompleteWorld(_) | Error::NegativeResidual(_) | Error::MassError(_) => Stage::Local,
            Error::UnresolvableContext(_) | Error::LimitExceeded { .. } => Stage::Grounding,
            Error::InconsistentEvidence(_) | Error::StateSpaceTooLarge(_) | Error::UnknownTarget(_) => Stage::Inference,
            _ => Stage::Model,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidIdentifier(s) => write!(f, "invalid unique identifier `{s}`"),
            Error::DuplicateIdentifier(s) => write!(f, "identifier {s} is already registered"),
            Error::UnknownType(s) => write!(f, "unknown type `{s}`"),
            Error::UnknownIdentifier(s) => write!(f, "unregistered identifier {s}"),
            Error::UnknownRv(s) => write!(f, "unknown random variable `{s}`"),
            Error::UnknownState { rv, state } => {
                write!(f, "`{state}` is not a possible value of {rv}")
            }
            Error::ArityMismatch { rv, expected, found } => {
                write!(f, "{rv} takes {expected} arguments, {found} given")
            }
            Error::UnboundParameter { rv, param } => {
                write!(f, "parameter `{param}` of {rv} is unbound")
            }
            Error::TypeViolation { param, expected, found, id } => {
                write!(f, "`{param}` expects a {expected} but {id} is registered as {found}")
            }
            Error::NotBoolean(s) => write!(f, "{s} is not Boolean-valued"),
            Error::EmptyDomain(s) => write!(f, "type {s} has no registered identifiers"),
            Error::IncompleteWorld(s) => write!(f, "partial world has no value for {s}"),
            Error::NegativeResidual(m) => write!(f, "remainder state would receive mass {m}"),
            Error::MassError(m) => write!(f, "distribution sums to {m}, not 1"),
            Error::UnresolvableContext(s) => {
                write!(f, "context {s} is neither built-in, fixed by a finding, nor an enumerated reference")
            }
            Error::LimitExceeded { limit, value } => {
                write!(f, "grounding limit {limit} exceeded ({value})")
            }
            Error::InconsistentEvidence(fs) => {
                write!(f, "evidence has probability zero: {}", fs.join(", "))
            }
            Error::StateSpaceTooLarge(n) => {
                write!(f, "joint state space of {n} assignments is too large to enumerate")
            }
            Error::UnknownTarget(s) => write!(f, "target {s} is not a node of the network"),
        }
    }
}

impl core::error::Error for Error {}
