//! Loading theories and evidence from disk, and the error type shared by
//! the command-line front end.

use std::path::{Path, PathBuf};

use mebn_core::model::{Evidence, Formula, MTheory};
use mebn_core::validate::validate_theory;
use mebn_core::{ValidatedMTheory, ValidationReport};
use thiserror::Error;

use crate::format::{parse_evidence, parse_formula, parse_mtheory, ParseDiagnostics, SourceText};

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Parse(#[from] ParseDiagnostics),
    #[error("validation failed:\n{0}")]
    Validation(ValidationReport),
    #[error("{} error: {0}", .0.stage())]
    Engine(#[from] mebn_core::Error),
    #[error("{path}: {message}")]
    Scenario { path: String, message: String },
}

impl AppError {
    /// 2 for domain errors (bad theory, evidence, query), 3 for IO and usage.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Io { .. } | AppError::Usage(_) => 3,
            _ => 2,
        }
    }
}

pub fn read_text(path: &Path) -> Result<SourceText, AppError> {
    let content = std::fs::read_to_string(path).map_err(|source| AppError::Io { path: path.to_path_buf(), source })?;
    Ok(SourceText::new(path.display().to_string(), content))
}

pub fn load_theory(path: &Path) -> Result<MTheory, AppError> {
    Ok(parse_mtheory(&read_text(path)?)?)
}

pub fn validated(theory: &MTheory) -> Result<ValidatedMTheory, AppError> {
    validate_theory(theory).map_err(AppError::Validation)
}

pub fn load_evidence(path: Option<&Path>, theory: &MTheory) -> Result<Evidence, AppError> {
    match path {
        Some(p) => Ok(parse_evidence(&read_text(p)?, theory)?),
        None => Ok(Evidence::default()),
    }
}

pub fn parse_targets(texts: &[String]) -> Result<Vec<Formula>, AppError> {
    if texts.is_empty() {
        return Err(AppError::Usage(String::from("at least one --target is required")));
    }
    texts.iter().map(|t| parse_formula(t).map_err(AppError::from)).collect()
}
