use std::fmt;

use thiserror::Error;

use crate::solver::StepFailure;

/// One schema problem found while loading a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigIssue {
    pub fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line: Some(line), message: message.into() }
    }

    pub fn global(message: impl Into<String>) -> Self {
        Self { line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

fn join_issues(issues: &[ConfigIssue]) -> String {
    issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {}", join_issues(.0))]
    Config(Vec<ConfigIssue>),
    #[error("table build failed: {0}")]
    Build(String),
    #[error("assembly error: {0}")]
    Assembly(String),
    #[error("linear solve failed: {0}")]
    LinearSolve(String),
    #[error("{0}")]
    Step(Box<StepFailure>),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Error::Config(vec![ConfigIssue::global(message)])
    }
}

pub type Result<T> = std::result::Result<T, Error>;
