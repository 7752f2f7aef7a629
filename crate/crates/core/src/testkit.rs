//! Scenario-facing abstractions: App proxies, scripts and their results.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::environment::EnvironmentHandle;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ResultType {
    Success,
    Failure,
}

impl fmt::Display for ResultType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResultType::Success => "SUCCESS",
            ResultType::Failure => "FAILURE",
        })
    }
}

/// Outcome of one script. A failure always has a non-empty description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestResult {
    #[serde(rename = "type")]
    kind: ResultType,
    description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cause: Option<String>,
}

impl TestResult {
    pub fn success(description: impl Into<String>) -> Self {
        TestResult {
            kind: ResultType::Success,
            description: description.into(),
            cause: None,
        }
    }

    pub fn failure(description: impl Into<String>) -> Self {
        let mut description = description.into();
        if description.trim().is_empty() {
            description = "unspecified failure".into();
        }
        TestResult {
            kind: ResultType::Failure,
            description,
            cause: None,
        }
    }

    pub fn failure_with_cause(description: impl Into<String>, cause: impl fmt::Display) -> Self {
        TestResult {
            cause: Some(cause.to_string()),
            ..Self::failure(description)
        }
    }

    pub fn kind(&self) -> ResultType {
        self.kind
    }

    pub fn is_success(&self) -> bool {
        self.kind == ResultType::Success
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn cause(&self) -> Option<&str> {
        self.cause.as_deref()
    }
}

impl fmt::Display for TestResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.kind, self.description)?;
        if let Some(cause) = &self.cause {
            write!(f, "\nCause: {cause}")?;
        }
        Ok(())
    }
}

/// Testmaster-side proxy for one application instance. Apps reach their
/// instance only through its external interface.
pub trait App: Send + Sync + 'static {
    /// Equal to the id of the environment the instance runs in.
    fn id(&self) -> usize;

    fn name(&self) -> &str;
}

/// A scenario over a collection of Apps.
///
/// `run` reports failures as [`TestResult`] values. The runner turns panics
/// into failures as well.
pub trait TestScript<A>: Send + Sync {
    fn name(&self) -> &str;

    fn run(&self, apps: &[A]) -> TestResult;
}

/// Builds one App per prepared environment, in environment order.
pub trait AppFactory<A>: Send + Sync {
    fn create_apps(&self, envs: &[EnvironmentHandle]) -> Result<Vec<A>>;
}

impl<A, F> AppFactory<A> for F
where
    F: Fn(&[EnvironmentHandle]) -> Result<Vec<A>> + Send + Sync,
{
    fn create_apps(&self, envs: &[EnvironmentHandle]) -> Result<Vec<A>> {
        self(envs)
    }
}
