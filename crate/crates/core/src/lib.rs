//! Centralized orchestration of functional tests for distributed applications.
//!
//! A single testmaster process deploys application instances into a set of
//! [`Environment`]s (local sandbox directories or SSH hosts), drives
//! [`TestScript`]s against per-instance [`App`] proxies, and writes a report
//! directory. The pieces map onto the usual test phases:
//!
//! 1. configuration ([`runner::load_config`]),
//! 2. environment preparation ([`EnvironmentPreparator::prepare`]),
//! 3. scenario execution ([`TestScript::run`]),
//! 4. log collection ([`EnvironmentPreparator::collect_output`]),
//! 5. clean-up ([`EnvironmentPreparator::clean_all`]).
//!
//! [`TestRunner`] strings them together.

pub mod environment;
pub mod error;
pub mod fanout;
pub mod preparator;
pub mod runner;
pub mod testkit;

pub use environment::{
    Environment, EnvironmentFactory, EnvironmentHandle, LocalEnvironment, LocalEnvironmentFactory,
    ProcessRegistry, ProcessStatus, RemoteProcess, SshEnvironment, SshEnvironmentConfig,
    SshEnvironmentFactory,
};
pub use error::{Error, Result};
pub use preparator::{
    DependencyManifest, EnvFailure, EnvironmentPreparator, ManifestPreparator, PerEnvItem,
};
pub use runner::{RunReport, RunnerConfig, TestRunner};
pub use testkit::{App, AppFactory, ResultType, TestResult, TestScript};
