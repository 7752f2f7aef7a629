//! Uniform proxy for deployment targets.
//!
//! An [`Environment`] is the testmaster's handle on the place where one
//! application instance lives. It moves files in and out and starts
//! processes there. Two backends exist: [`LocalEnvironment`] (a sandbox
//! directory on the testmaster) and [`SshEnvironment`] (a directory on a
//! remote host driven through the system `ssh`/`scp` clients).
//!
//! Every relative path is resolved against the environment root. Paths that
//! try to leave the root (`..`, absolute paths) are rejected with
//! [`Error::PathEscape`].

mod local;
mod process;
mod ssh;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

pub use local::{LocalEnvironment, LocalEnvironmentFactory};
pub use process::{ProcessRegistry, ProcessStatus, RemoteProcess};
pub use ssh::{SshEnvironment, SshEnvironmentConfig, SshEnvironmentFactory};

use crate::error::{Error, IoContext, Result};

/// Directory (relative to the root) that receives per-command output.
pub const COMMAND_LOG_DIR: &str = ".dfuntest";

/// Property holding the host name under which the environment's services
/// are reachable from the testmaster.
pub const HOST_PROPERTY: &str = "host";

pub type EnvironmentHandle = Arc<dyn Environment>;

pub trait Environment: Send + Sync {
    fn id(&self) -> usize;

    /// Host name or directory tag, for logs and reports.
    fn name(&self) -> &str;

    fn property(&self, key: &str) -> Option<String>;

    fn set_property(&self, key: &str, value: &str);

    fn properties(&self) -> BTreeMap<String, String>;

    /// Processes started through this environment.
    fn processes(&self) -> &ProcessRegistry;

    /// Copies a local file or directory tree to `dest_rel_path`, creating
    /// intermediate directories. If the destination is an existing directory
    /// the source is placed inside it (`scp -r` semantics).
    fn copy_files_from_local_disk(&self, src_path: &Path, dest_rel_path: &str) -> Result<()>;

    /// Copies `src_rel_path` back to the testmaster. Nothing is left at
    /// `dest_path` when the copy fails.
    fn copy_files_to_local_disk(&self, src_rel_path: &str, dest_path: &Path) -> Result<()>;

    /// Starts `command` with the environment root as working directory.
    /// Stdout and stderr go to `.dfuntest/cmd-<seq>.out|.err`.
    fn run_command_async(&self, command: &[String]) -> Result<RemoteProcess>;

    fn remove_file(&self, rel_path: &str) -> Result<()>;

    fn exists(&self, rel_path: &str) -> Result<bool>;

    fn mkdirs(&self, rel_path: &str) -> Result<()>;

    /// Runs `command` to completion and returns its status.
    ///
    /// A process killed by someone else while we wait (for example by the
    /// runner's teardown) yields [`Error::Interrupted`].
    fn run_command(&self, command: &[String]) -> Result<ProcessStatus> {
        let process = self.run_command_async(command)?;
        match process.wait()? {
            ProcessStatus::Killed => Err(Error::Interrupted(command.join(" "))),
            status => Ok(status),
        }
    }

    /// Writes `contents` to `rel_path` (plumbing for generated config files).
    fn write_file(&self, rel_path: &str, contents: &[u8]) -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new().context(|| "creating temp file".into())?;
        tmp.write_all(contents)
            .context(|| format!("writing staged copy of {rel_path}"))?;
        if self.exists(rel_path)? {
            self.remove_file(rel_path)?;
        }
        self.copy_files_from_local_disk(tmp.path(), rel_path)
    }
}

/// Factory hiding the concrete backend from the runner.
pub trait EnvironmentFactory: Send + Sync {
    fn create_environments(&self) -> Result<Vec<EnvironmentHandle>>;
}

/// Normalizes an environment-relative path, refusing anything that could
/// leave the root. Returns `""` for the root itself.
pub(crate) fn normalize_rel(rel: &str) -> Result<String> {
    if rel.starts_with('/') {
        return Err(Error::PathEscape { path: rel.into() });
    }
    let mut parts = Vec::new();
    for part in rel.split('/') {
        match part {
            "" | "." => {}
            ".." => return Err(Error::PathEscape { path: rel.into() }),
            p => parts.push(p),
        }
    }
    Ok(parts.join("/"))
}

/// Like [`normalize_rel`] but the root itself is not an acceptable target.
pub(crate) fn normalize_target(rel: &str) -> Result<String> {
    let norm = normalize_rel(rel)?;
    if norm.is_empty() {
        return Err(Error::Precondition(format!(
            "`{rel}` names the environment root"
        )));
    }
    Ok(norm)
}

pub(crate) fn command_log_paths(seq: u64) -> (String, String) {
    (
        format!("{COMMAND_LOG_DIR}/cmd-{seq}.out"),
        format!("{COMMAND_LOG_DIR}/cmd-{seq}.err"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_rel("a/./b//c").unwrap(), "a/b/c");
        assert_eq!(normalize_rel("").unwrap(), "");
        assert_eq!(normalize_rel("./").unwrap(), "");
        assert!(matches!(
            normalize_rel("../x"),
            Err(Error::PathEscape { .. })
        ));
        assert!(matches!(
            normalize_rel("a/../../x"),
            Err(Error::PathEscape { .. })
        ));
        assert!(matches!(
            normalize_rel("a/.."),
            Err(Error::PathEscape { .. })
        ));
        assert!(matches!(
            normalize_rel("/etc"),
            Err(Error::PathEscape { .. })
        ));
        assert!(matches!(normalize_target("."), Err(Error::Precondition(_))));
    }
}
