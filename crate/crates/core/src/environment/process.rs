use std::fmt;
use std::process::{Child, ExitStatus};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{IoContext, Result};

const POLL: Duration = Duration::from_millis(5);

/// Final state of a [`RemoteProcess`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "status", content = "code", rename_all = "snake_case")]
pub enum ProcessStatus {
    Exited(i32),
    /// Terminated by a signal we did not send.
    Signaled(i32),
    /// Terminated through [`RemoteProcess::kill`].
    Killed,
}

impl ProcessStatus {
    pub fn success(&self) -> bool {
        matches!(self, ProcessStatus::Exited(0))
    }

    fn from_exit(status: ExitStatus) -> Self {
        use std::os::unix::process::ExitStatusExt;
        match (status.code(), status.signal()) {
            (Some(code), _) => ProcessStatus::Exited(code),
            (None, Some(sig)) => ProcessStatus::Signaled(sig),
            (None, None) => ProcessStatus::Exited(-1),
        }
    }
}

impl fmt::Display for ProcessStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProcessStatus::Exited(code) => write!(f, "exited with {code}"),
            ProcessStatus::Signaled(sig) => write!(f, "terminated by signal {sig}"),
            ProcessStatus::Killed => f.write_str("killed"),
        }
    }
}

/// Backend-specific termination.
pub(crate) trait Terminate: Send + Sync {
    fn terminate(&self, child: &mut Child);
}

struct State {
    child: Child,
    finished: Option<ProcessStatus>,
}

struct Inner {
    description: String,
    pid: u32,
    stdout_rel: String,
    stderr_rel: String,
    terminate: Box<dyn Terminate>,
    state: Mutex<State>,
}

/// Handle to a process started in an environment. Cheap to clone; wait and
/// kill may be called from any thread.
#[derive(Clone)]
pub struct RemoteProcess {
    inner: Arc<Inner>,
}

impl fmt::Debug for RemoteProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteProcess")
            .field("description", &self.inner.description)
            .field("pid", &self.inner.pid)
            .finish()
    }
}

impl RemoteProcess {
    pub(crate) fn new(
        description: String,
        child: Child,
        stdout_rel: String,
        stderr_rel: String,
        terminate: Box<dyn Terminate>,
    ) -> Self {
        RemoteProcess {
            inner: Arc::new(Inner {
                description,
                pid: child.id(),
                stdout_rel,
                stderr_rel,
                terminate,
                state: Mutex::new(State {
                    child,
                    finished: None,
                }),
            }),
        }
    }

    pub fn description(&self) -> &str {
        &self.inner.description
    }

    /// Local pid (the child itself, or the local `ssh` client).
    pub fn pid(&self) -> u32 {
        self.inner.pid
    }

    /// Environment-relative path of the captured stdout.
    pub fn stdout_path(&self) -> &str {
        &self.inner.stdout_rel
    }

    pub fn stderr_path(&self) -> &str {
        &self.inner.stderr_rel
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn try_wait(&self) -> Result<Option<ProcessStatus>> {
        let mut state = self.lock();
        if let Some(status) = state.finished {
            return Ok(Some(status));
        }
        let polled = state
            .child
            .try_wait()
            .context(|| format!("polling {}", self.inner.description))?;
        if let Some(exit) = polled {
            let status = ProcessStatus::from_exit(exit);
            state.finished = Some(status);
            return Ok(Some(status));
        }
        Ok(None)
    }

    pub fn is_running(&self) -> bool {
        matches!(self.try_wait(), Ok(None))
    }

    /// Blocks until the process ends. Idempotent.
    pub fn wait(&self) -> Result<ProcessStatus> {
        loop {
            if let Some(status) = self.try_wait()? {
                return Ok(status);
            }
            thread::sleep(POLL);
        }
    }

    /// Waits at most `timeout`; `None` if the process is still running.
    pub fn wait_timeout(&self, timeout: Duration) -> Result<Option<ProcessStatus>> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(status) = self.try_wait()? {
                return Ok(Some(status));
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
            thread::sleep(POLL);
        }
    }

    /// Terminates the process. A process that already exited keeps its real
    /// status; otherwise later waits report [`ProcessStatus::Killed`].
    pub fn kill(&self) -> Result<()> {
        if self.try_wait()?.is_some() {
            return Ok(());
        }
        let mut state = self.lock();
        if state.finished.is_some() {
            return Ok(());
        }
        self.inner.terminate.terminate(&mut state.child);
        let _ = state.child.wait();
        state.finished = Some(ProcessStatus::Killed);
        Ok(())
    }
}

/// Every process started through one environment, so teardown can find the
/// ones a script forgot about.
#[derive(Clone, Default)]
pub struct ProcessRegistry {
    processes: Arc<Mutex<Vec<RemoteProcess>>>,
}

impl ProcessRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, process: RemoteProcess) {
        self.processes
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(process);
    }

    pub fn all(&self) -> Vec<RemoteProcess> {
        self.processes
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn running(&self) -> Vec<RemoteProcess> {
        self.all().into_iter().filter(|p| p.is_running()).collect()
    }

    pub fn running_count(&self) -> usize {
        self.running().len()
    }

    /// Kills everything still running; returns how many were killed.
    pub fn kill_all(&self) -> usize {
        let running = self.running();
        for process in &running {
            if let Err(e) = process.kill() {
                log::warn!("could not kill {}: {e}", process.description());
            }
        }
        running.len()
    }
}
