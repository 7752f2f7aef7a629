use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::local::{atomic_copy_out, base_name};
use super::process::Terminate;
use super::{
    command_log_paths, normalize_rel, normalize_target, Environment, EnvironmentFactory,
    EnvironmentHandle, ProcessRegistry, RemoteProcess, COMMAND_LOG_DIR, HOST_PROPERTY,
};
use crate::error::{Error, IoContext, Result};
use crate::fanout;

/// Connection settings for one SSH-reachable host.
#[derive(Clone, Debug)]
pub struct SshEnvironmentConfig {
    pub host: String,
    pub port: u16,
    pub username: String,
    /// Empty means "let ssh pick its default identity".
    pub private_key_path: PathBuf,
    /// Relative to the remote user's home unless absolute.
    pub remote_base_dir: String,
    pub ssh_program: PathBuf,
    pub scp_program: PathBuf,
    pub connect_timeout_secs: u64,
}

impl SshEnvironmentConfig {
    pub fn new(host: impl Into<String>, username: impl Into<String>) -> Self {
        SshEnvironmentConfig {
            host: host.into(),
            port: 22,
            username: username.into(),
            private_key_path: PathBuf::new(),
            remote_base_dir: "dwharness".into(),
            ssh_program: "ssh".into(),
            scp_program: "scp".into(),
            connect_timeout_secs: 10,
        }
    }

    fn destination(&self) -> String {
        if self.username.is_empty() {
            self.host.clone()
        } else {
            format!("{}@{}", self.username, self.host)
        }
    }

    fn common_options(&self, cmd: &mut Command) {
        if !self.private_key_path.as_os_str().is_empty() {
            cmd.arg("-i").arg(&self.private_key_path);
        }
        cmd.args([
            "-o",
            "BatchMode=yes",
            "-o",
            "StrictHostKeyChecking=no",
            "-o",
            "UserKnownHostsFile=/dev/null",
            "-o",
            "LogLevel=ERROR",
            "-o",
        ])
        .arg(format!("ConnectTimeout={}", self.connect_timeout_secs));
    }

    fn ssh(&self, remote_script: &str) -> Command {
        let mut cmd = Command::new(&self.ssh_program);
        cmd.arg("-p").arg(self.port.to_string());
        self.common_options(&mut cmd);
        cmd.arg(self.destination()).arg(remote_script);
        cmd.stdin(Stdio::null());
        cmd
    }

    fn scp(&self) -> Command {
        let mut cmd = Command::new(&self.scp_program);
        cmd.args(["-r", "-q", "-P"]).arg(self.port.to_string());
        self.common_options(&mut cmd);
        cmd.stdin(Stdio::null());
        cmd
    }
}

/// Quotes one word for the remote POSIX shell.
pub(crate) fn quote(word: &str) -> Result<String> {
    shlex::try_quote(word).map(|q| q.into_owned()).map_err(|e| {
        Error::Precondition(format!("cannot quote `{word}` for the remote shell: {e}"))
    })
}

pub(crate) fn quote_command(command: &[String]) -> Result<String> {
    let words = command
        .iter()
        .map(|w| quote(w))
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

/// scp's remote side re-parses paths, so only plain characters are allowed.
fn check_transfer_path(path: &str) -> Result<()> {
    let plain = path
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || "._-/+@~=,".contains(c));
    if plain {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "`{path}` contains characters that cannot be transferred safely over scp"
        )))
    }
}

/// An environment on a remote host, driven through the system `ssh` and
/// `scp` executables. Its root is `<remote_base_dir>/env-<id>`.
pub struct SshEnvironment {
    id: usize,
    config: SshEnvironmentConfig,
    root: String,
    properties: Mutex<BTreeMap<String, String>>,
    seq: AtomicU64,
    registry: ProcessRegistry,
}

impl SshEnvironment {
    /// Builds the handle without touching the network; see
    /// [`SshEnvironment::connect`].
    pub fn new(id: usize, config: SshEnvironmentConfig) -> Result<Self> {
        let base = config.remote_base_dir.trim_end_matches('/');
        let root = if base.is_empty() {
            format!("env-{id}")
        } else {
            format!("{base}/env-{id}")
        };
        check_transfer_path(&root)?;
        let env = SshEnvironment {
            id,
            root,
            properties: Mutex::default(),
            seq: AtomicU64::new(0),
            registry: ProcessRegistry::new(),
            config,
        };
        env.set_property(HOST_PROPERTY, &env.config.host);
        Ok(env)
    }

    /// Creates the handle and verifies the host with a no-op command that
    /// also creates the remote root.
    pub fn connect(id: usize, config: SshEnvironmentConfig) -> Result<Self> {
        let env = Self::new(id, config)?;
        let script = format!("mkdir -p {} && true", quote(&env.root)?);
        let output = env.exec(&script).map_err(|e| Error::EnvironmentCreation {
            host: env.config.host.clone(),
            message: e.to_string(),
        })?;
        if !output.status.success() {
            return Err(Error::EnvironmentCreation {
                host: env.config.host.clone(),
                message: failure_text(&output),
            });
        }
        Ok(env)
    }

    pub fn config(&self) -> &SshEnvironmentConfig {
        &self.config
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    fn remote_path(&self, rel: &str) -> Result<String> {
        let norm = normalize_rel(rel)?;
        let path = if norm.is_empty() {
            self.root.clone()
        } else {
            format!("{}/{norm}", self.root)
        };
        check_transfer_path(&path)?;
        Ok(path)
    }

    fn exec(&self, script: &str) -> Result<Output> {
        self.config
            .ssh(script)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .output()
            .context(|| format!("running {}", self.config.ssh_program.display()))
    }

    /// Runs a plumbing script and turns a non-zero exit into an error.
    fn exec_checked(&self, script: &str, what: &str) -> Result<Output> {
        let output = self.exec(script)?;
        if output.status.success() {
            Ok(output)
        } else {
            Err(self.remote_error(format!("{what}: {}", failure_text(&output))))
        }
    }

    fn remote_error(&self, message: String) -> Error {
        Error::Remote {
            host: self.config.host.clone(),
            message,
        }
    }

    fn scp(&self, from: &str, to: &str, what: &str) -> Result<()> {
        let output = self
            .config
            .scp()
            .arg(from)
            .arg(to)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .output()
            .context(|| format!("running {}", self.config.scp_program.display()))?;
        if output.status.success() {
            Ok(())
        } else {
            Err(self.remote_error(format!("{what}: {}", failure_text(&output))))
        }
    }

    fn remote_spec(&self, path: &str) -> String {
        format!("{}:{path}", self.config.destination())
    }
}

fn failure_text(output: &Output) -> String {
    let stderr = String::from_utf8_lossy(&output.stderr);
    let stderr = stderr.trim();
    if stderr.is_empty() {
        format!("{}", output.status)
    } else {
        format!("{} ({stderr})", output.status)
    }
}

/// Stops the remote command via its recorded pid, then drops the channel.
struct RemoteKill {
    config: SshEnvironmentConfig,
    pid_file: String,
}

impl Terminate for RemoteKill {
    fn terminate(&self, child: &mut Child) {
        if let Ok(pid_file) = quote(&self.pid_file) {
            let script = format!("kill -TERM $(cat {pid_file}) 2>/dev/null; true");
            let _ = self
                .config
                .ssh(&script)
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .status();
        }
        let _ = child.kill();
    }
}

impl Environment for SshEnvironment {
    fn id(&self) -> usize {
        self.id
    }

    fn name(&self) -> &str {
        &self.config.host
    }

    fn property(&self, key: &str) -> Option<String> {
        self.properties.lock().unwrap().get(key).cloned()
    }

    fn set_property(&self, key: &str, value: &str) {
        self.properties
            .lock()
            .unwrap()
            .insert(key.to_owned(), value.to_owned());
    }

    fn properties(&self) -> BTreeMap<String, String> {
        self.properties.lock().unwrap().clone()
    }

    fn processes(&self) -> &ProcessRegistry {
        &self.registry
    }

    fn copy_files_from_local_disk(&self, src_path: &Path, dest_rel_path: &str) -> Result<()> {
        let dest = self.remote_path(&normalize_target(dest_rel_path)?)?;
        std::fs::metadata(src_path).context(|| format!("reading {}", src_path.display()))?;
        let src = src_path
            .to_str()
            .ok_or_else(|| Error::Precondition(format!("non-UTF-8 path {}", src_path.display())))?;
        let parent = match dest.rsplit_once('/') {
            Some((parent, _)) => parent.to_owned(),
            None => ".".to_owned(),
        };
        self.exec_checked(&format!("mkdir -p {}", quote(&parent)?), "creating parent")?;
        self.scp(
            src,
            &self.remote_spec(&dest),
            &format!("uploading to {dest}"),
        )
    }

    fn copy_files_to_local_disk(&self, src_rel_path: &str, dest_path: &Path) -> Result<()> {
        let src = self.remote_path(src_rel_path)?;
        if !self.exists(src_rel_path)? {
            return Err(Error::io(
                format!("{}: no such path `{src_rel_path}`", self.config.host),
                std::io::ErrorKind::NotFound.into(),
            ));
        }
        let name = base_name(src_rel_path);
        atomic_copy_out(dest_path, &name, |staging| {
            let local = staging.to_str().ok_or_else(|| {
                Error::Precondition(format!("non-UTF-8 path {}", staging.display()))
            })?;
            self.scp(
                &self.remote_spec(&src),
                local,
                &format!("downloading {src}"),
            )
        })
    }

    fn run_command_async(&self, command: &[String]) -> Result<RemoteProcess> {
        if command.is_empty() {
            return Err(Error::Precondition("empty command".into()));
        }
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        let (out_rel, err_rel) = command_log_paths(seq);
        let pid_rel = format!("{COMMAND_LOG_DIR}/cmd-{seq}.pid");
        let script = format!(
            "cd {root} && mkdir -p {logs} && echo $$ > {pid} && exec {cmd} > {out} 2> {err}",
            root = quote(&self.root)?,
            logs = COMMAND_LOG_DIR,
            pid = pid_rel,
            cmd = quote_command(command)?,
            out = out_rel,
            err = err_rel,
        );
        let child = self
            .config
            .ssh(&script)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|source| Error::Spawn {
                env: self.config.host.clone(),
                program: self.config.ssh_program.display().to_string(),
                source,
            })?;
        let process = RemoteProcess::new(
            format!(
                "env {} ({}): {}",
                self.id,
                self.config.host,
                command.join(" ")
            ),
            child,
            out_rel,
            err_rel,
            Box::new(RemoteKill {
                config: self.config.clone(),
                pid_file: format!("{}/{pid_rel}", self.root),
            }),
        );
        self.registry.register(process.clone());
        Ok(process)
    }

    fn remove_file(&self, rel_path: &str) -> Result<()> {
        let path = self.remote_path(&normalize_target(rel_path)?)?;
        if !self.exists(rel_path)? {
            return Err(Error::io(
                format!("{}: cannot remove `{rel_path}`", self.config.host),
                std::io::ErrorKind::NotFound.into(),
            ));
        }
        self.exec_checked(&format!("rm -rf {}", quote(&path)?), "removing")
            .map(drop)
    }

    fn exists(&self, rel_path: &str) -> Result<bool> {
        let path = self.remote_path(rel_path)?;
        let output = self.exec(&format!(
            "if test -e {p} || test -L {p}; then echo yes; else echo no; fi",
            p = quote(&path)?
        ))?;
        match String::from_utf8_lossy(&output.stdout).trim() {
            "yes" => Ok(true),
            "no" => Ok(false),
            _ => Err(self.remote_error(format!("probing {path}: {}", failure_text(&output)))),
        }
    }

    fn mkdirs(&self, rel_path: &str) -> Result<()> {
        let path = self.remote_path(rel_path)?;
        self.exec_checked(&format!("mkdir -p {}", quote(&path)?), "creating directory")
            .map(drop)
    }
}

/// One environment per host, `hosts[i]` for environment `i`.
pub struct SshEnvironmentFactory {
    template: SshEnvironmentConfig,
    hosts: Vec<String>,
    count: usize,
}

impl SshEnvironmentFactory {
    /// `template.host` is ignored; each environment takes its host from `hosts`.
    pub fn new(template: SshEnvironmentConfig, hosts: Vec<String>, count: usize) -> Self {
        SshEnvironmentFactory {
            template,
            hosts,
            count,
        }
    }
}

impl EnvironmentFactory for SshEnvironmentFactory {
    fn create_environments(&self) -> Result<Vec<EnvironmentHandle>> {
        if self.hosts.len() < self.count {
            return Err(Error::ConfigField {
                field: "ssh.hosts".into(),
                message: format!(
                    "insufficient hosts: {} listed for {} instances",
                    self.hosts.len(),
                    self.count
                ),
            });
        }
        let configs: Vec<_> = self.hosts[..self.count]
            .iter()
            .map(|host| SshEnvironmentConfig {
                host: host.clone(),
                ..self.template.clone()
            })
            .collect();
        let ids: Vec<usize> = (0..configs.len()).collect();
        let results = fanout::map(&ids, |&id| SshEnvironment::connect(id, configs[id].clone()));
        let mut envs = Vec::with_capacity(results.len());
        let mut failures = Vec::new();
        for result in results {
            match result {
                Ok(env) => envs.push(Arc::new(env) as EnvironmentHandle),
                Err(Error::EnvironmentCreation { host, message }) => failures.push((host, message)),
                Err(e) => return Err(e),
            }
        }
        if let Some((host, message)) = failures.first() {
            let hosts: Vec<_> = failures.iter().map(|(h, _)| h.as_str()).collect();
            return Err(Error::EnvironmentCreation {
                host: hosts.join(", "),
                message: if failures.len() == 1 {
                    message.clone()
                } else {
                    format!("{message} (first of {} failures; {host})", failures.len())
                },
            });
        }
        Ok(envs)
    }
}
