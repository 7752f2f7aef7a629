use std::collections::BTreeMap;
use std::fs::{self, File};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::process::Terminate;
use super::{
    command_log_paths, normalize_rel, normalize_target, Environment, EnvironmentFactory,
    EnvironmentHandle, ProcessRegistry, RemoteProcess, COMMAND_LOG_DIR, HOST_PROPERTY,
};
use crate::error::{Error, IoContext, Result};

/// An environment backed by a sandbox directory on the testmaster.
pub struct LocalEnvironment {
    id: usize,
    name: String,
    root: PathBuf,
    properties: Mutex<BTreeMap<String, String>>,
    seq: AtomicU64,
    registry: ProcessRegistry,
}

impl LocalEnvironment {
    /// Uses `root` as the sandbox, creating it if needed.
    pub fn new(id: usize, root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).context(|| format!("creating {}", root.display()))?;
        let root = root
            .canonicalize()
            .context(|| format!("resolving {}", root.display()))?;
        let name = format!("local:{}", root.display());
        let env = LocalEnvironment {
            id,
            name,
            root,
            properties: Mutex::default(),
            seq: AtomicU64::new(0),
            registry: ProcessRegistry::new(),
        };
        env.set_property(HOST_PROPERTY, "127.0.0.1");
        Ok(env)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn resolve(&self, rel: &str) -> Result<PathBuf> {
        let norm = normalize_rel(rel)?;
        Ok(if norm.is_empty() {
            self.root.clone()
        } else {
            self.root.join(norm)
        })
    }

    /// Programs given as relative paths are looked up under the root.
    fn resolve_program(&self, program: &str) -> Result<PathBuf> {
        if program.contains('/') && !program.starts_with('/') {
            self.resolve(program)
        } else {
            Ok(PathBuf::from(program))
        }
    }
}

struct KillGroup;

impl Terminate for KillGroup {
    fn terminate(&self, child: &mut Child) {
        // Children are spawned as group leaders, so pgid == pid.
        let pgid = child.id() as libc::pid_t;
        // SAFETY: plain syscall on a pid we own; failure (ESRCH) is harmless.
        unsafe {
            libc::killpg(pgid, libc::SIGKILL);
        }
        let _ = child.kill();
    }
}

impl Environment for LocalEnvironment {
    fn id(&self) -> usize {
        self.id
    }

    fn name(&self) -> &str {
        &self.name
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
        let dest = self.resolve(&normalize_target(dest_rel_path)?)?;
        let meta = fs::metadata(src_path).context(|| format!("reading {}", src_path.display()))?;
        let target = place_into(&dest, src_path)?;
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).context(|| format!("creating {}", parent.display()))?;
        }
        if meta.is_dir() {
            copy_tree(src_path, &target)
        } else {
            fs::copy(src_path, &target)
                .map(drop)
                .context(|| format!("copying {} to {}", src_path.display(), target.display()))
        }
    }

    fn copy_files_to_local_disk(&self, src_rel_path: &str, dest_path: &Path) -> Result<()> {
        let src = self.resolve(src_rel_path)?;
        if fs::symlink_metadata(&src).is_err() {
            return Err(Error::io(
                format!("{}: no such path `{src_rel_path}`", self.name),
                std::io::ErrorKind::NotFound.into(),
            ));
        }
        let name = base_name(src_rel_path);
        atomic_copy_out(dest_path, &name, |staging| copy_any(&src, staging))
    }

    fn run_command_async(&self, command: &[String]) -> Result<RemoteProcess> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Precondition("empty command".into()))?;
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        let (out_rel, err_rel) = command_log_paths(seq);
        let log_dir = self.root.join(COMMAND_LOG_DIR);
        fs::create_dir_all(&log_dir).context(|| format!("creating {}", log_dir.display()))?;
        let stdout =
            File::create(self.root.join(&out_rel)).context(|| format!("creating {out_rel}"))?;
        let stderr =
            File::create(self.root.join(&err_rel)).context(|| format!("creating {err_rel}"))?;

        let child = Command::new(self.resolve_program(program)?)
            .args(args)
            .current_dir(&self.root)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .process_group(0)
            .spawn()
            .map_err(|source| Error::Spawn {
                env: self.name.clone(),
                program: program.clone(),
                source,
            })?;
        log::debug!(
            "env {}: started `{}` (pid {})",
            self.id,
            command.join(" "),
            child.id()
        );
        let process = RemoteProcess::new(
            format!("env {}: {}", self.id, command.join(" ")),
            child,
            out_rel,
            err_rel,
            Box::new(KillGroup),
        );
        self.registry.register(process.clone());
        Ok(process)
    }

    fn remove_file(&self, rel_path: &str) -> Result<()> {
        let path = self.resolve(&normalize_target(rel_path)?)?;
        let meta = fs::symlink_metadata(&path)
            .context(|| format!("{}: cannot remove `{rel_path}`", self.name))?;
        if meta.is_dir() {
            fs::remove_dir_all(&path)
        } else {
            fs::remove_file(&path)
        }
        .context(|| format!("removing {}", path.display()))
    }

    fn exists(&self, rel_path: &str) -> Result<bool> {
        Ok(fs::symlink_metadata(self.resolve(rel_path)?).is_ok())
    }

    fn mkdirs(&self, rel_path: &str) -> Result<()> {
        let path = self.resolve(rel_path)?;
        fs::create_dir_all(&path).context(|| format!("creating {}", path.display()))
    }
}

pub(crate) fn base_name(rel: &str) -> String {
    rel.trim_end_matches('/')
        .rsplit('/')
        .next()
        .unwrap_or(rel)
        .to_owned()
}

/// `scp -r` placement: copying into an existing directory nests the source.
fn place_into(dest: &Path, src: &Path) -> Result<PathBuf> {
    if dest.is_dir() {
        let name = src.file_name().ok_or_else(|| {
            Error::Precondition(format!("source {} has no file name", src.display()))
        })?;
        Ok(dest.join(name))
    } else {
        Ok(dest.to_path_buf())
    }
}

fn copy_any(src: &Path, dest: &Path) -> Result<()> {
    if fs::metadata(src)
        .context(|| format!("reading {}", src.display()))?
        .is_dir()
    {
        copy_tree(src, dest)
    } else {
        fs::copy(src, dest)
            .map(drop)
            .context(|| format!("copying {}", src.display()))
    }
}

pub(crate) fn copy_tree(src: &Path, dest: &Path) -> Result<()> {
    fs::create_dir_all(dest).context(|| format!("creating {}", dest.display()))?;
    for entry in fs::read_dir(src).context(|| format!("listing {}", src.display()))? {
        let entry = entry.context(|| format!("listing {}", src.display()))?;
        let from = entry.path();
        let to = dest.join(entry.file_name());
        if entry
            .file_type()
            .context(|| format!("reading {}", from.display()))?
            .is_dir()
        {
            copy_tree(&from, &to)?;
        } else {
            fs::copy(&from, &to).context(|| format!("copying {}", from.display()))?;
        }
    }
    Ok(())
}

/// Stages a copy next to the destination and moves it into place only when
/// the copy succeeded. `src_name` is the basename used when `dest_path` is an
/// existing directory.
pub(crate) fn atomic_copy_out(
    dest_path: &Path,
    src_name: &str,
    copy: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    let target = if dest_path.is_dir() {
        dest_path.join(src_name)
    } else {
        dest_path.to_path_buf()
    };
    let parent = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).context(|| format!("creating {}", parent.display()))?;
    let staging_dir = tempfile::Builder::new()
        .prefix(".dwharness-staging")
        .tempdir_in(&parent)
        .context(|| format!("staging in {}", parent.display()))?;
    let staged = staging_dir.path().join("item");
    copy(&staged)?;
    if target.is_dir() {
        if !staged.is_dir() {
            return Err(Error::Precondition(format!(
                "{} is a directory; refusing to replace it with a file",
                target.display()
            )));
        }
        return copy_tree(&staged, &target);
    }
    fs::rename(&staged, &target).context(|| format!("moving into {}", target.display()))
}

/// Creates `<work_dir>/env-<id>/` sandboxes.
pub struct LocalEnvironmentFactory {
    work_dir: PathBuf,
    count: usize,
}

impl LocalEnvironmentFactory {
    pub fn new(work_dir: impl Into<PathBuf>, count: usize) -> Self {
        LocalEnvironmentFactory {
            work_dir: work_dir.into(),
            count,
        }
    }
}

impl EnvironmentFactory for LocalEnvironmentFactory {
    fn create_environments(&self) -> Result<Vec<EnvironmentHandle>> {
        (0..self.count)
            .map(|id| {
                let root = self.work_dir.join(format!("env-{id}"));
                if root.exists() {
                    fs::remove_dir_all(&root)
                        .context(|| format!("clearing stale sandbox {}", root.display()))?;
                }
                Ok(Arc::new(LocalEnvironment::new(id, root)?) as EnvironmentHandle)
            })
            .collect()
    }
}
