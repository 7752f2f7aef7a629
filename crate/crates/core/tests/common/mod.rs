#![allow(dead_code)]

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use dwharness_core::SshEnvironmentConfig;

pub fn cmd(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn write_executable(path: &Path, body: &str) {
    fs::write(path, body).unwrap();
    fs::set_permissions(path, fs::Permissions::from_mode(0o755)).unwrap();
}

/// Stand-ins for the `ssh`/`scp` clients that execute against a local
/// directory acting as the remote home. They accept the same option syntax
/// the SSH backend emits, so the backend's command construction, quoting
/// and pid-file kill path are all exercised.
pub struct FakeSsh {
    pub dir: tempfile::TempDir,
    pub home: PathBuf,
}

impl FakeSsh {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let home = dir.path().join("home");
        fs::create_dir_all(&home).unwrap();
        let home_str = home.to_str().unwrap();
        write_executable(
            &dir.path().join("ssh"),
            &format!(
                r#"#!/bin/sh
while [ $# -gt 0 ]; do
  case "$1" in
    -p|-i|-o) shift 2 ;;
    *) break ;;
  esac
done
dest="$1"; shift
case "$dest" in
  *unreachable*) echo "ssh: connect to host $dest port 22: Connection refused" >&2; exit 255 ;;
esac
cd '{home_str}' || exit 255
exec sh -c "$1"
"#
            ),
        );
        write_executable(
            &dir.path().join("scp"),
            &format!(
                r#"#!/bin/sh
while [ $# -gt 0 ]; do
  case "$1" in
    -P|-i|-o) shift 2 ;;
    -r|-q) shift ;;
    *) break ;;
  esac
done
map() {{
  case "$1" in
    *:*) p="${{1#*:}}"; case "$p" in /*) echo "$p" ;; *) echo '{home_str}'/"$p" ;; esac ;;
    *) echo "$1" ;;
  esac
}}
src=$(map "$1"); dst=$(map "$2")
exec cp -r "$src" "$dst"
"#
            ),
        );
        FakeSsh { dir, home }
    }

    pub fn config(&self, host: &str) -> SshEnvironmentConfig {
        let mut config = SshEnvironmentConfig::new(host, "tester");
        config.remote_base_dir = "runs".into();
        config.ssh_program = self.dir.path().join("ssh");
        config.scp_program = self.dir.path().join("scp");
        config
    }

    /// Where environment `id` lives on the fake remote.
    pub fn root(&self, id: usize) -> PathBuf {
        self.home.join("runs").join(format!("env-{id}"))
    }
}

pub fn pid_alive(pid: u32) -> bool {
    // SAFETY: signal 0 only checks for existence.
    unsafe { libc::kill(pid as libc::pid_t, 0) == 0 }
}
