use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::environment::{
    EnvironmentFactory, LocalEnvironmentFactory, SshEnvironmentConfig, SshEnvironmentFactory,
};
use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_SCRIPT_TIMEOUT_SECS: u64 = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Local,
    Ssh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SshSettings {
    pub hosts: Vec<String>,
    #[serde(default = "default_ssh_port")]
    pub port: u16,
    pub username: String,
    #[serde(default)]
    pub private_key_path: PathBuf,
    pub remote_base_dir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssh_program: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scp_program: Option<PathBuf>,
}

fn default_ssh_port() -> u16 {
    22
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_timeout() -> u64 {
    DEFAULT_SCRIPT_TIMEOUT_SECS
}

/// Application parameters passed through to preparators and scripts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AppParams(pub BTreeMap<String, Value>);

impl AppParams {
    fn field_error(name: &str, message: &str) -> Error {
        Error::ConfigField {
            field: format!("app_params.{name}"),
            message: message.into(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn set(&mut self, name: &str, value: impl Into<Value>) {
        self.0.insert(name.to_owned(), value.into());
    }

    pub fn u64_or(&self, name: &str, default: u64) -> Result<u64> {
        match self.0.get(name) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Self::field_error(name, "expected a non-negative integer")),
        }
    }

    pub fn f64_or(&self, name: &str, default: f64) -> Result<f64> {
        match self.0.get(name) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .filter(|x| x.is_finite() && *x >= 0.0)
                .ok_or_else(|| Self::field_error(name, "expected a non-negative number")),
        }
    }

    pub fn str(&self, name: &str) -> Result<Option<&str>> {
        match self.0.get(name) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(Some)
                .ok_or_else(|| Self::field_error(name, "expected a string")),
        }
    }
}

/// The testmaster configuration file (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub backend: Backend,
    pub instance_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssh: Option<SshSettings>,
    pub work_dir: PathBuf,
    pub report_dir: PathBuf,
    pub scripts: Vec<String>,
    #[serde(default = "default_timeout")]
    pub script_timeout_secs: u64,
    #[serde(default)]
    pub app_params: AppParams,
}

fn field(field: &str, message: impl Into<String>) -> Error {
    Error::ConfigField {
        field: field.into(),
        message: message.into(),
    }
}

/// Script names double as report directory names.
pub fn valid_script_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

impl RunnerConfig {
    pub fn local(
        instance_count: usize,
        work_dir: impl Into<PathBuf>,
        report_dir: impl Into<PathBuf>,
        scripts: Vec<String>,
    ) -> Self {
        RunnerConfig {
            version: CONFIG_VERSION,
            backend: Backend::Local,
            instance_count,
            ssh: None,
            work_dir: work_dir.into(),
            report_dir: report_dir.into(),
            scripts,
            script_timeout_secs: DEFAULT_SCRIPT_TIMEOUT_SECS,
            app_params: AppParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(field(
                "version",
                format!(
                    "unsupported version {} (expected {CONFIG_VERSION})",
                    self.version
                ),
            ));
        }
        if self.instance_count == 0 {
            return Err(field("instance_count", "must be at least 1"));
        }
        match (self.backend, &self.ssh) {
            (Backend::Ssh, None) => {
                return Err(field("ssh", "required when backend is \"ssh\""));
            }
            (Backend::Local, Some(_)) => {
                return Err(field("ssh", "only allowed when backend is \"ssh\""));
            }
            (Backend::Ssh, Some(ssh)) if ssh.hosts.len() < self.instance_count => {
                return Err(field(
                    "ssh.hosts",
                    format!(
                        "insufficient hosts: {} listed for instance_count {}",
                        ssh.hosts.len(),
                        self.instance_count
                    ),
                ));
            }
            _ => {}
        }
        if self.scripts.is_empty() {
            return Err(field("scripts", "at least one script must be selected"));
        }
        let mut seen = BTreeSet::new();
        for name in &self.scripts {
            if !valid_script_name(name) {
                return Err(field("scripts", format!("invalid script name `{name}`")));
            }
            if !seen.insert(name) {
                return Err(field("scripts", format!("`{name}` listed twice")));
            }
        }
        if self.script_timeout_secs == 0 {
            return Err(field("script_timeout_secs", "must be positive"));
        }
        Ok(())
    }

    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.work_dir);
        fix(&mut self.report_dir);
        if let Some(ssh) = &mut self.ssh {
            if !ssh.private_key_path.as_os_str().is_empty() {
                fix(&mut ssh.private_key_path);
            }
        }
    }

    pub fn environment_factory(&self) -> Result<Box<dyn EnvironmentFactory>> {
        self.validate()?;
        Ok(match (self.backend, &self.ssh) {
            (Backend::Local, _) => Box::new(LocalEnvironmentFactory::new(
                &self.work_dir,
                self.instance_count,
            )),
            (Backend::Ssh, Some(ssh)) => {
                let mut template = SshEnvironmentConfig::new("", ssh.username.clone());
                template.port = ssh.port;
                template.private_key_path = ssh.private_key_path.clone();
                template.remote_base_dir = ssh.remote_base_dir.clone();
                if let Some(p) = &ssh.ssh_program {
                    template.ssh_program = p.clone();
                }
                if let Some(p) = &ssh.scp_program {
                    template.scp_program = p.clone();
                }
                Box::new(SshEnvironmentFactory::new(
                    template,
                    ssh.hosts.clone(),
                    self.instance_count,
                ))
            }
            (Backend::Ssh, None) => unreachable!("validated above"),
        })
    }
}

pub fn parse_config(text: &str, origin: &Path) -> Result<RunnerConfig> {
    let config: RunnerConfig = serde_json::from_str(text).map_err(|e| Error::ConfigParse {
        path: origin.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

/// Reads and validates a configuration file. Relative paths inside it are
/// taken relative to the file's directory.
pub fn load_config(path: &Path) -> Result<RunnerConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config = parse_config(&text, path)?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    config.resolve_paths(base);
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunnerConfig> {
        parse_config(text, Path::new("run.json"))
    }

    const MINIMAL: &str = r#"{
        "backend": "local",
        "instance_count": 8,
        "work_dir": "work",
        "report_dir": "report",
        "scripts": ["consistency"]
    }"#;

    #[test]
    fn minimal_local_config() {
        let config = parse(MINIMAL).unwrap();
        assert_eq!(config.backend, Backend::Local);
        assert_eq!(config.instance_count, 8);
        assert_eq!(config.script_timeout_secs, 300);
        assert_eq!(config.scripts, vec!["consistency"]);
    }

    #[test]
    fn insufficient_hosts() {
        let err = parse(
            r#"{"backend": "ssh", "instance_count": 5, "work_dir": "w", "report_dir": "r",
                "scripts": ["s"],
                "ssh": {"hosts": ["a", "b", "c"], "username": "u", "remote_base_dir": "t"}}"#,
        )
        .unwrap_err();
        match err {
            Error::ConfigField { field, message } => {
                assert_eq!(field, "ssh.hosts");
                assert!(message.contains("insufficient hosts"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected_with_position() {
        let err =
            parse("{\n  \"backend\": \"local\",\n  \"instance_count\": 1,\n  \"colour\": 3\n}")
                .unwrap_err();
        match err {
            Error::ConfigParse { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("colour"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_errors_name_fields() {
        let cases = [
            (
                MINIMAL.replace("\"instance_count\": 8", "\"instance_count\": 0"),
                "instance_count",
            ),
            (MINIMAL.replace("[\"consistency\"]", "[]"), "scripts"),
            (MINIMAL.replace("[\"consistency\"]", "[\"a/b\"]"), "scripts"),
            (
                MINIMAL.replace("[\"consistency\"]", "[\"a\", \"a\"]"),
                "scripts",
            ),
            (
                MINIMAL.replace("\"backend\": \"local\"", "\"backend\": \"ssh\""),
                "ssh",
            ),
        ];
        for (text, expected) in cases {
            match parse(&text).unwrap_err() {
                Error::ConfigField { field, .. } => assert_eq!(field, expected),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn app_params_are_typed() {
        let mut config = parse(MINIMAL).unwrap();
        config.app_params.set("bucket_size", 1);
        config.app_params.set("name", "x");
        assert_eq!(config.app_params.u64_or("bucket_size", 20).unwrap(), 1);
        assert_eq!(config.app_params.u64_or("check_count", 10).unwrap(), 10);
        assert!(config.app_params.u64_or("name", 0).is_err());
        assert_eq!(config.app_params.f64_or("bucket_size", 0.0).unwrap(), 1.0);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut config = parse(MINIMAL).unwrap();
        config.resolve_paths(Path::new("/etc/runs"));
        assert_eq!(config.work_dir, Path::new("/etc/runs/work"));
        assert_eq!(config.report_dir, Path::new("/etc/runs/report"));
    }
}
