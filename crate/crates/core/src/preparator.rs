//! Deployment, restoration, harvesting and purging of an application's
//! files across a collection of environments.
//!
//! [`EnvironmentPreparator::prepare`] assumes empty environments and copies
//! everything. [`EnvironmentPreparator::restore`] assumes read-only
//! dependencies are already in place and only resets per-instance state, so
//! a suite of scripts pays for the large transfers once.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::environment::Environment;
use crate::error::{Error, IoContext, Result};
use crate::fanout;

/// A clean-up or collection problem on one environment. These are reported,
/// never raised.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvFailure {
    pub env_id: usize,
    pub message: String,
}

pub trait EnvironmentPreparator<E: Environment + ?Sized = dyn Environment>: Send + Sync {
    /// Deploys every dependency. Fails fast.
    fn prepare(&self, envs: &[Arc<E>]) -> Result<()>;

    /// Resets mutable per-instance state without re-sending read-only files.
    fn restore(&self, envs: &[Arc<E>]) -> Result<()>;

    /// Copies each environment's outputs under `dest_path/env-<id>/`.
    /// Missing outputs are returned as warnings.
    fn collect_output(&self, envs: &[Arc<E>], dest_path: &Path) -> Result<Vec<EnvFailure>>;

    /// Removes outputs and mutable state. Best-effort.
    fn clean_output(&self, envs: &[Arc<E>]) -> Vec<EnvFailure>;

    /// Removes everything the preparator created. Best-effort.
    fn clean_all(&self, envs: &[Arc<E>]) -> Vec<EnvFailure>;
}

/// Where a per-environment item's bytes come from.
#[derive(Clone, Debug)]
pub enum ItemSource {
    Bytes(Vec<u8>),
    Path(PathBuf),
}

#[derive(Clone, Debug)]
pub struct PerEnvItem {
    pub source: ItemSource,
    pub dest: String,
}

impl PerEnvItem {
    pub fn generated(dest: impl Into<String>, contents: impl Into<Vec<u8>>) -> Self {
        PerEnvItem {
            source: ItemSource::Bytes(contents.into()),
            dest: dest.into(),
        }
    }

    pub fn copied(dest: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        PerEnvItem {
            source: ItemSource::Path(path.into()),
            dest: dest.into(),
        }
    }
}

type PerEnvFn = dyn Fn(&dyn Environment) -> Result<Vec<PerEnvItem>> + Send + Sync;

/// Declarative description of what an application needs in each
/// environment.
pub struct DependencyManifest {
    /// `(local source, env-relative destination)`, identical for every
    /// environment and sent once per suite.
    pub read_only_items: Vec<(PathBuf, String)>,
    per_env_items: Option<Box<PerEnvFn>>,
    /// Harvested by `collect_output`, removed by `clean_output`.
    pub output_paths: Vec<String>,
    /// Mutable state wiped by `clean_output` and `restore`.
    pub state_paths: Vec<String>,
}

impl Default for DependencyManifest {
    fn default() -> Self {
        Self::new()
    }
}

impl DependencyManifest {
    pub fn new() -> Self {
        DependencyManifest {
            read_only_items: Vec::new(),
            per_env_items: None,
            output_paths: Vec::new(),
            state_paths: Vec::new(),
        }
    }

    pub fn read_only(mut self, source: impl Into<PathBuf>, dest: impl Into<String>) -> Self {
        self.read_only_items.push((source.into(), dest.into()));
        self
    }

    /// Per-environment items; the callback may also set environment
    /// properties (e.g. the address an App should use).
    pub fn per_env<F>(mut self, f: F) -> Self
    where
        F: Fn(&dyn Environment) -> Result<Vec<PerEnvItem>> + Send + Sync + 'static,
    {
        self.per_env_items = Some(Box::new(f));
        self
    }

    pub fn output(mut self, rel: impl Into<String>) -> Self {
        self.output_paths.push(rel.into());
        self
    }

    pub fn state(mut self, rel: impl Into<String>) -> Self {
        self.state_paths.push(rel.into());
        self
    }

    fn per_env_for(&self, env: &dyn Environment) -> Result<Vec<PerEnvItem>> {
        match &self.per_env_items {
            Some(f) => f(env),
            None => Ok(Vec::new()),
        }
    }
}

/// The generic, manifest-driven preparator.
pub struct ManifestPreparator {
    manifest: DependencyManifest,
    /// Read-only sends keyed by `(destination, env id)`.
    transfers: Mutex<BTreeMap<(String, usize), usize>>,
    /// Top-level entries each environment gained during prepare.
    created: Mutex<BTreeMap<usize, BTreeSet<String>>>,
}

impl ManifestPreparator {
    pub fn new(manifest: DependencyManifest) -> Self {
        ManifestPreparator {
            manifest,
            transfers: Mutex::default(),
            created: Mutex::default(),
        }
    }

    pub fn manifest(&self) -> &DependencyManifest {
        &self.manifest
    }

    /// How often each read-only item was sent to each environment.
    pub fn read_only_transfers(&self) -> BTreeMap<(String, usize), usize> {
        self.transfers.lock().unwrap().clone()
    }

    fn deploy_per_env(&self, env: &dyn Environment) -> Result<()> {
        for item in self.manifest.per_env_for(env)? {
            match &item.source {
                ItemSource::Bytes(bytes) => env.write_file(&item.dest, bytes)?,
                ItemSource::Path(path) => {
                    if env.exists(&item.dest)? {
                        env.remove_file(&item.dest)?;
                    }
                    env.copy_files_from_local_disk(path, &item.dest)?
                }
            }
        }
        Ok(())
    }

    fn prepare_one(&self, env: &dyn Environment) -> Result<()> {
        let mut fresh = BTreeSet::new();
        let per_env = self.manifest.per_env_for(env)?;
        let dests = self
            .manifest
            .read_only_items
            .iter()
            .map(|(_, d)| d.as_str())
            .chain(per_env.iter().map(|i| i.dest.as_str()))
            .chain(self.manifest.output_paths.iter().map(String::as_str))
            .chain(self.manifest.state_paths.iter().map(String::as_str));
        for dest in dests {
            let top = top_level(dest);
            if !top.is_empty() && !fresh.contains(&top) && !env.exists(&top)? {
                fresh.insert(top);
            }
        }
        self.created
            .lock()
            .unwrap()
            .entry(env.id())
            .or_default()
            .extend(fresh);

        for (source, dest) in &self.manifest.read_only_items {
            env.copy_files_from_local_disk(source, dest)?;
            *self
                .transfers
                .lock()
                .unwrap()
                .entry((dest.clone(), env.id()))
                .or_default() += 1;
        }
        self.deploy_per_env(env)
    }

    fn remove_quietly(env: &dyn Environment, rel: &str) -> std::result::Result<(), String> {
        match env.exists(rel) {
            Ok(false) => Ok(()),
            Ok(true) => env.remove_file(rel).map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        }
    }

    fn clean_paths<'a>(
        env: &dyn Environment,
        paths: impl IntoIterator<Item = &'a str>,
    ) -> Vec<EnvFailure> {
        let mut failures = Vec::new();
        for rel in paths {
            if let Err(message) = Self::remove_quietly(env, rel) {
                log::warn!("env {}: could not remove {rel}: {message}", env.id());
                failures.push(EnvFailure {
                    env_id: env.id(),
                    message: format!("removing {rel}: {message}"),
                });
            }
        }
        failures
    }

    fn mutable_paths(&self) -> impl Iterator<Item = &str> {
        self.manifest
            .output_paths
            .iter()
            .chain(&self.manifest.state_paths)
            .map(String::as_str)
    }
}

fn top_level(rel: &str) -> String {
    rel.split('/')
        .find(|p| !p.is_empty() && *p != ".")
        .unwrap_or("")
        .to_owned()
}

impl<E: Environment + AsDynEnvironment + ?Sized> EnvironmentPreparator<E> for ManifestPreparator {
    fn prepare(&self, envs: &[Arc<E>]) -> Result<()> {
        let results = fanout::map(envs, |env| self.prepare_one(as_dyn(env)));
        let prepared: Vec<usize> = envs
            .iter()
            .zip(&results)
            .filter(|(_, r)| r.is_ok())
            .map(|(e, _)| e.id())
            .collect();
        for (env, result) in envs.iter().zip(results) {
            if let Err(source) = result {
                return Err(Error::Prepare {
                    env_id: env.id(),
                    prepared,
                    source: Box::new(source),
                });
            }
        }
        Ok(())
    }

    fn restore(&self, envs: &[Arc<E>]) -> Result<()> {
        let results = fanout::map(envs, |env| {
            let env = as_dyn(env);
            for rel in self.mutable_paths() {
                Self::remove_quietly(env, rel).map_err(Error::Precondition)?;
            }
            self.deploy_per_env(env)
        });
        for (env, result) in envs.iter().zip(results) {
            if let Err(source) = result {
                return Err(Error::Prepare {
                    env_id: env.id(),
                    prepared: Vec::new(),
                    source: Box::new(source),
                });
            }
        }
        Ok(())
    }

    fn collect_output(&self, envs: &[Arc<E>], dest_path: &Path) -> Result<Vec<EnvFailure>> {
        std::fs::create_dir_all(dest_path)
            .context(|| format!("creating {}", dest_path.display()))?;
        let per_env = fanout::map(envs, |env| -> Result<Vec<EnvFailure>> {
            let env = as_dyn(env);
            let env_dir = dest_path.join(format!("env-{}", env.id()));
            std::fs::create_dir_all(&env_dir)
                .context(|| format!("creating {}", env_dir.display()))?;
            let mut warnings = Vec::new();
            for rel in &self.manifest.output_paths {
                let target = env_dir.join(rel.trim_start_matches("./"));
                let copied = match env.exists(rel) {
                    Ok(true) => env.copy_files_to_local_disk(rel, &target),
                    Ok(false) => Err(Error::io(
                        format!("no such path `{rel}`"),
                        std::io::ErrorKind::NotFound.into(),
                    )),
                    Err(e) => Err(e),
                };
                if let Err(e) = copied {
                    log::warn!("env {}: output {rel} not collected: {e}", env.id());
                    warnings.push(EnvFailure {
                        env_id: env.id(),
                        message: format!("output {rel} not collected: {e}"),
                    });
                }
            }
            Ok(warnings)
        });
        let mut warnings = Vec::new();
        for result in per_env {
            warnings.extend(result?);
        }
        Ok(warnings)
    }

    fn clean_output(&self, envs: &[Arc<E>]) -> Vec<EnvFailure> {
        fanout::map(envs, |env| {
            Self::clean_paths(as_dyn(env), self.mutable_paths())
        })
        .into_iter()
        .flatten()
        .collect()
    }

    fn clean_all(&self, envs: &[Arc<E>]) -> Vec<EnvFailure> {
        let created = self.created.lock().unwrap().clone();
        fanout::map(envs, |env| {
            let env = as_dyn(env);
            let per_env = self.manifest.per_env_for(env).unwrap_or_default();
            let tops = created.get(&env.id()).cloned().unwrap_or_default();
            let paths: Vec<&str> = self
                .manifest
                .read_only_items
                .iter()
                .map(|(_, d)| d.as_str())
                .chain(per_env.iter().map(|i| i.dest.as_str()))
                .chain(self.mutable_paths())
                .chain(tops.iter().map(String::as_str))
                .collect();
            Self::clean_paths(env, paths)
        })
        .into_iter()
        .flatten()
        .collect()
    }
}

fn as_dyn<E: AsDynEnvironment + ?Sized>(env: &Arc<E>) -> &dyn Environment {
    (**env).as_dyn_environment()
}

/// Upcast helper so the generic preparator code can work on both concrete
/// environments and `dyn Environment`.
pub trait AsDynEnvironment {
    fn as_dyn_environment(&self) -> &dyn Environment;
}

impl<T: Environment> AsDynEnvironment for T {
    fn as_dyn_environment(&self) -> &dyn Environment {
        self
    }
}

impl AsDynEnvironment for dyn Environment {
    fn as_dyn_environment(&self) -> &dyn Environment {
        self
    }
}
