//! The testmaster pipeline.
//!
//! A run creates and prepares environments once, then for every script
//! builds fresh Apps, runs the script under a watchdog, kills anything the
//! script left running, harvests outputs into the script's report
//! directory and wipes mutable state. Between scripts the environments are
//! restored rather than re-prepared. `clean_all` runs on every exit path
//! once environments exist.

mod config;
mod report;

use std::any::Any;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

pub use config::{
    load_config, parse_config, valid_script_name, AppParams, Backend, RunnerConfig, SshSettings,
    CONFIG_VERSION, DEFAULT_SCRIPT_TIMEOUT_SECS,
};
pub use report::{write_report, RunReport, ScriptReport, RESULT_TXT, SUMMARY_JSON, SUMMARY_TXT};

use crate::environment::{EnvironmentFactory, EnvironmentHandle};
use crate::error::{IoContext, Result};
use crate::preparator::EnvironmentPreparator;
use crate::testkit::{App, AppFactory, TestResult, TestScript};

/// Observable pipeline steps, in the order they happened.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    CreateEnvironments { count: usize },
    Prepare,
    Restore { before: String },
    CreateApps { script: String },
    RunScript { script: String },
    CollectOutput { script: String },
    CleanOutput { script: String },
    CleanAll { env_ids: Vec<usize> },
    WriteReport,
}

#[derive(Clone, Default)]
pub struct EventLog(Arc<Mutex<Vec<Event>>>);

impl EventLog {
    pub fn record(&self, event: Event) {
        log::info!("phase: {event:?}");
        self.0.lock().unwrap().push(event);
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.0.lock().unwrap().clone()
    }
}

/// How long to wait for a timed-out script thread after teardown.
const TIMEOUT_DRAIN: Duration = Duration::from_secs(10);

pub struct TestRunner<A: App> {
    config: RunnerConfig,
    environments: Box<dyn EnvironmentFactory>,
    preparator: Arc<dyn EnvironmentPreparator>,
    apps: Arc<dyn AppFactory<A>>,
    scripts: Vec<Arc<dyn TestScript<A>>>,
    events: EventLog,
    created: Mutex<Vec<EnvironmentHandle>>,
}

impl<A: App> TestRunner<A> {
    pub fn new(
        config: RunnerConfig,
        environments: Box<dyn EnvironmentFactory>,
        preparator: Arc<dyn EnvironmentPreparator>,
        apps: Arc<dyn AppFactory<A>>,
    ) -> Self {
        TestRunner {
            config,
            environments,
            preparator,
            apps,
            scripts: Vec::new(),
            events: EventLog::default(),
            created: Mutex::default(),
        }
    }

    pub fn script(mut self, script: Arc<dyn TestScript<A>>) -> Self {
        self.scripts.push(script);
        self
    }

    pub fn scripts(mut self, scripts: impl IntoIterator<Item = Arc<dyn TestScript<A>>>) -> Self {
        self.scripts.extend(scripts);
        self
    }

    pub fn config(&self) -> &RunnerConfig {
        &self.config
    }

    pub fn events(&self) -> EventLog {
        self.events.clone()
    }

    /// Environments created by the last run (kept for post-run inspection).
    pub fn environments(&self) -> Vec<EnvironmentHandle> {
        self.created.lock().unwrap().clone()
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(self.config.script_timeout_secs)
    }

    /// Runs the whole pipeline and writes the report directory. Only
    /// testmaster-side disk errors while writing the report are returned as
    /// `Err`; everything else ends up in the report.
    pub fn run(&self) -> Result<RunReport> {
        let report_dir = self.config.report_dir.clone();
        let mut report = RunReport::new();
        self.clear_report_dir(&report_dir)?;

        if self.scripts.is_empty() {
            report.fail_setup("no scripts to run");
            return self.finish(report, &report_dir);
        }

        self.events.record(Event::CreateEnvironments {
            count: self.config.instance_count,
        });
        let envs = match self.environments.create_environments() {
            Ok(envs) => envs,
            Err(e) => {
                report.fail_setup(format!("environment creation failed: {e}"));
                return self.finish(report, &report_dir);
            }
        };
        *self.created.lock().unwrap() = envs.clone();

        self.events.record(Event::Prepare);
        if let Err(e) = self.preparator.prepare(&envs) {
            report.fail_setup(format!("prepare failed: {e}"));
            self.clean_all(&envs);
            return self.finish(report, &report_dir);
        }

        for (index, script) in self.scripts.iter().enumerate() {
            let entry = self.run_one(index, script, &envs, &report_dir);
            report.push(entry);
        }

        self.clean_all(&envs);
        self.finish(report, &report_dir)
    }

    fn finish(&self, report: RunReport, dir: &Path) -> Result<RunReport> {
        self.events.record(Event::WriteReport);
        write_report(&report, dir)?;
        Ok(report)
    }

    fn clean_all(&self, envs: &[EnvironmentHandle]) {
        for env in envs {
            let killed = env.processes().kill_all();
            if killed > 0 {
                log::warn!("env {}: killed {killed} leftover process(es)", env.id());
            }
        }
        self.events.record(Event::CleanAll {
            env_ids: envs.iter().map(|e| e.id()).collect(),
        });
        for failure in self.preparator.clean_all(envs) {
            log::warn!("clean-up of env {}: {}", failure.env_id, failure.message);
        }
    }

    /// Removes the summary files and the directories of the scripts about to
    /// run; anything else in the report directory is left alone.
    fn clear_report_dir(&self, dir: &Path) -> Result<()> {
        for file in [SUMMARY_TXT, SUMMARY_JSON] {
            let path = dir.join(file);
            if path.is_file() {
                fs::remove_file(&path).context(|| format!("removing {}", path.display()))?;
            }
        }
        for script in &self.scripts {
            let path = dir.join(script.name());
            if valid_script_name(script.name()) && path.is_dir() {
                fs::remove_dir_all(&path).context(|| format!("removing {}", path.display()))?;
            }
        }
        Ok(())
    }

    fn run_one(
        &self,
        index: usize,
        script: &Arc<dyn TestScript<A>>,
        envs: &[EnvironmentHandle],
        report_dir: &Path,
    ) -> ScriptReport {
        let name = script.name().to_owned();
        let started = Instant::now();
        let mut warnings = Vec::new();

        let result = if !valid_script_name(&name) {
            TestResult::failure(format!("invalid script name `{name}`"))
        } else {
            let restored = if index > 0 {
                self.events.record(Event::Restore {
                    before: name.clone(),
                });
                self.preparator.restore(envs)
            } else {
                Ok(())
            };
            match restored {
                Err(e) => TestResult::failure_with_cause("Environment restore failed", e),
                Ok(()) => {
                    self.events.record(Event::CreateApps {
                        script: name.clone(),
                    });
                    match self.apps.create_apps(envs) {
                        Err(e) => TestResult::failure_with_cause("Could not create apps", e),
                        Ok(apps) => {
                            self.events.record(Event::RunScript {
                                script: name.clone(),
                            });
                            self.run_with_watchdog(script, apps, envs)
                        }
                    }
                }
            }
        };

        let orphans_killed: usize = envs.iter().map(|e| e.processes().kill_all()).sum();
        if orphans_killed > 0 {
            log::warn!("script {name} left {orphans_killed} process(es) running; killed");
        }

        let artifact_dir = PathBuf::from(if valid_script_name(&name) {
            name.as_str()
        } else {
            "invalid-script"
        });
        self.events.record(Event::CollectOutput {
            script: name.clone(),
        });
        match self
            .preparator
            .collect_output(envs, &report_dir.join(&artifact_dir))
        {
            Ok(missing) => warnings.extend(
                missing
                    .into_iter()
                    .map(|f| format!("env {}: {}", f.env_id, f.message)),
            ),
            Err(e) => warnings.push(format!("collecting output failed: {e}")),
        }
        self.events.record(Event::CleanOutput {
            script: name.clone(),
        });
        for failure in self.preparator.clean_output(envs) {
            warnings.push(format!("env {}: {}", failure.env_id, failure.message));
        }

        log::info!("script {name}: {result}");
        ScriptReport {
            name,
            result,
            duration_secs: started.elapsed().as_secs_f64(),
            artifact_dir,
            warnings,
            orphans_killed,
        }
    }

    /// Runs the script on its own thread. A panic becomes a FAILURE with the
    /// panic message as cause; exceeding the timeout becomes FAILURE
    /// "timeout" after every process in the environments is killed.
    fn run_with_watchdog(
        &self,
        script: &Arc<dyn TestScript<A>>,
        apps: Vec<A>,
        envs: &[EnvironmentHandle],
    ) -> TestResult {
        let (tx, rx) = mpsc::channel();
        let worker_script = Arc::clone(script);
        let spawned = thread::Builder::new()
            .name(format!("script-{}", script.name()))
            .spawn(move || {
                let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    worker_script.run(&apps)
                }));
                let _ = tx.send(outcome);
            });
        if let Err(e) = spawned {
            return TestResult::failure_with_cause("Testmaster error", e);
        }
        let timeout = self.timeout();
        match rx.recv_timeout(timeout) {
            Ok(Ok(result)) => result,
            Ok(Err(panic)) => {
                TestResult::failure_with_cause("Testmaster error", panic_message(&*panic))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                TestResult::failure("Testmaster error: script thread vanished")
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                for env in envs {
                    env.processes().kill_all();
                }
                // Give the script a chance to notice its instances are gone.
                let _ = rx.recv_timeout(TIMEOUT_DRAIN);
                TestResult::failure(format!("timeout after {} s", timeout.as_secs()))
            }
        }
    }
}

fn panic_message(panic: &(dyn Any + Send)) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = panic.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".into()
    }
}
