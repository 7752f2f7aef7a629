use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};
use crate::testkit::{ResultType, TestResult};

pub const SUMMARY_TXT: &str = "summary.txt";
pub const SUMMARY_JSON: &str = "summary.json";
pub const RESULT_TXT: &str = "result.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptReport {
    pub name: String,
    pub result: TestResult,
    pub duration_secs: f64,
    /// Relative to the report directory.
    pub artifact_dir: PathBuf,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Processes the runner had to kill because the script left them running.
    #[serde(default)]
    pub orphans_killed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub overall: ResultType,
    /// Set when the run aborted before (or instead of) executing scripts.
    pub setup_failure: Option<String>,
    pub scripts: Vec<ScriptReport>,
}

impl RunReport {
    pub fn new() -> Self {
        RunReport {
            version: 1,
            overall: ResultType::Success,
            setup_failure: None,
            scripts: Vec::new(),
        }
    }

    pub fn push(&mut self, script: ScriptReport) {
        self.scripts.push(script);
        self.update_overall();
    }

    pub fn fail_setup(&mut self, message: impl Into<String>) {
        self.setup_failure = Some(message.into());
        self.update_overall();
    }

    fn update_overall(&mut self) {
        let ok = self.setup_failure.is_none() && self.scripts.iter().all(|s| s.result.is_success());
        self.overall = if ok {
            ResultType::Success
        } else {
            ResultType::Failure
        };
    }

    pub fn is_success(&self) -> bool {
        self.overall == ResultType::Success
    }

    pub fn summary_text(&self) -> String {
        let passed = self
            .scripts
            .iter()
            .filter(|s| s.result.is_success())
            .count();
        let mut out = String::new();
        let _ = writeln!(out, "Overall result: {}", self.overall);
        let _ = writeln!(
            out,
            "Scripts: {} executed, {passed} passed, {} failed",
            self.scripts.len(),
            self.scripts.len() - passed
        );
        if let Some(failure) = &self.setup_failure {
            let _ = writeln!(out, "Setup failure: {failure}");
        }
        for script in &self.scripts {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "=== {} ({:.2} s, artifacts in {}/) ===",
                script.name,
                script.duration_secs,
                script.artifact_dir.display()
            );
            let _ = writeln!(out, "{}", script.result);
            for warning in &script.warnings {
                let _ = writeln!(out, "warning: {warning}");
            }
            if script.orphans_killed > 0 {
                let _ = writeln!(
                    out,
                    "warning: {} process(es) left running by the script were killed",
                    script.orphans_killed
                );
            }
        }
        out
    }
}

impl Default for RunReport {
    fn default() -> Self {
        Self::new()
    }
}

/// Writes `summary.txt`, `summary.json` and `<script>/result.txt`.
/// Collected artifacts are placed in the script directories by the runner.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
    for script in &report.scripts {
        let script_dir = dir.join(&script.artifact_dir);
        fs::create_dir_all(&script_dir).context(|| format!("creating {}", script_dir.display()))?;
        fs::write(script_dir.join(RESULT_TXT), format!("{}\n", script.result))
            .context(|| format!("writing result for {}", script.name))?;
    }
    fs::write(dir.join(SUMMARY_TXT), report.summary_text())
        .context(|| format!("writing {SUMMARY_TXT}"))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(dir.join(SUMMARY_JSON), json + "\n").context(|| format!("writing {SUMMARY_JSON}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script(name: &str, result: TestResult) -> ScriptReport {
        ScriptReport {
            name: name.into(),
            result,
            duration_secs: 1.5,
            artifact_dir: name.into(),
            warnings: vec![],
            orphans_killed: 0,
        }
    }

    #[test]
    fn failure_description_appears_verbatim() {
        let description = "Found inconsistent graph. The connection graph was:\n7: [4, 0]";
        let mut report = RunReport::new();
        report.push(script("consistency", TestResult::failure(description)));
        let dir = tempfile::tempdir().unwrap();
        write_report(&report, dir.path()).unwrap();
        let summary = fs::read_to_string(dir.path().join(SUMMARY_TXT)).unwrap();
        assert!(
            summary.contains(&format!("[FAILURE] {description}")),
            "{summary}"
        );
        assert!(summary.starts_with("Overall result: FAILURE"));
        let result = fs::read_to_string(dir.path().join("consistency/result.txt")).unwrap();
        assert!(result.contains(description));
        let json: RunReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_JSON)).unwrap())
                .unwrap();
        assert_eq!(json, report);
    }

    #[test]
    fn empty_report_still_has_summaries() {
        let dir = tempfile::tempdir().unwrap();
        write_report(&RunReport::new(), dir.path()).unwrap();
        assert!(dir.path().join(SUMMARY_TXT).is_file());
        assert!(dir.path().join(SUMMARY_JSON).is_file());
    }

    #[test]
    fn overall_is_conjunction() {
        let mut report = RunReport::new();
        report.push(script("a", TestResult::success("ok")));
        assert!(report.is_success());
        report.push(script("b", TestResult::failure("bad")));
        report.push(script("c", TestResult::success("ok")));
        assert_eq!(report.overall, ResultType::Failure);
        let dir = tempfile::tempdir().unwrap();
        write_report(&report, dir.path()).unwrap();
        for name in ["a", "b", "c"] {
            assert!(dir.path().join(name).join(RESULT_TXT).is_file());
        }
    }
}
