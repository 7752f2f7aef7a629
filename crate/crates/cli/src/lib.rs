//! The `dwharness` testmaster CLI:
//!
//! ```text
//! dwharness --config <path> [--report-dir <path>] [--scripts <name,...>]
//! ```
//!
//! Exit status is 0 when every script succeeded, 1 when any failed and 2
//! on configuration or usage errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Parser;
use dwharness_core::runner::{load_config, RunnerConfig};
use dwharness_core::{TestRunner, TestScript};
use dwharness_dht::harness::{
    ConsistencyParams, ConsistencyTestScript, DhtApp, DhtAppFactory, DhtParams, DhtPreparator,
    PutGetParams, PutGetTestScript, CONSISTENCY, PUT_GET,
};

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Name of the node daemon binary installed next to `dwharness`.
pub const NODE_BINARY_NAME: &str = "dht-node";

#[derive(Debug, Parser)]
#[command(
    name = "dwharness",
    version,
    about = "Run distributed test scripts against deployed instances"
)]
pub struct Args {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured report directory.
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
    /// Comma-separated scripts to run instead of the configured ones.
    #[arg(long, value_delimiter = ',')]
    pub scripts: Option<Vec<String>>,
}

pub fn available_scripts() -> &'static [&'static str] {
    &[CONSISTENCY, PUT_GET]
}

pub fn build_script(
    name: &str,
    config: &RunnerConfig,
) -> dwharness_core::Result<Arc<dyn TestScript<DhtApp>>> {
    let p = &config.app_params;
    Ok(match name {
        CONSISTENCY => Arc::new(ConsistencyTestScript::new(
            ConsistencyParams::from_app_params(p)?,
        )),
        PUT_GET => Arc::new(PutGetTestScript::new(PutGetParams::from_app_params(p)?)),
        other => {
            return Err(dwharness_core::Error::ConfigField {
                field: "scripts".into(),
                message: format!(
                    "unknown script {other:?}; available: {}",
                    available_scripts().join(", ")
                ),
            })
        }
    })
}

/// `app_params.node_binary` (relative to the config file) or the
/// `dht-node` binary next to the running executable.
pub fn node_binary(config: &RunnerConfig, config_path: &Path) -> dwharness_core::Result<PathBuf> {
    let path = match config.app_params.str("node_binary")? {
        Some(p) => {
            let base = config_path.parent().unwrap_or(Path::new("."));
            base.join(p)
        }
        None => {
            let exe = std::env::current_exe().map_err(|e| {
                dwharness_core::Error::Config(format!("locating own executable: {e}"))
            })?;
            exe.with_file_name(format!(
                "{NODE_BINARY_NAME}{}",
                std::env::consts::EXE_SUFFIX
            ))
        }
    };
    if !path.is_file() {
        return Err(dwharness_core::Error::ConfigField {
            field: "app_params.node_binary".into(),
            message: format!("{} is not a file", path.display()),
        });
    }
    Ok(path)
}

fn prepare_run(args: &Args) -> dwharness_core::Result<TestRunner<DhtApp>> {
    let mut config = load_config(&args.config)?;
    if let Some(dir) = &args.report_dir {
        config.report_dir = dir.clone();
    }
    if let Some(scripts) = &args.scripts {
        config.scripts = scripts.clone();
    }
    config.validate()?;
    let scripts = config
        .scripts
        .iter()
        .map(|name| build_script(name, &config))
        .collect::<dwharness_core::Result<Vec<_>>>()?;
    let preparator = DhtPreparator::new(
        node_binary(&config, &args.config)?,
        DhtParams::from_app_params(&config.app_params)?,
    );
    let environments = config.environment_factory()?;
    Ok(TestRunner::new(
        config,
        environments,
        Arc::new(preparator),
        Arc::new(DhtAppFactory::default()),
    )
    .scripts(scripts))
}

pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_SUCCESS
            };
        }
    };
    let runner = match prepare_run(&args) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!(
                "usage: dwharness --config <path> [--report-dir <path>] [--scripts <name,...>]"
            );
            return EXIT_USAGE;
        }
    };
    let report_dir = runner.config().report_dir.clone();
    match runner.run() {
        Ok(report) => {
            print!("{}", report.summary_text());
            println!("Report written to {}", report_dir.display());
            if report.is_success() {
                EXIT_SUCCESS
            } else {
                eprintln!("test run failed; see {}", report_dir.display());
                EXIT_FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("partial report in {}", report_dir.display());
            EXIT_FAILURE
        }
    }
}
