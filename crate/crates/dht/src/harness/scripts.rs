use std::sync::Mutex;
use std::time::{Duration, Instant};

use dwharness_core::fanout;
use dwharness_core::runner::AppParams;
use dwharness_core::{TestResult, TestScript};

use super::app::DhtInstance;
use crate::error::DhtError;
use crate::graph::{check_consistency, inconsistency_report, ConnectionGraph};
use crate::key::Key;

pub const CONSISTENCY: &str = "consistency";
pub const PUT_GET: &str = "put_get";

pub const CONSISTENT: &str = "Topology was consistent";
pub const STARTUP_FAILED: &str = "Could not start DHT nodes.";

/// Stops every instance when dropped, including during a panic.
struct Teardown<'a, A: DhtInstance>(&'a [A]);

impl<A: DhtInstance> Drop for Teardown<'_, A> {
    fn drop(&mut self) {
        fanout::map(self.0, |a| a.shut_down());
    }
}

fn joined_errors(errors: impl IntoIterator<Item = DhtError>) -> String {
    errors
        .into_iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Starts the daemons, then routing, all instances concurrently.
fn start_all<A: DhtInstance>(apps: &[A]) -> Result<(), TestResult> {
    for step in [
        A::start_up as fn(&A) -> Result<(), DhtError>,
        A::start_routing,
    ] {
        let errors: Vec<DhtError> = fanout::map(apps, step)
            .into_iter()
            .filter_map(Result::err)
            .collect();
        if !errors.is_empty() {
            return Err(TestResult::failure_with_cause(
                STARTUP_FAILED,
                joined_errors(errors),
            ));
        }
    }
    Ok(())
}

/// Queries every routing table concurrently. Unreachable instances make
/// the graph partial, reported as `Err`.
pub fn connection_graph<A: DhtInstance>(apps: &[A]) -> Result<ConnectionGraph, String> {
    let tables = fanout::map(apps, |a| (a.key(), a.label(), a.routing_table()));
    let mut errors = Vec::new();
    let mut ok = Vec::new();
    for (key, label, table) in tables {
        match table {
            Ok(t) => ok.push((key, t)),
            Err(e) => errors.push(format!("{label}: {e}")),
        }
    }
    if !errors.is_empty() {
        return Err(errors.join("; "));
    }
    let (graph, dropped) = ConnectionGraph::from_tables(ok);
    for (owner, contact) in dropped {
        log::warn!("{owner} lists {contact}, which is not part of the swarm; edge dropped");
    }
    Ok(graph)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyParams {
    pub check_interval: Duration,
    pub check_count: u64,
    /// Leading checks whose inconsistency is only logged.
    pub grace: u64,
    /// Consecutive partial graphs tolerated before failing.
    pub max_io_retries: u64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        ConsistencyParams {
            check_interval: Duration::from_secs(2),
            check_count: 10,
            grace: 3,
            max_io_retries: 3,
        }
    }
}

impl ConsistencyParams {
    /// Reads `check_interval` (seconds), `check_count`, `grace` and
    /// `max_io_retries`.
    pub fn from_app_params(p: &AppParams) -> dwharness_core::Result<Self> {
        let d = ConsistencyParams::default();
        let max_io_retries = p.u64_or("max_io_retries", d.max_io_retries)?;
        if max_io_retries == 0 {
            return Err(dwharness_core::Error::ConfigField {
                field: "app_params.max_io_retries".into(),
                message: "must be positive".into(),
            });
        }
        Ok(ConsistencyParams {
            check_interval: Duration::from_secs_f64(
                p.f64_or("check_interval", d.check_interval.as_secs_f64())?,
            ),
            check_count: p.u64_or("check_count", d.check_count)?,
            grace: p.u64_or("grace", d.grace)?,
            max_io_retries,
        })
    }
}

/// Starts every instance and routing, then checks at a fixed rate that the
/// connection graph forms a single strongly connected component.
pub struct ConsistencyTestScript {
    params: ConsistencyParams,
}

impl ConsistencyTestScript {
    pub fn new(params: ConsistencyParams) -> Self {
        ConsistencyTestScript { params }
    }

    fn run_checks<A: DhtInstance>(&self, apps: &[A]) -> TestResult {
        let p = &self.params;
        let verdict: Mutex<Option<TestResult>> = Mutex::new(None);
        let record = |r: TestResult| {
            verdict.lock().unwrap().get_or_insert(r);
        };
        std::thread::scope(|s| {
            s.spawn(|| {
                let mut next = Instant::now();
                let mut done = 0;
                let mut partial_streak = 0;
                while done < p.check_count {
                    next += p.check_interval;
                    if let Some(wait) = next.checked_duration_since(Instant::now()) {
                        std::thread::sleep(wait);
                    }
                    let graph = match connection_graph(apps) {
                        Ok(g) => g,
                        Err(cause) => {
                            partial_streak += 1;
                            log::warn!("check {}: partial graph ({partial_streak}): {cause}", done + 1);
                            if partial_streak >= p.max_io_retries {
                                record(TestResult::failure_with_cause(
                                    format!(
                                        "Could not read routing tables in {partial_streak} consecutive checks."
                                    ),
                                    cause,
                                ));
                                return;
                            }
                            continue;
                        }
                    };
                    partial_streak = 0;
                    done += 1;
                    let result = check_consistency(&graph);
                    if result.is_consistent() {
                        log::info!("check {done}/{}: consistent", p.check_count);
                    } else if done <= p.grace {
                        log::info!("check {done}/{} (grace): {result}", p.check_count);
                    } else {
                        log::info!("check {done}/{}: {result}", p.check_count);
                        record(TestResult::failure(inconsistency_report(&graph, &result)));
                        return;
                    }
                }
            });
        });
        let verdict = verdict.lock().unwrap().take();
        verdict.unwrap_or_else(|| TestResult::success(CONSISTENT))
    }
}

impl<A: DhtInstance> TestScript<A> for ConsistencyTestScript {
    fn name(&self) -> &str {
        CONSISTENCY
    }

    fn run(&self, apps: &[A]) -> TestResult {
        let _teardown = Teardown(apps);
        if let Err(failure) = start_all(apps) {
            return failure;
        }
        self.run_checks(apps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PutGetParams {
    /// Wait after routing starts before writing.
    pub settle: Duration,
    pub values: u64,
}

impl Default for PutGetParams {
    fn default() -> Self {
        PutGetParams {
            settle: Duration::from_secs(3),
            values: 8,
        }
    }
}

impl PutGetParams {
    /// Reads `settle` (seconds) and `values`.
    pub fn from_app_params(p: &AppParams) -> dwharness_core::Result<Self> {
        let d = PutGetParams::default();
        Ok(PutGetParams {
            settle: Duration::from_secs_f64(p.f64_or("settle", d.settle.as_secs_f64())?),
            values: p.u64_or("values", d.values)?,
        })
    }
}

/// Stores values through different instances and reads every value back
/// through every instance.
pub struct PutGetTestScript {
    params: PutGetParams,
}

impl PutGetTestScript {
    pub fn new(params: PutGetParams) -> Self {
        PutGetTestScript { params }
    }
}

impl<A: DhtInstance> TestScript<A> for PutGetTestScript {
    fn name(&self) -> &str {
        PUT_GET
    }

    fn run(&self, apps: &[A]) -> TestResult {
        let _teardown = Teardown(apps);
        if let Err(failure) = start_all(apps) {
            return failure;
        }
        if apps.is_empty() {
            return TestResult::success("No instances to exercise");
        }
        std::thread::sleep(self.params.settle);
        let entries: Vec<(Key, Vec<u8>)> = (0..self.params.values)
            .map(|i| (Key::from_raw(1000 + i), format!("value-{i}").into_bytes()))
            .collect();
        for (i, (key, value)) in entries.iter().enumerate() {
            let writer = &apps[i % apps.len()];
            if let Err(e) = writer.put(*key, value) {
                return TestResult::failure_with_cause(
                    format!("put of key {key} through {} failed", writer.label()),
                    e,
                );
            }
        }
        let misses: Vec<String> = fanout::map(apps, |reader| {
            entries
                .iter()
                .filter_map(|(key, value)| match reader.get(*key) {
                    Ok(Some(v)) if &v == value => None,
                    Ok(Some(_)) => Some(format!("{key}@{}: wrong value", reader.key())),
                    Ok(None) => Some(format!("{key}@{}: missing", reader.key())),
                    Err(e) => Some(format!("{key}@{}: {e}", reader.key())),
                })
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
        if misses.is_empty() {
            TestResult::success("All values retrievable from every instance")
        } else {
            TestResult::failure(format!("Values not retrievable: {}", misses.join(", ")))
        }
    }
}
