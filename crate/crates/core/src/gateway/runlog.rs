//! Run logs: a header line followed by one event per line, plus replay.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RuntimeConfig;
use crate::event::{hash_events, Event, EventBody};
use crate::model::Tick;
use crate::orchestrator::{ExternalInput, Runtime};
use crate::sim::{InstructionSpec, Scenario};

pub const RUNLOG_SCHEMA: &str = "efleet.runlog";
pub const RUNLOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogHeader {
    pub schema: String,
    pub version: u32,
    pub seed: u64,
    pub scenario: Scenario,
    #[serde(default)]
    pub config: RuntimeConfig,
}

impl RunLogHeader {
    pub fn new(seed: u64, scenario: Scenario, config: RuntimeConfig) -> Self {
        Self { schema: RUNLOG_SCHEMA.to_owned(), version: RUNLOG_VERSION, seed, scenario, config }
    }
}

#[derive(Debug, Error)]
pub enum RunLogError {
    #[error("run log i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("run log is empty")]
    Empty,
    #[error("run log schema `{schema}` version {version} is not supported")]
    SchemaMismatch { schema: String, version: u32 },
    #[error("malformed run log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunLogHeader,
    pub events: Vec<Event>,
    /// True when a partial trailing line was dropped on load.
    pub truncated: bool,
}

impl RunLog {
    pub fn hash(&self) -> String {
        hash_events(&self.events)
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("headers serialize");
        out.push('\n');
        for e in &self.events {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), RunLogError> {
        std::fs::write(path, self.to_ndjson())?;
        Ok(())
    }

    /// Parses a log. A final line without its newline is a torn write and is
    /// dropped; malformed complete lines are errors.
    pub fn parse(text: &str) -> Result<Self, RunLogError> {
        let (body, truncated) = match text.rfind('\n') {
            Some(i) if i + 1 < text.len() => (&text[..=i], true),
            Some(_) => (text, false),
            None => ("", !text.is_empty()),
        };
        let mut lines = body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(RunLogError::Empty)?;
        let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| RunLogError::Corrupt { line: 1, reason: e.to_string() })?;
        let schema = raw.get("schema").and_then(|v| v.as_str()).unwrap_or_default().to_owned();
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if schema != RUNLOG_SCHEMA || version != RUNLOG_VERSION {
            return Err(RunLogError::SchemaMismatch { schema, version });
        }
        let header: RunLogHeader = serde_json::from_value(raw).map_err(|e| RunLogError::Corrupt { line: 1, reason: e.to_string() })?;
        let mut events = Vec::new();
        for (i, line) in lines {
            let event: Event = serde_json::from_str(line).map_err(|e| RunLogError::Corrupt { line: i + 1, reason: e.to_string() })?;
            events.push(event);
        }
        Ok(Self { header, events, truncated })
    }

    pub fn load(path: &Path) -> Result<Self, RunLogError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Loads a log and rewrites the file without a torn trailing line.
    pub fn recover(path: &Path) -> Result<Self, RunLogError> {
        let log = Self::load(path)?;
        if log.truncated {
            log.write(path)?;
        }
        Ok(log)
    }
}

/// Appends events to a log file as they are produced.
pub struct RunLogWriter {
    out: BufWriter<File>,
}

impl RunLogWriter {
    pub fn create(path: &Path, header: &RunLogHeader) -> Result<Self, RunLogError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, events: &[Event]) -> Result<(), RunLogError> {
        for e in events {
            self.out.write_all(e.to_line().as_bytes())?;
            self.out.write_all(b"\n")?;
        }
        self.out.flush()?;
        Ok(())
    }
}

/// Reads only the header of a log.
pub fn read_header(path: &Path) -> Result<RunLogHeader, RunLogError> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    if first.trim().is_empty() {
        return Err(RunLogError::Empty);
    }
    Ok(RunLog::parse(&first)?.header)
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Log(#[from] RunLogError),
    #[error("replay cannot start: {0}")]
    Setup(String),
    #[error("replay diverged at seq {seq}")]
    DivergenceDetected { seq: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub events: Vec<Event>,
    pub hash: String,
    pub ticks: Tick,
}

/// External inputs recorded in a log, with the tick they were processed at.
pub fn recorded_inputs(events: &[Event]) -> Vec<(Tick, ExternalInput)> {
    events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::TaskSubmitted { task_id, instruction, priority, explicit_robot, tau_override } => Some((
                e.sim_time,
                ExternalInput::Instruction {
                    task_id: Some(*task_id),
                    spec: InstructionSpec {
                        text: instruction.clone(),
                        priority: *priority,
                        explicit_robot: explicit_robot.clone(),
                        tau: *tau_override,
                    },
                },
            )),
            EventBody::ClarificationAnswered { clarification_id, answer, .. } => {
                Some((e.sim_time, ExternalInput::Answer { clarification_id: Some(*clarification_id), text: answer.clone() }))
            }
            _ => None,
        })
        .collect()
}

/// Rebuilds the runtime from the header, re-injects recorded inputs at their
/// ticks and runs to the last recorded tick.
pub fn replay_runtime(log: &RunLog) -> Result<Runtime, ReplayError> {
    let h = &log.header;
    let mut rt = Runtime::from_scenario(&h.scenario.without_script(), h.seed, h.config).map_err(|e| ReplayError::Setup(e.to_string()))?;
    for (tick, input) in recorded_inputs(&log.events) {
        rt.schedule(tick, input);
    }
    let last = log.events.last().map(|e| e.sim_time).unwrap_or(0);
    rt.run_until(last);
    Ok(rt)
}

/// Replays a log and compares it event by event with the regenerated stream.
pub fn replay(log: &RunLog) -> Result<ReplayReport, ReplayError> {
    let rt = replay_runtime(log)?;
    let regenerated = rt.events();
    let n = regenerated.len().min(log.events.len());
    if let Some(i) = (0..n).find(|&i| regenerated[i] != log.events[i]) {
        return Err(ReplayError::DivergenceDetected { seq: regenerated[i].seq });
    }
    if regenerated.len() != log.events.len() {
        // First seq present on one side only.
        return Err(ReplayError::DivergenceDetected { seq: n as u64 + 1 });
    }
    Ok(ReplayReport { events: regenerated.to_vec(), hash: hash_events(regenerated), ticks: rt.now() })
}
