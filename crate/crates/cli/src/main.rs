mod client;
mod http;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use efleet_core::config::CONFIG_ENV;
use efleet_core::gateway::runlog::{replay, ReplayError, RunLog, RunLogHeader, RunLogWriter};
use efleet_core::model::TaskState;
use efleet_core::orchestrator::grammar::reference_text;
use efleet_core::{Runtime, RuntimeConfig, Scenario};

const EXIT_SCENARIO_FAILED: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "efleet", version, about = "Orchestrate a simulated robot fleet")]
struct Cli {
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    porcelain: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ServerArg {
    /// Base URL of a running `efleet serve`.
    #[arg(long, env = "EFLEET_SERVER", default_value = "http://127.0.0.1:7878")]
    server: String,
}

#[derive(Subcommand)]
enum Command {
    /// Run the runtime behind the HTTP gateway.
    Serve {
        #[arg(long, env = CONFIG_ENV)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Wall-clock milliseconds per simulation tick.
        #[arg(long, default_value_t = 100)]
        tick_ms: u64,
        /// Append every event to this run log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Skip the scenario's input script and wait for live input.
        #[arg(long)]
        no_script: bool,
    },
    /// Serve a recorded run read-only.
    ServeLog {
        log: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
    },
    /// Submit an instruction to a running server.
    Submit {
        text: String,
        #[arg(long)]
        robot: Option<String>,
        #[arg(long, default_value_t = 0)]
        priority: u32,
        #[arg(long)]
        tau: Option<f64>,
        #[command(flatten)]
        server: ServerArg,
    },
    /// Answer an open clarification.
    Answer {
        id: u64,
        answer: String,
        #[command(flatten)]
        server: ServerArg,
    },
    /// Show registered robots.
    Fleet {
        #[command(flatten)]
        server: ServerArg,
    },
    /// Query shared memory.
    Memory {
        #[command(subcommand)]
        query: MemoryQuery,
        #[command(flatten)]
        server: ServerArg,
    },
    /// Re-execute a run log and compare it event by event.
    Replay { log: PathBuf },
    /// Run a scenario headless to completion.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, env = CONFIG_ENV)]
        config: Option<PathBuf>,
        /// Write the run log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print the supported instruction forms.
    Grammar,
}

#[derive(Subcommand)]
pub enum MemoryQuery {
    /// Nearest visual entries to a text query.
    Semantic {
        query: String,
        #[arg(short, default_value_t = 3)]
        k: usize,
    },
    /// Object entries matching every given field.
    Structured {
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        robot: Option<String>,
        #[arg(long, num_args = 2, value_names = ["FROM", "TO"])]
        window: Option<Vec<u64>>,
    },
    /// Named places.
    Anchors,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let porcelain = cli.porcelain;
    match cli.command {
        Command::Serve { config, scenario, seed, listen, tick_ms, log, no_script } => {
            let cfg = RuntimeConfig::resolve(config.as_deref())?;
            let mut scenario = load_scenario(&scenario)?;
            if no_script {
                scenario = scenario.without_script();
            }
            let mut gateway = efleet_core::Gateway::serve(scenario, seed, cfg)?;
            if let Some(path) = &log {
                gateway.persist_to(path)?;
            }
            http::serve(gateway, &listen, Some(tick_ms))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::ServeLog { log, listen } => {
            let log = RunLog::recover(&log)?;
            let gateway = efleet_core::Gateway::replaying(&log)?;
            http::serve(gateway, &listen, None)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Submit { text, robot, priority, tau, server } => {
            let body = json!({ "text": text, "priority": priority, "explicit_robot": robot, "tau_override": tau });
            let reply = client::post(&server.server, "/instructions", &body)?;
            print_value(porcelain, &reply, |v| format!("submitted task {}", v["task_id"]));
            Ok(ExitCode::SUCCESS)
        }
        Command::Answer { id, answer, server } => {
            let reply = client::post(&server.server, &format!("/clarifications/{id}"), &json!({ "answer": answer }))?;
            print_value(porcelain, &reply, |_| format!("answered clarification {id}"));
            Ok(ExitCode::SUCCESS)
        }
        Command::Fleet { server } => {
            let reply = client::get(&server.server, "/fleet", &[])?;
            print_value(porcelain, &reply, fleet_table);
            Ok(ExitCode::SUCCESS)
        }
        Command::Memory { query, server } => {
            let reply = match &query {
                MemoryQuery::Semantic { query, k } => client::get(&server.server, "/memory/semantic", &[("q", query.clone()), ("k", k.to_string())])?,
                MemoryQuery::Structured { category, robot, window } => {
                    let mut params = Vec::new();
                    if let Some(c) = category {
                        params.push(("category", c.clone()));
                    }
                    if let Some(r) = robot {
                        params.push(("source_robot", r.clone()));
                    }
                    if let Some(w) = window {
                        params.push(("from", w[0].to_string()));
                        params.push(("to", w[1].to_string()));
                    }
                    client::get(&server.server, "/memory/structured", &params)?
                }
                MemoryQuery::Anchors => client::get(&server.server, "/anchors", &[])?,
            };
            print_value(porcelain, &reply, results_table);
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay { log } => replay_cmd(&log, porcelain),
        Command::Sim { scenario, seed, config, log } => sim_cmd(&scenario, seed, config.as_deref(), log.as_deref(), porcelain),
        Command::Grammar => {
            print!("{}", reference_text());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    Scenario::load(path).with_context(|| format!("loading scenario {}", path.display()))
}

fn replay_cmd(path: &Path, porcelain: bool) -> Result<ExitCode> {
    let log = RunLog::load(path).with_context(|| format!("reading {}", path.display()))?;
    match replay(&log) {
        Ok(report) => {
            if porcelain {
                println!("{}", json!({ "status": "ok", "events": report.events.len(), "hash": report.hash, "ticks": report.ticks }));
            } else {
                println!("replay matches: {} events over {} ticks, hash {}", report.events.len(), report.ticks, report.hash);
                if log.truncated {
                    println!("note: a partial trailing line was ignored");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(ReplayError::DivergenceDetected { seq }) => {
            if porcelain {
                println!("{}", json!({ "status": "diverged", "seq": seq }));
            } else {
                println!("replay diverged at seq {seq}");
            }
            Ok(ExitCode::from(EXIT_DIVERGED))
        }
        Err(e) => Err(e.into()),
    }
}

fn sim_cmd(path: &Path, seed: u64, config: Option<&Path>, log: Option<&Path>, porcelain: bool) -> Result<ExitCode> {
    let cfg = RuntimeConfig::resolve(config)?;
    let scenario = load_scenario(path)?;
    let mut rt = Runtime::from_scenario(&scenario, seed, cfg)?;
    rt.run(scenario.max_ticks);
    if let Some(path) = log {
        let mut w = RunLogWriter::create(path, &RunLogHeader::new(seed, scenario.clone(), cfg))?;
        w.append(rt.events())?;
    }
    let states: Vec<TaskState> = rt.tasks().map(|t| t.state()).collect();
    let passed = match &scenario.expect.final_states {
        Some(want) => *want == states,
        None => !states.is_empty() && states.iter().all(|s| *s == TaskState::Done),
    };
    let hash = efleet_core::hash_events(rt.events());
    if porcelain {
        let tasks: Vec<_> = rt
            .tasks()
            .map(|t| json!({ "task_id": t.record.task_id, "instruction": t.record.instruction, "state": t.state(), "detail": t.detail }))
            .collect();
        println!("{}", json!({ "scenario": scenario.name, "passed": passed, "ticks": rt.now(), "events": rt.events().len(), "hash": hash, "tasks": tasks }));
    } else {
        println!("scenario `{}` seed {seed}: {} after {} ticks", scenario.name, if passed { "passed" } else { "FAILED" }, rt.now());
        for t in rt.tasks() {
            let detail = t.detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default();
            println!("  task {} {:<16} {}{detail}", t.record.task_id, t.state().to_string(), t.record.instruction);
        }
        println!("  {} events, hash {hash}", rt.events().len());
    }
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(EXIT_SCENARIO_FAILED) })
}

fn print_value(porcelain: bool, v: &serde_json::Value, human: impl Fn(&serde_json::Value) -> String) {
    if porcelain {
        println!("{v}");
    } else {
        println!("{}", human(v));
    }
}

fn fleet_table(v: &serde_json::Value) -> String {
    let mut out = String::new();
    for r in v["robots"].as_array().into_iter().flatten() {
        out.push_str(&format!(
            "{:<10} {:<10} {:<12} ({:.2}, {:.2}) load {}/{}\n",
            r["robot_id"].as_str().unwrap_or("?"),
            r["morphology"].as_str().unwrap_or("?"),
            r["liveness"].as_str().unwrap_or("?"),
            r["pose"]["x"].as_f64().unwrap_or(f64::NAN),
            r["pose"]["y"].as_f64().unwrap_or(f64::NAN),
            r["active_subtasks"],
            r["max_concurrent"],
        ));
    }
    out.trim_end().to_owned()
}

fn results_table(v: &serde_json::Value) -> String {
    let Some(rows) = v.as_array() else { return v.to_string() };
    if rows.is_empty() {
        return "no results".into();
    }
    rows.iter()
        .map(|r| {
            let name = r["category"].as_str().or(r["name"].as_str()).unwrap_or("?");
            let conf = r["confidence"].as_f64().map(|c| format!(" conf {c:.3}")).unwrap_or_default();
            format!("{name:<20} ({:.2}, {:.2}){conf}", r["pose"]["x"].as_f64().unwrap_or(f64::NAN), r["pose"]["y"].as_f64().unwrap_or(f64::NAN))
        })
        .collect::<Vec<_>>()
        .join("\n")
}
