//! Run persistence: a JSON-lines log, a plot-ready trajectory CSV and the
//! metrics JSON.
//!
//! The log's first line is a [`LogHeader`], each further line one
//! [`RoundRecord`]. The record is fully recoverable from the log.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricsRow};
use crate::orchestrator::{ControllerKind, RoundRecord, RunRecord, Termination};
use crate::scenario::{ModelConfig, Scenario, ScenarioConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogHeader {
    pub controller: ControllerKind,
    pub scenario: ScenarioConfig,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<(usize, usize)>,
    #[serde(with = "codec::dvec_list")]
    pub final_states: Vec<StateVector>,
    pub final_formation_error: f64,
    pub rounds: usize,
}

pub fn write_run_log<W: Write>(record: &RunRecord, mut out: W) -> Result<()> {
    let header = LogHeader {
        controller: record.controller,
        scenario: record.scenario.clone(),
        termination: record.termination,
        failure: record.failure,
        final_states: record.final_states.clone(),
        final_formation_error: record.final_formation_error,
        rounds: record.rounds.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for r in &record.rounds {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_run_log<R: BufRead>(input: R) -> Result<RunRecord> {
    let mut lines = input.lines().filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let first = lines.next().ok_or_else(|| Error::Parse("empty run log".into()))??;
    let header: LogHeader = serde_json::from_str(&first).map_err(|e| Error::Parse(format!("line 1: {e}")))?;
    let mut rounds = Vec::with_capacity(header.rounds);
    for (n, line) in lines.enumerate() {
        let r: RoundRecord = serde_json::from_str(&line?).map_err(|e| Error::Parse(format!("line {}: {e}", n + 2)))?;
        rounds.push(r);
    }
    if rounds.len() != header.rounds {
        return Err(Error::Parse(format!("header announces {} rounds, found {}", header.rounds, rounds.len())));
    }
    Ok(RunRecord {
        controller: header.controller,
        scenario: header.scenario,
        rounds,
        final_states: header.final_states,
        final_formation_error: header.final_formation_error,
        termination: header.termination,
        failure: header.failure,
    })
}

pub fn load_run_log(path: &Path) -> Result<RunRecord> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_run_log(BufReader::new(file))
}

pub const TRAJECTORY_HEADER: [&str; 12] =
    ["t", "agent", "px", "py", "vx", "vy", "ux", "uy", "h_min", "eta", "v_terminal", "solve_time"];

/// `(px, py, vx, vy)` for the state layouts the models use; absent ones empty.
fn state_columns(model: &ModelConfig, x: &StateVector) -> [Option<f64>; 4] {
    match model {
        ModelConfig::Vehicle { .. } => [Some(x[0]), Some(x[1]), Some(x[2]), Some(x[3])],
        ModelConfig::DoubleIntegrator { .. } => [Some(x[0]), None, Some(x[1]), None],
        ModelConfig::SingleIntegrator { .. } => [x.get(0).copied(), x.get(1).copied(), None, None],
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// One row per agent and round, plus the final states with empty input columns.
pub fn write_trajectory_csv<W: Write>(record: &RunRecord, scenario: &Scenario, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAJECTORY_HEADER)?;
    let model = &record.scenario.model;
    for r in &record.rounds {
        for a in &r.agents {
            let mut row = vec![r.t.to_string(), (a.agent + 1).to_string()];
            row.extend(state_columns(model, &a.state).map(cell));
            row.extend((0..2).map(|k| cell(a.input.get(k).copied())));
            row.push(scenario.h_min(&a.state).to_string());
            row.push(cell(a.eta));
            row.push(cell(a.v_terminal));
            row.push(a.solve.solve_time.to_string());
            w.write_record(&row)?;
        }
    }
    let t = record.rounds.len();
    for (i, x) in record.final_states.iter().enumerate() {
        let mut row = vec![t.to_string(), (i + 1).to_string()];
        row.extend(state_columns(model, x).map(cell));
        row.extend([String::new(), String::new(), scenario.h_min(x).to_string()]);
        row.extend([String::new(), String::new(), String::new()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Paths of the three files `run` writes.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub log: PathBuf,
    pub trajectory: PathBuf,
    pub metrics: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path, stem: &str) -> Self {
        Self {
            log: dir.join(format!("{stem}.jsonl")),
            trajectory: dir.join(format!("{stem}.csv")),
            metrics: dir.join(format!("{stem}.metrics.json")),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Writes the log, the trajectory and the metrics; returns the metrics row.
pub fn save_run(record: &RunRecord, scenario: &Scenario, files: &RunFiles) -> Result<MetricsRow> {
    if let Some(dir) = files.log.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_run_log(record, create(&files.log)?)?;
    write_trajectory_csv(record, scenario, create(&files.trajectory)?)?;
    let metrics = compute_metrics(record, scenario);
    let mut w = create(&files.metrics)?;
    serde_json::to_writer_pretty(&mut w, &MetricsDocument::new(&metrics))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(metrics)
}

/// Metrics plus a note on how the cost columns are defined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub metrics: MetricsRow,
    pub cost_definition: String,
}

impl MetricsDocument {
    pub fn new(metrics: &MetricsRow) -> Self {
        Self {
            metrics: metrics.clone(),
            cost_definition: "cost: sum over rounds and agents of sum_j ||x_i - x_j - d_ij||_Q + ||u_i||_R on true states \
                              and applied inputs, references included; cost_with_terminal adds the tracking term at the final states"
                .into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::run_controller;
    use crate::orchestrator::RunOptions;
    use crate::scenario::benchmark_config;

    fn short_benchmark() -> Scenario {
        let mut c = benchmark_config();
        c.controller.t_max = 4;
        c.controller.horizon = 3;
        c.build().unwrap()
    }

    #[test]
    fn log_round_trip() {
        let s = short_benchmark();
        for kind in [ControllerKind::Dsmpc, ControllerKind::NcCbf, ControllerKind::ClfCbf] {
            let record = run_controller(&s, kind, RunOptions::default()).unwrap();
            let mut buf = Vec::new();
            write_run_log(&record, &mut buf).unwrap();
            let back = read_run_log(buf.as_slice()).unwrap();
            assert_eq!(back.state_history(), record.state_history());
            assert_eq!(back.termination, record.termination);
            let (a, b) = (compute_metrics(&record, &s), compute_metrics(&back, &s));
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            let mut again = Vec::new();
            write_run_log(&back, &mut again).unwrap();
            assert_eq!(again, buf);
        }
    }

    #[test]
    fn truncated_log_is_rejected() {
        let s = short_benchmark();
        let record = run_controller(&s, ControllerKind::NcCbf, RunOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_run_log(&record, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: Vec<&str> = text.lines().collect();
        let partial = cut[..cut.len() - 1].join("\n");
        assert!(matches!(read_run_log(partial.as_bytes()), Err(Error::Parse(_))));
    }

    #[test]
    fn trajectory_has_fixed_header() {
        let s = short_benchmark();
        let record = run_controller(&s, ControllerKind::Dsmpc, RunOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&record, &s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), TRAJECTORY_HEADER.join(","));
        assert_eq!(lines.count(), 3 * (record.rounds.len() + 1));
    }
}
