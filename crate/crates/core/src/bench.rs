//! The comparison grid: every controller over the horizons and barrier
//! rates of the reference table.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::run_controller;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, MetricsRow};
use crate::orchestrator::{ControllerKind, RunOptions, RunRecord};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub controller: ControllerKind,
    pub horizon: Option<usize>,
    pub gamma: Option<f64>,
}

impl Cell {
    pub fn dsmpc(horizon: usize, gamma: f64) -> Self {
        Cell { controller: ControllerKind::Dsmpc, horizon: Some(horizon), gamma: Some(gamma) }
    }

    pub fn mpc_dc(horizon: usize) -> Self {
        Cell { controller: ControllerKind::MpcDc, horizon: Some(horizon), gamma: None }
    }

    pub fn plain(controller: ControllerKind) -> Self {
        Cell { controller, horizon: None, gamma: None }
    }

    /// The scenario with this cell's overrides applied.
    pub fn apply(&self, scenario: &Scenario) -> Result<Scenario> {
        let mut c = scenario.config.clone();
        if let Some(h) = self.horizon {
            c.controller.horizon = h;
        }
        if let Some(g) = self.gamma {
            c.controller.gamma = g;
        }
        c.build()
    }
}

pub const DSMPC_CELLS: [(usize, f64); 5] = [(2, 0.1), (3, 0.1), (5, 0.1), (5, 0.4), (5, 0.8)];
pub const MPC_DC_HORIZONS: [usize; 3] = [15, 20, 30];

pub fn table_grid() -> Vec<Cell> {
    let mut cells: Vec<Cell> = DSMPC_CELLS.iter().map(|&(h, g)| Cell::dsmpc(h, g)).collect();
    cells.extend(MPC_DC_HORIZONS.iter().map(|&h| Cell::mpc_dc(h)));
    cells.push(Cell::plain(ControllerKind::NcCbf));
    cells.push(Cell::plain(ControllerKind::ClfCbf));
    cells
}

#[derive(Debug, Clone)]
pub struct CellRun {
    pub cell: Cell,
    pub scenario: Scenario,
    pub record: RunRecord,
    pub metrics: MetricsRow,
    pub wall_time: f64,
}

/// Runs one cell with serial agent solves so `act` measures single solves.
pub fn run_cell(scenario: &Scenario, cell: Cell) -> Result<CellRun> {
    let started = Instant::now();
    let scenario = cell.apply(scenario)?;
    let record = run_controller(&scenario, cell.controller, RunOptions { parallel: false })?;
    let metrics = compute_metrics(&record, &scenario);
    Ok(CellRun { cell, scenario, record, metrics, wall_time: started.elapsed().as_secs_f64() })
}

/// Runs independent cells on a pool of `workers` threads, keeping grid order.
pub fn run_cells(scenario: &Scenario, cells: &[Cell], workers: usize) -> Result<Vec<CellRun>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Io(format!("worker pool: {e}")))?;
    pool.install(|| cells.par_iter().map(|&c| run_cell(scenario, c)).collect())
}

/// Sizes the global pool used for per-agent solves. Only the first call has an effect.
pub fn init_global_workers(workers: usize) {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build_global();
}

/// Worker count from `DSMPC_WORKERS`, defaulting to the available parallelism.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var("DSMPC_WORKERS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("DSMPC_WORKERS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::benchmark_config;

    #[test]
    fn grid_covers_every_row() {
        let g = table_grid();
        assert_eq!(g.len(), 10);
        assert_eq!(g.iter().filter(|c| c.controller == ControllerKind::Dsmpc).count(), 5);
        assert_eq!(g[7], Cell::mpc_dc(30));
    }

    #[test]
    fn overrides_apply() {
        let s = benchmark_config().build().unwrap();
        let t = Cell::dsmpc(3, 0.4).apply(&s).unwrap();
        assert_eq!(t.params().horizon, 3);
        assert_eq!(t.params().gamma, 0.4);
        assert_eq!(Cell::plain(ControllerKind::NcCbf).apply(&s).unwrap().config, s.config);
    }
}
