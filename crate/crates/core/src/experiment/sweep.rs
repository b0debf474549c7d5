//! Grid sweeps over training settings, one run directory per cell and a
//! score-sorted summary table.

use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::config::RunConfig;
use super::eval::evaluate;
use super::report::normalized_score;
use super::train::run_training;

pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_HEADER: &str = "rank,cell,config,normalized_score,status,error";
pub const AXES: [&str; 6] = ["method", "d_coef", "batch_size", "steps", "batch_steps", "teacher"];

/// Parsed `axis=v1,v2;axis=...` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<String>)>,
}

impl Grid {
    pub fn parse(spec: &str) -> Result<Self> {
        let mut axes = Vec::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (axis, values) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid axis {part:?} is not axis=v1,v2")))?;
            let axis = axis.trim();
            if !AXES.contains(&axis) {
                return Err(Error::Config(format!("unknown grid axis {axis:?} (expected one of {AXES:?})")));
            }
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(Error::Config(format!("grid axis {axis} has no values")));
            }
            if axes.iter().any(|(a, _)| a == axis) {
                return Err(Error::Config(format!("grid axis {axis} given twice")));
            }
            axes.push((axis.to_string(), values));
        }
        if axes.is_empty() {
            return Err(Error::Config("empty sweep grid".into()));
        }
        Ok(Self { axes })
    }

    /// Cartesian product in axis order, last axis fastest.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells = vec![Vec::new()];
        for (axis, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((axis.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

/// Config of one cell and whether it distills.
pub fn cell_config(base: &RunConfig, cell: &[(String, String)], index: usize) -> Result<(RunConfig, bool)> {
    let mut cfg = base.clone();
    let mut distill = true;
    for (axis, v) in cell {
        match axis.as_str() {
            "method" => {
                distill = match v.as_str() {
                    "distill" => true,
                    "scratch" | "train" => false,
                    other => return Err(Error::Config(format!("unknown method {other:?}"))),
                }
            }
            "batch_steps" => {
                let (b, s) = v
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("batch_steps value {v:?} is not <batch>x<steps>")))?;
                cfg.set("batch_size", b)?;
                cfg.set("steps", s)?;
            }
            key => cfg.set(key, v)?,
        }
    }
    cfg.out = base.out.join("cells").join(format!("cell_{index:03}"));
    cfg.grid = String::new();
    Ok((cfg, distill))
}

pub fn cell_label(cell: &[(String, String)]) -> String {
    cell.iter().map(|(a, v)| format!("{a}={v}")).collect::<Vec<_>>().join(";")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: String,
    pub config: String,
    pub score: Option<f64>,
    pub error: Option<String>,
}

fn run_cell(base: &RunConfig, cell: &[(String, String)], index: usize) -> Result<f64> {
    let (cfg, distill) = cell_config(base, cell, index)?;
    let out = run_training(&cfg, distill)?;
    let scores = if out.last_scores.is_empty() {
        evaluate(&out.model, &cfg.tasks, cfg.eval_episodes.max(1), cfg.seed, &cfg.planner)?
    } else {
        out.last_scores
    };
    normalized_score(&scores.iter().map(|s| s.score).collect::<Vec<_>>())
}

/// Score descending, failed cells last, ties broken by config string.
pub fn sort_results(results: &mut [CellResult]) {
    results.sort_by(|a, b| match (a.score, b.score) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.config.cmp(&b.config)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.config.cmp(&b.config),
    });
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n', '\r'], " ")
}

pub fn results_csv(results: &[CellResult]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for (rank, r) in results.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            rank + 1,
            r.cell,
            csv_field(&r.config),
            r.score.map(|x| x.to_string()).unwrap_or_default(),
            if r.error.is_some() { "failed" } else { "ok" },
            csv_field(r.error.as_deref().unwrap_or("")),
        );
    }
    s
}

/// Runs every cell in order. A failing cell is recorded and the sweep goes on.
pub fn run_sweep(base: &RunConfig) -> Result<Vec<CellResult>> {
    let grid = Grid::parse(&base.grid)?;
    let cells = grid.cells();
    // Validate every cell before producing any output.
    for (i, c) in cells.iter().enumerate() {
        cell_config(base, c, i)?;
    }
    std::fs::create_dir_all(&base.out)?;
    base.write(&base.out)?;
    let mut results = Vec::with_capacity(cells.len());
    for (i, c) in cells.iter().enumerate() {
        let label = cell_label(c);
        let (score, error) = match run_cell(base, c, i) {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(e.to_string())),
        };
        results.push(CellResult {
            cell: format!("cell_{i:03}"),
            config: label,
            score,
            error,
        });
    }
    sort_results(&mut results);
    std::fs::write(base.out.join(SWEEP_FILE), results_csv(&results))?;
    Ok(results)
}
