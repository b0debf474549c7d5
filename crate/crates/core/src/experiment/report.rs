//! Scores, run reports and long-format metric CSVs.

use std::fmt::Write as _;
use std::path::Path;

use crate::envs::Task;
use crate::error::{Error, Result};

pub const REPORT_FILE: &str = "report.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const CSV_HEADER: &str = "step,metric,value,task";

/// Mean of 0–1000 task scores divided by 10.
pub fn normalized_score(task_scores: &[f64]) -> Result<f64> {
    if task_scores.is_empty() {
        return Err(Error::Invalid("normalized score of an empty score list".into()));
    }
    if let Some(s) = task_scores.iter().find(|s| !(0.0..=1000.0).contains(*s)) {
        return Err(Error::Invalid(format!("task score {s} outside [0, 1000]")));
    }
    Ok(task_scores.iter().sum::<f64>() / task_scores.len() as f64 / 10.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskScore {
    pub task: Task,
    /// Mean of the per-episode 0–1000 scores.
    pub score: f64,
    pub returns: Vec<f64>,
}

/// Deterministic summary of a run. Wall-clock time is kept out of it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub command: String,
    pub scores: Vec<TaskScore>,
    /// Additional `key=value` facts (hashes, final losses).
    pub entries: Vec<(String, String)>,
}

impl RunReport {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn task_scores(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.score).collect()
    }

    pub fn normalized(&self) -> Result<f64> {
        normalized_score(&self.task_scores())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = format!("command={}\n", self.command);
        if !self.scores.is_empty() {
            for t in &self.scores {
                let _ = writeln!(s, "score.{}={}", t.task.name(), t.score);
            }
            let _ = writeln!(s, "normalized_score={}", self.normalized()?);
        }
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        Ok(s)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(REPORT_FILE), self.to_text()?)?;
        Ok(())
    }
}

/// Reads `key=value` lines of a written report.
pub fn parse_report(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

/// Rows of `step,metric,value,task`; `task` is empty for task-free metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsCsv {
    pub rows: Vec<(u64, String, f64, Option<Task>)>,
}

impl MetricsCsv {
    pub fn push(&mut self, step: u64, metric: &str, value: f64, task: Option<Task>) {
        self.rows.push((step, metric.into(), value, task));
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for (step, metric, value, task) in &self.rows {
            let _ = writeln!(s, "{step},{metric},{value},{}", task.map(|t| t.name()).unwrap_or(""));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
