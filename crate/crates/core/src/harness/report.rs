//! Trial and sweep reports: JSON documents plus a flat CSV table for
//! plotting.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::Result;
use crate::harness::config::ExperimentConfig;

/// Everything recorded about one trial; together with the config it fully
/// reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub true_counts: Vec<usize>,
    /// Real-valued recovery before rounding.
    pub raw: Vec<f64>,
    pub counts: Vec<usize>,
    pub ins_acc: f64,
    pub cls_acc: f64,
    pub ill_conditioned: bool,
}

/// Mean and sample standard deviation of both metrics across trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub trials: usize,
    pub mean_ins_acc: f64,
    pub std_ins_acc: f64,
    pub mean_cls_acc: f64,
    pub std_cls_acc: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

impl Aggregate {
    pub fn from_trials(trials: &[TrialReport]) -> Self {
        let ins: Vec<f64> = trials.iter().map(|t| t.ins_acc).collect();
        let cls: Vec<f64> = trials.iter().map(|t| t.cls_acc).collect();
        let (mean_ins_acc, std_ins_acc) = mean_std(&ins);
        let (mean_cls_acc, std_cls_acc) = mean_std(&cls);
        Aggregate {
            trials: trials.len(),
            mean_ins_acc,
            std_ins_acc,
            mean_cls_acc,
            std_cls_acc,
        }
    }
}

/// Report for a single-configuration run of R trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub trials: Vec<TrialReport>,
    pub aggregate: Aggregate,
}

/// One axis value of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: String,
    pub trials: Vec<TrialReport>,
    pub aggregate: Aggregate,
}

/// Report for a sweep over one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

/// Writes the fixed-column trial table:
/// `axis_value, trial, seed, ins_acc, cls_acc, ill_conditioned`.
pub fn write_trials_csv<W: Write>(
    writer: W,
    rows: &[(String, Vec<TrialReport>)],
) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record([
        "axis_value",
        "trial",
        "seed",
        "ins_acc",
        "cls_acc",
        "ill_conditioned",
    ])
    .map_err(|e| crate::error::Error::Format(format!("csv write failed: {e}")))?;
    for (axis_value, trials) in rows {
        for trial in trials {
            csv.write_record([
                axis_value.clone(),
                trial.trial.to_string(),
                trial.seed.to_string(),
                trial.ins_acc.to_string(),
                trial.cls_acc.to_string(),
                u8::from(trial.ill_conditioned).to_string(),
            ])
            .map_err(|e| crate::error::Error::Format(format!("csv write failed: {e}")))?;
        }
    }
    csv.flush()?;
    Ok(())
}

impl RunReport {
    pub fn csv_rows(&self) -> Vec<(String, Vec<TrialReport>)> {
        vec![("none".to_string(), self.trials.clone())]
    }
}

impl SweepReport {
    pub fn csv_rows(&self) -> Vec<(String, Vec<TrialReport>)> {
        self.rows
            .iter()
            .map(|r| (r.axis_value.clone(), r.trials.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(i: usize, ins: f64) -> TrialReport {
        TrialReport {
            trial: i,
            seed: 100 + i as u64,
            true_counts: vec![2, 2],
            raw: vec![2.0, 2.0],
            counts: vec![2, 2],
            ins_acc: ins,
            cls_acc: 1.0,
            ill_conditioned: false,
        }
    }

    #[test]
    fn aggregate_mean_matches_arithmetic_mean() {
        let trials = vec![trial(0, 0.5), trial(1, 0.75), trial(2, 1.0)];
        let agg = Aggregate::from_trials(&trials);
        assert!((agg.mean_ins_acc - 0.75).abs() < 1e-12);
        assert_eq!(agg.trials, 3);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let rows = vec![("0.5".to_string(), vec![trial(0, 0.9)])];
        let mut out = Vec::new();
        write_trials_csv(&mut out, &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "axis_value,trial,seed,ins_acc,cls_acc,ill_conditioned"
        );
        assert_eq!(lines.next().unwrap(), "0.5,0,100,0.9,1,0");
    }
}
