//! Accuracy matrix and the scalar continual-learning metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `acc[t][j]` is accuracy on step-`j` test data after training step `t`, `j ≤ t`.
/// `correct[t]` and `total[t]` aggregate over all seen classes after step `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub acc: Vec<Vec<f64>>,
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_accuracy: f64,
    pub average_accuracy: f64,
    pub average_incremental_accuracy: f64,
    /// `None` when there is a single step.
    pub average_forgetting: Option<f64>,
}

impl MetricsRecord {
    /// Appends the row for the next step from per-task `(correct, total)` counts.
    pub fn push_step(&mut self, per_task: &[(usize, usize)]) -> Result<()> {
        if per_task.len() != self.acc.len() + 1 {
            return Err(Error::contract(format!(
                "step {} needs {} task entries, got {}",
                self.acc.len(),
                self.acc.len() + 1,
                per_task.len()
            )));
        }
        let row = per_task
            .iter()
            .map(|&(c, n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect();
        self.acc.push(row);
        self.correct.push(per_task.iter().map(|p| p.0).sum());
        self.total.push(per_task.iter().map(|p| p.1).sum());
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.acc.len()
    }

    pub fn aggregate(&self, t: usize) -> f64 {
        if self.total[t] == 0 {
            0.0
        } else {
            self.correct[t] as f64 / self.total[t] as f64
        }
    }

    fn check(&self) -> Result<()> {
        let complete = !self.acc.is_empty()
            && self.correct.len() == self.acc.len()
            && self.total.len() == self.acc.len()
            && self.acc.iter().enumerate().all(|(t, r)| r.len() == t + 1)
            && self.acc.iter().flatten().all(|a| (0.0..=1.0).contains(a));
        if complete {
            Ok(())
        } else {
            Err(Error::contract("accuracy matrix is incomplete or out of range"))
        }
    }

    pub fn summary(&self) -> Result<Summary> {
        self.check()?;
        let t_last = self.steps() - 1;
        let last = &self.acc[t_last];
        let forgetting = (t_last > 0).then(|| {
            (0..t_last)
                .map(|j| {
                    let peak = (j..t_last).map(|t| self.acc[t][j]).fold(f64::NEG_INFINITY, f64::max);
                    peak - last[j]
                })
                .sum::<f64>()
                / t_last as f64
        });
        Ok(Summary {
            final_accuracy: self.aggregate(t_last),
            average_accuracy: last.iter().sum::<f64>() / last.len() as f64,
            average_incremental_accuracy: (0..self.steps()).map(|t| self.aggregate(t)).sum::<f64>()
                / self.steps() as f64,
            average_forgetting: forgetting,
        })
    }

    /// `step,task,accuracy` rows with fixed six-decimal precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,task,accuracy\n");
        for (t, row) in self.acc.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{a:.6}\n", t + 1, j + 1));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_accuracy() {
        let mut m = MetricsRecord::default();
        m.push_step(&[(8, 10)]).unwrap();
        m.push_step(&[(8, 10), (8, 10)]).unwrap();
        m.push_step(&[(8, 10), (8, 10), (8, 10)]).unwrap();
        let s = m.summary().unwrap();
        assert_abs_diff_eq!(s.average_forgetting.unwrap(), 0.0);
        assert_abs_diff_eq!(s.average_incremental_accuracy, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn two_step_example() {
        let mut m = MetricsRecord::default();
        m.push_step(&[(9, 10)]).unwrap();
        m.push_step(&[(5, 10), (14, 20)]).unwrap();
        let s = m.summary().unwrap();
        assert_abs_diff_eq!(s.average_forgetting.unwrap(), 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(s.final_accuracy, 19.0 / 30.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.average_accuracy, 0.6, epsilon = 1e-12);
    }

    #[test]
    fn single_step_has_no_forgetting() {
        let mut m = MetricsRecord::default();
        m.push_step(&[(3, 4)]).unwrap();
        assert_eq!(m.summary().unwrap().average_forgetting, None);
    }

    #[test]
    fn incomplete_matrix_rejected() {
        assert!(MetricsRecord::default().summary().is_err());
        let mut m = MetricsRecord::default();
        assert!(m.push_step(&[(1, 2), (1, 2)]).is_err());
        m.acc.push(vec![0.5, 0.5]);
        m.correct.push(1);
        m.total.push(2);
        assert!(matches!(m.summary(), Err(Error::Contract(_))));
    }

    #[test]
    fn csv_is_fixed_precision() {
        let mut m = MetricsRecord::default();
        m.push_step(&[(1, 3)]).unwrap();
        assert_eq!(m.to_csv(), "step,task,accuracy\n1,1,0.333333\n");
    }
}
