//! Class-incremental task streams and CSV ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub input: Vec<f64>,
    pub label: usize,
}

/// One step of the stream. Labels are global class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTask {
    pub step: usize,
    pub labels: Vec<usize>,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Tasks whose label sets are pairwise disjoint and numbered so that step `t`
/// owns a contiguous id range following step `t − 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    input_dim: usize,
    tasks: Vec<StreamTask>,
}

impl Stream {
    pub fn new(input_dim: usize, tasks: Vec<StreamTask>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::config("stream has no tasks"));
        }
        let mut next = 0;
        let mut seen = BTreeSet::new();
        for (t, task) in tasks.iter().enumerate() {
            if task.step != t {
                return Err(Error::config(format!("task {t} carries step index {}", task.step)));
            }
            for &l in &task.labels {
                if !seen.insert(l) {
                    return Err(Error::config(format!("label {l} appears in more than one step")));
                }
            }
            let want: Vec<usize> = (next..next + task.labels.len()).collect();
            if task.labels != want {
                return Err(Error::config(format!("step {t} labels must be {want:?}")));
            }
            next += task.labels.len();
            for inst in task.train.iter().chain(&task.test) {
                if !task.labels.contains(&inst.label) {
                    return Err(Error::config(format!(
                        "step {t} holds an instance of label {} outside its label set",
                        inst.label
                    )));
                }
                if inst.input.len() != input_dim || inst.input.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config(format!("step {t} holds a malformed input vector")));
                }
            }
            if task.train.is_empty() {
                return Err(Error::config(format!("step {t} has no training data")));
            }
        }
        Ok(Self { input_dim, tasks })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn tasks(&self) -> &[StreamTask] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.labels.len()).sum()
    }

    /// Writes `label,f1..fD` rows for train and test sets.
    pub fn to_csv(&self, test: bool) -> String {
        let mut out = String::from("label");
        for i in 1..=self.input_dim {
            out.push_str(&format!(",f{i}"));
        }
        out.push('\n');
        for task in &self.tasks {
            for inst in if test { &task.test } else { &task.train } {
                out.push_str(&inst.label.to_string());
                for v in &inst.input {
                    out.push_str(&format!(",{v:?}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic split: row `index` is a test row iff its hash falls below `ratio`.
pub fn is_test_row(seed: u64, index: u64, ratio: f64) -> bool {
    let h = splitmix64(seed ^ splitmix64(index));
    ((h >> 11) as f64 / (1u64 << 53) as f64) < ratio
}

/// Parses `label,f1..fD` rows. Raw labels are sorted, mapped to `0..C` and
/// dealt into steps of `classes_per_step` consecutive classes.
pub fn parse_csv(text: &str, classes_per_step: usize, test_ratio: f64, seed: u64) -> Result<Stream> {
    if classes_per_step == 0 {
        return Err(Error::config("classes_per_step must be positive"));
    }
    if !(0.0..1.0).contains(&test_ratio) {
        return Err(Error::config("test ratio must lie in [0, 1)"));
    }
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Csv {
        line: 1,
        detail: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let dim = cols.len().saturating_sub(1);
    let header_ok = cols.first() == Some(&"label")
        && dim > 0
        && cols[1..].iter().enumerate().all(|(i, c)| *c == format!("f{}", i + 1));
    if !header_ok {
        return Err(Error::Csv {
            line: 1,
            detail: "header must be label,f1,...,fD".into(),
        });
    }
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::Csv {
                line: i + 1,
                detail: format!("expected {} fields, found {}", dim + 1, fields.len()),
            });
        }
        let input = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Csv {
                line: i + 1,
                detail: "non-numeric or non-finite feature".into(),
            })?;
        rows.push((fields[0].to_string(), input));
    }
    let raw: BTreeSet<&str> = rows.iter().map(|(l, _)| l.as_str()).collect();
    if !raw.len().is_multiple_of(classes_per_step) || raw.is_empty() {
        return Err(Error::config(format!(
            "{} classes cannot be divided into steps of {classes_per_step}",
            raw.len()
        )));
    }
    let ids: BTreeMap<&str, usize> = raw.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let steps = raw.len() / classes_per_step;
    let mut tasks: Vec<StreamTask> = (0..steps)
        .map(|t| StreamTask {
            step: t,
            labels: (t * classes_per_step..(t + 1) * classes_per_step).collect(),
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    for (i, (label, input)) in rows.iter().enumerate() {
        let id = ids[label.as_str()];
        let inst = Instance {
            input: input.clone(),
            label: id,
        };
        let task = &mut tasks[id / classes_per_step];
        if is_test_row(seed, i as u64, test_ratio) {
            task.test.push(inst);
        } else {
            task.train.push(inst);
        }
    }
    Stream::new(dim, tasks)
}

pub fn load_csv(path: &Path, classes_per_step: usize, test_ratio: f64, seed: u64) -> Result<Stream> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, classes_per_step, test_ratio, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(label: usize) -> Instance {
        Instance {
            input: vec![0.0],
            label,
        }
    }

    #[test]
    fn overlapping_labels_rejected() {
        let tasks = vec![
            StreamTask { step: 0, labels: vec![0, 1], train: vec![inst(0)], test: vec![] },
            StreamTask { step: 1, labels: vec![1, 2], train: vec![inst(2)], test: vec![] },
        ];
        assert!(matches!(Stream::new(1, tasks), Err(Error::Config(_))));
    }

    #[test]
    fn foreign_instance_rejected() {
        let tasks = vec![StreamTask { step: 0, labels: vec![0], train: vec![inst(3)], test: vec![] }];
        assert!(Stream::new(1, tasks).is_err());
    }

    #[test]
    fn csv_roundtrip_and_relabeling() {
        let text = "label,f1,f2\ncat,0.5,1\ndog,1,2\ncat,0.25,3\nbird,4,5\n";
        let s = parse_csv(text, 1, 0.0, 7).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.input_dim(), 2);
        // bird < cat < dog
        assert_eq!(s.tasks()[1].train.len(), 2);
        assert_eq!(s.tasks()[1].train[0].input, vec![0.5, 1.0]);
        let again = parse_csv(&s.to_csv(false), 1, 0.0, 7).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        assert!(matches!(parse_csv("lbl,f1\n0,1\n", 1, 0.0, 0), Err(Error::Csv { line: 1, .. })));
        assert!(matches!(parse_csv("label,f1\n0,1\n1,x\n", 1, 0.0, 0), Err(Error::Csv { line: 3, .. })));
        assert!(matches!(parse_csv("label,f1\n0,1,2\n", 1, 0.0, 0), Err(Error::Csv { line: 2, .. })));
        assert!(matches!(parse_csv("label,f1\n0,1\n1,1\n2,2\n", 2, 0.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn hash_split_is_deterministic_and_near_ratio() {
        let n = 10_000;
        let hits = (0..n).filter(|&i| is_test_row(3, i, 0.2)).count();
        assert!((1800..2200).contains(&hits), "{hits}");
        let again = (0..n).filter(|&i| is_test_row(3, i, 0.2)).count();
        assert_eq!(hits, again);
    }
}
