//! Continual-learning performance matrix, average performance (AP),
//! average forgetting (FG), accuracy and macro-F1.
//!
//! Matrix CSV layout: a header `task,after_1,...,after_T`, then one row per
//! task `i` holding `a[i][j]` for `j ≥ i` and empty cells for `j < i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Accuracy,
    F1Macro,
}

/// `a[i][j]`: performance on task `i` after training through task `j`
/// (0-based, `i ≤ j`), stored as fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    pub metric: MetricKind,
    tasks: usize,
    cells: Vec<Option<f64>>,
}

impl PerformanceMatrix {
    pub fn new(tasks: usize, metric: MetricKind) -> Self {
        Self {
            metric,
            tasks,
            cells: vec![None; tasks * tasks],
        }
    }

    /// Builds a matrix from its upper triangle, `rows[i][j - i] = a[i][j]`.
    pub fn from_upper(rows: &[Vec<f64>], metric: MetricKind) -> Result<Self> {
        let t = rows.len();
        let mut m = Self::new(t, metric);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != t - i {
                return Err(Error::invalid(format!("row {i} needs {} entries", t - i)));
            }
            for (k, &v) in row.iter().enumerate() {
                m.set(i, i + k, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        if i > j || j >= self.tasks {
            return Err(Error::invalid(format!("cell ({i}, {j}) outside the upper triangle")));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("performance {v} outside [0, 1]")));
        }
        self.cells[i * self.tasks + j] = Some(v);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i > j || j >= self.tasks {
            return None;
        }
        self.cells[i * self.tasks + j]
    }

    fn require(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j)
            .ok_or_else(|| Error::invalid(format!("cell ({i}, {j}) is not populated")))
    }

    /// `(1/T)·Σ_t a[t][T]`.
    pub fn average_performance(&self) -> Result<f64> {
        if self.tasks == 0 {
            return Err(Error::invalid("empty performance matrix"));
        }
        let last = self.tasks - 1;
        let mut sum = 0.0;
        for i in 0..self.tasks {
            sum += self.require(i, last)?;
        }
        Ok(sum / self.tasks as f64)
    }

    /// Per-task term of the forgetting average:
    /// `max_{z ∈ [t, T−1)} a[t][z] − a[t][T−1]`, unclamped.
    pub fn task_forgetting(&self, t: usize) -> Result<f64> {
        let last = self.tasks - 1;
        if t >= last {
            return Err(Error::invalid(format!("task {t} has no later task")));
        }
        let fin = self.require(t, last)?;
        let mut best = f64::NEG_INFINITY;
        for z in t..last {
            best = best.max(self.require(t, z)? - fin);
        }
        Ok(best)
    }

    /// Mean of [`task_forgetting`](Self::task_forgetting) over all but the
    /// last task. Negative values (backward transfer) are kept.
    pub fn average_forgetting(&self) -> Result<f64> {
        if self.tasks < 2 {
            return Err(Error::invalid("forgetting needs at least two tasks"));
        }
        let mut sum = 0.0;
        for t in 0..self.tasks - 1 {
            sum += self.task_forgetting(t)?;
        }
        Ok(sum / (self.tasks - 1) as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["task".to_string()];
        header.extend((1..=self.tasks).map(|j| format!("after_{j}")));
        w.write_record(&header).expect("in-memory write");
        for i in 0..self.tasks {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend((0..self.tasks).map(|j| self.get(i, j).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
    }

    pub fn from_csv(text: &str, metric: MetricKind) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let bad = |m: String| Error::Format(format!("matrix csv: {m}"));
        let header = rd.headers().map_err(|e| bad(e.to_string()))?.clone();
        let t = header.len().saturating_sub(1);
        if t == 0 {
            return Err(bad("no task columns".into()));
        }
        if header.get(0) != Some("task")
            || header.iter().skip(1).enumerate().any(|(j, h)| h != format!("after_{}", j + 1))
        {
            return Err(bad("unexpected header".into()));
        }
        let mut m = Self::new(t, metric);
        let mut seen = 0;
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if i >= t || rec.len() != t + 1 {
                return Err(bad(format!("row {} has the wrong shape", i + 1)));
            }
            if rec.get(0) != Some((i + 1).to_string().as_str()) {
                return Err(bad(format!("row {} is out of order", i + 1)));
            }
            for j in 0..t {
                let cell = rec.get(j + 1).unwrap_or("").trim();
                if cell.is_empty() {
                    continue;
                }
                if j < i {
                    return Err(bad(format!("cell ({}, {}) lies below the diagonal", i + 1, j + 1)));
                }
                let v: f64 = cell.parse().map_err(|_| bad(format!("bad number {cell:?}")))?;
                m.set(i, j, v).map_err(|e| bad(e.to_string()))?;
            }
            seen += 1;
        }
        if seen != t {
            return Err(bad(format!("{seen} rows for {t} tasks")));
        }
        Ok(m)
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let ap = self.average_performance()?;
        let fg = if self.tasks >= 2 { Some(self.average_forgetting()?) } else { None };
        let last = self.tasks - 1;
        let tasks = (0..self.tasks)
            .map(|t| {
                Ok(TaskReport {
                    task_id: t as u32 + 1,
                    final_performance: self.require(t, last)?,
                    forgetting: if t < last { Some(self.task_forgetting(t)?) } else { None },
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricsReport {
            metric: self.metric,
            ap,
            fg,
            tasks,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: u32,
    pub final_performance: f64,
    pub forgetting: Option<f64>,
}

/// AP, FG and the per-task breakdown, as written to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: MetricKind,
    pub ap: f64,
    pub fg: Option<f64>,
    pub tasks: Vec<TaskReport>,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("accuracy needs equally long, non-empty inputs"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class F1 over binary multilabel vectors. A class
/// with no positives in either input scores `empty_class_score`.
pub fn f1_macro_with(
    predictions: &[Vec<u8>],
    labels: &[Vec<u8>],
    num_classes: usize,
    empty_class_score: f64,
) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() || num_classes == 0 {
        return Err(Error::invalid("f1 needs equally long, non-empty inputs"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fns = vec![0usize; num_classes];
    for (p, l) in predictions.iter().zip(labels) {
        if p.len() != num_classes || l.len() != num_classes {
            return Err(Error::invalid(format!("multilabel vectors must have {num_classes} entries")));
        }
        for c in 0..num_classes {
            match (p[c] != 0, l[c] != 0) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fns[c] += 1,
                (false, false) => {}
            }
        }
    }
    let sum: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fns[c];
            if denom == 0 {
                empty_class_score
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / num_classes as f64)
}

pub fn f1_macro(predictions: &[Vec<u8>], labels: &[Vec<u8>], num_classes: usize) -> Result<f64> {
    f1_macro_with(predictions, labels, num_classes, 0.0)
}

/// Thresholds sigmoid outputs at 0.5, i.e. logits at 0.
pub fn threshold_logits(logits: &[f64]) -> Vec<u8> {
    logits.iter().map(|&z| u8::from(z > 0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand() -> PerformanceMatrix {
        PerformanceMatrix::from_upper(
            &[vec![0.9, 0.8, 0.7], vec![0.85, 0.8], vec![0.9]],
            MetricKind::Accuracy,
        )
        .unwrap()
    }

    #[test]
    fn hand_example() {
        let m = hand();
        assert!((m.average_performance().unwrap() - 0.8).abs() < 1e-12);
        assert!((m.average_forgetting().unwrap() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn single_task() {
        let m = PerformanceMatrix::from_upper(&[vec![0.6]], MetricKind::Accuracy).unwrap();
        assert_eq!(m.average_performance().unwrap(), 0.6);
        assert!(m.average_forgetting().is_err());
        assert_eq!(m.report().unwrap().fg, None);
    }

    #[test]
    fn constant_and_improving_rows() {
        let c = PerformanceMatrix::from_upper(&[vec![0.5, 0.5], vec![0.5]], MetricKind::Accuracy).unwrap();
        assert_eq!(c.average_performance().unwrap(), 0.5);
        assert_eq!(c.average_forgetting().unwrap(), 0.0);
        let up = PerformanceMatrix::from_upper(&[vec![0.4, 0.7], vec![0.5]], MetricKind::Accuracy).unwrap();
        assert!((up.average_forgetting().unwrap() + 0.3).abs() < 1e-12);
    }

    #[test]
    fn lower_triangle_is_rejected() {
        let mut m = PerformanceMatrix::new(3, MetricKind::Accuracy);
        assert!(m.set(1, 0, 0.5).is_err());
        assert!(m.set(0, 0, 1.5).is_err());
        assert!(m.average_performance().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = hand();
        let text = m.to_csv();
        assert_eq!(text.lines().next().unwrap(), "task,after_1,after_2,after_3");
        assert_eq!(text.lines().nth(2).unwrap(), "2,,0.85,0.8");
        assert_eq!(PerformanceMatrix::from_csv(&text, MetricKind::Accuracy).unwrap(), m);
    }

    #[test]
    fn malformed_csv() {
        for bad in [
            "",
            "task\n",
            "task,after_2\n1,0.5\n",
            "task,after_1\n1,abc\n",
            "task,after_1,after_2\n1,0.5,0.5\n2,0.4,0.5\n",
            "task,after_1\n1,0.5\n2,0.5\n",
            "task,after_1,after_2\n1,0.5,0.5\n",
        ] {
            assert!(PerformanceMatrix::from_csv(bad, MetricKind::Accuracy).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn f1_examples() {
        let labels = vec![vec![1, 0, 1], vec![0, 1, 0]];
        assert_eq!(f1_macro(&labels, &labels, 3).unwrap(), 1.0);
        assert_eq!(f1_macro(&[vec![0, 0, 0], vec![0, 0, 0]], &labels, 3).unwrap(), 0.0);
        // per class TP/FP/FN = (1,0,0), (1,1,0), (0,0,1)
        let preds = vec![vec![1, 1, 0], vec![0, 1, 0]];
        let labels = vec![vec![1, 1, 1], vec![0, 0, 0]];
        let f = f1_macro(&preds, &labels, 3).unwrap();
        assert!((f - (1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_empty_class_score_is_configurable() {
        let p = vec![vec![1, 0]];
        assert_eq!(f1_macro(&p, &p, 2).unwrap(), 0.5);
        assert_eq!(f1_macro_with(&p, &p, 2, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_counts_hits() {
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn threshold_at_half_probability() {
        assert_eq!(threshold_logits(&[-0.1, 0.0, 0.2]), vec![0, 0, 1]);
    }
}
