//! CSV metrics: per-update training losses (including per-task auxiliary
//! losses), per-episode returns and periodic evaluation scores. Rows carry
//! no timestamps, so identical runs produce byte-identical files.

use crate::agent::StepMetrics;
use crate::aux_tasks::TaskId;
use std::io::Write;

/// Column layout: fixed prefix, one KL column per optimized loss, then one
/// column per (member, assigned task) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSchema {
    pub kl_cols: usize,
    pub aux_cols: Vec<(usize, TaskId)>,
}

impl MetricsSchema {
    pub fn new(joint: bool, assignment: &[Vec<(TaskId, f64)>]) -> Self {
        let kl_cols = if joint { 1 } else { assignment.len() };
        let mut aux_cols = Vec::new();
        for (m, tasks) in assignment.iter().enumerate() {
            for &(task, _) in tasks {
                aux_cols.push((m, task));
            }
        }
        MetricsSchema { kl_cols, aux_cols }
    }

    pub fn header(&self) -> String {
        let mut cols = vec![
            "kind".to_string(),
            "env_step".to_string(),
            "update".to_string(),
            "episode".to_string(),
            "ret".to_string(),
            "beta".to_string(),
            "prio_mean".to_string(),
            "prio_max".to_string(),
            "grad_norm".to_string(),
            "hist_clamped".to_string(),
        ];
        for m in 0..self.kl_cols {
            cols.push(format!("kl_m{m}"));
        }
        for &(m, task) in &self.aux_cols {
            cols.push(format!("aux_m{m}_{}", task.short_name()));
        }
        cols.join(",")
    }
}

pub struct MetricsWriter<W: Write> {
    pub schema: MetricsSchema,
    out: W,
}

fn f(v: f64) -> String {
    format!("{v}")
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(schema: MetricsSchema, mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{}", schema.header())?;
        Ok(MetricsWriter { schema, out })
    }

    fn write_row(&mut self, fields: &[String]) -> std::io::Result<()> {
        writeln!(self.out, "{}", fields.join(","))
    }

    pub fn train_row(
        &mut self,
        env_step: u64,
        update: u64,
        beta: f64,
        prio_mean: f64,
        prio_max: f64,
        metrics: &StepMetrics,
    ) -> std::io::Result<()> {
        let grad_mean =
            metrics.grad_norm.iter().sum::<f64>() / metrics.grad_norm.len().max(1) as f64;
        let mut fields = vec![
            "train".to_string(),
            env_step.to_string(),
            update.to_string(),
            String::new(),
            String::new(),
            f(beta),
            f(prio_mean),
            f(prio_max),
            f(grad_mean),
            metrics.clamped.to_string(),
        ];
        for m in 0..self.schema.kl_cols {
            fields.push(metrics.kl.get(m).map(|&v| f(v)).unwrap_or_default());
        }
        for &(m, task) in &self.schema.aux_cols.clone() {
            let v = metrics
                .aux
                .get(m)
                .and_then(|tasks| tasks.iter().find(|&&(t, _)| t == task))
                .map(|&(_, v)| f(v))
                .unwrap_or_default();
            fields.push(v);
        }
        self.write_row(&fields)
    }

    pub fn episode_row(&mut self, env_step: u64, episode: u64, ret: f64) -> std::io::Result<()> {
        let mut fields = vec![
            "episode".to_string(),
            env_step.to_string(),
            String::new(),
            episode.to_string(),
            f(ret),
        ];
        fields.resize(10 + self.schema.kl_cols + self.schema.aux_cols.len(), String::new());
        self.write_row(&fields)
    }

    pub fn eval_row(&mut self, env_step: u64, mean_ret: f64) -> std::io::Result<()> {
        let mut fields = vec![
            "eval".to_string(),
            env_step.to_string(),
            String::new(),
            String::new(),
            f(mean_ret),
        ];
        fields.resize(10 + self.schema.kl_cols + self.schema.aux_cols.len(), String::new());
        self.write_row(&fields)
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Parsed view of a metrics CSV (used by evaluation tooling and tests).
#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn parse(text: &str) -> MetricsTable {
        let mut lines = text.lines();
        let header = lines
            .next()
            .map(|h| h.split(',').map(str::to_string).collect())
            .unwrap_or_default();
        let rows = lines
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect();
        MetricsTable { header, rows }
    }

    pub fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric values of `col` over rows of the given kind, paired with the
    /// env_step of each row.
    pub fn series(&self, kind: &str, col: &str) -> Vec<(u64, f64)> {
        let ci = match self.col(col) {
            Some(c) => c,
            None => return Vec::new(),
        };
        self.rows
            .iter()
            .filter(|r| r.first().map(String::as_str) == Some(kind))
            .filter_map(|r| {
                let step: u64 = r.get(1)?.parse().ok()?;
                let v: f64 = r.get(ci)?.parse().ok()?;
                Some((step, v))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_has_one_aux_column_per_assigned_task() {
        let assignment = vec![
            vec![(TaskId::NextState, 1.0)],
            vec![(TaskId::RewardFn, 1.0)],
        ];
        let schema = MetricsSchema::new(false, &assignment);
        let h = schema.header();
        assert!(h.contains("kl_m0") && h.contains("kl_m1"));
        assert!(h.contains("aux_m0_ns") && h.contains("aux_m1_rf"));
        assert!(!h.contains("aux_m0_rf"));
    }

    #[test]
    fn rows_roundtrip_through_parse() {
        let schema = MetricsSchema::new(false, &[vec![]]);
        let mut w = MetricsWriter::new(schema, Vec::new()).unwrap();
        let m = StepMetrics {
            kl: vec![0.5],
            aux: vec![vec![]],
            grad_norm: vec![2.0],
            clamped: 0,
        };
        w.train_row(10, 1, 0.4, 1.0, 1.5, &m).unwrap();
        w.episode_row(12, 0, 3.0).unwrap();
        w.eval_row(20, 2.5).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        let t = MetricsTable::parse(&text);
        assert_eq!(t.series("train", "kl_m0"), vec![(10, 0.5)]);
        assert_eq!(t.series("episode", "ret"), vec![(12, 3.0)]);
        assert_eq!(t.series("eval", "ret"), vec![(20, 2.5)]);
    }
}
