//! Temporal IoU, recall at tIoU thresholds and mean IoU.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Intersection over union of two intervals, clamped below at 0 for
/// disjoint pairs.
pub fn tiou(g: (f64, f64), p: (f64, f64)) -> Result<f64> {
    if g.0 >= g.1 {
        return Err(Error::Data(format!(
            "degenerate ground truth ({}, {})",
            g.0, g.1
        )));
    }
    let inter = g.1.min(p.1) - g.0.max(p.0);
    let union = g.1.max(p.1) - g.0.min(p.0);
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).max(0.0))
}

/// Percentage of samples whose tIoU is strictly above `threshold`.
pub fn recall_at(tious: &[f64], threshold: f64) -> Result<f64> {
    if tious.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let hits = tious.iter().filter(|&&t| t > threshold).count();
    Ok(100.0 * hits as f64 / tious.len() as f64)
}

pub fn miou(tious: &[f64]) -> Result<f64> {
    if tious.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(100.0 * tious.iter().sum::<f64>() / tious.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `(threshold, recall %)` in the order requested.
    pub recalls: Vec<(f64, f64)>,
    pub miou: f64,
    pub count: usize,
    pub tious: Vec<f64>,
}

impl EvalReport {
    pub fn from_tious(tious: Vec<f64>, thresholds: &[f64]) -> Result<Self> {
        let recalls = thresholds
            .iter()
            .map(|&th| recall_at(&tious, th).map(|r| (th, r)))
            .collect::<Result<_>>()?;
        Ok(Self {
            recalls,
            miou: miou(&tious)?,
            count: tious.len(),
            tious,
        })
    }

    /// Pairs of ground truth and (already clamped) predicted intervals.
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = ((f64, f64), (f64, f64))>,
        thresholds: &[f64],
    ) -> Result<Self> {
        let tious = pairs
            .into_iter()
            .map(|(g, p)| tiou(g, p))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tious(tious, thresholds)
    }

    pub fn recall(&self, threshold: f64) -> Option<f64> {
        self.recalls
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-12)
            .map(|&(_, r)| r)
    }

    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = self.recalls.iter().map(|(t, _)| format!("R@{t}")).collect();
        cols.push("mIoU".into());
        cols.push("count".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self.recalls.iter().map(|(_, r)| format!("{r:.2}")).collect();
        cols.push(format!("{:.2}", self.miou));
        cols.push(self.count.to_string());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let mut header = String::new();
        let mut values = String::new();
        for (t, r) in &self.recalls {
            write!(header, "{:>9}", format!("R@{t}")).unwrap();
            write!(values, "{r:>9.2}").unwrap();
        }
        write!(header, "{:>9}", "mIoU").unwrap();
        write!(values, "{:>9.2}", self.miou).unwrap();
        writeln!(s, "{header}").unwrap();
        writeln!(s, "{values}").unwrap();
        writeln!(s, "({} samples)", self.count).unwrap();
        s
    }
}
