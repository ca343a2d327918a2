//! Overlap scores and the per-class `mean±std` report.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Dice overlap of class `class` in percent. Two empty masks score 100.
pub fn dice_score(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "dice_score",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class, b == class);
        p += ia as u64;
        g += ib as u64;
        both += (ia && ib) as u64;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (p + g) as f64)
}

/// Summary of one class across cases.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl ClassStats {
    fn new(name: String, values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            name,
            values,
            mean,
            std: var.sqrt(),
        }
    }

    /// `"91.4±11.4"`.
    pub fn cell(&self) -> String {
        format!("{:.1}±{:.1}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub classes: Vec<ClassStats>,
}

/// Builds a report from `scores[case][class]`, one column per entry of `names`.
pub fn aggregate_report(names: &[String], scores: &[Vec<f64>]) -> Result<DiceReport> {
    if scores.is_empty() || names.is_empty() {
        return Err(Error::contract(
            "aggregate_report needs at least one case and one class",
        ));
    }
    for (i, row) in scores.iter().enumerate() {
        if row.len() != names.len() {
            return Err(Error::contract(format!(
                "case {i} has {} scores for {} classes",
                row.len(),
                names.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::contract(format!("dice value {v} outside [0, 100]")));
        }
    }
    let classes = names
        .iter()
        .enumerate()
        .map(|(c, name)| ClassStats::new(name.clone(), scores.iter().map(|row| row[c]).collect()))
        .collect();
    Ok(DiceReport { classes })
}

impl DiceReport {
    /// Mean over classes of the per-class means.
    pub fn mean_of_means(&self) -> f64 {
        self.classes.iter().map(|c| c.mean).sum::<f64>() / self.classes.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,mean,std,n\n");
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{}",
                c.name,
                c.mean,
                c.std,
                c.values.len()
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.name.chars().count())
            .max()
            .unwrap_or(0)
            .max(5);
        let cells: Vec<String> = self.classes.iter().map(ClassStats::cell).collect();
        let cw = cells
            .iter()
            .map(|c| c.chars().count())
            .max()
            .unwrap_or(0)
            .max(4);
        let mut out = format!("{:<width$}  {:>cw$}  {:>3}\n", "class", "dice", "n");
        for (c, cell) in self.classes.iter().zip(&cells) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>cw$}  {:>3}",
                c.name,
                cell,
                c.values.len()
            );
        }
        out
    }
}
