//! Accuracy, modality ratio, reshape counts, top-k frequency tables, and the
//! CSV/JSON exports built from them.
//!
//! Floats are written with six significant digits and a period decimal
//! separator so that exported files are byte-stable.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::numeric::LabelDistribution;
use crate::reshaper::ReshapeDecision;

/// `%g`-style rendering with six significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        trim_zeros(format!("{:.*}", (5 - exp) as usize, x))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Value rounded to what [`fmt_sig6`] prints.
pub fn round_sig6(x: f64) -> f64 {
    fmt_sig6(x).parse().unwrap_or(x)
}

/// Fraction of samples whose argmax (lowest index on ties) is the label.
pub fn accuracy(predictions: &[LabelDistribution], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape("accuracy", predictions.len(), labels.len()));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &y)| p.argmax() == y)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Quotient of two modality accuracies; `None` when the denominator is not
/// positive.
pub fn modality_ratio(numerator: f64, denominator: f64) -> Option<f64> {
    (denominator > 0.0).then(|| numerator / denominator)
}

/// Two-decimal rendering used in summaries.
pub fn fmt_ratio(ratio: Option<f64>) -> String {
    ratio.map_or_else(|| "undefined".into(), |r| format!("{r:.2}"))
}

pub fn reshape_counts(decisions: &[ReshapeDecision], modalities: usize) -> Vec<usize> {
    let mut counts = vec![0; modalities];
    for d in decisions {
        for (c, m) in counts.iter_mut().zip(&d.modalities) {
            *c += usize::from(m.active);
        }
    }
    counts
}

/// `table[true_class][class]`: how often `class` appears among the top-`k`
/// predictions of samples labelled `true_class`. Ties rank lower indices first.
pub fn topk_class_frequency(predictions: &[LabelDistribution], labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("top-k", predictions.len(), labels.len()));
    }
    let classes = predictions.first().map_or(0, LabelDistribution::len);
    if k > classes && !predictions.is_empty() {
        return Err(Error::Invalid(format!("k = {k} exceeds class count {classes}")));
    }
    let mut table = vec![vec![0usize; classes]; classes];
    for (p, &y) in predictions.iter().zip(labels) {
        let mut order: Vec<usize> = (0..classes).collect();
        // stable sort keeps lower indices first among equal probabilities
        order.sort_by(|&a, &b| p.probs()[b].total_cmp(&p.probs()[a]));
        for &c in &order[..k] {
            table[y][c] += 1;
        }
    }
    Ok(table)
}

pub fn topk_csv(table: &[Vec<usize>]) -> String {
    let mut out = String::from("true_class,predicted_class,count\n");
    for (t, row) in table.iter().enumerate() {
        for (p, n) in row.iter().enumerate() {
            out.push_str(&format!("{t},{p},{n}\n"));
        }
    }
    out
}

/// Per-epoch record: training losses, held-out accuracies, ratio, and how
/// many training samples were reshaped per modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss_fused: f64,
    pub train_loss_modality: Vec<f64>,
    pub accuracy: f64,
    pub modality_accuracy: Vec<f64>,
    /// Modality 0 accuracy over modality 1 accuracy.
    pub ratio: Option<f64>,
    pub reshape_counts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

pub fn csv_header(modalities: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "train_loss_fused".to_string()];
    cols.extend((0..modalities).map(|u| format!("train_loss_m{u}")));
    cols.push("test_acc".into());
    cols.extend((0..modalities).map(|u| format!("test_acc_m{u}")));
    cols.push("ratio_m0_over_m1".into());
    cols.extend((0..modalities).map(|u| format!("reshape_count_m{u}")));
    cols.join(",")
}

pub fn csv_row(row: &MetricsRow) -> String {
    let mut cols = vec![row.epoch.to_string(), fmt_sig6(row.train_loss_fused)];
    cols.extend(row.train_loss_modality.iter().map(|&v| fmt_sig6(v)));
    cols.push(fmt_sig6(row.accuracy));
    cols.extend(row.modality_accuracy.iter().map(|&v| fmt_sig6(v)));
    cols.push(row.ratio.map_or_else(|| "undefined".into(), fmt_sig6));
    cols.extend(row.reshape_counts.iter().map(usize::to_string));
    cols.join(",")
}

pub fn to_csv(rows: &[MetricsRow], modalities: usize) -> String {
    let mut out = csv_header(modalities);
    out.push('\n');
    for row in rows {
        out.push_str(&csv_row(row));
        out.push('\n');
    }
    out
}

pub fn row_json(row: &MetricsRow) -> Value {
    let r = |v: &[f64]| v.iter().map(|&x| round_sig6(x)).collect::<Vec<_>>();
    json!({
        "epoch": row.epoch,
        "train_loss_fused": round_sig6(row.train_loss_fused),
        "train_loss_modality": r(&row.train_loss_modality),
        "accuracy": round_sig6(row.accuracy),
        "modality_accuracy": r(&row.modality_accuracy),
        "ratio": row.ratio.map(round_sig6),
        "reshape_counts": row.reshape_counts,
    })
}

pub fn to_json(rows: &[MetricsRow]) -> String {
    let v = Value::Array(rows.iter().map(row_json).collect());
    serde_json::to_string_pretty(&v).expect("json values serialize") + "\n"
}

pub fn export(rows: &[MetricsRow], modalities: usize, path: &Path, format: ExportFormat) -> Result<()> {
    let body = match format {
        ExportFormat::Csv => to_csv(rows, modalities),
        ExportFormat::Json => to_json(rows),
    };
    fs::write(path, body).map_err(|e| Error::io(path, e))
}
