//! CSV writers. Comma separator, `.` decimal point, LF line endings.

use std::fs;
use std::path::Path;

use andft_core::eval::EvalReport;
use andft_core::trainers::IterationMetrics;

use crate::CliError;

pub fn metrics_header(k: usize) -> String {
    let mut cols = vec!["t".to_string(), "loss_o".into(), "adv_loss".into()];
    cols.extend((1..=k).map(|i| format!("acc_n_{i}")));
    cols.push("backbone_forwards".into());
    cols.push("elapsed_seconds".into());
    cols.join(",")
}

/// Header plus one row per logged iteration. `backbone_forwards` is the
/// cumulative count at the end of the iteration.
pub fn metrics_csv(log: &[IterationMetrics], k: usize) -> String {
    let mut out = metrics_header(k);
    out.push('\n');
    for m in log {
        let mut row = vec![m.t.to_string(), m.loss_o.to_string(), m.adversarial_loss.to_string()];
        row.extend(m.nuisance_accuracy.iter().map(f64::to_string));
        row.push(m.backbone_forwards_total.to_string());
        row.push(m.elapsed_seconds.to_string());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub trainer: &'static str,
    pub t: usize,
    pub elapsed_seconds: f64,
    pub backbone_forwards: u64,
    pub test_accuracy: f64,
}

pub const COMPARE_HEADER: &str = "trainer,t,elapsed_seconds,backbone_forwards,test_accuracy";

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(COMPARE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.trainer, r.t, r.elapsed_seconds, r.backbone_forwards, r.test_accuracy
        ));
    }
    out
}

/// Per-trainer eval reports stacked with a leading `trainer` column.
pub fn report_csv(reports: &[(&str, &EvalReport)]) -> String {
    let mut out = format!("trainer,{}\n", EvalReport::CSV_HEADER);
    for (name, rep) in reports {
        for row in rep.csv_rows() {
            out.push_str(&format!("{name},{row}\n"));
        }
    }
    out
}

pub fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
