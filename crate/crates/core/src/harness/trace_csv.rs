//! Per-round trace rows in CSV.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::tickets::TicketTrace;

pub const CSV_HEADER: &str = "method,round,sparsity_all_pct,sparsity_eligible_pct,partition1_acc_pct,partition2_acc_pct,full_acc_pct,similarity_pct,wall_s,seed";

/// One CSV row. Optional columns are written empty when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub method: String,
    pub round: usize,
    pub sparsity_all_pct: f64,
    pub sparsity_eligible_pct: f64,
    pub partition1_acc_pct: Option<f64>,
    pub partition2_acc_pct: Option<f64>,
    pub full_acc_pct: Option<f64>,
    pub similarity_pct: Option<f64>,
    pub wall_s: f64,
    pub seed: u64,
}

impl TraceRow {
    /// Accuracy to plot: the full-dataset value when present, otherwise the
    /// mean of the partition accuracies.
    pub fn accuracy(&self) -> Option<f64> {
        self.full_acc_pct.or_else(|| {
            let parts: Vec<f64> = [self.partition1_acc_pct, self.partition2_acc_pct]
                .into_iter()
                .flatten()
                .collect();
            (!parts.is_empty()).then(|| parts.iter().sum::<f64>() / parts.len() as f64)
        })
    }
}

/// Percentages are rounded to 1e-4 and seconds to 1e-3 so that files are
/// stable and readable.
fn round_to(v: f64, places: i32) -> f64 {
    let s = 10f64.powi(places);
    (v * s).round() / s
}

/// Rows for a trace. Partition columns hold per-partition validation
/// accuracies of the overlapping method; the baseline trains a single model,
/// whose validation accuracy goes in `partition1_acc_pct`.
pub fn trace_rows(trace: &TicketTrace) -> Vec<TraceRow> {
    trace
        .records
        .iter()
        .map(|r| TraceRow {
            method: trace.method.to_string(),
            round: r.round,
            sparsity_all_pct: round_to(r.sparsity_all.percent(), 4),
            sparsity_eligible_pct: round_to(r.sparsity_eligible.percent(), 4),
            partition1_acc_pct: r.val_acc.first().copied().filter(|v| v.is_finite()).map(|v| round_to(v, 4)),
            partition2_acc_pct: r.val_acc.get(1).copied().filter(|v| v.is_finite()).map(|v| round_to(v, 4)),
            full_acc_pct: r.full_acc.map(|v| round_to(v, 4)),
            similarity_pct: None,
            wall_s: round_to(r.wall_s, 3),
            seed: trace.seed,
        })
        .collect()
}

pub fn write_rows<W: Write>(out: W, rows: &[TraceRow]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn rows_to_string(rows: &[TraceRow]) -> String {
    let mut buf = Vec::new();
    write_rows(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("CSV is UTF-8")
}

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("CSV header does not match the trace schema: `{0}`")]
    Header(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<TraceRow>, CsvError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(CsvError::Header(header));
    }
    r.deserialize().map(|row| row.map_err(CsvError::from)).collect()
}
