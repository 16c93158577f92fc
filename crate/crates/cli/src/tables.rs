//! CSV input and output: comma separated, LF line endings, quoted only
//! where needed.

use std::path::Path;

use geossl::metrics::fmt_float;
use geossl::MetricsReport;

use crate::{CliResult, Failure};

pub const PREDICTION_HEADER: [&str; 4] = ["model", "location_id", "observed", "predicted"];

pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let fail = |e: csv::Error| Failure::Csv(path.to_path_buf(), e);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(fail)?;
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row).map_err(fail)?;
    }
    w.flush().map_err(|e| fail(e.into()))
}

/// Header and rows of a CSV file, as strings.
pub fn read_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let fail = |e: csv::Error| Failure::Csv(path.to_path_buf(), e);
    let mut r = csv::Reader::from_path(path).map_err(fail)?;
    let header = r.headers().map_err(fail)?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    Ok((header, rows))
}

/// Header of a report table: leading label columns then the metric columns.
pub fn report_header(labels: &[&'static str]) -> Vec<&'static str> {
    labels.iter().copied().chain(MetricsReport::CSV_HEADER).collect()
}

pub fn report_row(labels: &[String], report: &MetricsReport) -> Vec<String> {
    labels.iter().cloned().chain(report.csv_row()).collect()
}

pub fn prediction_rows(model: &str, predictions: &[(u32, f64, f64)]) -> Vec<Vec<String>> {
    predictions
        .iter()
        .map(|&(id, y, p)| vec![model.to_string(), id.to_string(), fmt_float(y), fmt_float(p)])
        .collect()
}

pub fn print_report(label: &str, r: &MetricsReport) {
    println!(
        "{label:<28} {:<10} n={:<4} MAE {:>8.3}  R2% {:>7.2}  RMSE {:>8.3}  RPIQ {:>6.3}  CCC {:>6.3}",
        r.split, r.n, r.mae, r.r2_percent, r.rmse, r.rpiq, r.ccc
    );
}
