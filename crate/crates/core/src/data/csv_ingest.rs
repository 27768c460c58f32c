use std::io::Read;

use super::{DataError, RegionGrid, UrbanImageTimeSeries};
use crate::autodiff::Tensor;

/// Builds a series from `timestamp,i,j,value` rows.
///
/// A header row is allowed. Every `(timestamp, i, j)` between the smallest and
/// largest timestamp must appear exactly once.
pub fn ingest_csv<R: Read>(reader: R, grid: RegionGrid, channel: &str) -> Result<UrbanImageTimeSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<(i64, usize, usize, f64)> = Vec::new();
    for (n, record) in rdr.records().enumerate() {
        let line = n + 1;
        let record = record.map_err(|e| DataError::Csv {
            line,
            message: e.to_string(),
        })?;
        if record.len() != 4 {
            return Err(DataError::Csv {
                line,
                message: format!("expected 4 fields, found {}", record.len()),
            });
        }
        if line == 1 && record[0].parse::<i64>().is_err() {
            continue;
        }
        let bad = |field: &str| DataError::Csv {
            line,
            message: format!("cannot parse {field}"),
        };
        let t: i64 = record[0].parse().map_err(|_| bad("timestamp"))?;
        let i: usize = record[1].parse().map_err(|_| bad("i"))?;
        let j: usize = record[2].parse().map_err(|_| bad("j"))?;
        let v: f64 = record[3].parse().map_err(|_| bad("value"))?;
        if i >= grid.width() || j >= grid.height() {
            return Err(DataError::Csv {
                line,
                message: format!("region [{i},{j}] outside {}x{} grid", grid.width(), grid.height()),
            });
        }
        if !v.is_finite() {
            return Err(bad("value (non-finite)"));
        }
        rows.push((t, i, j, v));
    }
    let t_min = rows.iter().map(|r| r.0).min().ok_or(DataError::EmptyTimestamps)?;
    let t_max = rows.iter().map(|r| r.0).max().unwrap();
    let t_count = (t_max - t_min + 1) as usize;
    let n = grid.regions();
    let mut values = vec![f64::NAN; t_count * n];
    for (line, &(t, i, j, v)) in rows.iter().enumerate() {
        let slot = &mut values[(t - t_min) as usize * n + grid.position(i, j)];
        if !slot.is_nan() {
            return Err(DataError::Csv {
                line: line + 1,
                message: format!("duplicate entry for t={t} region [{i},{j}]"),
            });
        }
        *slot = v;
    }
    if let Some(missing) = values.iter().position(|v| v.is_nan()) {
        let t = t_min + (missing / n) as i64;
        let pos = missing % n;
        return Err(DataError::Inconsistent(format!(
            "no value for t={t} region [{},{}]",
            pos / grid.height(),
            pos % grid.height()
        )));
    }
    let frames = Tensor::new(vec![t_count, grid.width(), grid.height()], values)?;
    UrbanImageTimeSeries::new(grid, t_min, frames, channel)
}
