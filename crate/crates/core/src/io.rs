//! CSV and JSON ingestion/serialization for time series, kernels, source
//! estimates and tensors.
//!
//! CSV layout: a header row, a leading `time` column in seconds, one column
//! per series. Lines starting with `#` are treated as comments; writers can
//! prepend one for provenance metadata. Ingestion errors carry 1-based line
//! numbers.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::hrf::SampledFilter;
use crate::lagcorr::LagCorrTensor;
use crate::sim::RoiTimeSeries;

fn reader_from(data: impl Read) -> csv::Reader<impl Read> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(data)
}

fn parse_field(field: &str, line: u64, col: usize) -> Result<f64> {
    field.parse::<f64>().map_err(|_| {
        Error::Ingestion(format!(
            "line {line}: column {} is not a number: {field:?}",
            col + 1
        ))
    })
}

/// Columns of uniformly sampled series: (labels, sampling rate, one row per
/// series). The time column must advance in constant steps.
fn read_columns(data: impl Read, what: &str) -> Result<(Vec<String>, f64, Vec<Vec<f64>>)> {
    let mut reader = reader_from(data);
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingestion(format!("bad header: {e}")))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Ingestion(format!(
            "{what}: need a time column plus at least one series column"
        )));
    }
    let labels: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let mut times: Vec<f64> = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); labels.len()];
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line().to_string())
                .unwrap_or_else(|| "?".into());
            Error::Ingestion(format!("line {line}: {e}"))
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != labels.len() + 1 {
            return Err(Error::Ingestion(format!(
                "line {line}: expected {} fields, found {}",
                labels.len() + 1,
                record.len()
            )));
        }
        times.push(parse_field(&record[0], line, 0)?);
        for (c, column) in columns.iter_mut().enumerate() {
            column.push(parse_field(&record[c + 1], line, c + 1)?);
        }
    }
    if times.len() < 2 {
        return Err(Error::Ingestion(format!(
            "{what}: need at least two samples"
        )));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::Ingestion(format!(
            "{what}: time column must be increasing"
        )));
    }
    for (k, pair) in times.windows(2).enumerate() {
        let step = pair[1] - pair[0];
        if (step - dt).abs() > 1e-6 * dt.max(1.0) {
            return Err(Error::Ingestion(format!(
                "{what}: non-uniform time step near row {}",
                k + 2
            )));
        }
    }
    Ok((labels, 1.0 / dt, columns))
}

/// Read a multi-region time-series CSV.
pub fn read_series_csv(data: impl Read) -> Result<RoiTimeSeries> {
    let (labels, fs, columns) = read_columns(data, "time series")?;
    let n = columns[0].len();
    let mut matrix = Array2::zeros((labels.len(), n));
    for (m, column) in columns.iter().enumerate() {
        for (t, &v) in column.iter().enumerate() {
            matrix[(m, t)] = v;
        }
    }
    RoiTimeSeries::new(matrix, fs, labels)
}

pub fn read_series_csv_path(path: &Path) -> Result<RoiTimeSeries> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    read_series_csv(std::io::BufReader::new(file))
}

fn write_table(
    out: &mut impl Write,
    comment: Option<&str>,
    header: &[String],
    n_rows: usize,
    fs: f64,
    value: impl Fn(usize, usize) -> f64,
) -> Result<()> {
    if let Some(comment) = comment {
        writeln!(out, "# {comment}")?;
    }
    writeln!(out, "{}", header.join(","))?;
    for t in 0..n_rows {
        let mut fields = Vec::with_capacity(header.len());
        fields.push(format!("{}", t as f64 / fs));
        for c in 0..header.len() - 1 {
            fields.push(format!("{}", value(c, t)));
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Write a multi-region time-series CSV (time + one column per region).
pub fn write_series_csv(
    out: &mut impl Write,
    series: &RoiTimeSeries,
    comment: Option<&str>,
) -> Result<()> {
    let mut header = vec!["time".to_string()];
    header.extend(series.labels.iter().cloned());
    write_table(
        out,
        comment,
        &header,
        series.n_samples(),
        series.fs,
        |c, t| series.data[(c, t)],
    )
}

/// Write sampled kernels as columns (time + one column per region label).
pub fn write_hrf_csv(
    out: &mut impl Write,
    filters: &[SampledFilter],
    labels: &[String],
    comment: Option<&str>,
) -> Result<()> {
    if filters.is_empty() || filters.len() != labels.len() {
        return Err(Error::Dimension(
            "kernel and label counts must match and be nonzero".into(),
        ));
    }
    let len = filters[0].len();
    if filters.iter().any(|f| f.len() != len) {
        return Err(Error::Dimension("kernels must share a length".into()));
    }
    let mut header = vec!["time".to_string()];
    header.extend(labels.iter().cloned());
    write_table(out, comment, &header, len, 1.0 / filters[0].dt, |c, t| {
        filters[c].taps[t]
    })
}

/// Read kernels from a CSV written by [`write_hrf_csv`].
pub fn read_hrf_csv(data: impl Read) -> Result<(Vec<SampledFilter>, Vec<String>)> {
    let (labels, fs, columns) = read_columns(data, "kernel table")?;
    let dt = 1.0 / fs;
    let filters = columns
        .into_iter()
        .map(|taps| SampledFilter::new(taps, dt))
        .collect::<Result<Vec<_>>>()?;
    Ok((filters, labels))
}

pub fn read_hrf_csv_path(path: &Path) -> Result<(Vec<SampledFilter>, Vec<String>)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    read_hrf_csv(std::io::BufReader::new(file))
}

/// Write a single estimated source series.
pub fn write_source_csv(
    out: &mut impl Write,
    source: &[f64],
    fs: f64,
    comment: Option<&str>,
) -> Result<()> {
    let header = vec!["time".to_string(), "source".to_string()];
    write_table(out, comment, &header, source.len(), fs, |_, t| source[t])
}

/// Read a single-column source CSV back.
pub fn read_source_csv(data: impl Read) -> Result<(Vec<f64>, f64)> {
    let (_, fs, columns) = read_columns(data, "source series")?;
    Ok((columns.into_iter().next().unwrap(), fs))
}

/// Debug export of a tensor: one CSV per slice plus a JSON manifest with
/// the dimensions and an optional provenance note.
pub fn export_tensor(dir: &Path, tensor: &LagCorrTensor, provenance: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let d = tensor.dim();
    for tau in 0..tensor.n_lags() {
        let mut out = std::fs::File::create(dir.join(format!("slice_{tau:03}.csv")))?;
        if let Some(stamp) = provenance {
            writeln!(out, "# {stamp}")?;
        }
        for i in 0..d {
            let row: Vec<String> = (0..d)
                .map(|j| format!("{}", tensor.slices[(tau, i, j)]))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
    }
    let manifest = serde_json::json!({
        "n_lags": tensor.n_lags(),
        "dim": d,
        "m_regions": tensor.m_regions,
        "stack_depth": tensor.stack_depth,
        "provenance": provenance,
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}
