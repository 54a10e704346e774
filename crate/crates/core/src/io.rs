//! CSV and JSON file formats.
//!
//! * hierarchical data: `i,y,V` with an optional `y_sim` column;
//! * time series: `t,y,sd`;
//! * chains: one column per monitored scalar;
//! * per-index tables: `index,<value>` with 1-based indices.
//!
//! Floats are written in Rust's shortest round-trip form, so equal values
//! always serialize to equal bytes.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::diagnostics::SummaryRow;
use crate::engine::ChainOutput;
use crate::error::{Error, Result};
use crate::hier::HierData;
use crate::ou::TimeSeries;

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parsed numeric table: header names and rows, with source line numbers.
struct Table {
    headers: Vec<String>,
    rows: Vec<(usize, Vec<f64>)>,
}

impl Table {
    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn require(&self, name: &str, path: &str) -> Result<usize> {
        self.column(name)
            .ok_or_else(|| parse_err(path, 1, format!("missing column '{name}'")))
    }
}

fn read_table<R: Read>(reader: R, path: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let values = rec
            .iter()
            .enumerate()
            .map(|(j, field)| {
                field.parse::<f64>().map_err(|_| {
                    parse_err(
                        path,
                        line,
                        format!("column '{}': cannot parse '{field}' as a number", headers[j]),
                    )
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, values));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    Ok(Table { headers, rows })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(Error::from)
}

/// Read hierarchical data; the second value is the `y_sim` column if present.
pub fn read_hier_csv(path: &Path) -> Result<(HierData, Option<Vec<f64>>)> {
    let name = path.display().to_string();
    read_hier(open(path)?, &name)
}

pub fn read_hier<R: Read>(reader: R, name: &str) -> Result<(HierData, Option<Vec<f64>>)> {
    let table = read_table(reader, name)?;
    let iy = table.require("y", name)?;
    let iv = table.require("V", name)?;
    let isim = table.column("y_sim");
    for (line, row) in &table.rows {
        if !(row[iv] > 0.0) {
            return Err(parse_err(name, *line, format!("V must be positive, got {}", row[iv])));
        }
    }
    let col = |j: usize| table.rows.iter().map(|(_, r)| r[j]).collect::<Vec<f64>>();
    let data = HierData::new(col(iy), col(iv))?;
    Ok((data, isim.map(col)))
}

/// Read one named numeric column, for example `y` of a toy data file.
pub fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let name = path.display().to_string();
    let table = read_table(open(path)?, &name)?;
    let j = table.require(column, &name)?;
    Ok(table.rows.iter().map(|(_, r)| r[j]).collect())
}

pub fn write_hier_csv(path: &Path, data: &HierData, y_sim: Option<&[f64]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["i", "y", "V"];
    if y_sim.is_some() {
        header.push("y_sim");
    }
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec = vec![(i + 1).to_string(), data.y[i].to_string(), data.v[i].to_string()];
        if let Some(s) = y_sim {
            rec.push(s[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series_csv(path: &Path) -> Result<TimeSeries> {
    let name = path.display().to_string();
    read_series(open(path)?, &name)
}

pub fn read_series<R: Read>(reader: R, name: &str) -> Result<TimeSeries> {
    let table = read_table(reader, name)?;
    let it = table.require("t", name)?;
    let iy = table.require("y", name)?;
    let isd = table.require("sd", name)?;
    let mut prev: Option<f64> = None;
    for (line, row) in &table.rows {
        if !(row[isd] > 0.0) {
            return Err(parse_err(name, *line, format!("sd must be positive, got {}", row[isd])));
        }
        if let Some(p) = prev {
            if !(row[it] > p) {
                return Err(parse_err(name, *line, "times must be strictly increasing"));
            }
        }
        prev = Some(row[it]);
    }
    let col = |j: usize| table.rows.iter().map(|(_, r)| r[j]).collect::<Vec<f64>>();
    TimeSeries::from_sd(col(it), col(iy), col(isd))
}

pub fn write_series_csv(path: &Path, series: &TimeSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["t", "y", "sd"])?;
    for ((t, y), sd) in series.t.iter().zip(&series.y).zip(series.sd()) {
        w.write_record([t.to_string(), y.to_string(), sd.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_chain_csv(path: &Path, chain: &ChainOutput) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(&chain.names)?;
    for k in 0..chain.kept() {
        w.write_record(chain.columns.iter().map(|c| c[k].to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a chain file back as `(names, columns)`.
pub fn read_chain_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let name = path.display().to_string();
    let table = read_table(open(path)?, &name)?;
    let columns = (0..table.headers.len())
        .map(|j| table.rows.iter().map(|(_, r)| r[j]).collect())
        .collect();
    Ok((table.headers, columns))
}

/// Write `index,<name>` rows with 1-based indices.
pub fn write_indexed_csv(path: &Path, name: &str, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["index", name])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_acf_csv(path: &Path, rho: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["lag", "rho"])?;
    for (l, r) in rho.iter().enumerate() {
        w.write_record([l.to_string(), r.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// A tabulated density with header `x,density`.
pub fn write_density_csv(path: &Path, x: &[f64], density: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["x", "density"])?;
    for (a, d) in x.iter().zip(density) {
        w.write_record([a.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Summary rows as CSV; the leading `model` column labels each row. The
/// `mse_ratio` column is left out when no row has a ratio.
pub fn write_summary_csv(path: &Path, rows: &[(String, SummaryRow)]) -> Result<()> {
    let with_ratio = rows.iter().any(|(_, r)| r.mse_ratio.is_some());
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["model", "parameter", "mean", "monte_carlo_error", "bias", "mse"];
    if with_ratio {
        header.push("mse_ratio");
    }
    header.extend(["interval_lo", "interval_hi", "interval_length", "ess", "cpu_seconds"]);
    w.write_record(&header)?;
    for (model, r) in rows {
        let mut rec = vec![
            model.clone(),
            r.parameter.clone(),
            r.mean.to_string(),
            r.monte_carlo_error.to_string(),
            opt(r.bias),
            opt(r.mse),
        ];
        if with_ratio {
            rec.push(opt(r.mse_ratio));
        }
        rec.extend([
            r.interval_lo.to_string(),
            r.interval_hi.to_string(),
            r.interval_length.to_string(),
            r.ess.to_string(),
            opt(r.cpu_seconds),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(open(path)?))?)
}
