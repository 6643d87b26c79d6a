//! Files on disk: JSON documents and CSV tables, written atomically.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! value read back is bit-identical to the one written.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::SidebandPowers;
use crate::idt::SParamTraces;
use crate::physics::ScanParams;
use crate::specgen::CountSpectrum;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json { path: PathBuf::new(), message: e.to_string() })?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json { path: path.to_path_buf(), message: e.to_string() })?;
    write_atomic(path, format!("{s}\n").as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), message: e.to_string() })
}

/// A CSV table held as strings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push<I: IntoIterator<Item = String>>(&mut self, row: I) {
        self.rows.push(row.into_iter().collect());
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn write_csv(path: &Path, table: &Table) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv { path: path.to_path_buf(), message: e.to_string() };
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(&table.header).map_err(csv_err)?;
    for row in &table.rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv { path: path.to_path_buf(), message: e.to_string() })?;
    write_atomic(path, &bytes)
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let text = read_text(path)?;
    let csv_err = |e: csv::Error| Error::Csv { path: path.to_path_buf(), message: e.to_string() };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(csv_err)?.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

/// Parses every cell of the named columns as `f64`.
pub fn numeric_columns(path: &Path, table: &Table, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            table
                .column(n)
                .ok_or_else(|| Error::Csv { path: path.to_path_buf(), message: format!("missing column '{n}'") })
        })
        .collect::<Result<_>>()?;
    table
        .rows
        .iter()
        .enumerate()
        .map(|(line, row)| {
            idx.iter()
                .map(|&c| {
                    let cell = row.get(c).map(String::as_str).unwrap_or("");
                    cell.trim().parse::<f64>().map_err(|_| Error::Csv {
                        path: path.to_path_buf(),
                        message: format!("row {}: '{cell}' is not a number", line + 2),
                    })
                })
                .collect()
        })
        .collect()
}

/// Everything about a spectrum except its counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumMeta {
    pub scan: ScanParams,
    pub drive_power_w: f64,
    pub seed: u64,
    pub stream: u64,
    pub duration_s: f64,
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// `channel,counts` CSV plus a JSON sidecar with the scan and provenance.
pub fn write_spectrum(path: &Path, s: &CountSpectrum) -> Result<()> {
    let mut t = Table::new(&["channel", "counts"]);
    for (ch, c) in s.channels.iter().zip(&s.counts) {
        t.push([ch.to_string(), c.to_string()]);
    }
    write_csv(path, &t)?;
    let meta = SpectrumMeta {
        scan: s.scan,
        drive_power_w: s.drive_power_w,
        seed: s.seed,
        stream: s.stream,
        duration_s: s.duration_s,
    };
    write_json(&sidecar(path), &meta)
}

pub fn read_spectrum(path: &Path) -> Result<CountSpectrum> {
    let meta: SpectrumMeta = read_json(&sidecar(path))?;
    let table = read_csv(path)?;
    let bad = |message: String| Error::Csv { path: path.to_path_buf(), message };
    let (ci, ki) = match (table.column("channel"), table.column("counts")) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(bad("expected columns 'channel' and 'counts'".into())),
    };
    let mut channels = Vec::with_capacity(table.rows.len());
    let mut counts = Vec::with_capacity(table.rows.len());
    for (line, row) in table.rows.iter().enumerate() {
        let parse = |i: usize| row.get(i).and_then(|v| v.trim().parse::<u64>().ok());
        match (parse(ci), parse(ki)) {
            (Some(ch), Some(c)) => {
                channels.push(ch as usize);
                counts.push(c);
            }
            _ => return Err(bad(format!("row {}: expected two non-negative integers", line + 2))),
        }
    }
    if channels.len() != meta.scan.n_channels {
        return Err(Error::InvalidInput(format!(
            "{}: expected {} channels, found {} (truncated file?)",
            path.display(),
            meta.scan.n_channels,
            channels.len()
        )));
    }
    if channels.iter().enumerate().any(|(i, &ch)| ch != i) {
        return Err(Error::InvalidInput(format!("{}: channels must run 0..n in order", path.display())));
    }
    let s = CountSpectrum {
        channels,
        counts,
        scan: meta.scan,
        drive_power_w: meta.drive_power_w,
        seed: meta.seed,
        stream: meta.stream,
        duration_s: meta.duration_s,
    };
    s.validate()?;
    Ok(s)
}

const TRACE_COLUMNS: [&str; 5] = ["freq_hz", "s11_re", "s11_im", "s12_re", "s12_im"];

pub fn write_traces(path: &Path, t: &SParamTraces) -> Result<()> {
    t.validate()?;
    let mut table = Table::new(&TRACE_COLUMNS);
    for i in 0..t.freq_hz.len() {
        table.push([t.freq_hz[i], t.s11[i].re, t.s11[i].im, t.s12[i].re, t.s12[i].im].map(|v| v.to_string()));
    }
    write_csv(path, &table)
}

pub fn read_traces(path: &Path) -> Result<SParamTraces> {
    let table = read_csv(path)?;
    let cols = numeric_columns(path, &table, &TRACE_COLUMNS)?;
    let t = SParamTraces {
        freq_hz: cols.iter().map(|r| r[0]).collect(),
        s11: cols.iter().map(|r| Complex64::new(r[1], r[2])).collect(),
        s12: cols.iter().map(|r| Complex64::new(r[3], r[4])).collect(),
    };
    t.validate()?;
    Ok(t)
}

const POWER_COLUMNS: [&str; 10] =
    ["power_W", "P0", "P1", "P2", "sigma_P0", "sigma_P1", "sigma_P2", "cov_P0_P1", "cov_P0_P2", "cov_P1_P2"];

pub fn powers_table(powers: &[SidebandPowers]) -> Table {
    let mut t = Table::new(&POWER_COLUMNS);
    for p in powers {
        let s = p.sigma();
        let c = &p.covariance;
        t.push([p.drive_power_w, p.p[0], p.p[1], p.p[2], s[0], s[1], s[2], c[0][1], c[0][2], c[1][2]].map(|v| v.to_string()));
    }
    t
}

pub fn write_powers(path: &Path, powers: &[SidebandPowers]) -> Result<()> {
    write_csv(path, &powers_table(powers))
}

pub fn read_powers(path: &Path) -> Result<Vec<SidebandPowers>> {
    let table = read_csv(path)?;
    let cols = numeric_columns(path, &table, &POWER_COLUMNS)?;
    Ok(cols
        .iter()
        .map(|r| {
            let v = [r[4] * r[4], r[5] * r[5], r[6] * r[6]];
            SidebandPowers {
                drive_power_w: r[0],
                p: [r[1], r[2], r[3]],
                covariance: [[v[0], r[7], r[8]], [r[7], v[1], r[9]], [r[8], r[9], v[2]]],
            }
        })
        .collect())
}
