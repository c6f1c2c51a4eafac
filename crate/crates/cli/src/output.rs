use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

/// `%.12g`: 12 significant digits, trailing zeros trimmed.
pub fn num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exponent = x.abs().log10().floor() as i32;
    if (-4..12).contains(&exponent) {
        let decimals = (11 - exponent).max(0) as usize;
        let s = format!("{x:.decimals$}");
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        // Rounding can carry into a new leading digit; re-check the width.
        if s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len() > 12 {
            return sci(x);
        }
        s
    } else {
        sci(x)
    }
}

fn sci(x: f64) -> String {
    let s = format!("{x:.11e}");
    let (mantissa, exp) = s.split_once('e').unwrap_or((&s, "0"));
    let mantissa = if mantissa.contains('.') {
        mantissa.trim_end_matches('0').trim_end_matches('.')
    } else {
        mantissa
    };
    format!("{mantissa}e{exp}")
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Rows collected in grid order before anything is written.
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub subcommand: &'a str,
    pub argv: &'a [String],
    pub config: &'a C,
    pub seed: u64,
    pub version: &'static str,
    pub wall_time_seconds: f64,
    pub rows: usize,
    pub output: &'a Path,
}

pub fn manifest_path(csv: &Path) -> PathBuf {
    csv.with_extension("manifest.json")
}

pub fn write_manifest<C: Serialize>(
    csv: &Path,
    subcommand: &str,
    argv: &[String],
    config: &C,
    seed: u64,
    elapsed: Duration,
    rows: usize,
) -> std::io::Result<()> {
    let manifest = Manifest {
        subcommand,
        argv,
        config,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        wall_time_seconds: elapsed.as_secs_f64(),
        rows,
        output: csv,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    std::fs::write(manifest_path(csv), text + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(num(0.0), "0");
        assert_eq!(num(1.0), "1");
        assert_eq!(num(0.25), "0.25");
        assert_eq!(num(std::f64::consts::PI), "3.14159265359");
        assert_eq!(num(-2.0 / 3.0), "-0.666666666667");
        assert_eq!(num(1.5e-9), "1.5e-9");
        assert_eq!(num(1.875e-5), "1.875e-5");
        assert_eq!(num(0.00012), "0.00012");
        assert_eq!(num(123456789012345.0), "1.23456789012e14");
        assert_eq!(num(9.9999999999999), "10");
        assert_eq!(opt(None), "");
    }

    #[test]
    fn manifest_sits_next_to_csv() {
        assert_eq!(manifest_path(Path::new("out/fig2.csv")), Path::new("out/fig2.manifest.json"));
    }
}
