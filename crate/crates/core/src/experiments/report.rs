//! Study reports: series tables, least-squares fits, threshold checks, and
//! their on-disk form (one CSV and one two-column `.dat` per series plus a
//! summary). Tables are byte-reproducible; only the summary carries timing.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Series {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|&v| fmt_value(v)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// First column against column `k`, whitespace separated.
    pub fn to_dat(&self, k: usize) -> String {
        let mut out = format!("# {} {}\n", self.columns[0], self.columns[k]);
        for row in &self.rows {
            let _ = writeln!(out, "{} {}", fmt_value(row[0]), fmt_value(row[k]));
        }
        out
    }
}

/// Integers print as integers, everything else with 17 significant digits.
fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.16e}")
    }
}

/// Ordinary least squares `y = intercept + slope x`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fit {
    pub name: String,
    pub x: String,
    pub y: String,
    pub slope: f64,
    pub slope_se: f64,
    pub intercept: f64,
    pub n_points: usize,
}

pub fn linear_fit(name: &str, x_label: &str, y_label: &str, x: &[f64], y: &[f64]) -> Result<Fit> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(Error::Precondition(format!(
            "a line fit needs at least two paired points, got {n}"
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Precondition(format!("non-finite value in fit '{name}'")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Precondition(format!("fit '{name}' has no spread in x")));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (ssr / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(Fit {
        name: name.into(),
        x: x_label.into(),
        y: y_label.into(),
        slope,
        slope_se,
        intercept,
        n_points: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub passed: bool,
}

impl Check {
    pub fn within(name: &str, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: format!("in [{lo}, {hi}]"),
            passed: value >= lo && value <= hi,
        }
    }

    pub fn at_most(name: &str, value: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: format!("<= {max}"),
            passed: value <= max,
        }
    }

    pub fn below(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: format!("< {bound}"),
            passed: value < bound,
        }
    }

    /// `hits` of `total` cases succeeded; at least `required` must.
    pub fn count(name: &str, hits: usize, total: usize, required: usize) -> Self {
        Self {
            name: name.into(),
            value: hits as f64,
            threshold: format!(">= {required} of {total}"),
            passed: hits >= required,
        }
    }

    pub fn flag(name: &str, ok: bool, threshold: &str) -> Self {
        Self {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            threshold: threshold.into(),
            passed: ok,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyReport {
    pub kind: String,
    pub config: serde_json::Value,
    pub series: Vec<Series>,
    pub fits: Vec<Fit>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub dataset_hash: String,
    pub wall_clock_s: f64,
}

impl StudyReport {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            config,
            series: Vec::new(),
            fits: Vec::new(),
            checks: Vec::new(),
            notes: Vec::new(),
            dataset_hash: String::new(),
            wall_clock_s: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn fit(&self, name: &str) -> Option<&Fit> {
        self.fits.iter().find(|f| f.name == name)
    }

    pub fn series(&self, name: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.name == name)
    }

    pub fn summary_text(&self) -> String {
        let mut out = format!("study: {}\n", self.kind);
        let _ = writeln!(out, "dataset_sha256: {}", self.dataset_hash);
        let _ = writeln!(out, "wall_clock_s: {:.3}", self.wall_clock_s);
        for f in &self.fits {
            let _ = writeln!(
                out,
                "fit {}: slope {:.4} +/- {:.4} ({} vs {}, {} points)",
                f.name, f.slope, f.slope_se, f.y, f.x, f.n_points
            );
        }
        for c in &self.checks {
            let _ = writeln!(
                out,
                "[{}] {}: {:.6e} (threshold {})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.threshold
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        let _ = writeln!(out, "overall: {}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }

    /// Writes `<series>.csv`, `<series>[_<column>].dat`, `summary.json` and
    /// `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for s in &self.series {
            std::fs::write(dir.join(format!("{}.csv", s.name)), s.to_csv())?;
            for k in 1..s.columns.len() {
                let file = if s.columns.len() == 2 {
                    format!("{}.dat", s.name)
                } else {
                    format!("{}_{}.dat", s.name, s.columns[k])
                };
                std::fs::write(dir.join(file), s.to_dat(k))?;
            }
        }
        let summary = serde_json::json!({
            "kind": self.kind,
            "passed": self.passed(),
            "config": self.config,
            "fits": self.fits,
            "checks": self.checks,
            "notes": self.notes,
            "dataset_sha256": self.dataset_hash,
            "wall_clock_s": self.wall_clock_s,
        });
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        std::fs::write(dir.join("summary.txt"), self.summary_text())?;
        Ok(())
    }
}
