//! Versioned bench report with JSON and plain-table renderings.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::reference::Reference;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("row {experiment}/{metric} has no reference value")]
    MissingReference { experiment: String, metric: String },
    #[error("report has no rows")]
    Empty,
}

/// Inclusive acceptance band. An open side is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Band {
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// The upper bound itself is outside the band.
    pub strict_max: bool,
}

impl Band {
    pub fn between(min: f64, max: f64) -> Self {
        Self {
            min: Some(min),
            max: Some(max),
            strict_max: false,
        }
    }

    pub fn at_most(max: f64) -> Self {
        Self {
            min: None,
            max: Some(max),
            strict_max: false,
        }
    }

    pub fn below(max: f64) -> Self {
        Self {
            strict_max: true,
            ..Self::at_most(max)
        }
    }

    pub fn exactly(v: f64) -> Self {
        Self::between(v, v)
    }

    pub fn contains(&self, v: f64) -> bool {
        !v.is_nan()
            && self.min.is_none_or(|m| v >= m)
            && self.max.is_none_or(|m| if self.strict_max { v < m } else { v <= m })
    }

    pub fn render(&self) -> String {
        match (self.min, self.max) {
            (None, Some(b)) if self.strict_max => format!("< {}", fmt_num(b)),
            (Some(a), Some(b)) if a == b => format!("= {}", fmt_num(a)),
            (Some(a), Some(b)) => format!("[{}, {}]", fmt_num(a), fmt_num(b)),
            (None, Some(b)) => format!("<= {}", fmt_num(b)),
            (Some(a), None) => format!(">= {}", fmt_num(a)),
            (None, None) => "any".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub experiment: String,
    pub metric: String,
    /// `None` when the experiment produced no sample.
    pub measured: Option<f64>,
    pub unit: String,
    pub reference: Option<Reference>,
    pub band: Band,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Row {
    pub fn new(experiment: &str, metric: &str, measured: Option<f64>, unit: &str, band: Band) -> Self {
        Self {
            experiment: experiment.into(),
            metric: metric.into(),
            measured,
            unit: unit.into(),
            reference: None,
            pass: measured.is_some_and(|v| band.contains(v)),
            band,
            note: None,
        }
    }

    pub fn reference(mut self, r: Reference) -> Self {
        self.reference = Some(r);
        self
    }

    pub fn note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Environment {
    pub os: &'static str,
    pub arch: &'static str,
    pub cpus: usize,
    pub harness_version: &'static str,
    pub started_at: String,
    pub seed: u64,
}

impl Environment {
    pub fn capture(seed: u64) -> Self {
        Self {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            harness_version: env!("CARGO_PKG_VERSION"),
            started_at: chrono::Utc::now().to_rfc3339(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub environment: Environment,
    pub rows: Vec<Row>,
    pub footnotes: Vec<String>,
}

impl BenchReport {
    pub fn new(environment: Environment) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            environment,
            rows: Vec::new(),
            footnotes: Vec::new(),
        }
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = Row>) {
        self.rows.extend(rows);
    }

    pub fn footnote(&mut self, text: &str) {
        if !self.footnotes.iter().any(|f| f == text) {
            self.footnotes.push(text.into());
        }
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if self.rows.is_empty() {
            return Err(ReportError::Empty);
        }
        match self.rows.iter().find(|r| r.reference.is_none()) {
            Some(r) => Err(ReportError::MissingReference {
                experiment: r.experiment.clone(),
                metric: r.metric.clone(),
            }),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self).expect("report serializes"))
    }

    /// Fixed-width summary with the published figures beside each measurement.
    pub fn render_table(&self) -> Result<String, ReportError> {
        self.validate()?;
        let header = ["experiment", "metric", "measured", "os-app", "skype", "band", "result"];
        let body: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                let reference = r.reference.as_ref().expect("validated");
                let published = |v: Option<f64>| match v {
                    Some(v) => format!("{} {}", fmt_num(v), reference.unit),
                    None => "-".into(),
                };
                [
                    r.experiment.clone(),
                    r.metric.clone(),
                    match r.measured {
                        Some(v) => format!("{} {}", fmt_num(v), r.unit),
                        None => "no samples".into(),
                    },
                    published(reference.value),
                    published(reference.skype),
                    format!("{} {}", r.band.render(), r.unit),
                    if r.pass { "PASS" } else { "FAIL" }.into(),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&mut out, &header.map(String::from));
        line(&mut out, &widths.map(|w| "-".repeat(w)));
        for row in &body {
            line(&mut out, row);
        }
        for (i, f) in self.footnotes.iter().enumerate() {
            let _ = writeln!(out, "[{}] {f}", i + 1);
        }
        Ok(out)
    }
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e12 {
        format!("{v:.0}")
    } else if v.abs() >= 100.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> Environment {
        Environment::capture(7)
    }

    #[test]
    fn band_edges_are_inclusive() {
        let b = Band::between(10.0, 25.0);
        assert!(b.contains(10.0) && b.contains(25.0));
        assert!(!b.contains(9.999) && !b.contains(25.001));
        assert!(!b.contains(f64::NAN));
        assert!(!Band::below(1.0).contains(1.0));
        assert!(Band::below(1.0).contains(0.999));
    }

    #[test]
    fn missing_measurement_fails_the_row() {
        let r = Row::new("voice", "median", None, "ms", Band::at_most(80.0));
        assert!(!r.pass);
    }

    #[test]
    fn report_without_reference_is_refused() {
        let mut rep = BenchReport::new(env());
        assert_eq!(rep.validate(), Err(ReportError::Empty));
        rep.extend([Row::new("file", "upload", Some(11.0), "s", Band::between(10.0, 25.0)).reference(Reference::upload())]);
        assert!(rep.to_json().is_ok());
        rep.extend([Row::new("file", "download", Some(11.0), "s", Band::between(10.0, 20.0))]);
        assert_eq!(
            rep.to_json(),
            Err(ReportError::MissingReference {
                experiment: "file".into(),
                metric: "download".into()
            })
        );
        assert!(rep.render_table().is_err());
    }

    #[test]
    fn json_is_versioned_and_table_lists_both_columns() {
        let mut rep = BenchReport::new(env());
        rep.extend([Row::new("voice", "median one-way delay", Some(45.5), "ms", Band::between(20.0, 80.0))
            .reference(Reference::voice_delay())]);
        rep.footnote("note");
        let v: serde_json::Value = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert_eq!(v["schema_version"], SCHEMA_VERSION);
        assert_eq!(v["rows"][0]["reference"]["value"], 31.0);
        assert_eq!(v["rows"][0]["pass"], true);
        let table = rep.render_table().unwrap();
        assert!(table.contains("31 ms") && table.contains("22 ms") && table.contains("PASS"), "{table}");
        assert!(table.contains("[1] note"));
    }
}
