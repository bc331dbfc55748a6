//! Tolerance checks, canonical JSON and versioned CSV output.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// One measured quantity compared against a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub relation: String,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            relation: "<=".into(),
            threshold,
            pass: measured <= threshold,
        }
    }

    pub fn below(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            relation: "<".into(),
            threshold,
            pass: measured < threshold,
        }
    }

    pub fn at_least(name: impl Into<String>, measured: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            relation: ">=".into(),
            threshold,
            pass: measured >= threshold,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {:.3e} {} {:.3e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.relation,
            self.threshold
        )
    }
}

pub fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}

/// Pretty JSON with object keys in sorted order.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key, so a round trip through
    // `Value` canonicalizes field order.
    Ok(serde_json::to_string_pretty(&serde_json::to_value(value)?)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "{}", to_sorted_json(value)?)?;
    Ok(())
}

/// CSV writer whose first line is `# schema: <schema>`, followed by `header`
/// even when no rows are written.
pub fn csv_writer(path: &Path, schema: &str, header: &[&str]) -> Result<csv::Writer<File>> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "# schema: {schema}")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    w.write_record(header)?;
    Ok(w)
}

pub fn median(v: &[f64]) -> f64 {
    gka_mqar::train::median(v)
}
