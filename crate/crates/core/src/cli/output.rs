use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ald::QuantileLevel;
use crate::error::Result;
use crate::inference::CovarianceEstimate;
use crate::sim::ExperimentReport;

use super::ingest::FitRequest;
use super::simulate::SimulateRequest;

pub const TOOL: &str = "qrem";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProvenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    /// SHA-256 of the ingested dataset; `diagnose` refuses data that differs.
    pub data_fingerprint: String,
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub request: FitRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedBlock {
    pub sigma_v2: f64,
    pub residual_scale: f64,
    pub cluster_labels: Vec<String>,
    pub blups: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitBlock {
    pub q: QuantileLevel,
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub ci_level: f64,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub g: f64,
    pub iterations: usize,
    pub converged: bool,
    pub covariance: CovarianceEstimate,
    pub mixed: Option<MixedBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub provenance: FitProvenance,
    pub fits: Vec<FitBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationProvenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub request: SimulateRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDocument {
    pub provenance: SimulationProvenance,
    pub report: ExperimentReport,
}

/// Doubles with 17 significant digits, which round-trip exactly.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".into()
    }
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    let pad = |out: &mut String, n: usize| out.extend(std::iter::repeat_n("  ", n));
    match v {
        Value::Number(n) if n.is_f64() => out.push_str(&fmt_f64(n.as_f64().unwrap_or(f64::NAN))),
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, indent + 1);
                write_value(out, item, indent + 1);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                pad(out, indent + 1);
                let _ = write!(out, "{}: ", Value::String(k.clone()));
                write_value(out, item, indent + 1);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push('}');
        }
        other => {
            let _ = write!(out, "{other}");
        }
    }
}

/// Pretty JSON with every floating-point number in 17-significant-digit
/// scientific notation.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&mut out, &v, 0);
    out.push('\n');
    Ok(out)
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Provenance as a leading `#` comment line for CSV outputs.
pub fn csv_provenance<T: Serialize>(provenance: &T) -> Result<String> {
    Ok(format!("# {}\n", serde_json::to_string(provenance)?))
}

/// Joins already formatted cells into a CSV record.
pub fn csv_line(cells: &[String]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(cells)?;
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// One row per (q, coefficient, standard-error method).
pub fn report_csv(doc: &SimulationDocument) -> Result<String> {
    let mut out = csv_provenance(&doc.provenance)?;
    out.push_str(&csv_line(
        &[
            "q",
            "coefficient",
            "truth",
            "mean_estimate",
            "bias",
            "empirical_se",
            "failed",
            "se_method",
            "mean_se",
            "sd_se",
            "coverage_90",
            "coverage_95",
        ]
        .map(String::from),
    )?);
    for qs in &doc.report.quantiles {
        for c in &qs.coefficients {
            for se in &c.standard_errors {
                let method = serde_json::to_value(se.method)?;
                out.push_str(&csv_line(&[
                    qs.q.to_string(),
                    c.name.clone(),
                    fmt_opt(c.truth),
                    fmt_f64(c.mean_estimate),
                    fmt_opt(c.bias),
                    fmt_f64(c.empirical_se),
                    qs.failed.to_string(),
                    method.as_str().unwrap_or_default().to_string(),
                    fmt_f64(se.mean),
                    fmt_f64(se.sd),
                    fmt_opt(se.coverage_90),
                    fmt_opt(se.coverage_95),
                ])?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.0), "-2.0000000000000000e0");
        assert_eq!(fmt_f64(f64::NAN), "null");
    }

    #[test]
    fn nested_json_layout() {
        let v = serde_json::json!({"a": [1.5, 2], "b": {"c": "x\"y", "d": null}, "e": []});
        let s = to_json(&v).unwrap();
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert!(s.contains("1.5000000000000000e0"));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.json");
        write_atomic(&p, "one").unwrap();
        write_atomic(&p, "two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn csv_cells_are_quoted_when_needed() {
        assert_eq!(csv_line(&["a,b".into(), "c".into()]).unwrap(), "\"a,b\",c\n");
    }

    proptest! {
        #[test]
        fn doubles_round_trip_through_json(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = to_json(&vec![v]).unwrap();
            let back: Vec<f64> = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(back[0].to_bits(), v.to_bits());
        }
    }
}
