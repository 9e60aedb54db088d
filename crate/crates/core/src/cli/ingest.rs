use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ald::QuantileLevel;
use crate::data::Dataset;
use crate::em::SolverConfig;
use crate::error::{QremError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMethod {
    Bahadur,
    Bootstrap,
}

/// Everything needed to reproduce a fit from a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRequest {
    pub data: PathBuf,
    pub response: String,
    /// Continuous predictors, in design order.
    pub predictors: Vec<String>,
    /// Categorical predictors, expanded after the continuous ones.
    pub categorical: Vec<String>,
    pub cluster: Option<String>,
    pub intercept: bool,
    pub quantiles: Vec<QuantileLevel>,
    pub solver: SolverConfig,
    pub inference: InferenceMethod,
    pub bootstrap_replicates: usize,
    pub seed: u64,
}

impl FitRequest {
    pub fn validate(&self) -> Result<()> {
        if self.quantiles.is_empty() {
            return Err(QremError::InvalidConfig("--quantiles: at least one level is required".into()));
        }
        for (i, q) in self.quantiles.iter().enumerate() {
            if self.quantiles[..i].contains(q) {
                return Err(QremError::InvalidConfig(format!("--quantiles: level {q} is listed twice")));
            }
        }
        let mut seen = vec![self.response.as_str()];
        for name in self.predictors.iter().chain(&self.categorical).chain(&self.cluster) {
            if seen.contains(&name.as_str()) {
                return Err(QremError::InvalidConfig(format!("column `{name}` is used more than once")));
            }
            seen.push(name);
        }
        if self.cluster.is_some() && self.inference == InferenceMethod::Bahadur {
            return Err(QremError::InvalidConfig(
                "--inference bahadur is not available with --cluster; mixed fits use the cluster bootstrap".into(),
            ));
        }
        if self.inference == InferenceMethod::Bootstrap && self.bootstrap_replicates < 2 {
            return Err(QremError::InvalidConfig("--bootstrap-reps must be at least 2".into()));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub data: Dataset,
    pub rows_read: usize,
    pub rows_dropped: usize,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan")
}

/// Reads the columns named in `request` from a CSV file with a header row.
/// Rows with a missing value in any used column are dropped and counted.
pub fn ingest_csv(path: &Path, request: &FitRequest) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: HashMap<String, usize> = reader
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let find = |name: &str| header.get(name).copied().ok_or_else(|| QremError::UnknownColumn(name.to_string()));

    let response = find(&request.response)?;
    let numeric: Vec<usize> = request.predictors.iter().map(|p| find(p)).collect::<Result<_>>()?;
    let labels: Vec<usize> = request.categorical.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let cluster = request.cluster.as_deref().map(find).transpose()?;

    let mut y = Vec::new();
    let mut xs: Vec<Vec<f64>> = vec![Vec::new(); numeric.len()];
    let mut cats: Vec<Vec<String>> = vec![Vec::new(); labels.len()];
    let mut groups = Vec::new();
    let (mut read, mut dropped) = (0, 0);

    for record in reader.records() {
        let record = record?;
        read += 1;
        let line = record.position().map_or(read + 1, |p| p.line() as usize);
        let cell = |i: usize| record.get(i).unwrap_or("");
        let used = std::iter::once(response)
            .chain(numeric.iter().copied())
            .chain(labels.iter().copied())
            .chain(cluster);
        if used.into_iter().any(|i| is_missing(cell(i))) {
            dropped += 1;
            continue;
        }
        let number = |i: usize, name: &str| -> Result<f64> {
            let raw = cell(i).trim();
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) => Err(QremError::Parse {
                    row: line,
                    column: name.to_string(),
                    message: format!("`{raw}` is not finite"),
                }),
                Err(e) => Err(QremError::Parse {
                    row: line,
                    column: name.to_string(),
                    message: format!("`{raw}`: {e}"),
                }),
            }
        };
        y.push(number(response, &request.response)?);
        for ((col, name), out) in numeric.iter().zip(&request.predictors).zip(&mut xs) {
            out.push(number(*col, name)?);
        }
        for (col, out) in labels.iter().zip(&mut cats) {
            out.push(cell(*col).trim().to_string());
        }
        if let Some(c) = cluster {
            groups.push(cell(c).trim().to_string());
        }
    }
    if y.is_empty() {
        return Err(QremError::EmptyData(path.display().to_string()));
    }

    let mut builder = Dataset::builder(y).intercept(request.intercept);
    for (name, values) in request.predictors.iter().zip(xs) {
        builder = builder.continuous(name, values);
    }
    for (name, values) in request.categorical.iter().zip(&cats) {
        builder = builder.categorical(name, values);
    }
    if cluster.is_some() {
        builder = builder.clusters(&groups);
    }
    Ok(Ingested {
        data: builder.build()?,
        rows_read: read,
        rows_dropped: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn request(path: &Path) -> FitRequest {
        FitRequest {
            data: path.to_path_buf(),
            response: "y".into(),
            predictors: vec!["x".into()],
            categorical: vec![],
            cluster: None,
            intercept: true,
            quantiles: vec![QuantileLevel::new(0.5).unwrap()],
            solver: SolverConfig::default(),
            inference: InferenceMethod::Bahadur,
            bootstrap_replicates: 1000,
            seed: 0,
        }
    }

    fn csv_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_rows_one_predictor() {
        let f = csv_file("y,x\n1,0\n2,1\n3,2\n");
        let got = ingest_csv(f.path(), &request(f.path())).unwrap();
        assert_eq!((got.data.n(), got.data.p()), (3, 2));
        assert_eq!(got.rows_dropped, 0);
    }

    #[test]
    fn categorical_reference_coding() {
        let f = csv_file("y,x,region\n1,0,south\n2,1,north\n3,2,west\n4,3,north\n5,1,south\n");
        let mut r = request(f.path());
        r.categorical = vec!["region".into()];
        let got = ingest_csv(f.path(), &r).unwrap();
        assert_eq!(got.data.column_names(), ["(Intercept)", "x", "region=south", "region=west"]);
    }

    #[test]
    fn missing_cells_are_dropped() {
        let f = csv_file("y,x,unused\n1,0,\n2,,a\n3,2,b\n4,NA,c\n5,4,d\n");
        let got = ingest_csv(f.path(), &request(f.path())).unwrap();
        assert_eq!((got.rows_read, got.rows_dropped, got.data.n()), (5, 2, 3));
    }

    #[test]
    fn errors_name_the_column() {
        let f = csv_file("y,x\n1,0\n2,abc\n");
        match ingest_csv(f.path(), &request(f.path())) {
            Err(QremError::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (3, "x")),
            other => panic!("{other:?}"),
        }
        let mut r = request(f.path());
        r.predictors = vec!["z".into()];
        assert!(matches!(ingest_csv(f.path(), &r), Err(QremError::UnknownColumn(c)) if c == "z"));
        let empty = csv_file("y,x\n,1\n");
        assert!(matches!(
            ingest_csv(empty.path(), &request(empty.path())),
            Err(QremError::EmptyData(_))
        ));
    }

    #[test]
    fn request_validation() {
        let p = Path::new("d.csv");
        let mut r = request(p);
        r.quantiles.push(QuantileLevel::new(0.5).unwrap());
        assert!(r.validate().is_err());
        let mut r = request(p);
        r.cluster = Some("x".into());
        r.inference = InferenceMethod::Bootstrap;
        assert!(r.validate().is_err());
        let mut r = request(p);
        r.cluster = Some("g".into());
        assert!(r.validate().is_err());
        r.inference = InferenceMethod::Bootstrap;
        assert!(r.validate().is_ok());
    }
}
