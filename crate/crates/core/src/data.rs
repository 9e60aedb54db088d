//! The unit of ingestion: response, design matrix and optional grouping.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{QremError, Result};
use crate::linalg::PivotedQr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Intercept,
    Continuous,
    /// Reference-coded indicator; `factor` indexes [`Dataset::factors`].
    Indicator { factor: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

/// A categorical predictor. Level 0 is the baseline and has no indicator column.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
    /// Level index per row.
    pub codes: Vec<usize>,
}

/// Random-intercept grouping. Cluster indices follow the order in which a
/// label first appears in the rows, so relabeling never reorders anything.
#[derive(Debug, Clone, PartialEq)]
pub struct Clusters {
    labels: Vec<String>,
    index: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl Clusters {
    pub fn from_labels<S: AsRef<str>>(row_labels: &[S]) -> Self {
        let mut lookup: HashMap<&str, usize> = HashMap::new();
        let mut labels = Vec::new();
        let mut index = Vec::with_capacity(row_labels.len());
        for l in row_labels {
            let l = l.as_ref();
            let next = labels.len();
            let id = *lookup.entry(l).or_insert_with(|| {
                labels.push(l.to_string());
                next
            });
            index.push(id);
        }
        let mut members = vec![Vec::new(); labels.len()];
        for (row, &c) in index.iter().enumerate() {
            members[c].push(row);
        }
        Self { labels, index, members }
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Cluster index of each row.
    pub fn index(&self) -> &[usize] {
        &self.index
    }

    /// Row indices of each cluster, in row order.
    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    x: DMatrix<f64>,
    columns: Vec<Column>,
    factors: Vec<Factor>,
    clusters: Option<Clusters>,
}

impl Dataset {
    /// Validates and wraps a response and design. The design must be finite,
    /// have more rows than columns and full column rank.
    pub fn new(y: Vec<f64>, x: DMatrix<f64>, columns: Vec<Column>) -> Result<Self> {
        let ds = Self {
            y,
            x,
            columns,
            factors: Vec::new(),
            clusters: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn builder(y: Vec<f64>) -> DatasetBuilder {
        DatasetBuilder {
            y,
            intercept: true,
            columns: Vec::new(),
            values: Vec::new(),
            factors: Vec::new(),
            clusters: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let (n, p) = self.x.shape();
        if self.y.len() != n {
            return Err(QremError::InvalidData(format!(
                "response has {} rows but the design has {n}",
                self.y.len()
            )));
        }
        if self.columns.len() != p {
            return Err(QremError::InvalidData(format!(
                "{} column names for {p} design columns",
                self.columns.len()
            )));
        }
        if p == 0 {
            return Err(QremError::InvalidData("design has no columns".into()));
        }
        if n <= p {
            return Err(QremError::InvalidData(format!(
                "need more rows than columns (n = {n}, p = {p})"
            )));
        }
        if let Some(i) = self.y.iter().position(|v| !v.is_finite()) {
            return Err(QremError::InvalidData(format!("non-finite response at row {i}")));
        }
        if let Some(k) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(QremError::InvalidData(format!(
                "non-finite design entry at row {}, column `{}`",
                k % n,
                self.columns[k / n].name
            )));
        }
        if let Some(c) = &self.clusters {
            if c.index.len() != n {
                return Err(QremError::InvalidData(format!(
                    "{} cluster labels for {n} rows",
                    c.index.len()
                )));
            }
        }
        let qr = PivotedQr::from_matrix(&self.x);
        if !qr.is_full_rank() {
            return Err(self.singular(&qr.deficient_columns()));
        }
        Ok(())
    }

    pub(crate) fn singular(&self, cols: &[usize]) -> QremError {
        QremError::SingularDesign {
            columns: cols.iter().map(|&j| self.columns[j].name.clone()).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| QremError::UnknownColumn(name.to_string()))
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn factor(&self, name: &str) -> Result<&Factor> {
        self.factors
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| QremError::UnknownColumn(name.to_string()))
    }

    pub fn clusters(&self) -> Option<&Clusters> {
        self.clusters.as_ref()
    }

    pub fn has_intercept(&self) -> bool {
        self.columns.iter().any(|c| c.kind == ColumnKind::Intercept)
    }

    /// Attaches random-intercept labels, one per row.
    pub fn with_clusters<S: AsRef<str>>(mut self, labels: &[S]) -> Result<Self> {
        if labels.len() != self.n() {
            return Err(QremError::InvalidData(format!(
                "{} cluster labels for {} rows",
                labels.len(),
                self.n()
            )));
        }
        self.clusters = Some(Clusters::from_labels(labels));
        Ok(self)
    }

    /// Fitted values `X b`.
    pub fn predict(&self, beta: &[f64]) -> Vec<f64> {
        let (n, p) = self.x.shape();
        assert_eq!(beta.len(), p);
        let xs = self.x.as_slice();
        let mut out = vec![0.0; n];
        for (j, &b) in beta.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            let col = &xs[j * n..(j + 1) * n];
            for (o, &v) in out.iter_mut().zip(col) {
                *o += v * b;
            }
        }
        out
    }

    /// `y - X b`.
    pub fn residuals(&self, beta: &[f64]) -> Vec<f64> {
        let fitted = self.predict(beta);
        self.y.iter().zip(&fitted).map(|(y, f)| y - f).collect()
    }

    /// Same rows, a subset of design columns (e.g. a nested model).
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let n = self.n();
        let mut x = DMatrix::zeros(n, cols.len());
        let mut columns = Vec::with_capacity(cols.len());
        for (k, &j) in cols.iter().enumerate() {
            if j >= self.p() {
                return Err(QremError::InvalidData(format!("column index {j} out of range")));
            }
            x.set_column(k, &self.x.column(j));
            columns.push(self.columns[j].clone());
        }
        let ds = Self {
            y: self.y.clone(),
            x,
            columns,
            factors: self.factors.clone(),
            clusters: self.clusters.clone(),
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Replaces the response, keeping design and metadata.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        let ds = Self {
            y,
            ..self.clone()
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Rows drawn by index (repeats allowed). Cluster labels follow the rows.
    pub fn resample_rows(&self, rows: &[usize]) -> Result<Self> {
        let ds = self.take_rows(rows);
        ds.validate()?;
        Ok(ds)
    }

    /// Whole clusters drawn by cluster index (repeats allowed). Each draw
    /// becomes its own cluster in the result.
    pub fn resample_clusters(&self, draws: &[usize]) -> Result<Self> {
        let clusters = self.clusters.as_ref().ok_or_else(|| {
            QremError::InvalidData("cluster resampling needs cluster labels".into())
        })?;
        let members = clusters.members();
        let mut rows = Vec::new();
        let mut draw_of_row = Vec::new();
        for (d, &c) in draws.iter().enumerate() {
            for &r in &members[c] {
                rows.push(r);
                draw_of_row.push(d);
            }
        }
        let mut ds = self.take_rows(&rows);
        let labels: Vec<String> = draw_of_row.iter().map(|d| d.to_string()).collect();
        ds.clusters = Some(Clusters::from_labels(&labels));
        ds.validate()?;
        Ok(ds)
    }

    fn take_rows(&self, rows: &[usize]) -> Self {
        let p = self.p();
        let mut x = DMatrix::zeros(rows.len(), p);
        for (dst, &src) in rows.iter().enumerate() {
            for j in 0..p {
                x[(dst, j)] = self.x[(src, j)];
            }
        }
        let y = rows.iter().map(|&r| self.y[r]).collect();
        let factors = self
            .factors
            .iter()
            .map(|f| Factor {
                name: f.name.clone(),
                levels: f.levels.clone(),
                codes: rows.iter().map(|&r| f.codes[r]).collect(),
            })
            .collect();
        let clusters = self.clusters.as_ref().map(|c| {
            let labels: Vec<&str> = rows.iter().map(|&r| c.labels[c.index[r]].as_str()).collect();
            Clusters::from_labels(&labels)
        });
        Self {
            y,
            x,
            columns: self.columns.clone(),
            factors,
            clusters,
        }
    }

    /// Stable fingerprint of the numeric content (response, design, names, clusters).
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for c in &self.columns {
            h.update(c.name.as_bytes());
            h.update([0u8]);
        }
        for v in &self.y {
            h.update(v.to_le_bytes());
        }
        for v in self.x.iter() {
            h.update(v.to_le_bytes());
        }
        if let Some(c) = &self.clusters {
            for &i in &c.index {
                h.update((i as u64).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Assembles a design column by column.
#[derive(Debug, Clone)]
pub struct DatasetBuilder {
    y: Vec<f64>,
    intercept: bool,
    columns: Vec<Column>,
    values: Vec<Vec<f64>>,
    factors: Vec<Factor>,
    clusters: Option<Vec<String>>,
}

impl DatasetBuilder {
    /// The intercept column is on by default.
    pub fn intercept(mut self, on: bool) -> Self {
        self.intercept = on;
        self
    }

    pub fn continuous(mut self, name: &str, values: Vec<f64>) -> Self {
        self.columns.push(Column {
            name: name.to_string(),
            kind: ColumnKind::Continuous,
        });
        self.values.push(values);
        self
    }

    /// Reference-coded factor; the lexicographically first level is the baseline.
    pub fn categorical<S: AsRef<str>>(mut self, name: &str, values: &[S]) -> Self {
        let mut levels: Vec<String> = values.iter().map(|v| v.as_ref().to_string()).collect();
        levels.sort();
        levels.dedup();
        let codes: Vec<usize> = values
            .iter()
            .map(|v| levels.binary_search_by(|l| l.as_str().cmp(v.as_ref())).unwrap())
            .collect();
        let fi = self.factors.len();
        for (li, level) in levels.iter().enumerate().skip(1) {
            self.columns.push(Column {
                name: format!("{name}={level}"),
                kind: ColumnKind::Indicator { factor: fi },
            });
            self.values
                .push(codes.iter().map(|&c| if c == li { 1.0 } else { 0.0 }).collect());
        }
        self.factors.push(Factor {
            name: name.to_string(),
            levels,
            codes,
        });
        self
    }

    pub fn clusters<S: AsRef<str>>(mut self, labels: &[S]) -> Self {
        self.clusters = Some(labels.iter().map(|s| s.as_ref().to_string()).collect());
        self
    }

    pub fn build(self) -> Result<Dataset> {
        let n = self.y.len();
        for (c, v) in self.columns.iter().zip(&self.values) {
            if v.len() != n {
                return Err(QremError::InvalidData(format!(
                    "column `{}` has {} values for {n} rows",
                    c.name,
                    v.len()
                )));
            }
        }
        let mut columns = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        if self.intercept {
            columns.push(Column {
                name: "(Intercept)".to_string(),
                kind: ColumnKind::Intercept,
            });
            data.extend(std::iter::repeat_n(1.0, n));
        }
        for (c, v) in self.columns.into_iter().zip(self.values) {
            columns.push(c);
            data.extend(v);
        }
        let x = DMatrix::from_vec(n, columns.len(), data);
        let ds = Dataset {
            y: self.y,
            x,
            columns,
            factors: self.factors,
            clusters: self.clusters.as_deref().map(Clusters::from_labels),
        };
        ds.validate()?;
        Ok(ds)
    }
}
