use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ald::latent_scale;
use crate::data::Dataset;
use crate::diagnostics::{categorical_balance, flat_qq, qq_above_below, sign_residuals, DEFAULT_CLAMP};
use crate::em::{fit_path, QuantileFit};
use crate::error::{QremError, Result};
use crate::inference::{
    bahadur_covariance, bootstrap_covariance, confidence_intervals, BootstrapConfig, CovarianceEstimate, ResampleUnit,
};
use crate::mixed::{fit_mixed_path, mixed_bootstrap_covariance, MixedConfig, MixedQuantileFit};

use super::ingest::{ingest_csv, FitRequest, InferenceMethod};
use super::output::{
    csv_line, csv_provenance, fmt_f64, fmt_opt, to_json, write_atomic, FitBlock, FitProvenance, MixedBlock,
    ResultDocument, TOOL, VERSION,
};

pub const CI_LEVEL: f64 = 0.95;

fn covariance(
    data: &Dataset,
    fit: &QuantileFit,
    request: &FitRequest,
    mixed: Option<&MixedConfig>,
) -> Result<CovarianceEstimate> {
    let boot = |unit| BootstrapConfig {
        replicates: request.bootstrap_replicates,
        seed: request.seed,
        unit,
    };
    match (request.inference, mixed) {
        (InferenceMethod::Bahadur, _) => bahadur_covariance(data, fit),
        (InferenceMethod::Bootstrap, None) => bootstrap_covariance(data, fit.q, &boot(ResampleUnit::Rows), &request.solver),
        (InferenceMethod::Bootstrap, Some(cfg)) => mixed_bootstrap_covariance(data, fit.q, cfg, &boot(ResampleUnit::Clusters)),
    }
}

fn block(data: &Dataset, fit: QuantileFit, cov: CovarianceEstimate, mixed: Option<MixedBlock>) -> Result<FitBlock> {
    let ci = confidence_intervals(&fit.beta, &cov, CI_LEVEL)?;
    Ok(FitBlock {
        q: fit.q,
        names: data.column_names(),
        standard_errors: cov.standard_errors(),
        ci_level: CI_LEVEL,
        ci_lower: ci.iter().map(|i| i.lower).collect(),
        ci_upper: ci.iter().map(|i| i.upper).collect(),
        beta: fit.beta,
        g: fit.g,
        iterations: fit.iterations,
        converged: fit.converged,
        covariance: cov,
        mixed,
    })
}

/// Fits every requested quantile and assembles the result document.
pub fn run_fit(request: &FitRequest) -> Result<ResultDocument> {
    request.validate()?;
    let ingested = ingest_csv(&request.data, request)?;
    let data = &ingested.data;

    let fits: Vec<FitBlock> = if request.cluster.is_some() {
        let cfg = MixedConfig {
            solver: request.solver,
            ..Default::default()
        };
        let fits: Vec<MixedQuantileFit> = fit_mixed_path(data, &request.quantiles, &cfg)?;
        fits.into_iter()
            .map(|m| {
                let cov = covariance(data, &m.fit, request, Some(&cfg))?;
                let extra = MixedBlock {
                    sigma_v2: m.model.sigma_v2,
                    residual_scale: m.model.residual_scale,
                    cluster_labels: m.model.labels,
                    blups: m.model.v,
                };
                block(data, m.fit, cov, Some(extra))
            })
            .collect::<Result<_>>()?
    } else {
        fit_path(data, &request.quantiles, &request.solver)?
            .into_iter()
            .map(|f| {
                let cov = covariance(data, &f, request, None)?;
                block(data, f, cov, None)
            })
            .collect::<Result<_>>()?
    };

    Ok(ResultDocument {
        provenance: FitProvenance {
            tool: TOOL.into(),
            version: VERSION.into(),
            seed: request.seed,
            data_fingerprint: data.fingerprint(),
            rows_read: ingested.rows_read,
            rows_dropped: ingested.rows_dropped,
            request: request.clone(),
        },
        fits,
    })
}

pub fn fit_command(request: &FitRequest, out: Option<&Path>) -> Result<()> {
    let doc = run_fit(request)?;
    let Some(path) = out else {
        print!("{}", to_json(&doc)?);
        return Ok(());
    };
    if doc.provenance.rows_dropped > 0 {
        println!(
            "dropped {} of {} rows with missing values",
            doc.provenance.rows_dropped, doc.provenance.rows_read
        );
    }
    for b in &doc.fits {
        let coefs: Vec<String> = b
            .names
            .iter()
            .zip(b.beta.iter().zip(&b.standard_errors))
            .map(|(n, (v, s))| format!("{n}={v:.6} ({s:.6})"))
            .collect();
        let mixed = b
            .mixed
            .as_ref()
            .map(|m| format!(" sigma_v2={:.6}", m.sigma_v2))
            .unwrap_or_default();
        println!(
            "q={} G={:.6} iterations={} converged={}{} | {}",
            b.q,
            b.g,
            b.iterations,
            b.converged,
            mixed,
            coefs.join(" ")
        );
    }
    write_atomic(path, &to_json(&doc)?)
}

/// Rebuilds the fitted state of one block on freshly ingested data.
pub fn rebuild_fit(data: &Dataset, block: &FitBlock) -> Result<QuantileFit> {
    let mut residuals = data.residuals(&block.beta);
    if let Some(m) = &block.mixed {
        let clusters = data
            .clusters()
            .ok_or_else(|| QremError::StaleFit("the fit has random effects but the data has no clusters".into()))?;
        let by_cluster: Vec<f64> = clusters
            .labels()
            .iter()
            .map(|label| {
                m.cluster_labels
                    .iter()
                    .position(|l| l == label)
                    .map(|k| m.blups[k])
                    .ok_or_else(|| QremError::StaleFit(format!("cluster `{label}` has no BLUP in the fit")))
            })
            .collect::<Result<_>>()?;
        for (u, &c) in residuals.iter_mut().zip(clusters.index()) {
            *u -= by_cluster[c];
        }
    }
    Ok(QuantileFit {
        q: block.q,
        lambda: residuals.iter().map(|&u| latent_scale(u, DEFAULT_CLAMP)).collect(),
        beta: block.beta.clone(),
        residuals,
        iterations: block.iterations,
        converged: block.converged,
        objective_trace: Vec::new(),
        g: block.g,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseRequest {
    pub fit: PathBuf,
    pub data: Option<PathBuf>,
    pub predictor: Option<String>,
    pub levels: usize,
    pub flat_qq: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct DiagnoseProvenance<'a> {
    tool: &'a str,
    version: &'a str,
    data_fingerprint: &'a str,
    request: &'a DiagnoseRequest,
}

pub fn diagnose_command(req: &DiagnoseRequest) -> Result<()> {
    let doc: ResultDocument = serde_json::from_str(&std::fs::read_to_string(&req.fit)?)?;
    let mut fit_request = doc.provenance.request.clone();
    if let Some(d) = &req.data {
        fit_request.data = d.clone();
    }
    let data = ingest_csv(&fit_request.data, &fit_request)?.data;
    let fingerprint = data.fingerprint();
    if fingerprint != doc.provenance.data_fingerprint {
        return Err(QremError::StaleFit(format!(
            "{} does not match the data the fit in {} was computed from",
            fit_request.data.display(),
            req.fit.display()
        )));
    }
    if req.flat_qq.is_some() && req.predictor.is_none() {
        return Err(QremError::InvalidConfig("--flat-qq needs --predictor".into()));
    }
    if req.out.is_some() && req.predictor.is_none() {
        return Err(QremError::InvalidConfig("--out needs --predictor".into()));
    }
    let predictor = req.predictor.as_deref().map(|p| data.column_index(p)).transpose()?;
    let fits: Vec<QuantileFit> = doc.fits.iter().map(|b| rebuild_fit(&data, b)).collect::<Result<_>>()?;
    let provenance = csv_provenance(&DiagnoseProvenance {
        tool: TOOL,
        version: VERSION,
        data_fingerprint: &fingerprint,
        request: req,
    })?;

    let mut qq_csv = provenance.clone();
    qq_csv.push_str(&csv_line(&["q", "probability", "above", "below"].map(String::from))?);
    for f in &fits {
        let s = sign_residuals(&data, f);
        let mut line = format!(
            "q={} above={} below={} zero={} orthogonality={:.3e}",
            f.q,
            s.above.len(),
            s.below.len(),
            s.near_zero.len(),
            s.orthogonality_defect
        );
        if let Some(j) = predictor {
            let qq = qq_above_below(&data, f, j, None)?;
            line.push_str(&format!(" ks={:.4} p={:.4}", qq.ks_statistic, qq.ks_p_value));
            for ((p, a), b) in qq.probabilities.iter().zip(&qq.above).zip(&qq.below) {
                qq_csv.push_str(&csv_line(&[f.q.to_string(), fmt_f64(*p), fmt_f64(*a), fmt_f64(*b)])?);
            }
        }
        println!("{line}");
        for factor in &fit_request.categorical {
            for lb in categorical_balance(&data, f, factor)? {
                println!(
                    "  {} n={} above={} proportion={} expected={:.3}{}",
                    lb.level,
                    lb.count,
                    lb.above,
                    lb.proportion.map_or("-".into(), |p| format!("{p:.3}")),
                    lb.expected,
                    if lb.flagged { " flagged" } else { "" }
                );
            }
        }
    }

    if let (Some(path), Some(_)) = (&req.out, predictor) {
        write_atomic(path, &qq_csv)?;
    }
    if let (Some(path), Some(j)) = (&req.flat_qq, predictor) {
        let grid = flat_qq(&data, &fits, j, req.levels)?;
        let mut out = provenance;
        let mut header = vec!["xi".to_string()];
        header.extend(grid.quantiles.iter().map(|q| q.to_string()));
        out.push_str(&csv_line(&header)?);
        for (xi, row) in grid.xi.iter().zip(&grid.ratios) {
            let mut cells = vec![fmt_f64(*xi)];
            cells.extend(row.iter().map(|r| fmt_opt(*r)));
            out.push_str(&csv_line(&cells)?);
        }
        println!(
            "flat-qq: {} defined cells, {:.1}% outside [0.9, 1.1]",
            grid.defined_cells().count(),
            100.0 * grid.fraction_outside(0.9, 1.1)
        );
        write_atomic(path, &out)?;
    }
    Ok(())
}
