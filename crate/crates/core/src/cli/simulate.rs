use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::ald::QuantileLevel;
use crate::em::SolverConfig;
use crate::error::Result;
use crate::sim::{run_study, ScenarioSpec, StudyKind, StudyOptions};

use super::output::{report_csv, to_json, write_atomic, SimulationDocument, SimulationProvenance, TOOL, VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRequest {
    pub scenario: u32,
    /// Rows (subjects for the mixed scenario), after applying the default.
    pub n: usize,
    pub replications: usize,
    pub quantiles: Vec<QuantileLevel>,
    pub study: StudyKind,
    pub bootstrap_replicates: usize,
    pub solver: SolverConfig,
    pub seed: u64,
}

pub fn simulate(request: &SimulateRequest, out: Option<&PathBuf>) -> Result<()> {
    let spec = ScenarioSpec::new(request.scenario, request.seed)?.with_n(request.n);
    let opts = StudyOptions {
        bootstrap_replicates: request.bootstrap_replicates,
        solver: request.solver,
    };
    let report = run_study(&spec, request.study, &request.quantiles, request.replications, request.seed, &opts)?;
    let runtime = report.runtime;
    let doc = SimulationDocument {
        provenance: SimulationProvenance {
            tool: TOOL.into(),
            version: VERSION.into(),
            seed: request.seed,
            request: request.clone(),
        },
        report,
    };

    eprintln!("runtime: {:.2} s", runtime.as_secs_f64());

    match out {
        Some(path) => {
            print_summary(&doc);
            let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
            let body = if is_csv { report_csv(&doc)? } else { to_json(&doc)? };
            write_atomic(path, &body)
        }
        None => {
            print!("{}", to_json(&doc)?);
            Ok(())
        }
    }
}

fn print_summary(doc: &SimulationDocument) {
    for qs in &doc.report.quantiles {
        let cells: Vec<String> = qs
            .coefficients
            .iter()
            .map(|c| {
                let se = c.standard_errors.first();
                format!(
                    "{}: mean {:.5} bias {} sd {:.5} se {} cover95 {}",
                    c.name,
                    c.mean_estimate,
                    c.bias.map_or("-".into(), |b| format!("{b:+.5}")),
                    c.empirical_se,
                    se.map_or("-".into(), |s| format!("{:.5}", s.mean)),
                    se.and_then(|s| s.coverage_95).map_or("-".into(), |v| format!("{v:.3}")),
                )
            })
            .collect();
        println!("q={} failed={} | {}", qs.q, qs.failed, cells.join(" | "));
    }
}
