use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use mpe_core::behavior::{coverage_check, CoverageReport};
use mpe_core::similarity::even_split;
use mpe_core::{similarity_report_rl, BehaviorPolicy, SimilarityReport};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::pipeline::{setup_group, Gap};
use crate::HarnessError;

#[derive(Debug, Clone, Serialize)]
pub struct CoverageDiagnostics {
    /// Cells the offline data never visits although a target acts there.
    pub gaps: Vec<Gap>,
    /// Support conditions with respect to the tables used for synthesis.
    pub against_estimates: CoverageReport,
    /// Support conditions with respect to the exact tables.
    pub against_exact: CoverageReport,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub behavior: BehaviorPolicy,
    pub similarity: SimilarityReport,
    pub coverage: CoverageDiagnostics,
}

/// Offline data to behavior policy for the first policy group, with the
/// similarity report and coverage diagnostics. Writes `behavior.json`,
/// `similarity_report.json` and `coverage.json` into `out`. In strict mode any
/// coverage gap is fatal (after the files are written).
pub fn cmd_synthesize(
    config: &ExperimentConfig,
    out: &Path,
    strict: bool,
) -> Result<Synthesis, HarnessError> {
    config.validate()?;
    let mdp = config.env.build()?;
    let setup = setup_group(config, &mdp, 0)?;
    let split = even_split(config.reference_n, setup.targets.len());
    let similarity = similarity_report_rl(
        &mdp,
        &setup.targets,
        &setup.estimated,
        &setup.behavior.policy,
        &split,
    )?;
    let coverage = CoverageDiagnostics {
        gaps: setup.gaps.clone(),
        against_estimates: coverage_check(
            &setup.behavior.policy,
            &setup.targets,
            &setup.estimated,
        )?,
        against_exact: coverage_check(&setup.behavior.policy, &setup.targets, &setup.truth)?,
    };

    std::fs::create_dir_all(out)?;
    setup.behavior.write_json(out.join("behavior.json"))?;
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(out.join("similarity_report.json"))?),
        &similarity,
    )?;
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(out.join("coverage.json"))?),
        &coverage,
    )?;

    if strict {
        if !coverage.gaps.is_empty() {
            let listing: Vec<String> = coverage
                .gaps
                .iter()
                .map(|g| format!("k={} t={} s={} a={}", g.k, g.t, g.s, g.a))
                .collect();
            return Err(HarnessError::Coverage(format!(
                "{} unvisited cell(s) with positive target probability: {}",
                listing.len(),
                listing.join("; ")
            )));
        }
        if let Some((t, s, a)) = coverage.against_exact.first_hat_violation() {
            return Err(HarnessError::Coverage(format!(
                "behavior leaves out (t={t}, s={s}, a={a}) where a target needs it"
            )));
        }
    }
    Ok(Synthesis {
        behavior: setup.behavior,
        similarity,
        coverage,
    })
}
