use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use mpe_core::estimators::{write_reports_csv, Evaluation};
use mpe_core::rollout::derive_seed;
use mpe_core::similarity::even_split;
use mpe_core::{EstimatorReport, PolicySet, RunningMoments, Strategy, TabularMdp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::pipeline::{require_exact_coverage, run_seed, setup_group, GroupSetup};
use crate::HarnessError;

/// Mean relative error across groups, runs and targets at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub strategy: Strategy,
    pub n: usize,
    pub mean_rel_error: f64,
    /// Standard error over (group, run) cells.
    pub se_rel_error: f64,
    /// Divided by the on-policy mean relative error at the first grid point.
    pub normalized: f64,
    pub normalized_se: f64,
    pub mean_sq_rel_error: f64,
}

/// Mean squared relative error of a strategy divided by on-policy Monte
/// Carlo's, per group, at the reference sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub strategy: Strategy,
    pub n: usize,
    pub mean_ratio: f64,
    pub se_ratio: f64,
    pub groups_below_one: usize,
    pub groups: usize,
}

/// Episodes a strategy needs to match on-policy Monte Carlo's error at the
/// reference sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityRow {
    pub strategy: Strategy,
    pub reference_n: usize,
    pub episodes: f64,
    pub ratio_to_reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub config: ExperimentConfig,
    pub curves: Vec<CurvePoint>,
    pub relative_variance: Vec<VarianceRow>,
    pub parity: Vec<ParityRow>,
    /// Per-group ratios behind `relative_variance`, in strategy order.
    pub group_ratios: Vec<(Strategy, Vec<f64>)>,
}

impl ResultBundle {
    pub fn variance_row(&self, strategy: Strategy) -> Option<&VarianceRow> {
        self.relative_variance
            .iter()
            .find(|r| r.strategy == strategy)
    }

    pub fn parity_row(&self, strategy: Strategy) -> Option<&ParityRow> {
        self.parity.iter().find(|r| r.strategy == strategy)
    }

    pub fn curve(&self, strategy: Strategy) -> Vec<&CurvePoint> {
        self.curves
            .iter()
            .filter(|c| c.strategy == strategy)
            .collect()
    }
}

/// Strategies actually run: the requested ones plus on-policy Monte Carlo,
/// which every normalization refers to.
pub fn strategies_to_run(config: &ExperimentConfig) -> Vec<Strategy> {
    Strategy::ALL
        .into_iter()
        .filter(|s| *s == Strategy::OnPolicy || config.strategies.contains(s))
        .collect()
}

/// Per-(strategy, n) summaries of one (group, run) cell.
struct CellOutcome {
    /// `[strategy][grid index] -> (mean rel error, mean squared rel error)`
    errors: Vec<Vec<(f64, f64)>>,
    reports: Vec<EstimatorReport>,
}

fn run_cell(
    config: &ExperimentConfig,
    mdp: &TabularMdp,
    setup: &GroupSetup,
    strategies: &[Strategy],
    run: usize,
) -> Result<CellOutcome, HarnessError> {
    let mut eval = Evaluation::new(mdp, &setup.targets, &setup.ground_truth)?;
    eval.store_samples = false;
    let k = setup.targets.len();
    let cell_seed = run_seed(setup.seed, run);
    let mut errors = Vec::with_capacity(strategies.len());
    let mut reports = Vec::new();
    for (si, &strategy) in strategies.iter().enumerate() {
        let mut row = Vec::with_capacity(config.sample_grid.len());
        for (ni, &n) in config.sample_grid.iter().enumerate() {
            let seed = derive_seed(cell_seed, (si * 1024 + ni) as u64);
            let split = even_split(n, k);
            let report = match strategy {
                Strategy::Mpe => eval.run_mpe(&setup.behavior, &setup.truth, n, seed)?,
                Strategy::OnPolicy => eval.run_onpolicy_mc(&split, seed)?,
                Strategy::Odi => eval.run_odi(&setup.estimated, &split, seed)?,
                Strategy::Son => eval.run_son(&split, seed)?,
                Strategy::Sodi => eval.run_sodi(&setup.estimated, &split, seed)?,
            };
            let rel: f64 = report.estimates.iter().map(|e| e.rel_error).sum::<f64>() / k as f64;
            let sq: f64 = report
                .estimates
                .iter()
                .map(|e| e.rel_error * e.rel_error)
                .sum::<f64>()
                / k as f64;
            row.push((rel, sq));
            if config.write_reports {
                reports.push(report);
            }
        }
        errors.push(row);
    }
    Ok(CellOutcome { errors, reports })
}

fn check_group_coverage(setup: &GroupSetup, strategies: &[Strategy]) -> Result<(), HarnessError> {
    if strategies.contains(&Strategy::Mpe) {
        require_exact_coverage(
            &setup.behavior.policy,
            &setup.targets,
            &setup.truth,
            "tailored behavior",
        )?;
    }
    if strategies.contains(&Strategy::Odi) || strategies.contains(&Strategy::Sodi) {
        for (k, pi) in setup.targets.iter().enumerate() {
            let single = PolicySet::new(vec![pi.clone()])?;
            let own = mpe_core::mu_hat_rl(&single, std::slice::from_ref(&setup.estimated[k]))?;
            require_exact_coverage(
                &own.policy,
                &single,
                std::slice::from_ref(&setup.truth[k]),
                &format!("per-target behavior {k}"),
            )?;
        }
    }
    Ok(())
}

/// Runs every strategy over the sample grid for `groups × runs` cells and
/// aggregates the curves and both tables. Also returns individual reports
/// when `write_reports` is set.
pub fn run_compare(
    config: &ExperimentConfig,
) -> Result<(ResultBundle, Vec<EstimatorReport>), HarnessError> {
    config.validate()?;
    let mdp = config.env.build()?;
    let strategies = strategies_to_run(config);
    let setups = (0..config.groups)
        .into_par_iter()
        .map(|g| {
            let setup = setup_group(config, &mdp, g)?;
            check_group_coverage(&setup, &strategies)?;
            Ok(setup)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let cells: Vec<(usize, usize)> = (0..config.groups)
        .flat_map(|g| (0..config.runs).map(move |r| (g, r)))
        .collect();
    let outcomes = cells
        .par_iter()
        .map(|&(g, r)| run_cell(config, &mdp, &setups[g], &strategies, r))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let bundle = aggregate(config, &strategies, &outcomes);
    let reports = outcomes.into_iter().flat_map(|o| o.reports).collect();
    Ok((bundle, reports))
}

fn aggregate(
    config: &ExperimentConfig,
    strategies: &[Strategy],
    outcomes: &[CellOutcome],
) -> ResultBundle {
    let on = strategies
        .iter()
        .position(|&s| s == Strategy::OnPolicy)
        .expect("on-policy always runs");
    let reference = config
        .sample_grid
        .iter()
        .position(|&n| n == config.reference_n)
        .expect("validated reference point");

    let mut curves = Vec::new();
    let mut raw: Vec<Vec<(RunningMoments, RunningMoments)>> = Vec::new();
    for si in 0..strategies.len() {
        raw.push(
            (0..config.sample_grid.len())
                .map(|ni| {
                    let rel: RunningMoments = outcomes.iter().map(|o| o.errors[si][ni].0).collect();
                    let sq: RunningMoments = outcomes.iter().map(|o| o.errors[si][ni].1).collect();
                    (rel, sq)
                })
                .collect(),
        );
    }
    let baseline = raw[on][0].0.mean();
    let norm = if baseline > 0.0 { baseline } else { 1.0 };
    for (si, &strategy) in strategies.iter().enumerate() {
        for (ni, &n) in config.sample_grid.iter().enumerate() {
            let (rel, sq) = &raw[si][ni];
            curves.push(CurvePoint {
                strategy,
                n,
                mean_rel_error: rel.mean(),
                se_rel_error: rel.std_error(),
                normalized: rel.mean() / norm,
                normalized_se: rel.std_error() / norm,
                mean_sq_rel_error: sq.mean(),
            });
        }
    }

    let per_group = |si: usize, g: usize| -> f64 {
        let cells = &outcomes[g * config.runs..(g + 1) * config.runs];
        cells.iter().map(|o| o.errors[si][reference].1).sum::<f64>() / config.runs as f64
    };
    let mut relative_variance = Vec::new();
    let mut group_ratios = Vec::new();
    for (si, &strategy) in strategies.iter().enumerate() {
        let ratios: Vec<f64> = (0..config.groups)
            .map(|g| {
                if si == on {
                    1.0
                } else {
                    let base = per_group(on, g);
                    if base > 0.0 {
                        per_group(si, g) / base
                    } else {
                        1.0
                    }
                }
            })
            .collect();
        let m: RunningMoments = ratios.iter().copied().collect();
        relative_variance.push(VarianceRow {
            strategy,
            n: config.reference_n,
            mean_ratio: m.mean(),
            se_ratio: m.std_error(),
            groups_below_one: ratios.iter().filter(|&&r| r < 1.0).count(),
            groups: config.groups,
        });
        group_ratios.push((strategy, ratios));
    }

    let target = raw[on][reference].0.mean();
    let parity = strategies
        .iter()
        .enumerate()
        .map(|(si, &strategy)| {
            let episodes = if si == on {
                config.reference_n as f64
            } else {
                let errors: Vec<f64> = raw[si].iter().map(|(rel, _)| rel.mean()).collect();
                episodes_to_parity(&config.sample_grid, &errors, target)
            };
            ParityRow {
                strategy,
                reference_n: config.reference_n,
                episodes,
                ratio_to_reference: episodes / config.reference_n as f64,
            }
        })
        .collect();

    ResultBundle {
        config: config.clone(),
        curves,
        relative_variance,
        parity,
        group_ratios,
    }
}

/// Smallest `n` at which the error curve reaches `target`, interpolating
/// linearly in `(1/n, error²)` between grid points. Outside the grid the
/// Monte Carlo rate `error² ∝ 1/n` through the nearest end point is used.
/// Never less than 1.
pub fn episodes_to_parity(grid: &[usize], errors: &[f64], target: f64) -> f64 {
    let target_sq = target * target;
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    let through = |i: usize| {
        if target_sq > 0.0 {
            grid[i] as f64 * sq[i] / target_sq
        } else {
            f64::INFINITY
        }
    };
    let result = if sq[0] <= target_sq {
        through(0)
    } else if let Some(i) = (1..grid.len()).find(|&i| sq[i] <= target_sq) {
        let (x0, x1) = (1.0 / grid[i - 1] as f64, 1.0 / grid[i] as f64);
        let x = x0 + (target_sq - sq[i - 1]) * (x1 - x0) / (sq[i] - sq[i - 1]);
        1.0 / x
    } else {
        through(grid.len() - 1)
    };
    result.max(1.0)
}

#[derive(Serialize)]
struct VarianceCsv<'a> {
    strategy: Strategy,
    label: &'a str,
    n: usize,
    mean_ratio: f64,
    se_ratio: f64,
    groups_below_one: usize,
    groups: usize,
}

#[derive(Serialize)]
struct ParityCsv<'a> {
    strategy: Strategy,
    label: &'a str,
    reference_n: usize,
    episodes: f64,
    ratio_to_reference: f64,
}

/// Writes `curves.csv`, `table1.csv`, `table2.csv`, `bundle.json`,
/// `curves.svg` and, if there are any, `reports.csv` into `dir`.
pub fn write_bundle(
    bundle: &ResultBundle,
    reports: &[EstimatorReport],
    dir: &Path,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut curves = csv::Writer::from_path(dir.join("curves.csv"))?;
    for c in &bundle.curves {
        curves.serialize(c)?;
    }
    curves.flush()?;
    let mut t1 = csv::Writer::from_path(dir.join("table1.csv"))?;
    for r in &bundle.relative_variance {
        t1.serialize(VarianceCsv {
            strategy: r.strategy,
            label: r.strategy.label(),
            n: r.n,
            mean_ratio: r.mean_ratio,
            se_ratio: r.se_ratio,
            groups_below_one: r.groups_below_one,
            groups: r.groups,
        })?;
    }
    t1.flush()?;
    let mut t2 = csv::Writer::from_path(dir.join("table2.csv"))?;
    for r in &bundle.parity {
        t2.serialize(ParityCsv {
            strategy: r.strategy,
            label: r.strategy.label(),
            reference_n: r.reference_n,
            episodes: r.episodes,
            ratio_to_reference: r.ratio_to_reference,
        })?;
    }
    t2.flush()?;
    serde_json::to_writer_pretty(
        BufWriter::new(File::create(dir.join("bundle.json"))?),
        bundle,
    )?;
    std::fs::write(dir.join("curves.svg"), crate::plot::curves_svg(bundle))?;
    if !reports.is_empty() {
        write_reports_csv(
            BufWriter::new(File::create(dir.join("reports.csv"))?),
            reports,
        )?;
    }
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<ResultBundle, HarnessError> {
    let path = dir.join("bundle.json");
    let file = File::open(&path).map_err(|e| {
        HarnessError::Config(format!("no result bundle at {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_on_the_grid_and_between_points() {
        let grid = [100, 400, 1600];
        let errors = [0.4, 0.2, 0.1];
        assert!((episodes_to_parity(&grid, &errors, 0.2) - 400.0).abs() < 1e-9);
        // error² ∝ 1/n exactly, so interpolation recovers the rate.
        let e = 0.4 * (100.0f64 / 900.0).sqrt();
        assert!((episodes_to_parity(&grid, &errors, e) - 900.0).abs() < 1e-6);
    }

    #[test]
    fn parity_extrapolates_off_the_grid() {
        let grid = [100, 1000];
        assert!((episodes_to_parity(&grid, &[0.1, 0.05], 0.2) - 25.0).abs() < 1e-9);
        assert!((episodes_to_parity(&grid, &[0.4, 0.2], 0.1) - 4000.0).abs() < 1e-9);
        assert_eq!(episodes_to_parity(&grid, &[0.0, 0.0], 0.5), 1.0);
    }

    #[test]
    fn parity_is_monotone_in_error_level() {
        let grid = [100, 300, 1000, 3000];
        let base = [0.3, 0.18, 0.1, 0.058];
        let mut last = 0.0;
        for scale in [0.5, 0.8, 1.0, 1.3, 2.0] {
            let errors: Vec<f64> = base.iter().map(|e| e * scale).collect();
            let p = episodes_to_parity(&grid, &errors, 0.1);
            assert!(p >= last);
            last = p;
        }
    }
}
