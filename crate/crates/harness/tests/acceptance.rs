use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use mpe_core::envs::build_micro_suite;
use mpe_core::fqe::{fit_target, generate_offline_data, OfflineDataset};
use mpe_core::{
    fit_tailored_behavior, mu_hat_rl, value_tables, ExactDp, FormulaFault, Policy, PolicySet,
    Strategy, TabularMdp,
};
use mpe_harness::compare::{run_compare, ResultBundle};
use mpe_harness::config::ExperimentConfig;
use mpe_harness::verify::{
    cmd_verify, condition_soundness, identical_policies, optimality, q_hat_identity, unbiasedness,
    variance_oracle, Check, Suite,
};

type Outcome = Result<String, String>;

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    let mut c = ExperimentConfig::load(&path).unwrap();
    c.out = None;
    c
}

fn within(check: Check, budget: Option<Duration>) -> Outcome {
    if !check.passed {
        return Err(check.detail);
    }
    match budget {
        Some(limit) if check.seconds > limit.as_secs_f64() => Err(format!(
            "{} but took {:.1}s (budget {:?})",
            check.detail, check.seconds, limit
        )),
        _ => Ok(format!("{} in {:.2}s", check.detail, check.seconds)),
    }
}

fn gridworld_bundle(name: &str) -> Result<(ResultBundle, f64), String> {
    let start = Instant::now();
    let (bundle, _) = run_compare(&config(name)).map_err(|e| e.to_string())?;
    Ok((bundle, start.elapsed().as_secs_f64()))
}

fn relative_variance(bundle: &ResultBundle, elapsed: f64) -> Outcome {
    let row = bundle.variance_row(Strategy::Mpe).ok_or("no MPE row")?;
    let upper = row.mean_ratio + 3.0 * row.se_ratio;
    let share = row.groups_below_one as f64 / row.groups as f64;
    let detail = format!(
        "ratio {:.3} (+3se {:.3}), below 1 in {}/{} groups, {:.0}s",
        row.mean_ratio, upper, row.groups_below_one, row.groups, elapsed
    );
    if upper < 0.7 && share >= 0.95 && elapsed < 15.0 * 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn parity(similar: &ResultBundle, dissimilar: &ResultBundle) -> Outcome {
    let reference = similar.config.reference_n as f64;
    let ours = similar
        .parity_row(Strategy::Mpe)
        .ok_or("no MPE parity")?
        .episodes;
    let son = dissimilar
        .parity_row(Strategy::Son)
        .ok_or("no SON parity")?
        .episodes;
    let sodi = dissimilar
        .parity_row(Strategy::Sodi)
        .ok_or("no SODI parity")?
        .episodes;
    let detail = format!(
        "ours {ours:.0} at eps 0.1; SON {son:.0}, SODI {sodi:.0} at eps 1; reference {reference}"
    );
    if ours < 0.8 * reference && son > reference && sodi > reference {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(mdp: &TabularMdp) -> Policy {
    Policy::uniform(mdp.horizon(), mdp.num_states(), mdp.num_actions())
}

fn reachable(mdp: &TabularMdp) -> Vec<(usize, usize, usize)> {
    let mut cells = Vec::new();
    for (t, dist) in mdp.state_marginals(&uniform(mdp)).iter().enumerate() {
        for (s, &p) in dist.iter().enumerate() {
            if p > 0.0 {
                cells.extend((0..mdp.num_actions()).map(|a| (t, s, a)));
            }
        }
    }
    cells
}

fn max_q_error(mdp: &TabularMdp, targets: &PolicySet, episodes: usize) -> Result<f64, String> {
    let data =
        generate_offline_data(mdp, &[uniform(mdp)], episodes, 2024).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for pi in targets.iter() {
        let fit = fit_target(&data, pi).map_err(|e| e.to_string())?;
        let dp = value_tables(mdp, pi).map_err(|e| e.to_string())?;
        for (t, s, a) in reachable(mdp) {
            worst = worst.max((fit.q_est.get(t, s, a) - dp.q.get(t, s, a)).abs());
        }
    }
    Ok(worst)
}

fn fqe_exactness() -> Outcome {
    let mut cells = 0;
    for f in build_micro_suite() {
        let data = OfflineDataset::exact_weighted(&f.mdp, &[uniform(&f.mdp)])
            .map_err(|e| e.to_string())?;
        let mut exact = Vec::new();
        for (k, pi) in f.targets.iter().enumerate() {
            let fit = fit_target(&data, pi).map_err(|e| e.to_string())?;
            let dp = value_tables(&f.mdp, pi).map_err(|e| e.to_string())?;
            for (t, s, a) in reachable(&f.mdp) {
                let dq = (fit.q_est.get(t, s, a) - dp.q.get(t, s, a)).abs();
                let dq_hat = (fit.q_hat_est.get(t, s, a) - dp.q_hat.get(t, s, a)).abs();
                if dq > 1e-9 || dq_hat > 1e-9 {
                    return Err(format!(
                        "{} target {k} ({t},{s},{a}): q off by {dq:.2e}, q_hat by {dq_hat:.2e}",
                        f.name
                    ));
                }
                cells += 1;
            }
            exact.push(dp);
        }
        let fitted = fit_tailored_behavior(&data, &f.targets)
            .map_err(|e| e.to_string())?
            .0;
        let direct = mu_hat_rl(&f.targets, &exact).map_err(|e| e.to_string())?;
        for (t, s, a) in reachable(&f.mdp) {
            if (fitted.policy.prob(t, s, a) - direct.policy.prob(t, s, a)).abs() > 1e-9 {
                return Err(format!("{}: behavior differs at ({t},{s},{a})", f.name));
            }
        }
        let ladder = [1_000, 10_000, 100_000]
            .iter()
            .map(|&n| max_q_error(&f.mdp, &f.targets, n))
            .collect::<Result<Vec<_>, _>>()?;
        if ladder.windows(2).any(|w| w[1] > w[0]) {
            return Err(format!("{}: error ladder {ladder:?} increases", f.name));
        }
    }
    Ok(format!("{cells} cells exact; error ladders non-increasing"))
}

fn mutation_sensitivity() -> Outcome {
    let mut details = Vec::new();
    for (fault, flag) in [
        (FormulaFault::FlipRHatSign, "flip-r-hat-sign"),
        (FormulaFault::DropNu, "drop-nu"),
    ] {
        let report = cmd_verify(Suite::Oracles, ExactDp::with_fault(fault));
        if report.passed() {
            return Err(format!("{flag}: oracles suite still passes"));
        }
        let status = Command::new(env!("CARGO_BIN_EXE_mpe"))
            .args(["verify", "oracles", "--mutate", flag])
            .output()
            .map_err(|e| e.to_string())?
            .status;
        if status.code() != Some(3) {
            return Err(format!("{flag}: binary exited with {status}"));
        }
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        details.push(format!("{flag}: {failed} check(s) fail, exit 3"));
    }
    if !cmd_verify(Suite::All, ExactDp::default()).passed() {
        return Err("unmutated suites fail".into());
    }
    Ok(details.join("; "))
}

#[test]
fn acceptance_criteria() {
    let dp = ExactDp::default();
    let similar = gridworld_bundle("gridworld.toml");
    let dissimilar = gridworld_bundle("gridworld_eps1.toml");
    let results: Vec<(&str, Outcome)> = vec![
        (
            "1 unbiasedness",
            within(unbiasedness(dp), Some(Duration::from_secs(10))),
        ),
        (
            "2 variance recursion",
            within(variance_oracle(dp, 20, 11), Some(Duration::from_secs(60))),
        ),
        (
            "3 q_hat identity",
            within(q_hat_identity(dp, 100, 12), None),
        ),
        (
            "4 optimality",
            within(optimality(dp), Some(Duration::from_secs(120))),
        ),
        (
            "5 condition soundness",
            within(condition_soundness(dp, 100, 13), None),
        ),
        ("6 identical targets", within(identical_policies(dp), None)),
        (
            "7 relative variance",
            similar
                .as_ref()
                .map_err(Clone::clone)
                .and_then(|(b, secs)| relative_variance(b, *secs)),
        ),
        (
            "8 episodes to parity",
            match (&similar, &dissimilar) {
                (Ok((a, _)), Ok((b, _))) => parity(a, b),
                (Err(e), _) | (_, Err(e)) => Err(e.clone()),
            },
        ),
        ("9 fitted values", fqe_exactness()),
        ("10 mutation sensitivity", mutation_sensitivity()),
    ];
    let mut failed = Vec::new();
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
