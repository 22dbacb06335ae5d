//! Verification suites: exact DP results against trajectory enumeration,
//! optimality of the tailored behavior against simplex grid search, and
//! soundness of the similarity conditions against exact variances. Every
//! check takes the DP implementation to test, so deliberate formula faults
//! can be shown to be caught.

use std::fmt::Write;
use std::time::Instant;

use mpe_core::behavior::step_objective;
use mpe_core::dp::{total_variance, ExactDp};
use mpe_core::enumerate::{
    enumerate_from, enumerate_trajectories, try_weighted_moments, weighted_moments,
    DEFAULT_ENUMERATION_CAP,
};
use mpe_core::envs::{
    build_gridworld, build_micro_suite, build_policy_set, random_mdp, random_policy, Fixture,
    GridworldSpec, PolicySetSpec,
};
use mpe_core::similarity::even_split;
use mpe_core::{
    mu_hat_rl, mu_star_bandit, pdis_return, similarity_report_bandit, similarity_report_rl,
    BanditInstance, Policy, PolicySet, StateActionTable, StateTable, TabularMdp, ValueTables,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const EXACT_TOL: f64 = 1e-10;
pub const IDENTITY_TOL: f64 = 1e-9;
pub const OPTIMALITY_TOL: f64 = 1e-6;
pub const GRID_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Oracles,
    Optimality,
    Conditions,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {:<28} {:>7.2}s  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.seconds,
                c.detail
            );
        }
        out
    }
}

pub fn cmd_verify(suite: Suite, dp: ExactDp) -> VerifyReport {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Oracles | Suite::All) {
        checks.push(action_value_oracle(dp));
        checks.push(unbiasedness(dp));
        checks.push(variance_oracle(dp, 20, 11));
        checks.push(q_hat_identity(dp, 100, 12));
    }
    if matches!(suite, Suite::Optimality | Suite::All) {
        checks.push(optimality(dp));
    }
    if matches!(suite, Suite::Conditions | Suite::All) {
        checks.push(condition_soundness(dp, 100, 13));
        checks.push(identical_policies(dp));
    }
    VerifyReport { checks }
}

type Outcome = Result<String, String>;

fn timed(name: &'static str, f: impl FnOnce() -> Outcome) -> Check {
    let start = Instant::now();
    let result = f();
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
            seconds,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
            seconds,
        },
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// All tables from the individual DP routines, without the built-in `q̂`
/// cross-check, so faults reach the comparisons below.
pub fn component_tables(
    dp: ExactDp,
    mdp: &TabularMdp,
    pi: &Policy,
) -> mpe_core::Result<ValueTables> {
    let (q, v, performance) = dp.q_v(mdp, pi)?;
    let nu = dp.nu(mdp, &v);
    let r_hat = dp.r_hat(mdp, &q);
    let q_hat = dp.q_hat(mdp, pi, &r_hat);
    Ok(ValueTables {
        q,
        v,
        nu,
        q_hat,
        r_hat,
        performance,
    })
}

fn all_tables(
    dp: ExactDp,
    mdp: &TabularMdp,
    targets: &PolicySet,
) -> Result<Vec<ValueTables>, String> {
    targets
        .iter()
        .map(|pi| component_tables(dp, mdp, pi).map_err(err))
        .collect()
}

/// `pi` everywhere except `(t, s)`, where `row` is used.
fn splice(pi: &Policy, t: usize, s: usize, row: &[f64]) -> Policy {
    let (h, ns, na) = pi.table().dims();
    Policy::new(StateActionTable::from_fn(h, ns, na, |tt, ss, a| {
        if (tt, ss) == (t, s) {
            row[a]
        } else {
            pi.prob(tt, ss, a)
        }
    }))
    .expect("spliced rows are distributions")
}

fn one_hot(na: usize, a: usize) -> Vec<f64> {
    (0..na).map(|i| if i == a { 1.0 } else { 0.0 }).collect()
}

/// `q` and `q̂` are the mean and second moment of the return after taking `a`
/// in `s` at `t`; both are checked against enumerated segments.
pub fn action_value_oracle(dp: ExactDp) -> Check {
    timed("action-value enumeration", || {
        let mut cells = 0;
        for f in build_micro_suite() {
            let mdp = &f.mdp;
            for (k, pi) in f.targets.iter().enumerate() {
                let tables = component_tables(dp, mdp, pi).map_err(err)?;
                for t in 0..mdp.horizon() {
                    for s in 0..mdp.num_states() {
                        for a in 0..mdp.num_actions() {
                            let forced = splice(pi, t, s, &one_hot(mdp.num_actions(), a));
                            let segments =
                                enumerate_from(mdp, &forced, t, s, DEFAULT_ENUMERATION_CAP)
                                    .map_err(err)?;
                            let (mean, var) = weighted_moments(&segments, |tr| tr.total_return());
                            let (q, q_hat) = (tables.q.get(t, s, a), tables.q_hat.get(t, s, a));
                            if !close(q, mean, EXACT_TOL)
                                || !close(q_hat, var + mean * mean, EXACT_TOL)
                            {
                                return Err(format!(
                                    "{} target {k} at (t={t}, s={s}, a={a}): q {q} vs {mean}, q_hat {q_hat} vs {}",
                                    f.name,
                                    var + mean * mean
                                ));
                            }
                            cells += 1;
                        }
                    }
                }
            }
        }
        Ok(format!("{cells} cells match"))
    })
}

/// The enumeration-weighted mean of the PDIS estimate under the tailored
/// behavior equals each target's value.
pub fn unbiasedness(dp: ExactDp) -> Check {
    timed("unbiasedness", || {
        let mut worst: f64 = 0.0;
        for f in build_micro_suite() {
            let tables = all_tables(dp, &f.mdp, &f.targets)?;
            let mu = mu_hat_rl(&f.targets, &tables).map_err(err)?;
            let entries = enumerate_trajectories(&f.mdp, &mu.policy).map_err(err)?;
            for (k, pi) in f.targets.iter().enumerate() {
                let (mean, _) =
                    try_weighted_moments(&entries, |tr| pdis_return(tr, pi, &mu.policy))
                        .map_err(err)?;
                let gap = (mean - tables[k].performance).abs();
                worst = worst.max(gap);
                if gap > EXACT_TOL {
                    return Err(format!(
                        "{} target {k}: mean {mean} vs value {}",
                        f.name, tables[k].performance
                    ));
                }
            }
        }
        Ok(format!("max |E[estimate] - J| = {worst:.2e}"))
    })
}

/// A random behavior that covers every target action (so every PDIS
/// variance is finite), with some zeros elsewhere.
fn covering_behavior(targets: &PolicySet, rng: &mut ChaCha8Rng) -> Policy {
    let (h, ns, na) = targets.get(0).table().dims();
    let noise = random_policy(h, ns, na, 0.5, rng).expect("valid random policy");
    Policy::from_rows(h, ns, na, |t, s| {
        let row: Vec<f64> = (0..na)
            .map(|a| {
                let needed = targets.iter().any(|p| p.prob(t, s, a) > 0.0);
                noise.prob(t, s, a)
                    + if needed {
                        0.05 + rng.gen::<f64>() * 0.2
                    } else {
                        0.0
                    }
            })
            .collect();
        let total: f64 = row.iter().sum();
        row.iter().map(|x| x / total).collect()
    })
    .expect("normalized rows")
}

fn compare_variances(
    dp: ExactDp,
    mdp: &TabularMdp,
    pi: &Policy,
    mu: &Policy,
    label: &str,
) -> Result<(), String> {
    let var = dp.pdis_variance(mdp, pi, mu).map_err(err)?;
    for t in 0..mdp.horizon() {
        for s in 0..mdp.num_states() {
            let segments = enumerate_from(mdp, mu, t, s, DEFAULT_ENUMERATION_CAP).map_err(err)?;
            let (_, v) =
                try_weighted_moments(&segments, |tr| pdis_return(tr, pi, mu)).map_err(err)?;
            if !close(var.get(t, s), v, EXACT_TOL) {
                return Err(format!(
                    "{label} at (t={t}, s={s}): recursion {} vs enumeration {v}",
                    var.get(t, s)
                ));
            }
        }
    }
    let tables = component_tables(dp, mdp, pi).map_err(err)?;
    let entries = enumerate_trajectories(mdp, mu).map_err(err)?;
    let (_, full) = try_weighted_moments(&entries, |tr| pdis_return(tr, pi, mu)).map_err(err)?;
    let total = total_variance(mdp, &var, &tables.v);
    if !close(total, full, EXACT_TOL) {
        return Err(format!(
            "{label}: total variance {total} vs enumeration {full}"
        ));
    }
    Ok(())
}

/// Conditional PDIS variances from the backward recursion, and on-policy
/// variances from `Σ π q̂ − v²`, against enumeration.
pub fn variance_oracle(dp: ExactDp, pairs_per_fixture: usize, seed: u64) -> Check {
    timed("variance recursion", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = 0;
        for f in build_micro_suite() {
            let (h, ns, na) = f.targets.get(0).table().dims();
            for i in 0..pairs_per_fixture {
                let pi = if i % 2 == 0 {
                    f.targets.get(i / 2 % f.targets.len()).clone()
                } else {
                    random_policy(h, ns, na, 0.3, &mut rng).map_err(err)?
                };
                let single = PolicySet::new(vec![pi.clone()]).map_err(err)?;
                let mu = covering_behavior(&single, &mut rng);
                compare_variances(dp, &f.mdp, &pi, &mu, &format!("{} pair {i}", f.name))?;
                pairs += 1;
            }
            for (k, pi) in f.targets.iter().enumerate() {
                let tables = component_tables(dp, &f.mdp, pi).map_err(err)?;
                let on = dp.onpolicy_variance(pi, &tables).map_err(err)?;
                for t in 0..h {
                    for s in 0..ns {
                        let segments = enumerate_from(&f.mdp, pi, t, s, DEFAULT_ENUMERATION_CAP)
                            .map_err(err)?;
                        let (_, v) = weighted_moments(&segments, |tr| tr.total_return());
                        if !close(on.get(t, s), v, EXACT_TOL) {
                            return Err(format!(
                                "{} target {k} on-policy at (t={t}, s={s}): {} vs enumeration {v}",
                                f.name,
                                on.get(t, s)
                            ));
                        }
                    }
                }
            }
        }
        Ok(format!("{pairs} (target, behavior) pairs match"))
    })
}

/// Random instance with 2–3 states, 2–3 actions and horizon 2–4.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    k: usize,
    zero_fraction: f64,
) -> mpe_core::Result<(TabularMdp, PolicySet)> {
    let ns = rng.gen_range(2..=3);
    let na = rng.gen_range(2..=3);
    let horizon = rng.gen_range(2..=4);
    let mdp = random_mdp(ns, na, horizon, rng)?;
    let targets = (0..k)
        .map(|_| random_policy(horizon, ns, na, zero_fraction, rng))
        .collect::<mpe_core::Result<Vec<_>>>()?;
    Ok((mdp, PolicySet::new(targets)?))
}

/// The Bellman form of `q̂` against its definition
/// `q² + ν + Σ p Var_π(G | S_{t+1})`, with the on-policy variance enumerated.
pub fn q_hat_identity(dp: ExactDp, instances: usize, seed: u64) -> Check {
    timed("q_hat identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let (mdp, targets) = random_instance(&mut rng, 1, 0.2).map_err(err)?;
            let pi = targets.get(0);
            let tables = component_tables(dp, &mdp, pi).map_err(err)?;
            let mut on = StateTable::zeros(mdp.horizon(), mdp.num_states());
            for t in 0..mdp.horizon() {
                for s in 0..mdp.num_states() {
                    let segments =
                        enumerate_from(&mdp, pi, t, s, DEFAULT_ENUMERATION_CAP).map_err(err)?;
                    on.set(t, s, weighted_moments(&segments, |tr| tr.total_return()).1);
                }
            }
            let definition = dp.q_hat_by_definition(&mdp, &tables.q, &tables.nu, &on);
            let scale = tables.q_hat.max_abs().max(definition.max_abs()).max(1.0);
            let gap = tables.q_hat.max_abs_diff(&definition) / scale;
            worst = worst.max(gap);
            if gap > IDENTITY_TOL {
                return Err(format!(
                    "instance {i}: forms differ by {gap:.3e} (relative)"
                ));
            }
        }
        Ok(format!(
            "{instances} instances, max relative gap {worst:.2e}"
        ))
    })
}

/// Every point of the simplex grid with spacing `1/steps`.
pub fn simplex_grid(num_actions: usize, steps: usize) -> Vec<Vec<f64>> {
    let h = 1.0 / steps as f64;
    match num_actions {
        2 => (0..=steps)
            .map(|i| vec![i as f64 * h, (steps - i) as f64 * h])
            .collect(),
        3 => (0..=steps)
            .flat_map(|i| {
                (0..=steps - i)
                    .map(move |j| vec![i as f64 * h, j as f64 * h, (steps - i - j) as f64 * h])
            })
            .collect(),
        _ => Vec::new(),
    }
}

/// `Σ_k Var(G_k | S_t = s)` with `row` at `(t, s)` and each target afterward,
/// by enumeration.
fn summed_variance(
    mdp: &TabularMdp,
    targets: &PolicySet,
    t: usize,
    s: usize,
    row: &[f64],
) -> Result<f64, String> {
    let mut total = 0.0;
    for pi in targets.iter() {
        let behavior = splice(pi, t, s, row);
        let segments =
            enumerate_from(mdp, &behavior, t, s, DEFAULT_ENUMERATION_CAP).map_err(err)?;
        total += try_weighted_moments(&segments, |tr| pdis_return(tr, pi, &behavior))
            .map_err(err)?
            .1;
    }
    Ok(total)
}

fn optimality_on(dp: ExactDp, f: &Fixture) -> Result<usize, String> {
    let mdp = &f.mdp;
    let tables = all_tables(dp, mdp, &f.targets)?;
    let mu = mu_hat_rl(&f.targets, &tables).map_err(err)?;
    let grid = simplex_grid(mdp.num_actions(), GRID_STEPS);
    if grid.is_empty() {
        return Err(format!(
            "{}: grid search needs two or three actions",
            f.name
        ));
    }
    let mut searched = 0;
    for t in 0..mdp.horizon() {
        for s in 0..mdp.num_states() {
            let row = mu.policy.action_probs(t, s);
            // Closed form minus a μ-independent constant must equal the
            // enumerated summed variance.
            let offset: f64 = tables.iter().map(|v| v.v.get(t, s).powi(2)).sum();
            let closed = step_objective(&f.targets, &tables, t, s, row) - offset;
            let exact = summed_variance(mdp, &f.targets, t, s, row)?;
            if !close(closed, exact, IDENTITY_TOL) {
                return Err(format!(
                    "{} at (t={t}, s={s}): objective {closed} vs enumerated {exact}",
                    f.name
                ));
            }
            let best = closed + offset;
            for candidate in &grid {
                let value = step_objective(&f.targets, &tables, t, s, candidate);
                if value < best - OPTIMALITY_TOL {
                    return Err(format!(
                        "{} at (t={t}, s={s}): {candidate:?} reaches {value} below {best}",
                        f.name
                    ));
                }
            }
            searched += grid.len();
        }
    }
    Ok(searched)
}

/// Per-`(t, s)` simplex grid search never improves on the tailored behavior.
pub fn optimality(dp: ExactDp) -> Check {
    timed("optimality grid search", || {
        let mut searched = 0;
        for f in build_micro_suite() {
            searched += optimality_on(dp, &f)?;
        }
        let bandits = [
            (vec![vec![0.5, 0.5]], vec![1.0, 2.0]),
            (
                vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]],
                vec![-1.0, 0.5, 3.0],
            ),
        ];
        for (targets, payoff) in bandits {
            let instance = BanditInstance::new(targets, payoff).map_err(err)?;
            let best = instance.objective(&mu_star_bandit(&instance));
            for candidate in simplex_grid(instance.num_actions(), GRID_STEPS) {
                if instance.objective(&candidate) < best - OPTIMALITY_TOL {
                    return Err(format!(
                        "single-step instance: {candidate:?} beats the optimum"
                    ));
                }
            }
        }
        Ok(format!("{searched} grid points"))
    })
}

/// Targets mixed from a shared base with weight `epsilon` on per-target noise.
fn perturbed_targets(
    rng: &mut ChaCha8Rng,
    mdp: &TabularMdp,
    k: usize,
    epsilon: f64,
) -> mpe_core::Result<PolicySet> {
    let (h, ns, na) = (mdp.horizon(), mdp.num_states(), mdp.num_actions());
    let base = random_policy(h, ns, na, 0.0, rng)?;
    let policies = (0..k)
        .map(|_| {
            let noise = random_policy(h, ns, na, 0.0, rng)?;
            Policy::new(StateActionTable::from_fn(h, ns, na, |t, s, a| {
                (1.0 - epsilon) * base.prob(t, s, a) + epsilon * noise.prob(t, s, a)
            }))
        })
        .collect::<mpe_core::Result<Vec<_>>>()?;
    PolicySet::new(policies)
}

/// Wherever a condition checker says the tailored behavior wins, exact
/// variances agree.
pub fn condition_soundness(dp: ExactDp, instances: usize, seed: u64) -> Check {
    timed("condition soundness", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flagged = 0;
        let mut cells = 0;
        for i in 0..instances {
            let (mdp, _) = random_instance(&mut rng, 1, 0.0).map_err(err)?;
            let mdp = if i % 2 == 0 {
                mdp.with_rewards(|_, _, r| r.abs()).map_err(err)?
            } else {
                mdp
            };
            let k = 2 + i % 3;
            let epsilon = [0.0, 0.02, 0.1, 0.5][i % 4];
            let targets = perturbed_targets(&mut rng, &mdp, k, epsilon).map_err(err)?;
            let tables = all_tables(dp, &mdp, &targets)?;
            let mu = mu_hat_rl(&targets, &tables).map_err(err)?;
            let report =
                similarity_report_rl(&mdp, &targets, &tables, &mu.policy, &even_split(10 * k, k))
                    .map_err(err)?;
            for (j, pi) in targets.iter().enumerate() {
                let off = dp.pdis_variance(&mdp, pi, &mu.policy).map_err(err)?;
                let on = dp.onpolicy_variance(pi, &tables[j]).map_err(err)?;
                for t in 0..mdp.horizon() {
                    for s in 0..mdp.num_states() {
                        let idx = report.index(j, t, s);
                        cells += 1;
                        let (v_off, v_on) = (off.get(t, s), on.get(t, s));
                        if (report.variance_reduced[idx] || report.variance_reduced_downstream[idx])
                            && v_off > v_on + EXACT_TOL
                        {
                            return Err(format!(
                                "instance {i} target {j} (t={t}, s={s}): flagged but {v_off} > {v_on}"
                            ));
                        }
                        if report.same_budget_wins[idx]
                            && v_off * (1.0 / k as f64) > v_on + EXACT_TOL
                        {
                            return Err(format!(
                                "instance {i} target {j} (t={t}, s={s}): same-budget condition flagged but fails"
                            ));
                        }
                        flagged += usize::from(report.variance_reduced[idx]);
                    }
                }
            }
        }
        let mut bandit_flagged = 0;
        for i in 0..instances {
            let na = rng.gen_range(2..=3);
            let k = 1 + i % 4;
            let epsilon = [0.0, 0.05, 0.3, 1.0][i % 4];
            let base: Vec<f64> = (0..na).map(|_| rng.gen::<f64>() + 0.05).collect();
            let targets: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let row: Vec<f64> = base
                        .iter()
                        .map(|b| (1.0 - epsilon) * b + epsilon * rng.gen::<f64>())
                        .collect();
                    let total: f64 = row.iter().sum();
                    row.iter().map(|x| x / total).collect()
                })
                .collect();
            let payoff: Vec<f64> = (0..na).map(|_| rng.gen_range(-2.0..3.0)).collect();
            let instance = BanditInstance::new(targets, payoff).map_err(err)?;
            let split = even_split(12 * k, k);
            let report = similarity_report_bandit(&instance, &split).map_err(err)?;
            let mu = mu_star_bandit(&instance);
            for j in 0..k {
                let (off, on) = (
                    instance.offpolicy_variance(j, &mu),
                    instance.onpolicy_variance(j),
                );
                if report.variance_reduced[j] {
                    bandit_flagged += 1;
                    if off > on + EXACT_TOL {
                        return Err(format!(
                            "single-step instance {i} target {j}: flagged but {off} > {on}"
                        ));
                    }
                }
                let n: usize = split.iter().sum();
                if report.same_budget_wins[j] && off / n as f64 > on / split[j] as f64 + EXACT_TOL {
                    return Err(format!(
                        "single-step instance {i} target {j}: same-budget condition fails"
                    ));
                }
            }
        }
        Ok(format!(
            "{flagged}/{cells} multi-step cells and {bandit_flagged} single-step targets flagged, no counterexamples"
        ))
    })
}

/// Identical targets satisfy the condition everywhere, and the tailored
/// behavior reduces the variance at every `(t, s)`.
pub fn identical_policies(dp: ExactDp) -> Check {
    timed("identical targets", || {
        let grid = build_gridworld(&GridworldSpec::new(3)).map_err(err)?;
        let mut instances: Vec<(String, TabularMdp, PolicySet)> = Vec::new();
        for k in [1, 3, 10] {
            for seed in 0..3 {
                let targets =
                    build_policy_set(&grid, &PolicySetSpec::new(k, 0.0, seed)).map_err(err)?;
                instances.push((
                    format!("gridworld K={k} seed {seed}"),
                    grid.clone(),
                    targets,
                ));
            }
        }
        for f in build_micro_suite() {
            let copies = PolicySet::new(vec![f.targets.get(0).clone(); 4]).map_err(err)?;
            instances.push((format!("{} copies", f.name), f.mdp, copies));
        }
        for (name, mdp, targets) in &instances {
            let k = targets.len();
            let tables = all_tables(dp, mdp, targets)?;
            let mu = mu_hat_rl(targets, &tables).map_err(err)?;
            let report =
                similarity_report_rl(mdp, targets, &tables, &mu.policy, &even_split(10 * k, k))
                    .map_err(err)?;
            if !report.variance_reduced_everywhere() {
                return Err(format!("{name}: condition fails somewhere"));
            }
            for (j, pi) in targets.iter().enumerate() {
                let off = dp.pdis_variance(mdp, pi, &mu.policy).map_err(err)?;
                let on = dp.onpolicy_variance(pi, &tables[j]).map_err(err)?;
                for (i, (a, b)) in off.as_slice().iter().zip(on.as_slice()).enumerate() {
                    if *a > *b + EXACT_TOL {
                        return Err(format!("{name} target {j} cell {i}: {a} > {b}"));
                    }
                }
            }
        }
        Ok(format!("{} instances", instances.len()))
    })
}
