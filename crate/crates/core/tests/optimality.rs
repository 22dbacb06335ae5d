mod common;

use common::*;
use mpe_core::behavior::step_objective;
use mpe_core::envs::build_micro_suite;
use mpe_core::{
    mu_hat_rl, mu_star_bandit, value_tables, BanditInstance, Policy, PolicySet, StateActionTable,
    TabularMdp, ValueTables,
};

const STEPS: usize = 1000;

/// Every point of the simplex grid with spacing `1/STEPS`.
fn simplex_grid(num_actions: usize) -> Vec<Vec<f64>> {
    let h = 1.0 / STEPS as f64;
    match num_actions {
        2 => (0..=STEPS)
            .map(|i| vec![i as f64 * h, (STEPS - i) as f64 * h])
            .collect(),
        3 => (0..=STEPS)
            .flat_map(|i| {
                (0..=STEPS - i)
                    .map(move |j| vec![i as f64 * h, j as f64 * h, (STEPS - i - j) as f64 * h])
            })
            .collect(),
        _ => panic!("grid search supports two or three actions"),
    }
}

/// `μ` at `(t, s)` and the targets everywhere else.
fn splice(pi: &Policy, t: usize, s: usize, mu: &[f64]) -> Policy {
    let (h, ns, na) = pi.table().dims();
    Policy::new(StateActionTable::from_fn(h, ns, na, |tt, ss, a| {
        if (tt, ss) == (t, s) {
            mu[a]
        } else {
            pi.prob(tt, ss, a)
        }
    }))
    .unwrap()
}

/// `Σ_k Var(G_k | S_t = s)` with `μ` at step `t` and each target afterward,
/// from explicit path sums.
fn summed_variance(mdp: &TabularMdp, targets: &PolicySet, t: usize, s: usize, mu: &[f64]) -> f64 {
    targets
        .iter()
        .map(|pi| {
            let behavior = splice(pi, t, s, mu);
            let (_, var) = moments(&paths_from(mdp, &behavior, t, s, None), |steps| {
                pdis_value(steps, t, pi, &behavior)
            });
            var
        })
        .sum()
}

fn check_instance(name: &str, mdp: &TabularMdp, targets: &PolicySet) {
    let values: Vec<ValueTables> = targets
        .iter()
        .map(|p| value_tables(mdp, p).unwrap())
        .collect();
    let mu_hat = mu_hat_rl(targets, &values).unwrap();
    let grid = simplex_grid(mdp.num_actions());
    for t in 0..mdp.horizon() {
        for s in 0..mdp.num_states() {
            let best_row = mu_hat.policy.action_probs(t, s);
            // The closed-form objective differs from the summed variance by
            // Σ_k v_k², which does not depend on μ; pin that down first.
            let offset: f64 = values.iter().map(|v| v.v.get(t, s).powi(2)).sum();
            let exact = summed_variance(mdp, targets, t, s, best_row);
            let closed = step_objective(targets, &values, t, s, best_row) - offset;
            assert!(
                close(exact, closed, 1e-9),
                "{name}: objective mismatch at ({t},{s})"
            );
            let probe = &grid[grid.len() / 3];
            let exact_probe = summed_variance(mdp, targets, t, s, probe);
            let closed_probe = step_objective(targets, &values, t, s, probe) - offset;
            assert!(
                closed_probe.is_infinite() || close(exact_probe, closed_probe, 1e-9),
                "{name}: objective mismatch off the optimum at ({t},{s})"
            );

            let best = step_objective(targets, &values, t, s, best_row);
            let grid_min = grid
                .iter()
                .map(|mu| step_objective(targets, &values, t, s, mu))
                .fold(f64::INFINITY, f64::min);
            assert!(
                grid_min >= best - 1e-6,
                "{name}: grid beats the tailored policy at ({t},{s}) by {}",
                best - grid_min
            );
        }
    }
}

#[test]
fn tailored_policy_minimizes_summed_variance_on_micro_suite() {
    for f in build_micro_suite() {
        check_instance(f.name, &f.mdp, &f.targets);
    }
}

#[test]
fn tailored_policy_minimizes_summed_variance_on_random_instances() {
    for seed in 0..12 {
        let (mdp, targets) = random_instance(seed, 1 + seed as usize % 3);
        check_instance(&format!("random {seed}"), &mdp, &targets);
    }
}

#[test]
fn bandit_optimum_beats_grid() {
    let cases = [
        (vec![vec![0.5, 0.5]], vec![1.0, 2.0]),
        (vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![2.0, 2.0]),
        (
            vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]],
            vec![-1.0, 0.5, 3.0],
        ),
        (
            vec![vec![0.1, 0.9], vec![0.7, 0.3], vec![0.4, 0.6]],
            vec![4.0, -2.5],
        ),
    ];
    for (targets, payoff) in cases {
        let instance = BanditInstance::new(targets, payoff).unwrap();
        let best = instance.objective(&mu_star_bandit(&instance));
        let grid_min = simplex_grid(instance.num_actions())
            .iter()
            .map(|mu| instance.objective(mu))
            .fold(f64::INFINITY, f64::min);
        assert!(grid_min >= best - 1e-6);
    }
    let instance = BanditInstance::new(vec![vec![0.5, 0.5]], vec![1.0, 2.0]).unwrap();
    let grid = simplex_grid(2);
    let argmin = grid
        .iter()
        .min_by(|a, b| instance.objective(a).total_cmp(&instance.objective(b)))
        .unwrap();
    assert!((argmin[0] - 1.0 / 3.0).abs() <= 1e-3);
}
