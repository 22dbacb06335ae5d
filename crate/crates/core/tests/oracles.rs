mod common;

use common::*;
use mpe_core::dp::{total_variance, ExactDp};
use mpe_core::enumerate::{enumerate_trajectories, weighted_moments};
use mpe_core::envs::{build_micro_suite, random_policy};
use mpe_core::{
    mu_hat_rl, pdis_return, value_tables, Policy, PolicySet, StateActionTable, TabularMdp,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check_action_values(mdp: &TabularMdp, pi: &Policy) {
    let tables = value_tables(mdp, pi).unwrap();
    for t in 0..mdp.horizon() {
        for s in 0..mdp.num_states() {
            for a in 0..mdp.num_actions() {
                let paths = paths_from(mdp, pi, t, s, Some(a));
                let (mean, _) = moments(&paths, plain_return);
                let second = second_moment(&paths, plain_return);
                assert!(
                    close(tables.q.get(t, s, a), mean, 1e-10),
                    "q at ({t},{s},{a})"
                );
                assert!(
                    close(tables.q_hat.get(t, s, a), second, 1e-10),
                    "q_hat at ({t},{s},{a})"
                );
            }
        }
    }
}

#[test]
fn action_values_match_path_sums() {
    for f in build_micro_suite() {
        for pi in f.targets.iter() {
            check_action_values(&f.mdp, pi);
        }
    }
    for seed in 0..30 {
        let (mdp, targets) = random_instance(seed, 2);
        for pi in targets.iter() {
            check_action_values(&mdp, pi);
        }
    }
}

#[test]
fn tailored_pdis_is_unbiased_on_micro_suite() {
    for f in build_micro_suite() {
        let values: Vec<_> = f
            .targets
            .iter()
            .map(|p| value_tables(&f.mdp, p).unwrap())
            .collect();
        let mu = mu_hat_rl(&f.targets, &values).unwrap();
        let paths = all_paths(&f.mdp, &mu.policy);
        for (k, pi) in f.targets.iter().enumerate() {
            let (mean, _) = moments(&paths, |steps| pdis_value(steps, 0, pi, &mu.policy));
            assert!(
                (mean - values[k].performance).abs() < 1e-10,
                "{} target {k}",
                f.name
            );
        }
    }
}

fn covering_behavior(targets: &PolicySet, rng: &mut ChaCha8Rng) -> Policy {
    let first = targets.get(0);
    let (h, ns, na) = first.table().dims();
    let noise = random_policy(h, ns, na, 0.5, rng).unwrap();
    let mixed = StateActionTable::from_fn(h, ns, na, |t, s, a| {
        let cover = targets.iter().any(|p| p.prob(t, s, a) > 0.0);
        noise.prob(t, s, a) + if cover { 0.1 } else { 0.0 }
    });
    Policy::from_rows(h, ns, na, |t, s| {
        let row = mixed.row(t, s);
        let total: f64 = row.iter().sum();
        row.iter().map(|x| x / total).collect()
    })
    .unwrap()
}

fn check_variance_tables(mdp: &TabularMdp, pi: &Policy, mu: &Policy) {
    let dp = ExactDp::default();
    let var = dp.pdis_variance(mdp, pi, mu).unwrap();
    for t in 0..mdp.horizon() {
        for s in 0..mdp.num_states() {
            let paths = paths_from(mdp, mu, t, s, None);
            let (_, v) = moments(&paths, |steps| pdis_value(steps, t, pi, mu));
            assert!(
                close(var.get(t, s), v, 1e-10),
                "variance at ({t},{s}): {} vs {v}",
                var.get(t, s)
            );
        }
    }
    let tables = value_tables(mdp, pi).unwrap();
    let (_, full) = moments(&all_paths(mdp, mu), |steps| pdis_value(steps, 0, pi, mu));
    assert!(close(total_variance(mdp, &var, &tables.v), full, 1e-10));

    let on = dp.onpolicy_variance(pi, &tables).unwrap();
    for t in 0..mdp.horizon() {
        for s in 0..mdp.num_states() {
            let (_, v) = moments(&paths_from(mdp, pi, t, s, None), plain_return);
            assert!(close(on.get(t, s), v, 1e-10));
        }
    }
}

#[test]
fn variance_tables_match_path_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for f in build_micro_suite() {
        let values: Vec<_> = f
            .targets
            .iter()
            .map(|p| value_tables(&f.mdp, p).unwrap())
            .collect();
        let mu = mu_hat_rl(&f.targets, &values).unwrap();
        for pi in f.targets.iter() {
            check_variance_tables(&f.mdp, pi, &mu.policy);
            for _ in 0..5 {
                let behavior = covering_behavior(&f.targets, &mut rng);
                check_variance_tables(&f.mdp, pi, &behavior);
            }
        }
    }
}

#[test]
fn library_enumeration_agrees_with_path_sums() {
    for f in build_micro_suite() {
        let values: Vec<_> = f
            .targets
            .iter()
            .map(|p| value_tables(&f.mdp, p).unwrap())
            .collect();
        let mu = mu_hat_rl(&f.targets, &values).unwrap();
        let entries = enumerate_trajectories(&f.mdp, &mu.policy).unwrap();
        let paths = all_paths(&f.mdp, &mu.policy);
        assert_eq!(entries.len(), paths.len(), "{}", f.name);
        let total: f64 = entries.iter().map(|e| e.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for pi in f.targets.iter() {
            let (m1, v1) =
                weighted_moments(&entries, |tr| pdis_return(tr, pi, &mu.policy).unwrap());
            let (m2, v2) = moments(&paths, |steps| pdis_value(steps, 0, pi, &mu.policy));
            assert!(close(m1, m2, 1e-12) && close(v1, v2, 1e-10));
        }
    }
}

#[test]
fn q_hat_forms_agree_on_random_instances() {
    let dp = ExactDp::default();
    for seed in 0..100 {
        let (mdp, targets) = random_instance(seed, 1);
        let pi = targets.get(0);
        let (q, v, _) = dp.q_v(&mdp, pi).unwrap();
        let nu = dp.nu(&mdp, &v);
        let bellman = dp.q_hat(&mdp, pi, &dp.r_hat(&mdp, &q));
        let mut on_next = mpe_core::StateTable::zeros(mdp.horizon(), mdp.num_states());
        for t in 0..mdp.horizon() {
            for s in 0..mdp.num_states() {
                let (_, var) = moments(&paths_from(&mdp, pi, t, s, None), plain_return);
                on_next.set(t, s, var);
            }
        }
        let definition = dp.q_hat_by_definition(&mdp, &q, &nu, &on_next);
        assert!(
            bellman.max_abs_diff(&definition) <= 1e-9 * bellman.max_abs().max(1.0),
            "seed {seed}"
        );
    }
}
