//! Seeded episode sampling.
//!
//! Every episode gets its own ChaCha8 stream derived from `(seed, episode index)`,
//! so a batch produces the same trajectories no matter how it is split across
//! workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mdp::{Policy, Step, TabularMdp, Trajectory};

/// Generator for episode `episode` of the batch seeded by `seed`.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

/// Mixes `salt` into `seed` (SplitMix64 finalizer). Used to give each
/// group, run or generator policy an independent seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        ^ salt
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws an index from `probs` by inverse CDF. Zero-probability entries are
/// never returned, even when rounding leaves the cumulative sum short of 1.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last_positive = i;
        if u < cumulative {
            return i;
        }
    }
    last_positive
}

/// Samples one full episode with actions drawn from `behavior`.
pub fn sample_episode(mdp: &TabularMdp, behavior: &Policy, seed: u64) -> Result<Trajectory> {
    behavior.check_dims(mdp)?;
    Ok(sample_episode_with(
        mdp,
        behavior,
        &mut ChaCha8Rng::seed_from_u64(seed),
    ))
}

/// Samples one full episode from the given generator. The caller is
/// responsible for `behavior` matching the MDP's dimensions.
pub fn sample_episode_with<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    behavior: &Policy,
    rng: &mut R,
) -> Trajectory {
    let mut steps = Vec::with_capacity(mdp.horizon());
    let mut state = sample_index(mdp.initial_dist(), rng);
    for t in 0..mdp.horizon() {
        let action = sample_index(behavior.action_probs(t, state), rng);
        let next = sample_index(mdp.next_state_probs(state, action), rng);
        steps.push(Step {
            t,
            state,
            action,
            reward: mdp.reward(state, action),
            next_state: Some(next),
        });
        state = next;
    }
    Trajectory { steps }
}

/// Episodes `first..first + count` of the batch seeded by `seed`.
pub fn sample_batch(
    mdp: &TabularMdp,
    behavior: &Policy,
    seed: u64,
    first: u64,
    count: usize,
) -> Result<Vec<Trajectory>> {
    behavior.check_dims(mdp)?;
    Ok((0..count as u64)
        .map(|i| sample_episode_with(mdp, behavior, &mut episode_rng(seed, first + i)))
        .collect())
}
