//! Step reward: success bonus, collision penalty, and a discomfort band
//! whose width is either fixed or grows with the pedestrian's estimated
//! deviation from clean avoidance behaviour.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    pub k_succ: f64,
    pub k_coll: f64,
    pub k_disc: f64,
    /// Fixed discomfort distance for the default reward.
    pub d_disc_const: f64,
    /// Deviation-dependent discomfort distance: slope * rho + intercept.
    pub slope: f64,
    pub intercept: f64,
}

impl Default for RewardParams {
    fn default() -> RewardParams {
        RewardParams {
            k_succ: 1.0,
            k_coll: -0.25,
            k_disc: 0.125,
            d_disc_const: 0.1,
            slope: 1.0,
            intercept: 0.2,
        }
    }
}

/// Strict step: 1 only for x > 0, so exact contact is not yet a collision
/// and exact arrival is not yet success.
fn heaviside(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Discomfort radius around a pedestrian with deviation rho.
pub fn discomfort_distance(rho: f64, p: &RewardParams) -> f64 {
    debug_assert!((0.0..=1.0).contains(&rho));
    p.slope * rho + p.intercept
}

fn reward_terms(d_g: f64, ped_terms: impl Iterator<Item = (f64, f64)>, p: &RewardParams) -> f64 {
    let mut r = p.k_succ * heaviside(-d_g);
    for (d_i, d_disc) in ped_terms {
        r += p.k_coll * heaviside(-d_i);
        r += p.k_disc * (d_i - d_disc).min(0.0);
    }
    r
}

/// Reward with the fixed discomfort distance. All distances are surface
/// distances; d_g is the robot's goal surface distance.
pub fn default_reward(d_g: f64, d_i: &[f64], p: &RewardParams) -> f64 {
    reward_terms(d_g, d_i.iter().map(|&d| (d, p.d_disc_const)), p)
}

/// Reward with the per-pedestrian discomfort distance slope*rho+intercept.
/// Everything else matches the default form.
pub fn modified_reward(d_g: f64, peds: &[(f64, f64)], p: &RewardParams) -> f64 {
    reward_terms(
        d_g,
        peds.iter().map(|&(d, rho)| (d, discomfort_distance(rho, p))),
        p,
    )
}
