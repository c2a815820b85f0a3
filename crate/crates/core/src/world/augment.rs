//! Label-uncertain augmentation operators.

use super::{HoiClass, LatentSample, Result, Scope, Universe, WorldError};
use crate::numerics;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

pub const MIN_ROTATION_DEG: f64 = 30.0;
pub const MAX_ROTATION_DEG: f64 = 90.0;

thread_local! {
    static CALLS: Cell<u64> = const { Cell::new(0) };
}

fn count_call() {
    CALLS.with(|c| c.set(c.get() + 1));
}

/// Number of augmentation operator calls made on the current thread.
pub fn augmentation_calls() -> u64 {
    CALLS.with(Cell::get)
}

/// Rotation with a uniformly drawn angle in `[30°, 90°]`.
pub fn augment_rotation(
    s: &LatentSample,
    u: &Universe,
    scope: Scope,
    rng: &mut ChaCha8Rng,
) -> LatentSample {
    let degrees = rng.random_range(MIN_ROTATION_DEG..=MAX_ROTATION_DEG);
    augment_rotation_at(s, u, scope, degrees, rng)
}

/// Rotation by a fixed angle.
///
/// With probability `flip_rate_rotation` the sample turns into the most
/// similar other action of its object. Otherwise the action component is
/// tilted away from its direction by an angle proportional to `degrees`,
/// keeping the label. The embedding never moves by more than
/// `similarity_radius · ‖input‖`.
pub fn augment_rotation_at(
    s: &LatentSample,
    u: &Universe,
    scope: Scope,
    degrees: f64,
    rng: &mut ChaCha8Rng,
) -> LatentSample {
    count_call();
    let cfg = &u.config;
    let flip = rng.random::<f64>() < cfg.flip_rate_rotation;
    let d = s.action_vector.len();
    let perturb: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

    let flip_target = if flip { nearest_other_action(u, s.object_id, s.action_id, scope) } else { None };
    let (action_id, target_vec) = match flip_target {
        Some(a) => (a, u.action_dir(a)),
        None => {
            let a = &s.action_vector;
            let a_norm = numerics::norm(a).max(f64::MIN_POSITIVE);
            let a_hat = numerics::scale(a, 1.0 / a_norm);
            let mut w = perturb;
            let p = numerics::dot(&w, &a_hat);
            numerics::axpy(&mut w, -p, &a_hat);
            let w = numerics::normalize(&w).unwrap_or_else(|_| a_hat.clone());
            let phi = (degrees / MAX_ROTATION_DEG) * cfg.rotation_action_angle_deg.to_radians();
            let mut v = numerics::scale(&a_hat, phi.cos() * a_norm);
            numerics::axpy(&mut v, phi.sin() * a_norm, &w);
            (s.action_id, v)
        }
    };

    // visual-similarity contract
    let delta = numerics::sub(&target_vec, &s.action_vector);
    let moved = cfg.action_weight * numerics::norm(&delta);
    let budget = cfg.similarity_radius * numerics::norm(&s.embedding);
    let t = if moved > budget && moved > 0.0 { budget / moved } else { 1.0 };
    let mut action_vector = s.action_vector.clone();
    numerics::axpy(&mut action_vector, t, &delta);

    u.compose(s.object_id, action_id, action_vector, s.background.clone(), s.rng_seed)
}

fn nearest_other_action(u: &Universe, object: usize, action: usize, scope: Scope) -> Option<usize> {
    let from = u.action_dir(action);
    let mut best: Option<(usize, f64)> = None;
    for a in u.admissible_actions(object, scope) {
        if a == action {
            continue;
        }
        let sim = numerics::dot(&from, &u.action_dir(a));
        if best.is_none_or(|(_, b)| sim > b) {
            best = Some((a, sim));
        }
    }
    best.map(|(a, _)| a)
}

/// Transplants the representative positive's background under a requested foreground.
///
/// With probability `shift_rate_blend` the generator drifts to a uniformly
/// chosen different action of the same object. The output keeps `q`'s noise
/// seed.
pub fn augment_background_blend(
    q: &LatentSample,
    rep: &LatentSample,
    requested: HoiClass,
    u: &Universe,
    scope: Scope,
    rng: &mut ChaCha8Rng,
) -> Result<LatentSample> {
    count_call();
    if requested.object != rep.object_id {
        return Err(WorldError::ObjectMismatch { requested: requested.object, rep: rep.object_id });
    }
    let shifted = rng.random::<f64>() < u.config.shift_rate_blend;
    let others: Vec<usize> = u
        .admissible_actions(requested.object, scope)
        .into_iter()
        .filter(|&a| a != requested.action)
        .collect();
    let action = match (shifted, others.choose(rng)) {
        (true, Some(&a)) => a,
        _ => requested.action,
    };
    Ok(u.compose(rep.object_id, action, u.action_dir(action), rep.background.clone(), q.rng_seed))
}

/// How a negative support set is augmented for the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegSupportPolicy {
    /// Leave every negative untouched.
    No,
    /// Augment every member of each repeated-class group.
    All,
    /// Augment exactly one randomly chosen member of each repeated-class group.
    One,
    /// Augment each member of a repeated-class group with probability 0.5.
    Random,
    /// Keep one random member of each repeated-class group and augment the rest.
    Ours,
}

impl NegSupportPolicy {
    pub const ALL: [NegSupportPolicy; 5] = [
        NegSupportPolicy::No,
        NegSupportPolicy::All,
        NegSupportPolicy::One,
        NegSupportPolicy::Random,
        NegSupportPolicy::Ours,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NegSupportPolicy::No => "no",
            NegSupportPolicy::All => "all",
            NegSupportPolicy::One => "one",
            NegSupportPolicy::Random => "random",
            NegSupportPolicy::Ours => "ours",
        }
    }
}

impl fmt::Display for NegSupportPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NegSupportPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        NegSupportPolicy::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown negative-support policy `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeAugmentation {
    pub samples: Vec<LatentSample>,
    pub augmented: Vec<bool>,
}

/// The default policy: within every repeated-class group one member passes
/// through and the rest get a 90° rotation.
pub fn augment_negative_support(
    negatives: &[LatentSample],
    u: &Universe,
    scope: Scope,
    rng: &mut ChaCha8Rng,
) -> Vec<LatentSample> {
    augment_negative_support_with(NegSupportPolicy::Ours, negatives, u, scope, rng).samples
}

pub fn augment_negative_support_with(
    policy: NegSupportPolicy,
    negatives: &[LatentSample],
    u: &Universe,
    scope: Scope,
    rng: &mut ChaCha8Rng,
) -> NegativeAugmentation {
    count_call();
    let mut groups: Vec<(HoiClass, Vec<usize>)> = Vec::new();
    for (i, s) in negatives.iter().enumerate() {
        match groups.iter_mut().find(|(c, _)| *c == s.class()) {
            Some((_, members)) => members.push(i),
            None => groups.push((s.class(), vec![i])),
        }
    }

    let mut augmented = vec![false; negatives.len()];
    for (_, members) in groups.iter().filter(|(_, m)| m.len() >= 2) {
        match policy {
            NegSupportPolicy::No => {}
            NegSupportPolicy::All => members.iter().for_each(|&i| augmented[i] = true),
            NegSupportPolicy::One => {
                augmented[members[rng.random_range(0..members.len())]] = true;
            }
            NegSupportPolicy::Random => {
                for &i in members {
                    augmented[i] = rng.random::<f64>() < 0.5;
                }
            }
            NegSupportPolicy::Ours => {
                let keep = members[rng.random_range(0..members.len())];
                members.iter().filter(|&&i| i != keep).for_each(|&i| augmented[i] = true);
            }
        }
    }

    let samples = negatives
        .iter()
        .zip(&augmented)
        .map(|(s, &aug)| {
            if aug {
                augment_rotation_at(s, u, scope, MAX_ROTATION_DEG, rng)
            } else {
                s.clone()
            }
        })
        .collect();
    NegativeAugmentation { samples, augmented }
}
