use super::{HoiClass, LatentSample, Scope, SplitTag, Universe};
use crate::numerics;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SHOTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub sample: LatentSample,
    pub label: bool,
}

/// One binary few-shot task: 6 positive supports, 6 hard negatives, labelled queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub positive_class: HoiClass,
    pub positives: Vec<LatentSample>,
    /// Each negative carries its own class through `action_id`.
    pub negatives: Vec<LatentSample>,
    pub queries: Vec<Query>,
    pub split: SplitTag,
    pub scope: Scope,
}

impl Episode {
    pub fn is_positive(&self, s: &LatentSample) -> bool {
        s.class() == self.positive_class
    }

    /// Distinct negative classes, in first-appearance order.
    pub fn negative_classes(&self) -> Vec<HoiClass> {
        let mut out: Vec<HoiClass> = Vec::new();
        for n in &self.negatives {
            if !out.contains(&n.class()) {
                out.push(n.class());
            }
        }
        out
    }
}

fn weighted_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Samples a task whose positive class is admissible for `split`.
///
/// Training-scope episodes draw only seen classes; the `split` then only
/// labels the episode. The number of distinct negative classes follows
/// `neg_class_count_weights`, capped by the negatives the object offers.
pub fn sample_episode(u: &Universe, split: SplitTag, scope: Scope, rng: &mut ChaCha8Rng) -> Episode {
    let candidates = match scope {
        Scope::Train => u.training_classes(),
        Scope::Eval => u.admissible_classes(split),
    };
    let positive_class = *candidates
        .choose(rng)
        .expect("split must be admissible for this universe");
    let negative_actions: Vec<usize> = u
        .admissible_actions(positive_class.object, scope)
        .into_iter()
        .filter(|&a| a != positive_class.action)
        .collect();

    let wanted = weighted_index(&u.config.neg_class_count_weights, rng) + 1;
    let distinct = wanted.min(negative_actions.len()).min(SHOTS);
    let chosen: Vec<usize> = negative_actions.choose_multiple(rng, distinct).copied().collect();
    let mut assignment: Vec<usize> = chosen.clone();
    while assignment.len() < SHOTS {
        assignment.push(*chosen.choose(rng).expect("at least one negative action"));
    }
    assignment.shuffle(rng);

    let positives = (0..SHOTS).map(|_| u.sample(positive_class, rng)).collect();
    let negatives = assignment
        .iter()
        .map(|&a| u.sample(HoiClass { action: a, object: positive_class.object }, rng))
        .collect();

    let mut queries = Vec::new();
    for _ in 0..u.config.queries_per_label {
        queries.push(Query { sample: u.sample(positive_class, rng), label: true });
        let a = *chosen.choose(rng).expect("at least one negative action");
        let c = HoiClass { action: a, object: positive_class.object };
        queries.push(Query { sample: u.sample(c, rng), label: false });
    }
    queries.shuffle(rng);

    Episode { positive_class, positives, negatives, queries, split, scope }
}

/// Index of the support most cosine-similar to `class_dir`; ties go to the lowest index.
pub fn select_representative(positives: &[LatentSample], class_dir: &[f64]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, p) in positives.iter().enumerate() {
        let sim = numerics::cosine_sim(&p.embedding, class_dir).unwrap_or(f64::NEG_INFINITY);
        if sim > best_sim {
            best = i;
            best_sim = sim;
        }
    }
    best
}
