//! Synthetic human-object interaction universe.
//!
//! A sample is a latent "image": an object direction, an action direction,
//! a scene background drawn from a shared low-dimensional scene subspace and
//! isotropic Gaussian noise, summed into one raw embedding. Episodes and all
//! augmentation operators are built on top of [`Universe`].

mod augment;
mod episode;

pub use augment::{
    augment_background_blend, augment_negative_support, augment_negative_support_with,
    augment_rotation, augment_rotation_at, augmentation_calls, NegSupportPolicy,
    NegativeAugmentation, MAX_ROTATION_DEG, MIN_ROTATION_DEG,
};
pub use episode::{sample_episode, select_representative, Episode, Query};

use crate::numerics::{self, Matrix};
use crate::rng::{derive_rng, stream};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

pub const UNIVERSE_FORMAT: &str = "hoilab-universe";
pub const UNIVERSE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid universe config: {0}")]
    InvalidConfig(String),
    #[error("split {0} has no admissible positive class")]
    EmptySplit(SplitTag),
    #[error("requested class object {requested} does not match representative object {rep}")]
    ObjectMismatch { requested: usize, rep: usize },
    #[error("unknown split tag `{0}`")]
    UnknownSplit(String),
    #[error("universe file: {0}")]
    Io(#[from] std::io::Error),
    #[error("universe file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, WorldError>;

/// Seen/unseen evaluation split of a positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitTag {
    #[serde(rename = "SOSA")]
    Sosa,
    #[serde(rename = "SOUA")]
    Soua,
    #[serde(rename = "UOSA")]
    Uosa,
    #[serde(rename = "UOUA")]
    Uoua,
}

impl SplitTag {
    pub const ALL: [SplitTag; 4] = [SplitTag::Sosa, SplitTag::Soua, SplitTag::Uosa, SplitTag::Uoua];

    pub fn object_seen(self) -> bool {
        matches!(self, SplitTag::Sosa | SplitTag::Soua)
    }

    pub fn action_seen(self) -> bool {
        matches!(self, SplitTag::Sosa | SplitTag::Uosa)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Sosa => "SOSA",
            SplitTag::Soua => "SOUA",
            SplitTag::Uosa => "UOSA",
            SplitTag::Uoua => "UOUA",
        }
    }

    pub fn index(self) -> usize {
        match self {
            SplitTag::Sosa => 0,
            SplitTag::Soua => 1,
            SplitTag::Uosa => 2,
            SplitTag::Uoua => 3,
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SOSA" => Ok(SplitTag::Sosa),
            "SOUA" => Ok(SplitTag::Soua),
            "UOSA" => Ok(SplitTag::Uosa),
            "UOUA" => Ok(SplitTag::Uoua),
            _ => Err(WorldError::UnknownSplit(s.to_string())),
        }
    }
}

/// Which actions an episode may draw from.
///
/// Training episodes only ever touch seen objects and seen actions,
/// including every augmented sample derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    Train,
    Eval,
}

/// An (action, object) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HoiClass {
    pub action: usize,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UniverseConfig {
    pub n_objects: usize,
    /// Size of the global action vocabulary shared by all objects.
    pub n_actions: usize,
    pub actions_per_object: usize,
    pub unseen_objects: usize,
    pub unseen_actions: usize,
    pub d_raw: usize,
    /// Dimension of the scene subspace that all backgrounds live in.
    pub d_background: usize,
    pub backgrounds_per_class: usize,
    pub object_weight: f64,
    pub action_weight: f64,
    pub background_weight: f64,
    /// Share of each pooled background explained by its class scene center.
    pub background_coherence: f64,
    /// Probability that a sample takes its background from another class of the same object.
    pub background_overlap: f64,
    pub noise_sigma: f64,
    pub flip_rate_rotation: f64,
    pub shift_rate_blend: f64,
    /// Angle the action component turns by under a 90° image rotation.
    pub rotation_action_angle_deg: f64,
    /// Augmented embeddings stay within `similarity_radius · ‖input‖` of the input.
    pub similarity_radius: f64,
    /// Sampler weights for 1, 2, ... distinct negative classes per episode.
    pub neg_class_count_weights: Vec<f64>,
    pub queries_per_label: usize,
    pub required_splits: Vec<SplitTag>,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            n_objects: 12,
            n_actions: 12,
            actions_per_object: 6,
            unseen_objects: 4,
            unseen_actions: 4,
            d_raw: 32,
            d_background: 8,
            backgrounds_per_class: 1000,
            object_weight: 1.0,
            action_weight: 0.5,
            background_weight: 4.0,
            background_coherence: 0.1,
            background_overlap: 0.3,
            noise_sigma: 0.09,
            flip_rate_rotation: 0.125,
            shift_rate_blend: 0.725,
            rotation_action_angle_deg: 40.0,
            similarity_radius: 1.0,
            neg_class_count_weights: vec![0.1, 0.25, 0.3, 0.2, 0.15],
            queries_per_label: 1,
            required_splits: SplitTag::ALL.to_vec(),
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(WorldError::InvalidConfig(m.to_string()));
        if self.n_objects < 2 {
            return bad("n_objects must be at least 2");
        }
        if self.actions_per_object < 2 {
            return bad("actions_per_object must be at least 2");
        }
        if self.actions_per_object > self.n_actions {
            return bad("actions_per_object exceeds n_actions");
        }
        if self.d_raw < 4 {
            return bad("d_raw must be at least 4");
        }
        if self.d_background == 0 || self.d_background > self.d_raw {
            return bad("d_background must be in 1..=d_raw");
        }
        if self.backgrounds_per_class == 0 {
            return bad("backgrounds_per_class must be positive");
        }
        if self.unseen_objects >= self.n_objects {
            return bad("at least one object must be seen");
        }
        if self.unseen_actions >= self.n_actions {
            return bad("at least one action must be seen");
        }
        for (name, p) in [
            ("flip_rate_rotation", self.flip_rate_rotation),
            ("shift_rate_blend", self.shift_rate_blend),
            ("background_overlap", self.background_overlap),
            ("background_coherence", self.background_coherence),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(WorldError::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.noise_sigma < 0.0 || self.similarity_radius <= 0.0 {
            return bad("noise_sigma must be non-negative and similarity_radius positive");
        }
        if self.neg_class_count_weights.is_empty()
            || self.neg_class_count_weights.iter().any(|w| *w < 0.0 || !w.is_finite())
            || self.neg_class_count_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("neg_class_count_weights must be non-negative with positive sum");
        }
        if self.queries_per_label == 0 {
            return bad("queries_per_label must be positive");
        }
        for split in &self.required_splits {
            if !split.object_seen() && self.unseen_objects == 0 {
                return Err(WorldError::InvalidConfig(format!(
                    "split {split} requires unseen objects but unseen_objects = 0"
                )));
            }
            if !split.action_seen() && self.unseen_actions == 0 {
                return Err(WorldError::InvalidConfig(format!(
                    "split {split} requires unseen actions but unseen_actions = 0"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Universe {
    pub config: UniverseConfig,
    pub seed: u64,
    /// `d_raw × n_objects`, unit columns.
    pub object_dirs: Matrix,
    /// `d_raw × n_actions`, unit columns.
    pub action_dirs: Matrix,
    /// `d_raw × d_background` orthonormal basis of the scene subspace.
    pub background_basis: Matrix,
    /// Valid actions of each object, ascending.
    pub object_actions: Vec<Vec<usize>>,
    /// `background_pool[o][slot]` holds the pool of the class `(object_actions[o][slot], o)`.
    pub background_pool: Vec<Vec<Vec<Vec<f64>>>>,
    pub object_seen: Vec<bool>,
    pub action_seen: Vec<bool>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        if let Ok(u) = numerics::normalize(&v) {
            return u;
        }
    }
}

/// Builds a deterministic universe for `seed`.
pub fn generate_universe(config: &UniverseConfig, seed: u64) -> Result<Universe> {
    config.validate()?;
    let mut rng = derive_rng(seed, stream::UNIVERSE, 0, 0);
    let d = config.d_raw;

    let objects: Vec<Vec<f64>> = (0..config.n_objects).map(|_| unit_vec(&mut rng, d)).collect();
    let actions: Vec<Vec<f64>> = (0..config.n_actions).map(|_| unit_vec(&mut rng, d)).collect();
    let object_dirs = Matrix::from_columns(&objects).expect("consistent columns");
    let action_dirs = Matrix::from_columns(&actions).expect("consistent columns");

    // scene subspace: Gram-Schmidt on random Gaussian columns
    let mut bg_cols: Vec<Vec<f64>> = Vec::with_capacity(config.d_background);
    while bg_cols.len() < config.d_background {
        let mut v = gaussian_vec(&mut rng, d);
        for c in &bg_cols {
            let p = numerics::dot(c, &v);
            numerics::axpy(&mut v, -p, c);
        }
        if let Ok(u) = numerics::normalize(&v) {
            bg_cols.push(u);
        }
    }
    let background_basis = Matrix::from_columns(&bg_cols).expect("consistent columns");

    for attempt in 0..200 {
        let mut object_seen = vec![true; config.n_objects];
        for i in sample_indices(&mut rng, config.n_objects, config.unseen_objects) {
            object_seen[i] = false;
        }
        let mut action_seen = vec![true; config.n_actions];
        for i in sample_indices(&mut rng, config.n_actions, config.unseen_actions) {
            action_seen[i] = false;
        }
        let object_actions: Vec<Vec<usize>> = (0..config.n_objects)
            .map(|_| {
                let mut a = sample_indices(&mut rng, config.n_actions, config.actions_per_object)
                    .into_vec();
                a.sort_unstable();
                a
            })
            .collect();

        let mut candidate = Universe {
            config: config.clone(),
            seed,
            object_dirs: object_dirs.clone(),
            action_dirs: action_dirs.clone(),
            background_basis: background_basis.clone(),
            object_actions,
            background_pool: Vec::new(),
            object_seen,
            action_seen,
        };
        let splits_ok = config
            .required_splits
            .iter()
            .all(|&s| !candidate.admissible_classes(s).is_empty());
        if !splits_ok || candidate.training_classes().is_empty() {
            if attempt == 199 {
                let missing = config
                    .required_splits
                    .iter()
                    .copied()
                    .find(|&s| candidate.admissible_classes(s).is_empty());
                return Err(match missing {
                    Some(s) => WorldError::EmptySplit(s),
                    None => WorldError::InvalidConfig("no trainable positive class".into()),
                });
            }
            continue;
        }
        candidate.background_pool = build_background_pools(&candidate, &mut rng);
        return Ok(candidate);
    }
    unreachable!("loop returns on its final attempt")
}

fn build_background_pools(u: &Universe, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<Vec<f64>>>> {
    let cfg = &u.config;
    let kappa = cfg.background_coherence;
    let spread = (1.0 - kappa * kappa).max(0.0).sqrt();
    u.object_actions
        .iter()
        .map(|acts| {
            acts.iter()
                .map(|_| {
                    let center = unit_vec(rng, cfg.d_background);
                    (0..cfg.backgrounds_per_class)
                        .map(|_| {
                            let eps = unit_vec(rng, cfg.d_background);
                            let coords: Vec<f64> = center
                                .iter()
                                .zip(&eps)
                                .map(|(c, e)| kappa * c + spread * e)
                                .collect();
                            let coords = numerics::normalize(&coords).unwrap_or(center.clone());
                            u.background_basis.matvec(&coords).expect("basis dims")
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

impl Universe {
    pub fn n_classes(&self) -> usize {
        self.object_actions.iter().map(Vec::len).sum()
    }

    pub fn object_dir(&self, o: usize) -> Vec<f64> {
        self.object_dirs.column(o)
    }

    pub fn action_dir(&self, a: usize) -> Vec<f64> {
        self.action_dirs.column(a)
    }

    pub fn is_valid_class(&self, c: HoiClass) -> bool {
        self.object_actions.get(c.object).is_some_and(|a| a.contains(&c.action))
    }

    /// Actions of `object` usable under `scope`.
    pub fn admissible_actions(&self, object: usize, scope: Scope) -> Vec<usize> {
        self.object_actions[object]
            .iter()
            .copied()
            .filter(|&a| scope == Scope::Eval || self.action_seen[a])
            .collect()
    }

    /// Positive classes whose object/action seen flags match `split`.
    pub fn admissible_classes(&self, split: SplitTag) -> Vec<HoiClass> {
        let mut out = Vec::new();
        for (o, acts) in self.object_actions.iter().enumerate() {
            if self.object_seen[o] != split.object_seen() || acts.len() < 2 {
                continue;
            }
            for &a in acts {
                if self.action_seen[a] == split.action_seen() {
                    out.push(HoiClass { action: a, object: o });
                }
            }
        }
        out
    }

    /// Seen-object seen-action classes whose object has at least one other seen action.
    pub fn training_classes(&self) -> Vec<HoiClass> {
        let mut out = Vec::new();
        for (o, _) in self.object_actions.iter().enumerate() {
            if !self.object_seen[o] {
                continue;
            }
            let acts = self.admissible_actions(o, Scope::Train);
            if acts.len() < 2 {
                continue;
            }
            out.extend(acts.into_iter().map(|a| HoiClass { action: a, object: o }));
        }
        out
    }

    /// Ideal class direction `w_o·object + w_a·action`; stands in for a text embedding.
    pub fn class_direction(&self, c: HoiClass) -> Vec<f64> {
        let mut v = numerics::scale(&self.object_dir(c.object), self.config.object_weight);
        numerics::axpy(&mut v, self.config.action_weight, &self.action_dir(c.action));
        v
    }

    fn class_slot(&self, c: HoiClass) -> usize {
        self.object_actions[c.object]
            .iter()
            .position(|&a| a == c.action)
            .expect("class must be valid for its object")
    }

    /// Draws a background for a sample of class `c`, occasionally from a sibling class.
    pub fn draw_background(&self, c: HoiClass, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let acts = &self.object_actions[c.object];
        let own = self.class_slot(c);
        let slot = if acts.len() > 1 && rng.random::<f64>() < self.config.background_overlap {
            let other = rng.random_range(0..acts.len() - 1);
            if other >= own {
                other + 1
            } else {
                other
            }
        } else {
            own
        };
        let pool = &self.background_pool[c.object][slot];
        pool[rng.random_range(0..pool.len())].clone()
    }

    /// Fresh sample of class `c`.
    pub fn sample(&self, c: HoiClass, rng: &mut ChaCha8Rng) -> LatentSample {
        let background = self.draw_background(c, rng);
        let rng_seed = rng.random::<u64>();
        self.compose(c.object, c.action, self.action_dir(c.action), background, rng_seed)
    }

    pub(crate) fn compose(
        &self,
        object_id: usize,
        action_id: usize,
        action_vector: Vec<f64>,
        background: Vec<f64>,
        rng_seed: u64,
    ) -> LatentSample {
        let mut s = LatentSample {
            object_id,
            action_id,
            action_vector,
            background,
            embedding: Vec::new(),
            rng_seed,
        };
        s.embedding = self.render(&s);
        s
    }

    /// Recomputes a sample's embedding from its latent factors and noise seed.
    pub fn render(&self, s: &LatentSample) -> Vec<f64> {
        let cfg = &self.config;
        let mut e = numerics::scale(&self.object_dir(s.object_id), cfg.object_weight);
        numerics::axpy(&mut e, cfg.action_weight, &s.action_vector);
        numerics::axpy(&mut e, cfg.background_weight, &s.background);
        let mut noise_rng = derive_rng(s.rng_seed, stream::NOISE, 0, 0);
        for v in e.iter_mut() {
            *v += cfg.noise_sigma * noise_rng.sample::<f64, _>(StandardNormal);
        }
        e
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Versioned JSON document holding every direction, pool, mask and rate.
    pub fn to_text(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            format: &'static str,
            version: u32,
            universe: &'a Universe,
        }
        serde_json::to_string_pretty(&Doc {
            format: UNIVERSE_FORMAT,
            version: UNIVERSE_VERSION,
            universe: self,
        })
        .expect("universe serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            format: String,
            version: u32,
            universe: Universe,
        }
        let doc: Doc = serde_json::from_str(text).map_err(|e| WorldError::Format(e.to_string()))?;
        if doc.format != UNIVERSE_FORMAT {
            return Err(WorldError::Format(format!("unexpected format `{}`", doc.format)));
        }
        if doc.version != UNIVERSE_VERSION {
            return Err(WorldError::Format(format!("unsupported version {}", doc.version)));
        }
        Ok(doc.universe)
    }
}

/// A synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub object_id: usize,
    pub action_id: usize,
    /// Realised action component; the action's unit direction unless perturbed by rotation.
    pub action_vector: Vec<f64>,
    pub background: Vec<f64>,
    pub embedding: Vec<f64>,
    /// Seeds the additive noise.
    pub rng_seed: u64,
}

impl LatentSample {
    pub fn class(&self) -> HoiClass {
        HoiClass { action: self.action_id, object: self.object_id }
    }
}
