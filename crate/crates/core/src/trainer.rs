//! Mean-teacher episodic training.
//!
//! The student sees the positive supports, an augmented copy of the negative
//! supports, the labelled queries and the augmented queries. The teacher is an
//! EMA of the student; it sees the original supports and labels the augmented
//! queries with soft targets.

use crate::encoder::{self, EncoderError, EncoderParams, ForwardCache};
use crate::heads::{self, build_subspace, ClassTag, HeadError};
use crate::losses::{self, LossComponents, LossError, LossWeights, Logits, ScheduleConfig};
use crate::numerics;
use crate::rng::{derive_rng, stream};
use crate::world::{
    augment_background_blend, augment_negative_support_with, augment_rotation, select_representative, Episode,
    NegSupportPolicy, Scope, Universe, WorldError,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("episode batch is empty")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which label-uncertain augmentations the student receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPlan {
    pub query_rotation: bool,
    pub query_blend: bool,
    pub neg_support: NegSupportPolicy,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        Self { query_rotation: true, query_blend: true, neg_support: NegSupportPolicy::Ours }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_tasks: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    #[serde(flatten)]
    pub schedule: ScheduleConfig,
    /// Set per run by the harness.
    #[serde(skip)]
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    /// Encoder weights start uniform in `±init_scale/√fan_in`.
    pub init_scale: f64,
    /// Subspace dimension of the DSN head.
    pub k: usize,
    /// L2-normalise features before building subspaces.
    pub dsn_normalize: bool,
    #[serde(flatten)]
    pub augment: AugmentationPlan,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 5e-4,
            batch_tasks: 4,
            epochs: 5,
            ema_decay: 0.999,
            schedule: ScheduleConfig::default(),
            seed: 0,
            hidden_dims: vec![32],
            feature_dim: 16,
            init_scale: 1.0,
            k: 3,
            dsn_normalize: false,
            augment: AugmentationPlan::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.batch_tasks == 0 {
            return bad("batch_tasks must be >= 1");
        }
        if !(1..=5).contains(&self.k) {
            return bad("k must lie in 1..=5");
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be > 0");
        }
        if self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims
    }

    /// Copy with the schedule's iteration scale fixed to `total_iterations` when left at 0.
    pub fn resolved(&self, total_iterations: u64) -> Self {
        let mut c = self.clone();
        if c.schedule.n_scale <= 0.0 {
            c.schedule.n_scale = total_iterations.max(1) as f64;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: EncoderParams,
    pub decay: f64,
}

/// `θ_t ← decay·θ_t + (1 − decay)·θ_s`
pub fn ema_update(t: &TeacherState, student: &EncoderParams) -> TeacherState {
    assert_eq!(t.params.dims(), student.dims(), "teacher and student shapes differ");
    let s = student.flatten();
    let flat: Vec<f64> = t
        .params
        .flatten()
        .iter()
        .zip(&s)
        .map(|(a, b)| t.decay * a + (1.0 - t.decay) * b)
        .collect();
    TeacherState { params: t.params.with_flat(&flat), decay: t.decay }
}

/// Raw inputs of one training episode after augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEpisode {
    pub positives: Vec<Vec<f64>>,
    /// Original negatives, seen by the teacher.
    pub negatives: Vec<Vec<f64>>,
    pub student_negatives: Vec<Vec<f64>>,
    pub queries: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub aug_queries: Vec<Vec<f64>>,
}

/// Applies the augmentation plan to `ep` for batch slot `slot` of iteration `n`.
pub fn prepare_episode(
    u: &Universe,
    ep: &Episode,
    plan: &AugmentationPlan,
    seed: u64,
    n: u64,
    slot: u64,
) -> Result<PreparedEpisode> {
    let emb = |v: &[crate::world::LatentSample]| v.iter().map(|s| s.embedding.clone()).collect::<Vec<_>>();
    let scope = Scope::Train;

    let mut neg_rng = derive_rng(seed, stream::NEG_SUPPORT, n, slot);
    let neg = augment_negative_support_with(plan.neg_support, &ep.negatives, u, scope, &mut neg_rng);

    let mut aug_queries = Vec::new();
    if plan.query_rotation {
        let mut rng = derive_rng(seed, stream::QUERY_ROTATION, n, slot);
        aug_queries.push(augment_rotation(&ep.queries[0].sample, u, scope, &mut rng).embedding);
    }
    if plan.query_blend {
        let mut rng = derive_rng(seed, stream::QUERY_BLEND, n, slot);
        let neg_classes = ep.negative_classes();
        let neg_class = *neg_classes.choose(&mut rng).expect("episode has negatives");
        let source = &ep.queries[1 % ep.queries.len()].sample;
        let blended = if rng.random::<bool>() {
            // positive background under a negative foreground
            let rep = &ep.positives[select_representative(&ep.positives, &u.class_direction(ep.positive_class))];
            augment_background_blend(source, rep, neg_class, u, scope, &mut rng)?
        } else {
            let members: Vec<_> = ep.negatives.iter().filter(|s| s.class() == neg_class).cloned().collect();
            let rep = &members[select_representative(&members, &u.class_direction(neg_class))];
            augment_background_blend(source, rep, ep.positive_class, u, scope, &mut rng)?
        };
        aug_queries.push(blended.embedding);
    }

    Ok(PreparedEpisode {
        positives: emb(&ep.positives),
        negatives: emb(&ep.negatives),
        student_negatives: emb(&neg.samples),
        queries: ep.queries.iter().map(|q| q.sample.embedding.clone()).collect(),
        labels: ep.queries.iter().map(|q| q.label).collect(),
        aug_queries,
    })
}

fn encode_all(p: &EncoderParams, xs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<ForwardCache>)> {
    let mut feats = Vec::with_capacity(xs.len());
    let mut caches = Vec::with_capacity(xs.len());
    for x in xs {
        let (f, c) = encoder::forward(p, x)?;
        feats.push(f);
        caches.push(c);
    }
    Ok((feats, caches))
}

fn head_features(f: &[Vec<f64>], normalize: bool) -> Result<Vec<Vec<f64>>> {
    if normalize {
        Ok(f.iter().map(|v| numerics::normalize(v)).collect::<std::result::Result<_, _>>().map_err(HeadError::from)?)
    } else {
        Ok(f.to_vec())
    }
}

/// DSN logits of `queries` against subspaces of `positives` and `negatives`, all already encoded.
fn dsn_batch(
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    queries: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<Vec<Logits>> {
    let bp = build_subspace(&head_features(positives, cfg.dsn_normalize)?, cfg.k, ClassTag::Positive)?;
    let bn = build_subspace(&head_features(negatives, cfg.dsn_normalize)?, cfg.k, ClassTag::Negative)?;
    head_features(queries, cfg.dsn_normalize)?
        .iter()
        .map(|q| heads::dsn_logits(&bp, &bn, q).map(|(a, b)| [a, b]).map_err(TrainError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    pub probs: Vec<Logits>,
    pub mask: Vec<bool>,
}

/// Teacher distributions on the augmented queries, built from the original supports.
pub fn teacher_targets(teacher: &EncoderParams, prep: &PreparedEpisode, cfg: &TrainConfig) -> Result<TeacherTargets> {
    if prep.aug_queries.is_empty() {
        return Ok(TeacherTargets { probs: Vec::new(), mask: Vec::new() });
    }
    let (fp, _) = encode_all(teacher, &prep.positives)?;
    let (fnn, _) = encode_all(teacher, &prep.negatives)?;
    let (fa, _) = encode_all(teacher, &prep.aug_queries)?;
    let probs: Vec<Logits> = dsn_batch(&fp, &fnn, &fa, cfg)?.into_iter().map(losses::softmax).collect();
    let mask = losses::confidence_mask(&probs, cfg.schedule.conf_threshold);
    Ok(TeacherTargets { probs, mask })
}

#[derive(Debug, Clone)]
pub struct EpisodeObjective {
    pub loss: f64,
    pub components: LossComponents,
    /// Flat gradient w.r.t. the student parameters.
    pub grad: Vec<f64>,
    pub masked: usize,
}

/// Weighted per-episode loss and its gradient; teacher targets are held constant.
pub fn episode_objective(
    student: &EncoderParams,
    prep: &PreparedEpisode,
    targets: &TeacherTargets,
    w: &LossWeights,
    cfg: &TrainConfig,
) -> Result<EpisodeObjective> {
    let norm = cfg.dsn_normalize;
    let (fp, cp) = encode_all(student, &prep.positives)?;
    let (fnn, cn) = encode_all(student, &prep.student_negatives)?;
    let (fq, cq) = encode_all(student, &prep.queries)?;
    let (fa, ca) = encode_all(student, &prep.aug_queries)?;
    let (hp, hn, hq, ha) = (
        head_features(&fp, norm)?,
        head_features(&fnn, norm)?,
        head_features(&fq, norm)?,
        head_features(&fa, norm)?,
    );
    let bp = build_subspace(&hp, cfg.k, ClassTag::Positive)?;
    let bn = build_subspace(&hn, cfg.k, ClassTag::Negative)?;
    let mut acc_p = bp.grad_accumulator();
    let mut acc_n = bn.grad_accumulator();
    let d = student.output_dim();

    let logits = |qs: &[Vec<f64>]| -> Result<Vec<Logits>> {
        qs.iter().map(|q| Ok(heads::dsn_logits(&bp, &bn, q).map(|(a, b)| [a, b])?)).collect()
    };

    // logit_c = −residual_c, so residual upstream is −w·∂loss/∂logit_c
    let (ce, dce) = losses::ce_loss_grad(&logits(&hq)?, &prep.labels)?;
    let mut g_hq = vec![vec![0.0; d]; hq.len()];
    for (i, dl) in dce.iter().enumerate() {
        let a = bp.residual_backward(&hq[i], -w.ce * dl[0], &mut acc_p);
        let b = bn.residual_backward(&hq[i], -w.ce * dl[1], &mut acc_n);
        g_hq[i] = numerics::add(&a, &b);
    }

    let mut g_ha = vec![vec![0.0; d]; ha.len()];
    let masked = targets.mask.iter().filter(|&&m| m).count();
    let mut unsup = 0.0;
    if !ha.is_empty() {
        let (l, dun) = losses::soft_ce_loss_grad(
            &targets.probs,
            &logits(&ha)?,
            &targets.mask,
            cfg.schedule.renormalize_masked,
        );
        unsup = l;
        if w.unsup != 0.0 && masked > 0 {
            for (i, dl) in dun.iter().enumerate() {
                if targets.mask[i] {
                    let a = bp.residual_backward(&ha[i], -w.unsup * dl[0], &mut acc_p);
                    let b = bn.residual_backward(&ha[i], -w.unsup * dl[1], &mut acc_n);
                    g_ha[i] = numerics::add(&a, &b);
                }
            }
        }
    }

    let aux = heads::aux_loss(&bp, &bn);
    heads::aux_loss_backward(&bp, &bn, w.aux, &mut acc_p, &mut acc_n);
    let g_hp = bp.support_gradients(&acc_p);
    let g_hn = bn.support_gradients(&acc_n);

    let unhead = |f: &[Vec<f64>], g: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        if norm {
            f.iter().zip(&g).map(|(x, gx)| numerics::normalize_backward(x, gx)).collect()
        } else {
            g
        }
    };
    let mut g_fp = unhead(&fp, g_hp);
    let mut g_fn = unhead(&fnn, g_hn);
    let mut g_fq = unhead(&fq, g_hq);
    let g_fa = unhead(&fa, g_ha);

    let mut task: Vec<Vec<f64>> = fp.clone();
    task.extend(fnn.iter().cloned());
    task.extend(fq.iter().cloned());
    let mut task_labels = vec![0usize; fp.len()];
    task_labels.extend(std::iter::repeat_n(1usize, fnn.len()));
    task_labels.extend(prep.labels.iter().map(|&l| if l { 0 } else { 1 }));
    let cts_out = losses::contrastive_loss_grad(&task, &task_labels, cfg.schedule.tau, cfg.schedule.normalize_contrastive)?;
    if w.cts != 0.0 {
        let mut it = cts_out.grad.iter();
        for g in g_fp.iter_mut().chain(g_fn.iter_mut()).chain(g_fq.iter_mut()) {
            numerics::axpy(g, w.cts, it.next().expect("one gradient per task item"));
        }
    }

    let mut grad = vec![0.0; student.num_params()];
    for (caches, grads) in [(&cp, &g_fp), (&cn, &g_fn), (&cq, &g_fq), (&ca, &g_fa)] {
        for (c, g) in caches.iter().zip(grads) {
            encoder::backward_into(student, c, g, &mut grad)?;
        }
    }

    let components = LossComponents { ce, cts: cts_out.loss, aux, unsup };
    let loss = w.ce * ce + w.cts * cts_out.loss + w.aux * aux + w.unsup * unsup;
    Ok(EpisodeObjective { loss, components, grad, masked })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub alpha: f64,
    pub beta: f64,
    pub ce: f64,
    pub cts: f64,
    pub aux: f64,
    pub unsup: f64,
    pub total: f64,
    /// Fraction of augmented queries the teacher was confident on.
    pub mask_rate: f64,
    pub grad_norm: f64,
}

/// One optimisation step over a batch of training episodes.
///
/// `cfg` must already be [`TrainConfig::resolved`].
pub fn train_step(
    u: &Universe,
    student: &EncoderParams,
    teacher: &TeacherState,
    batch: &[Episode],
    n: u64,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, TeacherState, IterationMetrics)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let w = losses::loss_weights(n, &cfg.schedule);
    let per_episode: Vec<Result<(EpisodeObjective, usize)>> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, ep)| {
            let prep = prepare_episode(u, ep, &cfg.augment, cfg.seed, n, slot as u64)?;
            let targets = teacher_targets(&teacher.params, &prep, cfg)?;
            let obj = episode_objective(student, &prep, &targets, &w, cfg)?;
            Ok((obj, prep.aug_queries.len()))
        })
        .collect();

    let inv = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; student.num_params()];
    let mut c = LossComponents::default();
    let mut total = 0.0;
    let (mut masked, mut augmented) = (0usize, 0usize);
    for r in per_episode {
        let (obj, n_aug) = r?;
        numerics::axpy(&mut grad, inv, &obj.grad);
        c.ce += inv * obj.components.ce;
        c.cts += inv * obj.components.cts;
        c.aux += inv * obj.components.aux;
        c.unsup += inv * obj.components.unsup;
        total += inv * obj.loss;
        masked += obj.masked;
        augmented += n_aug;
    }

    let new_student = encoder::sgd_step(student, &grad, cfg.lr, cfg.weight_decay);
    let new_teacher = ema_update(teacher, &new_student);
    let metrics = IterationMetrics {
        iteration: n,
        alpha: w.alpha,
        beta: w.beta,
        ce: c.ce,
        cts: c.cts,
        aux: c.aux,
        unsup: c.unsup,
        total,
        mask_rate: if augmented == 0 { 0.0 } else { masked as f64 / augmented as f64 },
        grad_norm: numerics::norm(&grad),
    };
    Ok((new_student, new_teacher, metrics))
}

/// Query logits from the student alone, using the original supports.
pub fn predict_logits(student: &EncoderParams, ep: &Episode, cfg: &TrainConfig) -> Result<Vec<Logits>> {
    let emb = |v: &[crate::world::LatentSample]| v.iter().map(|s| s.embedding.clone()).collect::<Vec<_>>();
    let (fp, _) = encode_all(student, &emb(&ep.positives))?;
    let (fnn, _) = encode_all(student, &emb(&ep.negatives))?;
    let qs: Vec<Vec<f64>> = ep.queries.iter().map(|q| q.sample.embedding.clone()).collect();
    let (fq, _) = encode_all(student, &qs)?;
    dsn_batch(&fp, &fnn, &fq, cfg)
}

/// Ties go to the negative class.
pub fn decide(l: Logits) -> bool {
    l[0] > l[1]
}

pub fn predict(student: &EncoderParams, ep: &Episode, cfg: &TrainConfig) -> Result<Vec<bool>> {
    Ok(predict_logits(student, ep, cfg)?.into_iter().map(decide).collect())
}

pub fn write_metrics_line<W: Write>(w: &mut W, m: &IterationMetrics) -> Result<()> {
    serde_json::to_writer(&mut *w, m).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HOICKPT1";

/// Everything needed to resume a run; the random streams are a pure function of `(seed, iteration)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub seed: u64,
    pub student: EncoderParams,
    pub teacher: TeacherState,
}

pub fn write_checkpoint<W: Write>(c: &Checkpoint, w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&c.iteration.to_le_bytes())?;
    w.write_all(&c.seed.to_le_bytes())?;
    w.write_all(&c.teacher.decay.to_le_bytes())?;
    encoder::write_params(&c.student, w)?;
    encoder::write_params(&c.teacher.params, w)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let iteration = u64::from_le_bytes(word);
    r.read_exact(&mut word)?;
    let seed = u64::from_le_bytes(word);
    r.read_exact(&mut word)?;
    let decay = f64::from_le_bytes(word);
    let student = encoder::read_params(r)?;
    let params = encoder::read_params(r)?;
    if student.dims() != params.dims() {
        return Err(TrainError::Checkpoint("student and teacher shapes differ".into()));
    }
    Ok(Checkpoint { iteration, seed, student, teacher: TeacherState { params, decay } })
}

/// Drives [`train_step`] over a fixed training set for `cfg.epochs` epochs.
pub struct Trainer<'a> {
    pub universe: &'a Universe,
    pub cfg: TrainConfig,
    pub student: EncoderParams,
    pub teacher: TeacherState,
    pub iteration: u64,
    episodes: Vec<Episode>,
}

impl<'a> Trainer<'a> {
    pub fn new(universe: &'a Universe, cfg: &TrainConfig, episodes: Vec<Episode>) -> Result<Self> {
        cfg.validate()?;
        if episodes.iter().any(|e| e.scope != Scope::Train) {
            return Err(TrainError::InvalidConfig("training set contains evaluation episodes".into()));
        }
        let total = Self::planned_iterations(cfg, episodes.len());
        let cfg = cfg.resolved(total);
        cfg.schedule.validate()?;
        let student = EncoderParams::init_scaled(&cfg.encoder_dims(universe.config.d_raw), cfg.seed, cfg.init_scale);
        let teacher = TeacherState { params: student.clone(), decay: cfg.ema_decay };
        Ok(Self { universe, cfg, student, teacher, iteration: 0, episodes })
    }

    pub fn planned_iterations(cfg: &TrainConfig, n_episodes: usize) -> u64 {
        (cfg.epochs * n_episodes.div_ceil(cfg.batch_tasks)) as u64
    }

    pub fn total_iterations(&self) -> u64 {
        Self::planned_iterations(&self.cfg, self.episodes.len())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            seed: self.cfg.seed,
            student: self.student.clone(),
            teacher: self.teacher.clone(),
        }
    }

    pub fn restore(&mut self, c: Checkpoint) -> Result<()> {
        if c.seed != self.cfg.seed || c.student.dims() != self.student.dims() {
            return Err(TrainError::Checkpoint("checkpoint does not belong to this run".into()));
        }
        self.iteration = c.iteration;
        self.student = c.student;
        self.teacher = c.teacher;
        Ok(())
    }

    fn batch_at(&self, n: u64) -> Vec<Episode> {
        let per_epoch = self.episodes.len().div_ceil(self.cfg.batch_tasks) as u64;
        let epoch = n / per_epoch;
        let pos = (n % per_epoch) as usize;
        let mut order: Vec<usize> = (0..self.episodes.len()).collect();
        order.shuffle(&mut derive_rng(self.cfg.seed, stream::SHUFFLE, epoch, 0));
        let end = ((pos + 1) * self.cfg.batch_tasks).min(order.len());
        order[pos * self.cfg.batch_tasks..end].iter().map(|&i| self.episodes[i].clone()).collect()
    }

    pub fn step(&mut self) -> Result<IterationMetrics> {
        let batch = self.batch_at(self.iteration);
        let (s, t, m) = train_step(self.universe, &self.student, &self.teacher, &batch, self.iteration, &self.cfg)?;
        if !s.is_finite() {
            return Err(TrainError::InvalidConfig(format!("student diverged at iteration {}", self.iteration)));
        }
        self.student = s;
        self.teacher = t;
        self.iteration += 1;
        Ok(m)
    }

    /// Trains to completion, handing each step's metrics and new student to `observe`.
    pub fn run(&mut self, mut observe: impl FnMut(&IterationMetrics, &EncoderParams)) -> Result<()> {
        while self.iteration < self.total_iterations() {
            let m = self.step()?;
            observe(&m, &self.student);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_universe, sample_episode, SplitTag, UniverseConfig};

    fn setup() -> (Universe, Vec<Episode>) {
        let u = generate_universe(&UniverseConfig::default(), 3).unwrap();
        let mut rng = derive_rng(3, stream::TRAIN_EPISODES, 0, 0);
        let eps = (0..12).map(|_| sample_episode(&u, SplitTag::Sosa, Scope::Train, &mut rng)).collect();
        (u, eps)
    }

    #[test]
    fn ema_examples() {
        let s = EncoderParams::init(&[3, 2], 1);
        let t = TeacherState { params: EncoderParams::zeros(&[3, 2]), decay: 0.0 };
        assert_eq!(ema_update(&t, &s).params.flatten(), s.flatten());

        let ones = s.with_flat(&vec![1.0; s.num_params()]);
        let mut t = TeacherState { params: EncoderParams::zeros(&[3, 2]), decay: 0.9 };
        for _ in 0..3 {
            t = ema_update(&t, &ones);
        }
        for v in t.params.flatten() {
            assert!((v - (1.0 - 0.9f64.powi(3))).abs() < 1e-15);
            assert!((v - 0.271).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let (u, _) = setup();
        let cfg = TrainConfig::default().resolved(10);
        let s = EncoderParams::init(&cfg.encoder_dims(u.config.d_raw), 0);
        let t = TeacherState { params: s.clone(), decay: 0.9 };
        assert!(matches!(train_step(&u, &s, &t, &[], 0, &cfg), Err(TrainError::EmptyBatch)));
    }

    #[test]
    fn full_threshold_silences_unsupervised_term() {
        let (u, eps) = setup();
        let mut cfg = TrainConfig::default();
        cfg.schedule.conf_threshold = 1.0;
        cfg.epochs = 1;
        let mut tr = Trainer::new(&u, &cfg, eps).unwrap();
        let mut seen = Vec::new();
        tr.run(|m, _| seen.push(m.clone())).unwrap();
        assert!(seen.iter().all(|m| m.unsup == 0.0 && m.mask_rate == 0.0));
    }

    #[test]
    fn lambda_zero_matches_supervised_only() {
        let (u, eps) = setup();
        let mut a = TrainConfig { epochs: 2, ..Default::default() };
        a.schedule.lambda = 0.0;
        let b = TrainConfig {
            augment: AugmentationPlan { query_rotation: false, query_blend: false, ..Default::default() },
            ..a.clone()
        };
        let mut ta = Trainer::new(&u, &a, eps.clone()).unwrap();
        let mut tb = Trainer::new(&u, &b, eps).unwrap();
        ta.run(|_, _| {}).unwrap();
        tb.run(|_, _| {}).unwrap();
        assert_eq!(ta.student, tb.student);
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let (u, eps) = setup();
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        let mut full = Trainer::new(&u, &cfg, eps.clone()).unwrap();
        full.run(|_, _| {}).unwrap();

        let mut half = Trainer::new(&u, &cfg, eps.clone()).unwrap();
        for _ in 0..3 {
            half.step().unwrap();
        }
        let mut buf = Vec::new();
        write_checkpoint(&half.checkpoint(), &mut buf).unwrap();
        let ck = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(ck, half.checkpoint());

        let mut resumed = Trainer::new(&u, &cfg, eps).unwrap();
        resumed.restore(ck).unwrap();
        resumed.run(|_, _| {}).unwrap();
        assert_eq!(resumed.student, full.student);
        assert_eq!(resumed.teacher, full.teacher);

        buf[0] = b'X';
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn prediction_rules() {
        let (u, eps) = setup();
        let cfg = TrainConfig::default();
        let s = EncoderParams::init(&cfg.encoder_dims(u.config.d_raw), 0);
        let mut ep = eps[0].clone();
        ep.queries[0].sample = ep.positives[2].clone();
        assert!(predict(&s, &ep, &cfg).unwrap()[0]);
        assert!(!decide([-1.5, -1.5]));
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (u, eps) = setup();
        let cfg = TrainConfig::default().resolved(100);
        let s = EncoderParams::init(&cfg.encoder_dims(u.config.d_raw), 5);
        let t = EncoderParams::init(&cfg.encoder_dims(u.config.d_raw), 6);
        let prep = prepare_episode(&u, &eps[1], &cfg.augment, 0, 7, 0).unwrap();
        let mut targets = teacher_targets(&t, &prep, &cfg).unwrap();
        targets.mask = vec![true; targets.probs.len()];
        let full = losses::loss_weights(60, &cfg.schedule);
        let only = |ce, cts, aux, unsup| LossWeights { ce, cts, aux, unsup, ..full };
        let x = s.flatten();
        for w in [full, only(1.0, 0.0, 0.0, 0.0), only(0.0, 1.0, 0.0, 0.0), only(0.0, 0.0, 1.0, 0.0), only(0.0, 0.0, 0.0, 1.0)] {
            let obj = episode_objective(&s, &prep, &targets, &w, &cfg).unwrap();
            let numeric = numerics::finite_diff_grad(
                |p| episode_objective(&s.with_flat(p), &prep, &targets, &w, &cfg).unwrap().loss,
                &x,
                1e-5,
            );
            let err = numerics::max_relative_error(&obj.grad, &numeric, 1e-6);
            assert!(err < 1e-4, "{w:?}: {err}");
        }
    }
}
