//! Experiment orchestration: configuration, per-seed runs, ablation matrices,
//! reports and feature projections.

use crate::encoder::EncoderParams;
use crate::losses::Logits;
use crate::numerics::{self, Matrix};
use crate::rng::{derive_rng, stream};
use crate::trainer::{self, IterationMetrics, TrainConfig, TrainError, Trainer};
use crate::world::{generate_universe, sample_episode, Episode, NegSupportPolicy, Scope, SplitTag, Universe, UniverseConfig, WorldError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Size of the fixed training set iterated over for `epochs`.
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub splits: Vec<SplitTag>,
    #[serde(flatten)]
    pub universe: UniverseConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            train_episodes: 2000,
            eval_episodes: 500,
            splits: SplitTag::ALL.to_vec(),
            universe: UniverseConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses the flat TOML format; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        let known = Self::known_keys();
        let unknown: Vec<&String> = table.keys().filter(|k| !known.contains(k.as_str())).collect();
        if !unknown.is_empty() {
            return Err(HarnessError::Config(format!("unknown keys: {unknown:?}")));
        }
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn known_keys() -> BTreeSet<String> {
        let v = serde_json::to_value(Self::default()).expect("config serialises");
        v.as_object().expect("object").keys().cloned().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.splits.is_empty() {
            return bad("no evaluation splits selected".into());
        }
        if self.train_episodes == 0 && self.train.epochs > 0 {
            return bad("training for some epochs needs train_episodes > 0".into());
        }
        for s in &self.splits {
            if !self.universe.required_splits.contains(s) {
                return bad(format!(
                    "split {s} is evaluated but not listed in required_splits, so the universe may not contain it"
                ));
            }
        }
        if !self.train.augment.query_rotation && self.train.augment.query_blend {
            return bad("query_blend without query_rotation is not a row of the query ablation; enable query_rotation".into());
        }
        self.universe.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }
}

/// One evaluated query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub seed: u64,
    pub split: SplitTag,
    pub episode: usize,
    pub query: usize,
    pub logit_pos: f64,
    pub logit_neg: f64,
    pub label: bool,
    pub predicted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Accuracy in percent, aligned with the experiment's `splits`.
    pub accuracy: Vec<f64>,
    pub metrics: Vec<IterationMetrics>,
    pub predictions: Vec<PredictionRecord>,
    pub student: EncoderParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl PartialEq for SplitSummary {
    fn eq(&self, o: &Self) -> bool {
        self.split == o.split
            && self.mean.to_bits() == o.mean.to_bits()
            && self.std.to_bits() == o.std.to_bits()
            && self.per_seed.iter().map(|v| v.to_bits()).eq(o.per_seed.iter().map(|v| v.to_bits()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultTable {
    pub label: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// One row per split, then an `AVG` row over splits.
    pub rows: Vec<SplitSummary>,
    pub wall_clock_secs: f64,
}

/// Wall-clock time is excluded: it is the one field a rerun cannot reproduce.
impl PartialEq for ResultTable {
    fn eq(&self, o: &Self) -> bool {
        self.label == o.label && self.config_hash == o.config_hash && self.seeds == o.seeds && self.rows == o.rows
    }
}

impl ResultTable {
    pub fn row(&self, split: &str) -> Option<&SplitSummary> {
        self.rows.iter().find(|r| r.split == split)
    }

    /// Mean accuracy per seed over the given splits.
    pub fn per_seed_mean(&self, splits: &[SplitTag]) -> Vec<f64> {
        let rows: Vec<&SplitSummary> = splits.iter().filter_map(|s| self.row(s.as_str())).collect();
        (0..self.seeds.len())
            .map(|i| rows.iter().map(|r| r.per_seed[i]).sum::<f64>() / rows.len() as f64)
            .collect()
    }

    pub fn check(&self, cfg: &ExperimentConfig) -> Result<()> {
        if self.config_hash != cfg.hash() {
            return Err(HarnessError::Invariant("result table hash does not match its config".into()));
        }
        for r in &self.rows {
            if r.per_seed.iter().chain([&r.mean]).any(|a| !(0.0..=100.0).contains(a)) {
                return Err(HarnessError::Invariant(format!("accuracy outside [0, 100] in {}", r.split)));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# {}\tconfig {}\n", self.label, self.config_hash);
        s.push_str("split\tmean\tstd");
        for seed in &self.seeds {
            let _ = write!(s, "\tseed{seed}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}\t{:.2}\t{:.2}", r.split, r.mean, r.std);
            for v in &r.per_seed {
                let _ = write!(s, "\t{v:.2}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub table: ResultTable,
    pub runs: Vec<SeedOutcome>,
}

/// Fixed training set for `seed`.
pub fn training_episodes(u: &Universe, cfg: &ExperimentConfig, seed: u64) -> Vec<Episode> {
    let mut rng = derive_rng(seed, stream::TRAIN_EPISODES, 0, 0);
    (0..cfg.train_episodes).map(|_| sample_episode(u, SplitTag::Sosa, Scope::Train, &mut rng)).collect()
}

pub fn eval_episodes(u: &Universe, split: SplitTag, count: usize, seed: u64) -> Vec<Episode> {
    let mut rng = derive_rng(seed, stream::EVAL_EPISODES, split.index() as u64, 0);
    (0..count).map(|_| sample_episode(u, split, Scope::Eval, &mut rng)).collect()
}

/// Errors if any sample of a training episode touches an unseen object or action.
pub fn audit_training_split(u: &Universe, episodes: &[Episode]) -> Result<()> {
    for (i, e) in episodes.iter().enumerate() {
        let samples = e.positives.iter().chain(&e.negatives).chain(e.queries.iter().map(|q| &q.sample));
        for s in samples {
            if !u.object_seen[s.object_id] || !u.action_seen[s.action_id] {
                return Err(HarnessError::Invariant(format!(
                    "training episode {i} contains unseen class (action {}, object {})",
                    s.action_id, s.object_id
                )));
            }
        }
    }
    Ok(())
}

pub struct TrainedRun {
    pub universe: Universe,
    pub student: EncoderParams,
    pub checkpoint: trainer::Checkpoint,
    pub metrics: Vec<IterationMetrics>,
    /// Student after every step, when requested.
    pub trajectory: Vec<EncoderParams>,
}

pub fn train_seed(cfg: &ExperimentConfig, seed: u64, keep_trajectory: bool) -> Result<TrainedRun> {
    let universe = generate_universe(&cfg.universe, seed)?;
    let episodes = training_episodes(&universe, cfg, seed);
    audit_training_split(&universe, &episodes)?;
    let mut tr = Trainer::new(&universe, &cfg.train_config(seed), episodes)?;
    let mut metrics = Vec::new();
    let mut trajectory = Vec::new();
    tr.run(|m, s| {
        metrics.push(m.clone());
        if keep_trajectory {
            trajectory.push(s.clone());
        }
    })?;
    let student = tr.student.clone();
    let checkpoint = tr.checkpoint();
    drop(tr);
    Ok(TrainedRun { universe, student, checkpoint, metrics, trajectory })
}

/// Scores `student` on fresh held-out episodes of each split.
pub fn evaluate(
    u: &Universe,
    student: &EncoderParams,
    train: &TrainConfig,
    splits: &[SplitTag],
    count: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<PredictionRecord>)> {
    let mut accuracy = Vec::new();
    let mut records = Vec::new();
    for &split in splits {
        let eps = eval_episodes(u, split, count, seed);
        let logits: Vec<Vec<Logits>> = eps
            .par_iter()
            .map(|e| trainer::predict_logits(student, e, train))
            .collect::<std::result::Result<_, _>>()?;
        let (mut correct, mut total) = (0usize, 0usize);
        for (ei, (e, ls)) in eps.iter().zip(&logits).enumerate() {
            for (qi, (q, l)) in e.queries.iter().zip(ls).enumerate() {
                let predicted = trainer::decide(*l);
                correct += usize::from(predicted == q.label);
                total += 1;
                records.push(PredictionRecord {
                    seed,
                    split,
                    episode: ei,
                    query: qi,
                    logit_pos: l[0],
                    logit_neg: l[1],
                    label: q.label,
                    predicted,
                });
            }
        }
        accuracy.push(if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 });
    }
    Ok((accuracy, records))
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let run = train_seed(cfg, seed, false)?;
    let (accuracy, predictions) =
        evaluate(&run.universe, &run.student, &cfg.train_config(seed), &cfg.splits, cfg.eval_episodes, seed)?;
    Ok(SeedOutcome { seed, accuracy, metrics: run.metrics, predictions, student: run.student })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn summarize(label: &str, cfg: &ExperimentConfig, runs: &[SeedOutcome], secs: f64) -> ResultTable {
    let mut rows: Vec<SplitSummary> = cfg
        .splits
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let per_seed: Vec<f64> = runs.iter().map(|r| r.accuracy[i]).collect();
            let (mean, std) = mean_std(&per_seed);
            SplitSummary { split: s.as_str().to_string(), mean, std, per_seed }
        })
        .collect();
    let avg: Vec<f64> = runs.iter().map(|r| r.accuracy.iter().sum::<f64>() / r.accuracy.len() as f64).collect();
    let (mean, std) = mean_std(&avg);
    rows.push(SplitSummary { split: "AVG".into(), mean, std, per_seed: avg });
    ResultTable {
        label: label.to_string(),
        config_hash: cfg.hash(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        rows,
        wall_clock_secs: secs,
    }
}

pub fn run_experiment_detailed(cfg: &ExperimentConfig, label: &str) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let runs: Vec<SeedOutcome> = cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect::<Result<_>>()?;
    let table = summarize(label, cfg, &runs, start.elapsed().as_secs_f64());
    table.check(cfg)?;
    Ok(ExperimentOutcome { table, runs })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    Ok(run_experiment_detailed(cfg, "experiment")?.table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    QueryAug,
    NegSupport,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "query_aug" => Ok(Self::QueryAug),
            "neg_support" => Ok(Self::NegSupport),
            _ => Err(format!("unknown ablation axis {s:?} (expected query_aug or neg_support)")),
        }
    }
}

/// Row labels and configs of an ablation; every row shares the base seeds.
pub fn ablation_cells(base: &ExperimentConfig, axis: AblationAxis) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        AblationAxis::QueryAug => [("none", false, false), ("rotation", true, false), ("rotation+blend", true, true)]
            .into_iter()
            .map(|(name, r, b)| {
                (
                    name.to_string(),
                    with(&|c| {
                        c.train.augment.query_rotation = r;
                        c.train.augment.query_blend = b;
                    }),
                )
            })
            .collect(),
        AblationAxis::NegSupport => NegSupportPolicy::ALL
            .into_iter()
            .map(|p| (p.as_str().to_string(), with(&|c| c.train.augment.neg_support = p)))
            .collect(),
    }
}

pub fn run_ablation_matrix_detailed(base: &ExperimentConfig, axis: AblationAxis) -> Result<Vec<ExperimentOutcome>> {
    ablation_cells(base, axis).iter().map(|(label, cfg)| run_experiment_detailed(cfg, label)).collect()
}

pub fn run_ablation_matrix(base: &ExperimentConfig, axis: AblationAxis) -> Result<Vec<ResultTable>> {
    Ok(run_ablation_matrix_detailed(base, axis)?.into_iter().map(|o| o.table).collect())
}

/// One-sided paired t-test of `mean(a − b) > 0`; returns `(t, p)`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    if a.len() < 2 {
        return (f64::NAN, 1.0);
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&d);
    let n = d.len() as f64;
    if sd == 0.0 {
        return match mean.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => (f64::INFINITY, 0.0),
            Some(std::cmp::Ordering::Less) => (f64::NEG_INFINITY, 1.0),
            _ => (f64::NAN, 1.0),
        };
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("dof >= 1");
    (t, 1.0 - dist.cdf(t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    /// Variance captured by each of the two components.
    pub variances: [f64; 2],
    /// Set when the features span fewer than two directions.
    pub rank_deficient: bool,
}

impl Projection {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("pc1\tpc2\tlabel\n");
        for (c, l) in self.coords.iter().zip(&self.labels) {
            let _ = writeln!(s, "{:.6}\t{:.6}\t{l}", c[0], c[1]);
        }
        s
    }
}

/// Top-two principal-component coordinates.
pub fn export_projection(features: &[Vec<f64>], labels: &[String]) -> Result<Projection> {
    if features.len() < 3 {
        return Err(HarnessError::Config("projection needs at least 3 feature vectors".into()));
    }
    if labels.len() != features.len() {
        return Err(HarnessError::Config("one label per feature vector required".into()));
    }
    let d = features[0].len();
    let mean = numerics::mean_vector(features);
    let centered: Vec<Vec<f64>> = features.iter().map(|f| numerics::sub(f, &mean)).collect();
    let mut cov = Matrix::zeros(d, d);
    let inv = 1.0 / features.len() as f64;
    for c in &centered {
        for i in 0..d {
            for j in 0..d {
                cov.add_at(i, j, inv * c[i] * c[j]);
            }
        }
    }
    let eig = numerics::sym_eigen(&cov).map_err(|e| HarnessError::Config(e.to_string()))?;
    let top = eig.values[0].max(0.0);
    let rank = eig.values.iter().filter(|&&v| v > numerics::RANK_TOLERANCE * top.max(1e-300)).count();
    let mut axes: Vec<Vec<f64>> = (0..2.min(d)).map(|j| eig.vectors.column(j)).collect();
    for a in axes.iter_mut() {
        let lead = a.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            a.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let use_second = rank >= 2;
    let coords: Vec<[f64; 2]> = centered
        .iter()
        .map(|c| {
            let y = if use_second { numerics::dot(c, &axes[1]) } else { 0.0 };
            [numerics::dot(c, &axes[0]), y]
        })
        .collect();
    let variances = [eig.values[0].max(0.0), if use_second { eig.values[1].max(0.0) } else { 0.0 }];
    Ok(Projection { coords, labels: labels.to_vec(), variances, rank_deficient: !use_second })
}

pub fn metrics_jsonl(metrics: &[IterationMetrics]) -> String {
    let mut buf = Vec::new();
    for m in metrics {
        trainer::write_metrics_line(&mut buf, m).expect("in-memory write");
    }
    String::from_utf8(buf).expect("utf8")
}

pub fn predictions_tsv(records: &[PredictionRecord]) -> String {
    let mut s = String::from("seed\tsplit\tepisode\tquery\tlogit_pos\tlogit_neg\tlabel\tpredicted\n");
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:e}\t{:e}\t{}\t{}",
            r.seed,
            r.split,
            r.episode,
            r.query,
            r.logit_pos,
            r.logit_neg,
            u8::from(r.label),
            u8::from(r.predicted)
        );
    }
    s
}

/// Writes tables, metadata, metrics and prediction dumps for one experiment.
pub fn write_report(dir: &Path, cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.tsv"), outcome.table.to_tsv())?;
    let meta = serde_json::json!({
        "config_hash": outcome.table.config_hash,
        "config": cfg,
        "table": outcome.table,
    });
    fs::write(dir.join("results.json"), serde_json::to_string_pretty(&meta).expect("json"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    for r in &outcome.runs {
        fs::write(dir.join(format!("metrics_seed{}.jsonl", r.seed)), metrics_jsonl(&r.metrics))?;
        fs::write(dir.join(format!("predictions_seed{}.tsv", r.seed)), predictions_tsv(&r.predictions))?;
    }
    Ok(())
}
