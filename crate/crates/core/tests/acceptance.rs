//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. Positional arguments filter criteria by name.

use hoilab::encoder::EncoderParams;
use hoilab::harness::{self, AblationAxis, ExperimentConfig, ExperimentOutcome};
use hoilab::heads::{aux_loss, build_subspace, ClassTag};
use hoilab::losses::{self, contrastive_loss, LossWeights, ScheduleConfig};
use hoilab::numerics::{self, finite_diff_grad, max_relative_error};
use hoilab::rng::derive_rng;
use hoilab::trainer::{self, prepare_episode, teacher_targets, AugmentationPlan, TrainConfig};
use hoilab::world::{
    augment_background_blend, augment_negative_support_with, augment_rotation, generate_universe, sample_episode,
    HoiClass, NegSupportPolicy, Scope, SplitTag, UniverseConfig,
};
use rand::Rng;
use rand_distr::StandardNormal;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

type Check = fn() -> Verdict;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(include_str!("../../../configs/desk.toml")).expect("desk config parses")
}

fn composite_gradient() -> Verdict {
    let start = Instant::now();
    let policies = NegSupportPolicy::ALL;
    let mut worst: f64 = 0.0;
    let mut unsup_active = 0;
    let configs = 24;
    for c in 0..configs {
        let mut rng = derive_rng(c, 100, 0, 0);
        let u = generate_universe(&UniverseConfig::default(), c).unwrap();
        let mut cfg = TrainConfig {
            seed: c,
            k: 1 + (c as usize % 5),
            dsn_normalize: c % 3 == 0,
            hidden_dims: if c % 2 == 0 { vec![12] } else { vec![10, 8] },
            feature_dim: 6 + (c as usize % 3) * 2,
            init_scale: rng.random_range(1.0..3.0),
            augment: AugmentationPlan {
                query_rotation: true,
                query_blend: c % 4 != 1,
                neg_support: policies[c as usize % policies.len()],
            },
            ..TrainConfig::default()
        };
        cfg.schedule = ScheduleConfig {
            n_scale: 1000.0,
            conf_threshold: rng.random_range(0.5..0.75),
            normalize_contrastive: c % 5 != 2,
            renormalize_masked: c % 2 == 1,
            tau: rng.random_range(0.07..0.5),
            ..ScheduleConfig::default()
        };
        let dims = cfg.encoder_dims(u.config.d_raw);
        let student = EncoderParams::init_scaled(&dims, c, cfg.init_scale);
        let teacher = EncoderParams::init_scaled(&dims, c + 1000, cfg.init_scale);
        let ep = sample_episode(&u, SplitTag::Sosa, Scope::Train, &mut rng);
        let n = rng.random_range(0..2000);
        let prep = prepare_episode(&u, &ep, &cfg.augment, c, n, 0).unwrap();
        let targets = teacher_targets(&teacher, &prep, &cfg).unwrap();
        if targets.mask.iter().any(|&m| m) {
            unsup_active += 1;
        }
        let base = losses::loss_weights(n, &cfg.schedule);
        // unit-ish weights keep every component visible in the comparison
        let w = LossWeights { ce: base.ce.max(0.3), cts: base.cts.max(0.1), aux: base.aux.max(0.1), unsup: base.unsup.max(0.3), ..base };
        let analytic = trainer::episode_objective(&student, &prep, &targets, &w, &cfg).unwrap().grad;
        let numeric = finite_diff_grad(
            |p| trainer::episode_objective(&student.with_flat(p), &prep, &targets, &w, &cfg).unwrap().loss,
            &student.flatten(),
            1e-5,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-6));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 30.0 && unsup_active > 0,
        format!("{configs} configs, max rel err {worst:.2e} (< 1e-4), {unsup_active} with pseudo-labels, {secs:.1}s (< 30s)"),
    )
}

/// Double loop straight from the definition: `|X(i)|` includes `i`, the
/// positive sum and the denominator skip it.
fn contrastive_brute_force(f: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let z: Vec<Vec<f64>> = f
        .iter()
        .map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..z.len() {
        let class_size = labels.iter().filter(|&&l| l == labels[i]).count() as f64;
        let mut denom = 0.0;
        for a in 0..z.len() {
            if a != i {
                denom += (dot(&z[i], &z[a]) / tau).exp();
            }
        }
        let mut inner = 0.0;
        for p in 0..z.len() {
            if p != i && labels[p] == labels[i] {
                inner += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
            }
        }
        total += -inner / class_size;
    }
    total
}

fn contrastive_oracle() -> Verdict {
    let mut rng = derive_rng(7, 101, 0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(4..20);
        let f: Vec<Vec<f64>> = (0..14).map(|_| gaussian(&mut rng, d)).collect();
        let labels: Vec<usize> = (0..14).map(|_| rng.random_range(0..2)).collect();
        let tau = rng.random_range(0.05..1.0);
        let got = contrastive_loss(&f, &labels, tau, true).unwrap();
        worst = worst.max((got - contrastive_brute_force(&f, &labels, tau)).abs());
    }
    verdict(worst < 1e-10, format!("100 tasks of 14, max abs diff {worst:.2e} (< 1e-10)"))
}

fn aux_bounds() -> Verdict {
    let mut rng = derive_rng(8, 102, 0, 0);
    let (mut lo, mut hi_gap) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..1000 {
        let d = rng.random_range(6..24);
        let k = rng.random_range(1..=5);
        let p: Vec<Vec<f64>> = (0..6).map(|_| gaussian(&mut rng, d)).collect();
        let n: Vec<Vec<f64>> = (0..6).map(|_| gaussian(&mut rng, d)).collect();
        let a = aux_loss(
            &build_subspace(&p, k, ClassTag::Positive).unwrap(),
            &build_subspace(&n, k, ClassTag::Negative).unwrap(),
        );
        lo = lo.min(a);
        hi_gap = hi_gap.min(k as f64 - a);
    }
    let mut exact_err: f64 = 0.0;
    for k in 1..=5 {
        // supports confined to disjoint coordinate blocks span orthogonal subspaces
        let block = |offset: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..6)
                .map(|_| {
                    let mut v = vec![0.0; 16];
                    v[offset..offset + 8].copy_from_slice(&gaussian(rng, 8));
                    v
                })
                .collect()
        };
        let p = block(0, &mut rng);
        let n = block(8, &mut rng);
        let bp = build_subspace(&p, k, ClassTag::Positive).unwrap();
        exact_err = exact_err.max(aux_loss(&bp, &build_subspace(&n, k, ClassTag::Negative).unwrap()).abs());
        let same = build_subspace(&p, k, ClassTag::Negative).unwrap();
        exact_err = exact_err.max((aux_loss(&bp, &same) - k as f64).abs());
    }
    verdict(
        lo >= 0.0 && hi_gap >= 0.0 && exact_err < 1e-10,
        format!("1000 pairs: min {lo:.3e}, min slack to k {hi_gap:.3e}; orthogonal/identical max err {exact_err:.1e}"),
    )
}

fn schedule_checkpoints() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for (n_scale, offset, lambda) in [(1000.0, 0.5, 0.2), (400.0, 0.25, 1.0), (2048.0, 0.75, 0.05)] {
        let cfg = ScheduleConfig { n_scale, offset, lambda, ..ScheduleConfig::default() };
        let (a, b) = losses::schedule_weights((offset * n_scale) as u64, &cfg);
        worst = worst.max((a - 0.5).abs()).max((b - lambda / 2.0).abs());
        let grid: Vec<(f64, f64)> = (0..1000).map(|i| losses::schedule_weights(i * 3, &cfg)).collect();
        monotone &= grid.windows(2).all(|w| w[1].0 <= w[0].0 && w[1].1 >= w[0].1);
    }
    verdict(worst == 0.0 && monotone, format!("max deviation at n = bN: {worst:e}; 1000-point grid monotone: {monotone}"))
}

fn ema_replay() -> Verdict {
    let cfg = ExperimentConfig {
        train_episodes: 800,
        train: TrainConfig { epochs: 1, ..desk_config().train },
        ..desk_config()
    };
    let seed = 11;
    let run = harness::train_seed(&cfg, seed, true).unwrap();
    let tc = cfg.train_config(seed);
    let init = EncoderParams::init_scaled(&tc.encoder_dims(cfg.universe.d_raw), seed, tc.init_scale);
    let d = tc.ema_decay;
    let mut t = init.flatten();
    for s in &run.trajectory {
        for (ti, si) in t.iter_mut().zip(s.flatten()) {
            *ti = d * *ti + (1.0 - d) * si;
        }
    }
    let teacher = run.checkpoint.teacher.params.flatten();
    let err = t.iter().zip(&teacher).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let lag = teacher.iter().zip(run.student.flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        run.trajectory.len() == 200 && err <= 1e-12 && lag > 0.0,
        format!("{} steps, max |replay − teacher| {err:.1e} (<= 1e-12)", run.trajectory.len()),
    )
}

fn augmentation_rates() -> Verdict {
    let u = generate_universe(&UniverseConfig::default(), 5).unwrap();
    let mut rng = derive_rng(5, 103, 0, 0);
    let classes = u.training_classes();
    let draws = 10_000;
    let (mut flips, mut shifts) = (0usize, 0usize);
    for _ in 0..draws {
        let c = classes[rng.random_range(0..classes.len())];
        let s = u.sample(c, &mut rng);
        flips += usize::from(augment_rotation(&s, &u, Scope::Train, &mut rng).action_id != c.action);
        let rep = u.sample(c, &mut rng);
        let out = augment_background_blend(&s, &rep, c, &u, Scope::Train, &mut rng).unwrap();
        shifts += usize::from(out.action_id != c.action);
    }
    let (fr, sr) = (flips as f64 / draws as f64, shifts as f64 / draws as f64);
    verdict(
        (fr - 0.125).abs() <= 0.01 && (sr - 0.725).abs() <= 0.01,
        format!("rotation flip {fr:.4} (0.125 ± 0.01), blend shift {sr:.4} (0.725 ± 0.01) over {draws} draws"),
    )
}

/// All set partitions of `n` items as restricted growth strings.
fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |m| m + 1);
        for g in 0..=next {
            prefix.push(g);
            grow(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::new(), n, &mut out);
    out
}

fn neg_support_counting() -> Verdict {
    let u = generate_universe(&UniverseConfig::default(), 6).unwrap();
    let object = (0..u.config.n_objects).find(|&o| u.admissible_actions(o, Scope::Eval).len() >= 6).unwrap();
    let actions = u.admissible_actions(object, Scope::Eval);
    let mut rng = derive_rng(6, 104, 0, 0);
    let partitions = set_partitions(6);
    let mut bad = 0;
    for labels in &partitions {
        let negs: Vec<_> = labels.iter().map(|&g| u.sample(HoiClass { object, action: actions[g] }, &mut rng)).collect();
        let expected: usize = (0..6).map(|g| labels.iter().filter(|&&l| l == g).count().saturating_sub(1)).sum();
        let out = augment_negative_support_with(NegSupportPolicy::Ours, &negs, &u, Scope::Eval, &mut rng);
        let count = out.augmented.iter().filter(|&&a| a).count();
        let untouched_kept = out.samples.iter().zip(&negs).zip(&out.augmented).all(|((o, i), &a)| a || o == i);
        let one_kept_per_group = (0..6).all(|g| {
            let members: Vec<usize> = (0..6).filter(|&i| labels[i] == g).collect();
            members.is_empty() || members.iter().filter(|&&i| !out.augmented[i]).count() == 1
        });
        if count != expected || !untouched_kept || !one_kept_per_group {
            bad += 1;
        }
    }
    verdict(bad == 0, format!("{} partitions of 6 checked, {bad} mismatches", partitions.len()))
}

fn centroid_shrinkage() -> Verdict {
    let start = Instant::now();
    let episodes = 600;
    let centroid = |xs: &[Vec<f64>]| {
        let mut c = vec![0.0; xs[0].len()];
        xs.iter().for_each(|x| numerics::axpy(&mut c, 1.0 / xs.len() as f64, x));
        c
    };
    let universes: Vec<_> = (0..6).map(|s| generate_universe(&UniverseConfig::default(), s).unwrap()).collect();
    let (mut before, mut after) = (0.0, 0.0);
    for e in 0..episodes {
        let u_seed = e / 100;
        let u = &universes[u_seed as usize];
        let mut rng = derive_rng(u_seed, 105, e, 0);
        let ep = sample_episode(u, SplitTag::Sosa, Scope::Train, &mut rng);
        let aug = augment_negative_support_with(NegSupportPolicy::Ours, &ep.negatives, u, Scope::Train, &mut rng);
        let emb = |v: &[hoilab::world::LatentSample]| v.iter().map(|s| s.embedding.clone()).collect::<Vec<_>>();
        let cp = centroid(&emb(&ep.positives));
        before += numerics::norm(&numerics::sub(&centroid(&emb(&ep.negatives)), &cp));
        after += numerics::norm(&numerics::sub(&centroid(&emb(&aug.samples)), &cp));
    }
    let (b, a) = (before / episodes as f64, after / episodes as f64);
    let secs = start.elapsed().as_secs_f64();
    verdict(a < b && secs < 60.0, format!("{episodes} episodes: mean centroid distance {b:.4} -> {a:.4}, {secs:.1}s"))
}

fn untrained_chance() -> Verdict {
    let cfg = ExperimentConfig::default();
    let seed = cfg.seeds[0];
    let u = generate_universe(&cfg.universe, seed).unwrap();
    let tc = cfg.train_config(seed);
    let student = EncoderParams::init_scaled(&tc.encoder_dims(u.config.d_raw), seed, tc.init_scale);
    let (_, records) = harness::evaluate(&u, &student, &tc, &SplitTag::ALL, 500, seed).unwrap();
    let n = records.len() as f64;
    let acc = records.iter().filter(|r| r.predicted == r.label).count() as f64 / n;
    let sigma = (0.25 / n).sqrt();
    verdict(
        (acc - 0.5).abs() <= 3.0 * sigma,
        format!("accuracy {:.2}% on {} queries from 500 × 4 episodes (50 ± {:.2})", 100.0 * acc, n, 300.0 * sigma),
    )
}

struct AblationRuns {
    query: Vec<(String, ExperimentOutcome)>,
    neg: Vec<(String, ExperimentOutcome)>,
}

/// Both ablation axes at desk scale; the full method row is shared.
fn ablations() -> &'static AblationRuns {
    static RUNS: OnceLock<AblationRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let base = desk_config();
        let query: Vec<_> = harness::ablation_cells(&base, AblationAxis::QueryAug)
            .into_iter()
            .map(|(label, cfg)| {
                let o = harness::run_experiment_detailed(&cfg, &label).unwrap();
                (label, o)
            })
            .collect();
        let full_hash = base.hash();
        let neg = harness::ablation_cells(&base, AblationAxis::NegSupport)
            .into_iter()
            .map(|(label, cfg)| {
                let o = match query.iter().find(|(_, o)| o.table.config_hash == full_hash && cfg.hash() == full_hash) {
                    Some((_, o)) => ExperimentOutcome { table: o.table.clone(), runs: o.runs.clone() },
                    None => harness::run_experiment_detailed(&cfg, &label).unwrap(),
                };
                (label, o)
            })
            .collect();
        AblationRuns { query, neg }
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn slowest_run_secs(rows: &[(String, ExperimentOutcome)]) -> f64 {
    rows.iter().map(|(_, o)| o.table.wall_clock_secs / o.table.seeds.len() as f64).fold(0.0, f64::max)
}

fn query_augmentation_ablation() -> Verdict {
    let runs = &ablations().query;
    let unseen_action = [SplitTag::Soua, SplitTag::Uoua];
    let per_seed: Vec<Vec<f64>> = runs.iter().map(|(_, o)| o.table.per_seed_mean(&unseen_action)).collect();
    let (none, rot, full) = (mean(&per_seed[0]), mean(&per_seed[1]), mean(&per_seed[2]));
    let (_, p) = harness::paired_t_test(&per_seed[2], &per_seed[0]);
    let secs = slowest_run_secs(runs);
    verdict(
        full > rot && rot > none && p < 0.05 && secs <= 300.0,
        format!(
            "unseen-action accuracy none {none:.2} / rotation {rot:.2} / rotation+blend {full:.2}; full vs none p = {p:.4}; {secs:.0}s per run"
        ),
    )
}

fn neg_support_ablation() -> Verdict {
    let runs = &ablations().neg;
    let avg = |o: &ExperimentOutcome| o.table.row("AVG").expect("AVG row").mean;
    let ours = runs.iter().find(|(l, _)| l == "ours").expect("ours row");
    let no = runs.iter().find(|(l, _)| l == "no").expect("no row");
    let all_splits = SplitTag::ALL;
    let (_, p) = harness::paired_t_test(&ours.1.table.per_seed_mean(&all_splits), &no.1.table.per_seed_mean(&all_splits));
    let dominates = runs.iter().all(|(_, o)| avg(&ours.1) >= avg(o));
    let listing: Vec<String> = runs.iter().map(|(l, o)| format!("{l} {:.2}", avg(o))).collect();
    verdict(dominates && p < 0.05, format!("mean accuracy {}; ours vs no p = {p:.4}", listing.join(" / ")))
}

fn determinism() -> Verdict {
    let cfg = ExperimentConfig {
        seeds: vec![3],
        train_episodes: 120,
        eval_episodes: 60,
        train: TrainConfig { epochs: 2, ..desk_config().train },
        ..desk_config()
    };
    let a = harness::run_experiment_detailed(&cfg, "det").unwrap();
    let b = harness::run_experiment_detailed(&cfg, "det").unwrap();
    let logs_equal = harness::metrics_jsonl(&a.runs[0].metrics) == harness::metrics_jsonl(&b.runs[0].metrics);
    let tables_equal = a.table == b.table;
    verdict(
        logs_equal && tables_equal,
        format!("{} logged iterations; metrics log identical: {logs_equal}; result table identical: {tables_equal}", a.runs[0].metrics.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 12] = [
        ("composite-gradient", composite_gradient),
        ("contrastive-oracle", contrastive_oracle),
        ("aux-bounds", aux_bounds),
        ("schedule-checkpoints", schedule_checkpoints),
        ("ema-replay", ema_replay),
        ("augmentation-rates", augmentation_rates),
        ("neg-support-counting", neg_support_counting),
        ("centroid-shrinkage", centroid_shrinkage),
        ("untrained-chance", untrained_chance),
        ("query-augmentation-ablation", query_augmentation_ablation),
        ("neg-support-ablation", neg_support_ablation),
        ("determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        ran += 1;
        failed += usize::from(!v.pass);
        println!(
            "{:>2}. {} {name}: {} [{:.1}s]",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
