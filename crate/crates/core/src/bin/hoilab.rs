use clap::{Parser, Subcommand};
use hoilab::encoder::EncoderParams;
use hoilab::harness::{self, AblationAxis, ExperimentConfig, ExperimentOutcome, HarnessError, SeedOutcome};
use hoilab::trainer::{self, read_checkpoint, write_checkpoint};
use hoilab::world::{SplitTag, Universe};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "hoilab", version, about = "Few-shot HOI experiments on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model per seed and save checkpoints, universes and metrics logs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds; overrides the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the checkpoints in a training output directory.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_delimiter = ',')]
        splits: Option<Vec<SplitTag>>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run an ablation matrix (query_aug or neg_support) with shared seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        splits: Option<Vec<SplitTag>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write 2-D PCA coordinates of student features on held-out episodes.
    Project {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "UOUA")]
        split: SplitTag,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, HarnessError> {
    match path {
        Some(p) => ExperimentConfig::from_toml(&fs::read_to_string(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_run(dir: &Path, seed: u64) -> Result<(Universe, EncoderParams), HarnessError> {
    let universe = Universe::load(&dir.join(format!("universe_seed{seed}.json")))?;
    let mut f = fs::File::open(dir.join(format!("checkpoint_seed{seed}.bin")))?;
    let ck = read_checkpoint(&mut f)?;
    if ck.seed != seed {
        return Err(HarnessError::Invariant(format!("checkpoint for seed {seed} records seed {}", ck.seed)));
    }
    Ok((universe, ck.student))
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    for &seed in &cfg.seeds {
        let run = harness::train_seed(cfg, seed, false)?;
        run.universe.save(&out.join(format!("universe_seed{seed}.json")))?;
        let mut f = fs::File::create(out.join(format!("checkpoint_seed{seed}.bin")))?;
        write_checkpoint(&run.checkpoint, &mut f)?;
        fs::write(out.join(format!("metrics_seed{seed}.jsonl")), harness::metrics_jsonl(&run.metrics))?;
        let last = run.metrics.last();
        println!(
            "seed {seed}: {} iterations, final total loss {}",
            run.metrics.len(),
            last.map_or("n/a".to_string(), |m| format!("{:.4}", m.total))
        );
    }
    Ok(())
}

fn eval(dir: &Path, splits: Option<Vec<SplitTag>>, episodes: Option<usize>) -> Result<(), HarnessError> {
    let mut cfg = ExperimentConfig::from_toml(&fs::read_to_string(dir.join("config.toml"))?)?;
    if let Some(s) = splits {
        cfg.splits = s;
    }
    if let Some(n) = episodes {
        cfg.eval_episodes = n;
    }
    cfg.validate()?;
    let start = Instant::now();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let (u, student) = load_run(dir, seed)?;
        let (accuracy, predictions) =
            harness::evaluate(&u, &student, &cfg.train_config(seed), &cfg.splits, cfg.eval_episodes, seed)?;
        let metrics = fs::read_to_string(dir.join(format!("metrics_seed{seed}.jsonl")))?
            .lines()
            .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Config(e.to_string())))
            .collect::<Result<_, _>>()?;
        runs.push(SeedOutcome { seed, accuracy, metrics, predictions, student });
    }
    let table = harness::summarize("eval", &cfg, &runs, start.elapsed().as_secs_f64());
    table.check(&cfg)?;
    print!("{}", table.to_tsv());
    harness::write_report(dir, &cfg, &ExperimentOutcome { table, runs })
}

fn ablate(cfg: &ExperimentConfig, axis: AblationAxis, out: &Path) -> Result<(), HarnessError> {
    let outcomes = harness::run_ablation_matrix_detailed(cfg, axis)?;
    fs::create_dir_all(out)?;
    let reference = outcomes.last().expect("ablation has rows");
    let unseen_action = [SplitTag::Soua, SplitTag::Uoua];
    let mut summary = String::from("row\tavg_mean\tavg_std\tunseen_action_mean\tp_vs_last_row\n");
    for (o, (label, row_cfg)) in outcomes.iter().zip(harness::ablation_cells(cfg, axis)) {
        harness::write_report(&out.join(label.replace('+', "_")), &row_cfg, o)?;
        let avg = o.table.row("AVG").expect("avg row");
        let ua = o.table.per_seed_mean(&unseen_action);
        let (_, p) = harness::paired_t_test(&reference.table.per_seed_mean(&unseen_action), &ua);
        summary.push_str(&format!(
            "{label}\t{:.2}\t{:.2}\t{:.2}\t{:.4}\n",
            avg.mean,
            avg.std,
            ua.iter().sum::<f64>() / ua.len().max(1) as f64,
            p
        ));
    }
    print!("{summary}");
    fs::write(out.join("ablation.tsv"), summary)?;
    Ok(())
}

fn project(dir: &Path, seed: u64, split: SplitTag, episodes: usize, out: &Path) -> Result<(), HarnessError> {
    let (u, student) = load_run(dir, seed)?;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (ei, ep) in harness::eval_episodes(&u, split, episodes, seed).iter().enumerate() {
        let tagged = ep
            .positives
            .iter()
            .map(|s| (s, "pos"))
            .chain(ep.negatives.iter().map(|s| (s, "neg")))
            .chain(ep.queries.iter().map(|q| (&q.sample, if q.label { "query_pos" } else { "query_neg" })));
        for (s, tag) in tagged {
            let (f, _) = hoilab::encoder::forward(&student, &s.embedding).map_err(trainer::TrainError::from)?;
            feats.push(f);
            labels.push(format!("{ei}:{tag}:a{}o{}", s.action_id, s.object_id));
        }
    }
    let p = harness::export_projection(&feats, &labels)?;
    if p.rank_deficient {
        eprintln!("warning: features span fewer than two directions; second coordinate is zero");
    }
    fs::write(out, p.to_tsv())?;
    println!("wrote {} points to {}", feats.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, seeds, out } => load_config(config.as_deref()).and_then(|mut c| {
            if let Some(s) = seeds {
                c.seeds = s;
            }
            c.validate()?;
            train(&c, &out)
        }),
        Cmd::Eval { run_dir, splits, episodes } => eval(&run_dir, splits, episodes),
        Cmd::Ablate { config, axis, seeds, splits, out } => load_config(config.as_deref()).and_then(|mut c| {
            if let Some(s) = seeds {
                c.seeds = s;
            }
            if let Some(s) = splits {
                c.splits = s;
            }
            c.validate()?;
            ablate(&c, axis, &out)
        }),
        Cmd::Project { run_dir, seed, split, episodes, out } => project(&run_dir, seed, split, episodes, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ HarnessError::Invariant(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
