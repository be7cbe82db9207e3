//! The `graphimpute` command line.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{generate_synthetic, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::{export_event_embeddings, CutoffPolicy};
use crate::pipeline::{self, Evaluation, ImputerKind};
use crate::rng::derive_seed;
use crate::training::EpochStats;

#[derive(Debug, Parser)]
#[command(name = "graphimpute", version, about = "Imputation of sparse unary patient-event data")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic low-rank dataset as triplet and demographics CSVs.
    Generate(GenerateArgs),
    /// Filter rare events and write the train/test split.
    Split(RunArgs),
    /// Train the graph model and write a checkpoint.
    Train(RunArgs),
    /// Score the test split and report per-event metrics.
    Evaluate(EvaluateArgs),
    /// Train with uniform and degree-preserving negatives and compare biases.
    CompareSamplers(RunArgs),
    /// Write latent event embeddings and their cosine neighbors.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 5000)]
    pub patients: usize,
    #[arg(long, default_value_t = 500)]
    pub events: usize,
    #[arg(long, default_value_t = 10)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.02)]
    pub density: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving triplets.csv, demographics.csv, truth.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Cap on worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory; defaults to `<output_dir>/<timestamp>-seed<seed>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImputerChoice {
    Graph,
    Knn,
    Frequency,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Trained model; required for the graph imputer.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `0.5` (or any value in (0,1)), `train-frequency`, or `both`.
    #[arg(long, default_value = "both")]
    pub cutoff: String,
    #[arg(long, value_enum, default_value_t = ImputerChoice::Graph)]
    pub imputer: ImputerChoice,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Neighbors listed per event.
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}

/// Exit status for an error: 2 for configuration and usage problems,
/// 1 for everything that fails while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownPolicy(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Split(a) => cmd_split(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::CompareSamplers(a) => cmd_compare_samplers(&a),
        Command::ExportEmbeddings(a) => cmd_export(&a),
    }
}

/// Loads the config, applies flag overrides, and configures the thread pool.
fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(w) = args.workers {
        cfg.runtime.workers = Some(w);
    }
    cfg.validate()?;
    if let Some(w) = cfg.runtime.workers {
        // the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    Ok(cfg)
}

fn create_run_dir(args: &RunArgs, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match &args.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = cfg.output_dir.join(format!("{stamp}-seed{}", cfg.seed));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                n += 1;
                dir = PathBuf::from(format!("{}-{n}", base.display()));
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    log::info!("writing to {}", dir.display());
    Ok(dir)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn seeds_json(cfg: &RunConfig) -> serde_json::Value {
    let train = cfg.train_config().seed;
    json!({
        "seed": cfg.seed,
        "data": cfg.data_seed(),
        "split": cfg.split_spec().seed,
        "train": train,
        "svd": derive_seed(train, "svd", 0),
        "init": derive_seed(train, "init", 0),
    })
}

fn manifest(command: &str, cfg: &RunConfig, extra: serde_json::Value) -> serde_json::Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seeds": seeds_json(cfg),
        "config": cfg,
        "result": extra,
    })
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec { patients: a.patients, events: a.events, rank: a.rank, density: a.density };
    let (data, truth) = generate_synthetic(&spec, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    data.write_triplets(&a.out.join("triplets.csv"))?;
    data.write_demographics(&a.out.join("demographics.csv"))?;
    let mut t = String::from("patient_id,event_id\n");
    for &(i, j) in &truth {
        t.push_str(&format!("{},{}\n", data.patient_id(i), data.event_label(j)));
    }
    std::fs::write(a.out.join("truth.csv"), t)?;
    let mut c = String::from("event_id,category\n");
    for j in 0..data.num_events {
        c.push_str(&format!("{},{}\n", data.event_label(j), data.event_category(j)));
    }
    std::fs::write(a.out.join("event_categories.csv"), c)?;
    println!(
        "{} patients, {} events, {} positives (density {:.4}), {} true positives",
        data.num_patients,
        data.num_events,
        data.num_positives(),
        data.density(),
        truth.len()
    );
    Ok(())
}

fn cmd_split(a: &RunArgs) -> Result<()> {
    let cfg = resolve(a)?;
    let split = pipeline::prepare(&cfg)?;
    let dir = create_run_dir(a, &cfg)?;
    split.train.write_triplets(&dir.join("train_triplets.csv"))?;
    split.train.write_demographics(&dir.join("train_demographics.csv"))?;
    split.test_visible.write_triplets(&dir.join("test_visible_triplets.csv"))?;
    split.test_visible.write_demographics(&dir.join("test_demographics.csv"))?;
    let mut h = String::from("patient_id,event_id\n");
    for &(i, j) in &split.test_heldout {
        h.push_str(&format!("{},{}\n", split.test_visible.patient_id(i), split.test_visible.event_label(j)));
    }
    std::fs::write(dir.join("test_heldout.csv"), h)?;
    let text = split.manifest(&cfg.split_spec());
    std::fs::write(dir.join("split_manifest.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = resolve(a)?;
    let split = pipeline::prepare(&cfg)?;
    let dir = create_run_dir(a, &cfg)?;
    std::fs::write(dir.join("split_manifest.txt"), split.manifest(&cfg.split_spec()))?;

    let start = Instant::now();
    let mut log = String::from(EpochStats::CSV_HEADER);
    log.push('\n');
    let (state, stats) = pipeline::train_model(&cfg, &split, |s| {
        log.push_str(&s.csv_row());
        log.push('\n');
        if s.epoch % 20 == 0 {
            log::info!("epoch {:>4}  loss {:.5}", s.epoch, s.loss);
        }
    })?;
    let elapsed = start.elapsed().as_secs_f64();
    std::fs::write(dir.join("train_log.csv"), log)?;
    checkpoint::save(&state.model, &dir.join("checkpoint.bin"))?;
    let final_loss = stats.last().map(|s| s.loss);
    let relaxed = stats.iter().filter(|s| s.relaxed).count();
    write_json(
        &dir.join("manifest.json"),
        &manifest(
            "train",
            &cfg,
            json!({
                "epochs": stats.len(),
                "final_loss": final_loss,
                "relaxed_batches": relaxed,
                "train_patients": split.train.num_patients,
                "events": split.train.num_events,
                "wall_time_s": elapsed,
            }),
        ),
    )?;
    println!(
        "trained {} epochs in {elapsed:.1}s, final loss {}; run directory {}",
        stats.len(),
        final_loss.map(|l| format!("{l:.6}")).unwrap_or_else(|| "n/a".into()),
        dir.display()
    );
    Ok(())
}

fn parse_cutoffs(s: &str) -> Result<Vec<CutoffPolicy>> {
    if s.trim() == "both" {
        Ok(vec![CutoffPolicy::Fixed(0.5), CutoffPolicy::TrainFrequency])
    } else {
        Ok(vec![s.parse()?])
    }
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let policies = parse_cutoffs(&a.cutoff)?;
    let kinds: Vec<ImputerKind> = match a.imputer {
        ImputerChoice::Graph => vec![ImputerKind::Graph],
        ImputerChoice::Knn => vec![ImputerKind::Knn],
        ImputerChoice::Frequency => vec![ImputerKind::Frequency],
        ImputerChoice::All => ImputerKind::ALL.to_vec(),
    };
    if kinds.contains(&ImputerKind::Graph) && a.checkpoint.is_none() {
        return Err(Error::Config("--checkpoint is required for the graph imputer".into()));
    }
    let cfg = resolve(&a.run)?;
    let model = a.checkpoint.as_deref().map(checkpoint::load).transpose()?;
    let split = pipeline::prepare(&cfg)?;
    let dir = create_run_dir(&a.run, &cfg)?;

    let mut evaluations: Vec<Evaluation> = Vec::new();
    for kind in kinds {
        let ev = match kind {
            ImputerKind::Graph => pipeline::evaluate_graph(model.as_ref().expect("checked above"), &split, &policies)?,
            ImputerKind::Knn => pipeline::evaluate_knn(cfg.knn, &split, &policies)?,
            ImputerKind::Frequency => pipeline::evaluate_frequency(&split, &policies)?,
        };
        evaluations.push(ev);
    }

    let labels: Vec<String> = (0..split.train.num_events).map(|j| split.train.event_label(j)).collect();
    for ev in &evaluations {
        for r in &ev.reports {
            let stem = format!("{}_{}", ev.imputer, r.policy.label());
            std::fs::write(dir.join(format!("per_event_{stem}.csv")), r.per_event_csv(Some(&labels)))?;
            std::fs::write(dir.join(format!("bins_{stem}.csv")), r.bins_csv())?;
        }
    }
    std::fs::write(dir.join("summary.csv"), pipeline::summary_csv(&evaluations))?;
    let rows: Vec<serde_json::Value> = evaluations
        .iter()
        .flat_map(|ev| {
            ev.reports.iter().map(move |r| {
                json!({
                    "method": ev.imputer,
                    "cutoff": r.policy.label(),
                    "summary": r.summary,
                    "runtime_s": ev.runtime_s,
                    "scores_per_second": ev.scores_per_second,
                })
            })
        })
        .collect();
    write_json(&dir.join("summary.json"), &json!(rows))?;
    write_json(
        &dir.join("manifest.json"),
        &manifest(
            "evaluate",
            &cfg,
            json!({ "checkpoint": a.checkpoint, "cutoff": a.cutoff, "test_patients": split.test_visible.num_patients }),
        ),
    )?;
    print!("{}", pipeline::summary_table(&evaluations));
    Ok(())
}

fn cmd_compare_samplers(a: &RunArgs) -> Result<()> {
    let cfg = resolve(a)?;
    let split = pipeline::prepare(&cfg)?;
    let dir = create_run_dir(a, &cfg)?;
    let cmp = pipeline::compare_samplers(&cfg, &split, CutoffPolicy::Fixed(0.5), |sampler, s| {
        if s.epoch % 20 == 0 {
            log::info!("{sampler} epoch {:>4}  loss {:.5}", s.epoch, s.loss);
        }
    })?;

    std::fs::write(dir.join("config_uniform.toml"), cmp.uniform_config.to_toml())?;
    std::fs::write(dir.join("config_degree_preserving.toml"), cmp.balanced_config.to_toml())?;
    std::fs::write(dir.join("bias_profile.csv"), cmp.profile.to_csv())?;
    let labels: Vec<String> = (0..split.train.num_events).map(|j| split.train.event_label(j)).collect();
    let degrees = split.train.event_counts();
    for (table, ev) in cmp.marginals.iter().zip([&cmp.uniform, &cmp.balanced]) {
        let name = table.sampler.to_string();
        std::fs::write(dir.join(format!("marginals_{name}.csv")), table.to_csv(&degrees, &labels))?;
        std::fs::write(dir.join(format!("per_event_{name}.csv")), ev.reports[0].per_event_csv(Some(&labels)))?;
    }
    let summary = json!({
        "spearman_uniform": cmp.profile.spearman_uniform,
        "spearman_degree_preserving": cmp.profile.spearman_balanced,
        "spearman_gap": cmp.profile.spearman_gap(),
        "bins": cmp.profile.bins,
        "final_loss_uniform": cmp.uniform_stats.last().map(|s| s.loss),
        "final_loss_degree_preserving": cmp.balanced_stats.last().map(|s| s.loss),
    });
    write_json(&dir.join("bias_summary.json"), &summary)?;
    write_json(&dir.join("manifest.json"), &manifest("compare-samplers", &cfg, summary.clone()))?;

    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into());
    println!("spearman(frequency, recall) uniform            {}", fmt(cmp.profile.spearman_uniform));
    println!("spearman(frequency, recall) degree-preserving  {}", fmt(cmp.profile.spearman_balanced));
    print!("{}", cmp.profile.to_csv());
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let cfg = resolve(&a.run)?;
    let model = checkpoint::load(&a.checkpoint)?;
    let split = pipeline::prepare(&cfg)?;
    let (g, demographics) = pipeline::inference_graph(&split)?;
    if model.params.event_embeddings.nrows() != g.num_events() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {} events, data has {}",
            model.params.event_embeddings.nrows(),
            g.num_events()
        )));
    }
    let (_, events) = model.latents(&g, &demographics)?;
    let dir = create_run_dir(&a.run, &cfg)?;
    let labels: Vec<String> = (0..g.num_events()).map(|j| split.train.event_label(j)).collect();
    let categories: Vec<String> = (0..g.num_events()).map(|j| split.train.event_category(j)).collect();
    export_event_embeddings(&events, &labels, &categories, &dir, a.top_k)?;
    println!("wrote {} event embeddings to {}", labels.len(), dir.display());
    Ok(())
}
