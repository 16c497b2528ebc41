use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use curator::corpus::{save_corpus, synth_corpus, SynthSpec};
use curator::flops::{flops_method_terms, FlopsConstants, SelectionMethod};
use curator::report::{
    anchors_and_eval, artifact_header, load_experiment_corpus, load_summary, offline_scores, parse_config,
    run_experiment, run_suite, write_frontier_file, ExperimentConfig, PolicyConfig, SCORES_FILE,
    SUMMARY_FILE,
};
use curator::scoring::{write_score_dump, Bm25Params};
use curator::tinymodel::ModelState;
use curator::{CuratorError, Result};

#[derive(Parser)]
#[command(name = "curator", version, about = "Online data reweighting and curation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config (repeatable for `suite` and `report`)
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    /// Output directory (overrides the config's `output`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `train.seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing artifacts
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic two-domain corpus as JSONL
    Synth(Common),
    /// Score the training corpus with the initial model as proxy
    Score(Common),
    /// Run one experiment
    Train(Common),
    /// Run several experiments and write the FLOPs/loss frontier
    Suite {
        #[command(flatten)]
        common: Common,
        /// Run member experiments concurrently
        #[arg(long)]
        parallel: bool,
    },
    /// Closed-form FLOPs per curation method
    Flops(Common),
    /// Frontier table from finished runs
    Report(Common),
}

/// Config of the `flops` subcommand.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlopsConfig {
    constants: FlopsConstants,
    #[serde(default)]
    methods: Option<Vec<SelectionMethod>>,
}

#[derive(Serialize)]
struct MethodRow {
    method: SelectionMethod,
    prep: u128,
    train: u128,
    total: u128,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CuratorError::config(path.display().to_string(), format!("cannot read: {e}")))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| CuratorError::config(e.path().to_string(), e.inner().to_string()))
}

fn write_new(path: &Path, contents: &str, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CuratorError::ArtifactExists(path.to_path_buf()));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn experiment(path: &Path, common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(path)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn single(common: &Common) -> Result<&Path> {
    match common.config.as_slice() {
        [one] => Ok(one),
        _ => Err(CuratorError::config("--config", "this subcommand takes exactly one config")),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let spec: SynthSpec = read_json(single(&common)?)?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("."));
            let path = out.join("corpus.jsonl");
            if path.exists() && !common.force {
                return Err(CuratorError::ArtifactExists(path));
            }
            fs::create_dir_all(&out)?;
            save_corpus(&synth_corpus(&spec), &path)?;
            println!("{}", path.display());
        }
        Command::Score(common) => {
            let cfg = experiment(single(&common)?, &common)?;
            let (kind, bm25) = match &cfg.policy {
                PolicyConfig::Online(p) => (p.scorer, p.bm25),
                PolicyConfig::Selection { scorer, bm25, .. } => (*scorer, *bm25),
                _ => {
                    return Err(CuratorError::config("policy", "score needs an online or selection policy"));
                }
            };
            let (train, val) = load_experiment_corpus(&cfg)?;
            let (anchors, _) = anchors_and_eval(&cfg, &val)?;
            let proxy = ModelState::init(&cfg.model, cfg.init_seed());
            let bm25 = if kind == curator::scoring::ScoreKind::Bm25 { bm25 } else { Bm25Params::default() };
            let (scores, prep) = offline_scores(kind, &proxy, &train, &anchors, bm25)?;
            let mut header = artifact_header(cfg.policy.resolved_gate().as_ref());
            header.push(format!("scores: proxy model at step 0; preprocessing flops {prep}"));
            let path = cfg.output.join(SCORES_FILE);
            if path.exists() && !common.force {
                return Err(CuratorError::ArtifactExists(path));
            }
            fs::create_dir_all(&cfg.output)?;
            let rows = train.documents.iter().zip(&scores.scores).map(|(d, &s)| (d.id.as_str(), s, 0));
            write_score_dump(fs::File::create(&path)?, &header, kind, rows)?;
            println!("{}", path.display());
        }
        Command::Train(common) => {
            let cfg = experiment(single(&common)?, &common)?;
            let summary = run_experiment(&cfg, common.force)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Suite { common, parallel } => {
            let configs = common
                .config
                .iter()
                .map(|p| {
                    let mut cfg = parse_config(p)?;
                    if let Some(seed) = common.seed {
                        cfg.train.seed = seed;
                    }
                    Ok(cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let rows = run_suite(&configs, &out, common.force, parallel)?;
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
        Command::Flops(common) => {
            let fc: FlopsConfig = read_json(single(&common)?)?;
            let methods = fc.methods.unwrap_or_else(|| SelectionMethod::ALL.to_vec());
            let rows: Vec<MethodRow> = methods
                .into_iter()
                .map(|method| {
                    let (prep, train) = flops_method_terms(method, &fc.constants);
                    MethodRow { method, prep, train, total: prep + train }
                })
                .collect();
            let text = serde_json::to_string_pretty(&rows)?;
            if let Some(out) = &common.out {
                write_new(&out.join("flops.json"), &format!("{text}\n"), common.force)?;
            }
            println!("{text}");
        }
        Command::Report(common) => {
            let summaries = common
                .config
                .iter()
                .map(|p| {
                    let cfg = parse_config(p)?;
                    load_summary(cfg.output.join(SUMMARY_FILE))
                })
                .collect::<Result<Vec<_>>>()?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let rows = write_frontier_file(&out, &summaries, common.force)?;
            println!("{:<24} {:>24} {:>12} {:>12} pareto", "policy", "total_flops", "val_loss", "val_ppl");
            for r in rows {
                println!(
                    "{:<24} {:>24} {:>12.6} {:>12.4} {}",
                    r.policy,
                    r.total_flops,
                    r.val_loss,
                    r.val_ppl,
                    if r.pareto { "*" } else { "" }
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("CURATOR_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                // only fails if a pool already exists, which cannot happen here
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: CURATOR_THREADS must be a positive integer, got {n:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
