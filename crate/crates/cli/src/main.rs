use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use eog_core::llm::TemplateSet;
use eog_core::pipeline::{load_dataset, Ablation, Pipeline, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "eog", version, about = "Enrich-on-Graph question answering pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset JSONL
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Directory for stage artifacts
    #[arg(long, global = true, default_value = "eog-out")]
    stage_dir: PathBuf,
    #[arg(long, global = true)]
    top_k: Option<usize>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Skip records that already have completion markers
    #[arg(long, global = true)]
    resume: bool,
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Command {
    /// Decompose each question into a query tree
    Parse,
    /// Keep the top-k triples per question
    Prune,
    /// Add structural and ontology triples to each pruned graph
    Enrich,
    /// Answer each question over its enriched graph
    Answer,
    /// Score answers and write report.json
    Eval,
    /// Graph-quality metrics for the original, pruned and enriched graphs
    Metrics,
    /// Answer coverage and token cost over several k
    SweepK {
        #[arg(long, value_delimiter = ',', default_values_t = [10, 50, 100, 200, 300, 400, 500])]
        ks: Vec<usize>,
    },
    /// Reciprocal rank of answer triples per scoring channel
    Mrr,
    /// Per-question calls, tokens and cost from the ledger
    CostReport,
    /// All stages end to end
    Run,
    /// Write the built-in prompt templates to a directory
    Templates { out: PathBuf },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(k) = common.top_k {
        cfg.k = k;
    }
    if let Some(t) = common.temperature {
        cfg.temperature = t;
    }
    if let Some(a) = common.ablation {
        cfg.ablation = a;
    }
    cfg.resume |= common.resume;
    cfg.validate()?;
    Ok(cfg)
}

fn pipeline(common: &Common) -> Result<Pipeline> {
    let cfg = load_config(common)?;
    let Some(path) = &common.dataset else { bail!("--dataset is required") };
    let dataset = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    Ok(Pipeline::new(cfg, dataset, &common.stage_dir)?.with_dataset_name(name))
}

fn print_json(value: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn stage(common: &Common, stage: Stage) -> Result<()> {
    let p = pipeline(common)?;
    let artifact = p.run_stage(stage)?;
    println!("{}: {} records, {} errors -> {}", stage, artifact.records, artifact.errors, artifact.path.display());
    if stage == Stage::Report {
        print_json(serde_json::to_value(p.read_report()?)?)?;
    }
    Ok(())
}

fn write_templates(out: &Path) -> Result<()> {
    TemplateSet::builtin().write_to(out).with_context(|| format!("writing templates to {}", out.display()))?;
    println!("templates written to {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let common = &cli.common;
    match &cli.command {
        Command::Parse => stage(common, Stage::Parsed),
        Command::Prune => stage(common, Stage::Pruned),
        Command::Enrich => stage(common, Stage::Enriched),
        Command::Answer => stage(common, Stage::Answers),
        Command::Eval => stage(common, Stage::Report),
        Command::Metrics => print_json(serde_json::to_value(pipeline(common)?.quality()?)?),
        Command::SweepK { ks } => {
            let rows = pipeline(common)?.sweep_k(ks)?;
            println!("k,coverage,tokens,cost");
            for r in rows {
                println!("{},{},{},{}", r.k, r.coverage, r.tokens, r.cost);
            }
            Ok(())
        }
        Command::Mrr => print_json(serde_json::to_value(pipeline(common)?.mrr()?)?),
        Command::CostReport => {
            let p = pipeline(common)?;
            let report = p.cost_report();
            std::fs::write(
                common.stage_dir.join(eog_core::pipeline::COST_REPORT),
                serde_json::to_vec_pretty(&report)?,
            )?;
            print!("{}", report.render_table(&format!("EoG ({})", p.config().ablation)));
            Ok(())
        }
        Command::Run => {
            let p = pipeline(common)?;
            let summary = p.run_all()?;
            let r = &summary.report;
            println!(
                "n={} hits1={:.4} f1={:.4} precision={:.4} recall={:.4} acc={:.4} calls={} tokens={}",
                r.n,
                r.hits1,
                r.f1,
                r.precision,
                r.recall,
                r.acc,
                summary.ledger.totals.calls,
                summary.ledger.totals.total_tokens()
            );
            Ok(())
        }
        Command::Templates { out } => write_templates(out),
    }
}
