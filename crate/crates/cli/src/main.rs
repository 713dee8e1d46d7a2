use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use moe_align::pipeline::{compare_runs, run_all, run_stage, PipelineConfig, Stage};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Ablate {
    NoAlign,
    NoTaskExperts,
    NoCiFilter,
    AllLayers,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    GenData,
    Pretrain,
    Categorize,
    Profile,
    Identify,
    Finetune,
    Eval,
    Steer,
    Report,
    Flops,
    /// Every stage except steer, in order.
    All,
}

/// Routing-aligned fine-tuning pipeline for a toy mixture-of-experts model.
#[derive(Debug, Parser)]
#[command(name = "moe-align", version)]
struct Cli {
    /// Pipeline config (JSON); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    /// Fine-tuning seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "k-experts")]
    k_experts: Option<usize>,
    #[arg(long, value_enum)]
    ablate: Vec<Ablate>,
    #[arg(long = "steer-delta")]
    steer_delta: Option<f64>,
    /// Run directory (overrides the config's run_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the effective config to this path and exit.
    #[arg(long = "dump-config")]
    dump_config: Option<PathBuf>,
    /// Compare eval directories (each holding summary.json) and print the table.
    #[arg(long, num_args = 2.., value_name = "DIR")]
    compare: Vec<PathBuf>,
}

fn effective_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(l) = cli.lambda {
        cfg.train.lambda = l;
    }
    if let Some(k) = cli.k_experts {
        cfg.train.k = k;
    }
    for a in &cli.ablate {
        let ab = &mut cfg.train.ablation;
        match a {
            Ablate::NoAlign => ab.no_align = true,
            Ablate::NoTaskExperts => ab.no_task_experts = true,
            Ablate::NoCiFilter => ab.no_ci_filter = true,
            Ablate::AllLayers => ab.all_layers = true,
        }
    }
    if let Some(d) = cli.steer_delta {
        cfg.steer_delta = d;
    }
    if let Some(out) = &cli.out {
        cfg.run_dir = out.clone();
    }
    Ok(cfg)
}

fn stage_of(arg: StageArg) -> Option<Stage> {
    Some(match arg {
        StageArg::GenData => Stage::GenData,
        StageArg::Pretrain => Stage::Pretrain,
        StageArg::Categorize => Stage::Categorize,
        StageArg::Profile => Stage::Profile,
        StageArg::Identify => Stage::Identify,
        StageArg::Finetune => Stage::Finetune,
        StageArg::Eval => Stage::Eval,
        StageArg::Steer => Stage::Steer,
        StageArg::Report => Stage::Report,
        StageArg::Flops => Stage::Flops,
        StageArg::All => return None,
    })
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if !cli.compare.is_empty() {
        let rows = compare_runs(&cli.compare)?;
        println!("method\tacc_src\tacc_tgt\tci\tmid_div\tsel_rate\tgain\tdiv_delta");
        for r in rows {
            println!(
                "{}\t{:.4}\t{:.4}\t{:.4}\t{:.6}\t{:.4}\t{}\t{}",
                r.method,
                r.accuracy_src,
                r.accuracy_tgt,
                r.ci_proportion,
                r.mid_divergence,
                r.selection_rate,
                r.relative_gain.map_or("-".into(), |g| format!("{g:+.4}")),
                r.divergence_delta
                    .map_or("-".into(), |d| format!("{d:+.6}")),
            );
        }
        return Ok(());
    }
    let cfg = effective_config(cli)?;
    if let Some(p) = &cli.dump_config {
        cfg.save(p)?;
        return Ok(());
    }
    let stage = cli
        .stage
        .context("--stage is required (or use --compare / --dump-config)")?;
    match stage_of(stage) {
        Some(s) => {
            let dir = run_stage(s, &cfg)?;
            println!("{s}: wrote {}", dir.display());
        }
        None => {
            for dir in run_all(&cfg)? {
                println!("wrote {}", dir.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
