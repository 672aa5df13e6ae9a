//! `lingprune` command-line interface.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lingprune::model::ModelGraph;
use lingprune::pipeline::{self, Settings};

#[derive(Parser)]
#[command(name = "lingprune", version, about = "One-shot multilingual pruning for Llama-style models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect per-language calibration statistics.
    Calibrate(Opts),
    /// Score, allocate and mask a model; writes pruned weights, masks and reports to --out.
    Prune(Opts),
    /// Per-language perplexity on the corpora listed in --manifest.
    EvalPpl(Opts),
    /// Summarize model, statistics or mask containers.
    Inspect {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Prune and evaluate over a ratio range (and optionally a hyperparameter grid).
    Sweep(Opts),
    /// Write a randomly initialized toy model.
    InitModel(InitOpts),
}

/// Shared flags. Anything unset falls back to --config, then to the defaults.
#[derive(Args, Default)]
struct Opts {
    /// key=value file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    stats: Option<String>,
    /// magnitude | wanda | m-wanda | ria | m-ria [default: m-wanda]
    #[arg(long)]
    criterion: Option<String>,
    /// uniform | owl | cwl [default: cwl]
    #[arg(long)]
    alloc: Option<String>,
    /// Target average sparsity [default: 0.5]
    #[arg(long)]
    ratio: Option<String>,
    /// Variance weight [default: 0.2]
    #[arg(long)]
    lambda: Option<String>,
    /// Activation threshold; 0 disables the probability term [default: 5e-5]
    #[arg(long)]
    eps: Option<String>,
    /// Per-layer deviation bound [default: 0.04]
    #[arg(long)]
    gamma: Option<String>,
    /// RIA activation exponent [default: 0.5]
    #[arg(long)]
    alpha: Option<String>,
    /// OWL outlier multiplier [default: 5]
    #[arg(long = "owl-m")]
    owl_m: Option<String>,
    /// attn | mlp [default: attn]
    #[arg(long = "cwl-block")]
    cwl_block: Option<String>,
    /// row | layer [default: row]
    #[arg(long)]
    grouping: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Tokens per window [default: 2048]
    #[arg(long)]
    window: Option<String>,
    /// Mask container applied before evaluation.
    #[arg(long)]
    masks: Option<String>,
    /// Sweep ratios as start:stop:step or a comma list [default: 0.3:0.7:0.05]
    #[arg(long)]
    ratios: Option<String>,
    /// Sweep the lambda / eps / gamma / cwl-block grid.
    #[arg(long)]
    grid: bool,
}

impl Opts {
    fn settings(&self) -> Result<Settings> {
        let file = match &self.config {
            Some(p) => Settings::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => Settings::default(),
        };
        let mut flags = Settings::default();
        for (key, value) in [
            ("model", &self.model),
            ("stats", &self.stats),
            ("criterion", &self.criterion),
            ("alloc", &self.alloc),
            ("ratio", &self.ratio),
            ("lambda", &self.lambda),
            ("eps", &self.eps),
            ("gamma", &self.gamma),
            ("alpha", &self.alpha),
            ("owl-m", &self.owl_m),
            ("cwl-block", &self.cwl_block),
            ("grouping", &self.grouping),
            ("seed", &self.seed),
            ("manifest", &self.manifest),
            ("out", &self.out),
            ("window", &self.window),
            ("masks", &self.masks),
            ("ratios", &self.ratios),
        ] {
            if let Some(v) = value {
                flags.set(key, v.clone());
            }
        }
        if self.grid {
            flags.set("grid", "true");
        }
        Ok(file.overlay(&flags))
    }
}

#[derive(Args)]
struct InitOpts {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long = "d-model", default_value_t = 8)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long = "d-ff", default_value_t = 16)]
    d_ff: usize,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Calibrate(opts) => {
            let config = opts.settings()?.calibrate_config()?;
            anyhow::ensure!(config.out.is_some(), "calibrate needs --out");
            let c = pipeline::cmd_calibrate(&config)?;
            println!(
                "wrote statistics for {} to {}",
                c.meta("languages").unwrap_or_default(),
                config.out.as_ref().expect("checked").display()
            );
        }
        Command::Prune(opts) => {
            let config = opts.settings()?.prune_config()?;
            anyhow::ensure!(config.out.is_some(), "prune needs --out");
            let outcome = pipeline::cmd_prune(&config)?;
            print!("{}", outcome.layer_table());
            let bad = outcome.report.violations();
            anyhow::ensure!(bad == 0, "{bad} layer(s) violate their target ratio; see verify.txt");
        }
        Command::EvalPpl(opts) => {
            let table = pipeline::cmd_eval_ppl(&opts.settings()?.eval_config()?)?;
            print!("{}", table.to_text());
        }
        Command::Inspect { paths } => print!("{}", pipeline::cmd_inspect(&paths)?),
        Command::Sweep(opts) => {
            let config = opts.settings()?.sweep_config()?;
            let result = pipeline::cmd_sweep(&config)?;
            for s in &result.skipped {
                eprintln!("skipped {s}");
            }
            if config.out.is_none() {
                print!("{}", result.to_csv());
            }
        }
        Command::InitModel(o) => {
            let graph = ModelGraph::new(o.vocab, o.d_model, o.layers, o.heads, o.d_ff)?;
            graph.random_weights(o.seed).save(&o.out)?;
            println!("wrote {}", o.out.display());
        }
    }
    Ok(())
}
