use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsap_core::harness::{ablate, run, sweep, ExperimentConfig};
use gsap_core::model::Ablation;
use gsap_core::synth::{generate_synthetic, SynthConfig};
use gsap_core::verify::run_all;
use gsap_core::{GsapError, Result};

#[derive(Parser)]
#[command(name = "gsap", version, about = "Graph-guided prompting for multiple-choice commonsense QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment configuration (JSON); defaults to the synthetic desk setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prompt positions per prompting layer.
    #[arg(long)]
    prompt_length: Option<usize>,
    /// Number of prompted encoder layers.
    #[arg(long)]
    prompt_layers: Option<usize>,
    /// Write pruned dev graphs as JSON into this directory.
    #[arg(long)]
    dump_graph: Option<PathBuf>,
    /// Overrides the model, training and synthetic-data seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Report destination; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run {
        #[command(flatten)]
        common: Common,
        /// Metric log destination (JSONL).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate a synthetic dataset and knowledge files.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training instances.
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        dev: usize,
        #[arg(long, default_value_t = 4)]
        choices: usize,
        #[arg(long, default_value_t = 400)]
        kg_size: usize,
        #[arg(long, default_value = "synthetic")]
        out_dir: PathBuf,
    },
    /// Run ablation variants; each `--flags` value is one comma-separated variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        flags: Vec<String>,
        /// Also run the unablated model.
        #[arg(long)]
        with_full: bool,
    },
    /// Sweep the prompt length.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
        prompt_lengths: Vec<usize>,
    },
    /// Run the numerical self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(k) = c.prompt_length {
        cfg.model.prompt_length = k;
    }
    if c.prompt_layers.is_some() {
        cfg.model.prompt_layers = c.prompt_layers;
    }
    if let Some(s) = c.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
        if let Some(syn) = &mut cfg.synthetic {
            syn.seed = s;
        }
    }
    if c.max_steps.is_some() {
        cfg.train.max_steps = c.max_steps;
    }
    if c.dump_graph.is_some() {
        cfg.dump_graphs = c.dump_graph.clone();
    }
    Ok(cfg)
}

/// Parses `no_prompt,no_hmpr`-style flag lists; `kg=conceptnet+dictionary`
/// restricts knowledge sources.
fn parse_flags(spec: &str) -> Result<Ablation> {
    let mut obj = serde_json::Map::new();
    for f in spec.split(',').map(str::trim).filter(|f| !f.is_empty()) {
        if let Some(list) = f.strip_prefix("kg=") {
            let sources: Vec<serde_json::Value> = list.split('+').map(|s| s.trim().to_lowercase().into()).collect();
            obj.insert("kg_sources".into(), sources.into());
        } else {
            obj.insert(f.to_string(), true.into());
        }
    }
    let ab: Ablation = serde_json::from_value(obj.into())
        .map_err(|e| GsapError::Config(format!("bad ablation flags {spec:?}: {e}")))?;
    ab.validate()?;
    Ok(ab)
}

fn emit(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| GsapError::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn main_inner(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { common, log } => {
            let report = run(&config(&common)?)?;
            if let Some(p) = log {
                let lines: String =
                    report.log.iter().map(|e| serde_json::to_string(e).map(|s| s + "\n")).collect::<Result<_, _>>()?;
                std::fs::write(&p, lines).map_err(|e| GsapError::io(&p, e))?;
            }
            emit(&report, common.out.as_deref())?;
        }
        Command::Synth { seed, n, dev, choices, kg_size, out_dir } => {
            if n == 0 || choices < 2 {
                return Err(GsapError::Config("synth needs n >= 1 and at least two choices".into()));
            }
            let data = generate_synthetic(&SynthConfig { seed, n_train: n, n_dev: dev, choices, kg_size, ..SynthConfig::default() });
            data.write(&out_dir)?;
            eprintln!("wrote {} train / {} dev instances to {}", data.train.len(), data.dev.len(), out_dir.display());
        }
        Command::Ablate { common, flags, with_full } => {
            let mut variants = Vec::new();
            if with_full {
                variants.push(Ablation::default());
            }
            for f in &flags {
                variants.push(parse_flags(f)?);
            }
            let reports = ablate(&config(&common)?, &variants)?;
            emit(&reports, common.out.as_deref())?;
        }
        Command::Sweep { common, prompt_lengths } => {
            let report = sweep(&config(&common)?, &prompt_lengths)?;
            emit(&report, common.out.as_deref())?;
        }
        Command::Verify { seed } => {
            let checks = run_all(seed);
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
