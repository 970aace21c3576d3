use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use emoctrl::harness::{
    ablation_label, ensure_dataset, ensure_diffusion, ensure_probes, ensure_samples,
    ensure_text_model, evaluate_samples, render_report, run_ablation, run_multi_emotion,
    run_pipeline, run_visualization, RunConfig,
};
use emoctrl::synthworld::{import_quadruplets, save_dataset};

#[derive(Parser)]
#[command(name = "emoctrl", about = "Emotion-conditioned caption and image pipeline")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the labeled dataset.
    GenData,
    /// Import an existing quadruplet dataset directory into the run.
    ImportData {
        #[arg(long)]
        from: PathBuf,
    },
    /// Pretrain the captioner, then fit its emotion tokens and adapters.
    TrainText,
    /// Train the emotion-conditioned denoiser.
    TrainDiffusion,
    /// Generate the inference set under the config's token flags.
    Sample,
    /// Run every stage end to end.
    Run,
    /// Four-way token ablation with a comparison table.
    Ablate,
    /// Emotion-token grid: rows are emotions, columns are seeds.
    Visualize {
        #[arg(long, default_value_t = 8)]
        grid_seeds: usize,
    },
    /// Generate from blended emotions; repeat --weights for several sets.
    Mix {
        /// Eight comma-separated weights summing to one.
        #[arg(long, required = true)]
        weights: Vec<String>,
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Score the sampled images with the gated probes.
    Eval,
    /// Render metrics.csv as markdown, optionally with bar charts.
    Report {
        #[arg(long)]
        charts: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_weights(raw: &str) -> Result<[f64; 8]> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 8 {
        bail!("--weights needs exactly 8 comma-separated values, got {}", parts.len());
    }
    let mut w = [0.0; 8];
    for (i, p) in parts.iter().enumerate() {
        w[i] = p.trim().parse().with_context(|| format!("weight {:?}", p))?;
    }
    Ok(w)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData => {
            ensure_dataset(&cfg)?;
        }
        Command::ImportData { from } => {
            let ds = import_quadruplets(from)
                .with_context(|| format!("importing {}", from.display()))?;
            save_dataset(&ds, &cfg.out_dir.join("data"))?;
            println!(
                "[data] imported {} train / {} test into {}",
                ds.train.len(),
                ds.test.len(),
                cfg.out_dir.join("data").display()
            );
        }
        Command::TrainText => {
            let ds = ensure_dataset(&cfg)?;
            ensure_text_model(&cfg, &ds)?;
        }
        Command::TrainDiffusion => {
            let ds = ensure_dataset(&cfg)?;
            ensure_diffusion(&cfg, &ds)?;
        }
        Command::Sample => {
            let ds = ensure_dataset(&cfg)?;
            let text = ensure_text_model(&cfg, &ds)?;
            let model = ensure_diffusion(&cfg, &ds)?;
            ensure_samples(&cfg, &text, &model, cfg.ablation)?;
        }
        Command::Run => {
            let out = run_pipeline(&cfg)?;
            println!("run complete: {}", out.display());
        }
        Command::Ablate => {
            run_ablation(&cfg)?;
        }
        Command::Visualize { grid_seeds } => {
            run_visualization(&cfg, *grid_seeds)?;
        }
        Command::Mix { weights, samples } => {
            let sets: Vec<[f64; 8]> =
                weights.iter().map(|w| parse_weights(w)).collect::<Result<_>>()?;
            let out = run_multi_emotion(&cfg, &sets, *samples)?;
            for (set, spec) in out.sets.iter().zip(&sets) {
                println!("weights {:?}:", spec);
                for s in &set.samples {
                    println!("  {} top2 [{}, {}]  {:?}", s.image, s.top2[0], s.top2[1], s.caption);
                }
            }
        }
        Command::Eval => {
            let ds = ensure_dataset(&cfg)?;
            let text = ensure_text_model(&cfg, &ds)?;
            let model = ensure_diffusion(&cfg, &ds)?;
            let batch = ensure_samples(&cfg, &text, &model, cfg.ablation)?;
            let probes = ensure_probes(&cfg, &ds)?;
            evaluate_samples(&cfg, &probes, &batch, ablation_label(cfg.ablation))?;
        }
        Command::Report { charts } => {
            let md = render_report(&cfg, *charts)?;
            println!("{md}");
        }
    }
    Ok(())
}
