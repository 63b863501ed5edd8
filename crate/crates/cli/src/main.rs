mod store;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use zson_core::evalharness::{
    ablation_matrix, ablation_table, distance_table, eval_splits, gt_cls_table, random_report, split_table, traces_jsonl,
    AblationFlags, RunConfig, RunReport, SeedRun, TraceLine, PRESETS,
};

use store::Store;

#[derive(Parser)]
#[command(name = "zson", version, about = "Zero-shot object navigation on a seeded grid world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run only this seed instead of every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration as JSON; defaults apply to missing fields. Without
    /// it the snapshot in the output directory is used if there is one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Ablation preset with optional `key=bool` overrides, e.g. `full,use_gt_cls=true`.
    #[arg(long, global = true, default_value = "full")]
    flags: String,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the class split and scene sets.
    GenScenes,
    /// Train the target feature generator.
    PretrainTfg,
    /// Pretrain the unlabeled-object identifier.
    PretrainUoi,
    /// Meta-train an agent with the given flags.
    Train,
    /// Evaluate trained agents on every split; `--flags random` scores the random policy.
    Eval {
        /// Also write per-step traces.
        #[arg(long)]
        traces: bool,
    },
    /// Train and evaluate every ablation preset.
    Ablate {
        /// Comma-separated presets; all by default.
        #[arg(long)]
        presets: Option<String>,
    },
    /// Collect evaluation reports into tables.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => {
            let snap = cli.out.join("config.json");
            if snap.exists() {
                serde_json::from_str(&std::fs::read_to_string(&snap)?).with_context(|| format!("parsing {}", snap.display()))?
            } else {
                RunConfig::default()
            }
        }
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let store = Store::open(&cli.out, &cfg)?;
    match &cli.command {
        Command::GenScenes => {
            for &seed in &cfg.seeds {
                store.scenes(seed)?;
            }
        }
        Command::PretrainTfg => {
            for &seed in &cfg.seeds {
                store.tfg(seed)?;
            }
        }
        Command::PretrainUoi => {
            for &seed in &cfg.seeds {
                let (_, report) = store.uoi(seed)?;
                eprintln!("seed {seed}: held-out ISR {:.4} at epoch {}", report.isr[report.best_epoch - 1], report.best_epoch);
            }
        }
        Command::Train => {
            let flags = AblationFlags::parse(&cli.flags)?;
            for &seed in &cfg.seeds {
                let world = store.world(seed)?;
                store.checkpoint(seed, &world, flags)?;
            }
        }
        Command::Eval { traces } => {
            let label = Store::label(&cli.flags);
            let worlds = cfg.seeds.iter().map(|&s| Ok((s, store.world(s)?))).collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = worlds.iter().map(|(s, w)| (*s, w)).collect();
            let mut lines: Vec<TraceLine> = Vec::new();
            let report = if cli.flags == "random" {
                random_report(&refs, &cfg)?
            } else {
                let flags = AblationFlags::parse(&cli.flags)?;
                let cks = worlds.iter().map(|(s, w)| store.checkpoint(*s, w, flags)).collect::<Result<Vec<_>>>()?;
                let runs: Vec<SeedRun> = worlds
                    .iter()
                    .zip(&cks)
                    .map(|((seed, world), checkpoint)| SeedRun { seed: *seed, world, checkpoint })
                    .collect();
                eval_splits(&runs, &cfg, flags, &label, traces.then_some(&mut lines))?
            };
            store.write(&format!("report-{label}.json"), &report.to_json()?)?;
            store.write(&format!("metrics-{label}.csv"), &split_table(&[&report])?)?;
            if *traces {
                store.write(&format!("traces-{label}.jsonl"), &traces_jsonl(&lines)?)?;
            }
            for s in &report.splits {
                eprintln!("{label} {}: SR {:.4} ± {:.4}, SPL {:.4} ± {:.4}", s.split.name(), s.sr_mean, s.sr_std, s.spl_mean, s.spl_std);
            }
        }
        Command::Ablate { presets } => {
            let names: Vec<&str> = match presets {
                Some(p) => p.split(',').map(str::trim).filter(|s| !s.is_empty()).collect(),
                None => PRESETS.to_vec(),
            };
            let worlds = cfg.seeds.iter().map(|&s| Ok((s, store.world(s)?))).collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = worlds.iter().map(|(s, w)| (*s, w)).collect();
            let report = ablation_matrix(&refs, &cfg, &names)?;
            let rows: Vec<&RunReport> = report.rows.iter().collect();
            store.write("ablation.json", &serde_json::to_string_pretty(&report)?)?;
            store.write("ablation.csv", &ablation_table(&rows)?)?;
        }
        Command::Report => {
            let reports = store.reports()?;
            if reports.is_empty() {
                bail!("no report-*.json files in {}", cli.out.display());
            }
            let rows: Vec<&RunReport> = reports.iter().collect();
            store.write("table_splits.csv", &split_table(&rows)?)?;
            store.write("table_distance.csv", &distance_table(&rows)?)?;
            store.write("table_gt_cls.csv", &gt_cls_table(&rows)?)?;
            let learned: Vec<&RunReport> = rows.iter().copied().filter(|r| r.flags.is_some()).collect();
            store.write("table_ablation.csv", &ablation_table(&learned)?)?;
        }
    }
    Ok(())
}
