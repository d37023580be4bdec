use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dtppo::config::{load_maps, EvalMode, RunConfig};
use dtppo::error::{ConfigError, HarnessError, PpoError};
use dtppo::harness::{
    apply_ablation, evaluate, export_embeddings, parameter_manifest, replay_metrics, sweep_scenario_count, sweep_table,
    write_embeddings, write_episode_log, AblationFlag,
};
use dtppo::ppo::{checkpoint_path, train};
use dtppo::scenario::save_scenario;
use dtppo_autodiff::Checkpoint;

#[derive(Parser)]
#[command(name = "dtppo", about = "Dual-transformer PPO for multi-UAV navigation")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sequential collection in scenario order.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured train and eval maps as scenario files.
    GenScenarios,
    /// Train on the configured training maps.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Greedy evaluation on the configured eval maps.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate one model per ablation flag.
    Ablate {
        /// Flags to run; all four when omitted.
        #[arg(long = "flag")]
        flags: Vec<String>,
    },
    /// Train on growing prefixes of the training maps.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
        counts: Vec<usize>,
    },
    /// Write temporal embeddings of greedy rollouts as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Use the training maps instead of the eval maps.
        #[arg(long)]
        train_maps: bool,
    },
    /// Recompute a metrics report from an episode log.
    ReplayMetrics {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        zero_shot: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Config(_) => 2,
        HarnessError::Ppo(PpoError::NonFiniteLoss { .. }) => 3,
        _ => 1,
    }
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.into(),
        source,
    })
}

fn mkdir(path: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(path).map_err(|source| HarnessError::Io {
        path: path.into(),
        source,
    })
}

fn json<T: serde::Serialize>(value: &T) -> Result<String, HarnessError> {
    Ok(serde_json::to_string_pretty(value).map_err(PpoError::from)?)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let (mut cfg, base) = match &cli.config {
        Some(p) => (RunConfig::load(p)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= cli.deterministic;
    let out = cli.out_dir.clone();
    mkdir(&out)?;

    match cli.command {
        Command::GenScenarios => {
            let dir = out.join("maps");
            mkdir(&dir)?;
            for m in load_maps(&cfg.train.maps, &base)?.iter().chain(&load_maps(&cfg.eval.maps, &base)?) {
                save_scenario(m, &dir.join(format!("{}.json", m.scenario_id)))?;
                println!("{}", m.scenario_id);
            }
        }
        Command::Train { resume } => {
            let maps = load_maps(&cfg.train.maps, &base)?;
            if maps.is_empty() {
                return Err(ConfigError::Invalid("no training maps configured".into()).into());
            }
            let setup = cfg.setup(&maps);
            let summary = train(&setup, &maps, &cfg.train_options(&out), resume)?;
            println!("updates {} episodes {}", summary.updates, summary.episodes);
        }
        Command::Eval { checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let maps = load_maps(&cfg.eval.maps, &base)?;
            let zero_shot = cfg.mode == EvalMode::ZeroShot;
            let eval = evaluate(&ckpt, &maps, cfg.eval.episodes, cfg.seed, zero_shot, !cfg.deterministic)?;
            write_episode_log(&out.join("episodes.jsonl"), &eval)?;
            write(&out.join("eval_report.json"), &json(&eval.report)?)?;
            let table = eval.report.summary_csv();
            write(&out.join("summary.csv"), &table)?;
            print!("{table}");
        }
        Command::Ablate { flags } => {
            let flags: Vec<AblationFlag> = if flags.is_empty() {
                AblationFlag::ALL.to_vec()
            } else {
                flags
                    .iter()
                    .map(|f| AblationFlag::from_slug(f).ok_or_else(|| ConfigError::Invalid(format!("unknown ablation {f}"))))
                    .collect::<Result<_, _>>()?
            };
            let maps = load_maps(&cfg.train.maps, &base)?;
            let evals = load_maps(&cfg.eval.maps, &base)?;
            for flag in flags {
                let mut run_cfg = cfg.clone();
                run_cfg.model = apply_ablation(&cfg.model, flag).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                let dir = out.join(flag.slug());
                let setup = run_cfg.setup(&maps);
                let summary = train(&setup, &maps, &run_cfg.train_options(&dir), false)?;
                let manifest: Vec<String> = parameter_manifest(&summary.store)
                    .into_iter()
                    .map(|(n, c)| format!("{n} {c}"))
                    .collect();
                write(&dir.join("manifest.txt"), &(manifest.join("\n") + "\n"))?;
                if !evals.is_empty() {
                    let ckpt = Checkpoint::load(&checkpoint_path(&dir))?;
                    let zero_shot = cfg.mode == EvalMode::ZeroShot;
                    let eval = evaluate(&ckpt, &evals, cfg.eval.episodes, cfg.seed, zero_shot, !cfg.deterministic)?;
                    write(&dir.join("summary.csv"), &eval.report.summary_csv())?;
                }
                println!("{} trained {} updates", flag.slug(), summary.updates);
            }
        }
        Command::Sweep { counts } => {
            let pool = load_maps(&cfg.train.maps, &base)?;
            let evals = load_maps(&cfg.eval.maps, &base)?;
            let rows = sweep_scenario_count(&counts, &cfg, &pool, &evals, &out)?;
            write(&out.join("sweep.json"), &json(&rows)?)?;
            let table = sweep_table(&rows);
            write(&out.join("sweep.csv"), &table)?;
            print!("{table}");
        }
        Command::ExportEmbeddings {
            checkpoint,
            steps,
            train_maps,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let refs = if train_maps { &cfg.train.maps } else { &cfg.eval.maps };
            let maps = load_maps(refs, &base)?;
            let table = export_embeddings(&ckpt, &maps, steps, cfg.seed)?;
            write_embeddings(&out.join("embeddings.csv"), &table)?;
            println!("{} rows", table.rows.len());
        }
        Command::ReplayMetrics { log, zero_shot } => {
            let report = replay_metrics(&log, zero_shot)?;
            print!("{}", report.summary_csv());
        }
    }
    Ok(())
}
