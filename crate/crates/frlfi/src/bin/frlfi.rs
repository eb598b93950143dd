use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use frlfi::faultinj::FaultPlan;
use frlfi::fedtrain::{train_federated, TrainConfig};
use frlfi::gridworld::{default_maps, GridMap};
use frlfi::guard::DetectorConfig;
use frlfi::harness::{
    self, report, run_convergence_study, run_inference_sweep, run_mitigation_eval,
    run_training_sweep, train_bundle, ExperimentSpec, Phase,
};

#[derive(Parser)]
#[command(name = "frlfi", about = "Fault-injection studies for federated RL on GridWorld")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a federated bundle and write the per-episode log.
    Train {
        /// TOML experiment spec; only the [train] table is used.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output CSV for the episode log.
        #[arg(long, default_value = "train_log.csv")]
        log: PathBuf,
        /// Enable the training-time guard and write its event log here.
        #[arg(long)]
        guard_log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Episode x BER training-phase fault sweep.
    SweepTrain {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "sweep_train.csv")]
        out: PathBuf,
        /// Also write an SVG heatmap per location next to the CSV.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Inference-phase fault sweep on a freshly trained converged bundle.
    SweepInfer {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "sweep_infer.csv")]
        out: PathBuf,
    },
    /// Episodes-to-recover study after a late ServerState fault.
    Convergence {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "convergence.csv")]
        out: PathBuf,
    },
    /// Training-time mitigation evaluation (guard on, fault injected).
    Mitigate {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "900")]
        fault_episode: usize,
        #[arg(long, default_value = "0.01")]
        ber: f64,
        /// Fault-free control runs for the false-positive count.
        #[arg(long, default_value = "20")]
        clean_runs: usize,
    },
    /// Re-read a result CSV and print the text summary.
    Report {
        #[arg(long)]
        table: PathBuf,
    },
}

fn load_spec(path: &Option<PathBuf>) -> Result<ExperimentSpec, String> {
    match path {
        None => Ok(ExperimentSpec::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| format!("cannot read {}: {e}", p.display()))?;
            toml::from_str(&text).map_err(|e| format!("cannot parse {}: {e}", p.display()))
        }
    }
}

fn maps_for(cfg: &TrainConfig) -> Result<Vec<GridMap>, String> {
    let all = default_maps();
    if cfg.n_agents > all.len() {
        return Err(format!("at most {} agents supported by the bundled maps", all.len()));
    }
    Ok(all.into_iter().take(cfg.n_agents).collect())
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Train { spec, log, guard_log, seed } => {
            let mut spec = load_spec(&spec)?;
            if let Some(s) = seed {
                spec.train.seed = s;
            }
            let maps = maps_for(&spec.train)?;
            let guard_cfg = guard_log.as_ref().map(|_| (DetectorConfig::default(), None));
            let out = train_federated(&spec.train, &maps, FaultPlan::default(), guard_cfg)
                .map_err(|e| e.to_string())?;
            report::write_episode_log_csv(&log, &out.logs).map_err(|e| e.to_string())?;
            if let Some(gpath) = guard_log {
                report::write_guard_events_csv(&gpath, &out.guard_events)
                    .map_err(|e| e.to_string())?;
            }
            let sr = harness::eval_greedy_sr(&out.policies, &maps, spec.train.max_steps)
                .map_err(|e| e.to_string())?;
            println!("trained {} episodes, {} rounds, greedy SR {sr:.4}", spec.train.episodes, out.rounds);
            println!("episode log: {}", log.display());
            Ok(())
        }
        Command::SweepTrain { spec, out, heatmaps } => {
            let mut spec = load_spec(&spec)?;
            spec.phase = Phase::Training;
            let maps = maps_for(&spec.train)?;
            let rows = run_training_sweep(&spec, &maps).map_err(|e| e.to_string())?;
            report::write_rows_csv(&out, &rows).map_err(|e| e.to_string())?;
            if heatmaps {
                for loc in &spec.locations {
                    let slice: Vec<_> =
                        rows.iter().filter(|r| r.location == loc.name()).cloned().collect();
                    let (svg, _) = report::heatmap_svg(&slice, &spec.fault_episodes, &spec.bers);
                    let path = out.with_file_name(format!("heatmap_{}.svg", loc.name()));
                    std::fs::write(&path, svg)
                        .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
                    println!("heatmap: {}", path.display());
                }
            }
            print!("{}", report::text_summary(&rows));
            println!("results: {}", out.display());
            Ok(())
        }
        Command::SweepInfer { spec, out } => {
            let mut spec = load_spec(&spec)?;
            spec.phase = Phase::Inference;
            let maps = maps_for(&spec.train)?;
            let bundle = train_bundle(&spec.train, &maps).map_err(|e| e.to_string())?;
            let rows = run_inference_sweep(&spec, &bundle).map_err(|e| e.to_string())?;
            report::write_rows_csv(&out, &rows).map_err(|e| e.to_string())?;
            print!("{}", report::text_summary(&rows));
            println!("results: {}", out.display());
            Ok(())
        }
        Command::Convergence { spec, out } => {
            let spec = load_spec(&spec)?;
            let maps = maps_for(&spec.train)?;
            let rows = run_convergence_study(&spec, &maps).map_err(|e| e.to_string())?;
            let mut w = csv::Writer::from_path(&out)
                .map_err(|e| format!("cannot write {}: {e}", out.display()))?;
            w.write_record(["ber", "seed", "episodes_to_recover"]).map_err(|e| e.to_string())?;
            for r in &rows {
                w.write_record([
                    r.ber.to_string(),
                    r.seed.to_string(),
                    r.episodes_to_recover.map(|e| e.to_string()).unwrap_or_else(|| "censored".into()),
                ])
                .map_err(|e| e.to_string())?;
                println!(
                    "ber {:>8.0e} seed {}: {}",
                    r.ber,
                    r.seed,
                    r.episodes_to_recover
                        .map(|e| format!("{e} episodes"))
                        .unwrap_or_else(|| "censored".into())
                );
            }
            w.flush().map_err(|e| e.to_string())?;
            println!("results: {}", out.display());
            Ok(())
        }
        Command::Mitigate { spec, fault_episode, ber, clean_runs } => {
            let spec = load_spec(&spec)?;
            let maps = maps_for(&spec.train)?;
            let rep = run_mitigation_eval(
                &spec.train,
                &maps,
                DetectorConfig::default(),
                fault_episode,
                ber,
                clean_runs,
            )
            .map_err(|e| e.to_string())?;
            println!(
                "mitigated run: final SR {:.4}, {} detection(s), {} false positive(s) over {} clean runs",
                rep.final_sr, rep.detections, rep.clean_false_positives, clean_runs
            );
            for e in &rep.guard_events {
                println!("  ep {:>5} {:<12} agent {:<4} {}", e.episode, e.verdict,
                    e.agent.map(|a| a.to_string()).unwrap_or_else(|| "-".into()), e.action_taken);
            }
            Ok(())
        }
        Command::Report { table } => {
            let rows = report::read_rows_csv(&table).map_err(|e| e.to_string())?;
            if rows.is_empty() {
                return Err("result table is empty".into());
            }
            print!("{}", report::text_summary(&rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
