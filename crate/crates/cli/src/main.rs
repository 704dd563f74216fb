use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use range_slam::dataset::{read_training_csv, write_frames_csv};
use range_slam::grid::read_map_csv;
use range_slam::metrics::{ate_rmse, map_metrics, CellPolicy};
use range_slam::runner::{
    parse_points_csv, replay, run_compare, run_slam, LocalizerMode, PipelineConfig, RunError, RunReport,
};
use range_slam::sensor::{compute_stats, normalize};
use range_slam::sim::{self, Scenario};
use range_slam::svm::{evaluate, train, Kernel, LabeledSample};

#[derive(Parser)]
#[command(name = "range-slam", version, about = "UWB-only range SLAM: simulate, train, map and localize")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario file (TOML). Defaults to the built-in central-obstacle replica.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a frame stream and write it as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Overrides the scenario identification rate.
        #[arg(long)]
        ident_rate: Option<f64>,
    },
    /// Train the LOS/NLOS classifier from a labeled frame CSV.
    TrainSvm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "gaussian")]
        kernel: KernelArg,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        /// Evenly strided subsample used for training.
        #[arg(long, default_value_t = 2000)]
        max_samples: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run the full pipeline on a simulated or recorded stream.
    Slam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<LocalizerMode>,
        /// Recorded frame CSV to replay instead of simulating.
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        ident_rate: Option<f64>,
    },
    /// Sweep identification rates with both localizer modes.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.99,0.8,0.7,0.6")]
        rates: Vec<f64>,
    },
    /// Score saved outputs against ground truth.
    Evaluate {
        /// Run directory holding trajectory.csv, truth.csv, map.csv and truth_map.csv.
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        truth_map: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "explored-only")]
        policy: PolicyArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Linear,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    ExploredOnly,
    AllCells,
}

fn input(e: impl std::fmt::Display) -> RunError {
    RunError::Input(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> RunError {
    RunError::Runtime(e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, RunError> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_scenario(common: &Common) -> Result<Scenario, RunError> {
    let mut s = match &common.scenario {
        Some(p) => Scenario::load(p).map_err(|e| input(format!("{}: {e}", p.display())))?,
        None => Scenario::central_obstacle(1.0, 0),
    };
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn with_rate(mut s: Scenario, rate: Option<f64>) -> Result<Scenario, RunError> {
    if let Some(r) = rate {
        s.ident_rate = r;
    }
    s.validate().map_err(input)?;
    Ok(s)
}

fn print_report(r: &RunReport) {
    let m = &r.metrics;
    println!("frames: {}", r.frames);
    println!(
        "map ({:?}): accuracy {:.4} recall {:.4} f1 {:.4} (tp {} tn {} fp {} fn {})",
        m.policy, m.accuracy, m.recall, m.f1, m.tp, m.tn, m.fp, m.fn_
    );
    if let Some(ate) = m.ate_rmse_cm {
        println!("ate rmse: {ate:.2} cm");
    }
    for lap in &m.laps {
        if let Some(ate) = lap.ate_rmse_cm {
            println!("  lap {}: ate {ate:.2} cm", lap.lap);
        }
    }
    if let Some(ident) = m.ident_accuracy {
        println!("label agreement: {ident:.4}");
    }
    let t = &r.summary;
    println!(
        "per-frame ms (mean/p95/max): preprocess {:.4}/{:.4}/{:.4} classify {:.4}/{:.4}/{:.4} solve {:.4}/{:.4}/{:.4} map {:.4}/{:.4}/{:.4} total {:.4}/{:.4}/{:.4}",
        t.preprocess.mean_ms, t.preprocess.p95_ms, t.preprocess.max_ms,
        t.classify.mean_ms, t.classify.p95_ms, t.classify.max_ms,
        t.solve.mean_ms, t.solve.p95_ms, t.solve.max_ms,
        t.map_update.mean_ms, t.map_update.p95_ms, t.map_update.max_ms,
        t.total.mean_ms, t.total.p95_ms, t.total.max_ms,
    );
    println!("peak memory estimate: {} bytes", r.peak_memory_estimate_bytes);
    for p in &r.outputs {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Simulate { common, ident_rate } => {
            load_config(common.config.as_deref())?;
            let scenario = with_rate(load_scenario(&common)?, ident_rate)?;
            let frames = sim::run(&scenario).map_err(input)?;
            fs::create_dir_all(&common.out_dir).map_err(runtime)?;
            let path = common.out_dir.join("frames.csv");
            write_frames_csv(&path, &frames).map_err(runtime)?;
            let scenario_path = common.out_dir.join("scenario.toml");
            fs::write(&scenario_path, scenario.to_toml()).map_err(runtime)?;
            println!("{} frames", frames.len());
            println!("wrote {}", path.display());
            println!("wrote {}", scenario_path.display());
        }
        Command::TrainSvm {
            data,
            kernel,
            c,
            gamma,
            max_samples,
            out_dir,
        } => {
            let rows = read_training_csv(&data).map_err(|e| input(format!("{}: {e}", data.display())))?;
            let frames: Vec<_> = rows.iter().map(|(f, _)| *f).collect();
            let stats = compute_stats(&frames).map_err(input)?;
            let samples: Vec<LabeledSample> = rows
                .iter()
                .map(|(f, y)| LabeledSample::from_channels(&normalize(f, &stats), *y))
                .collect();
            let stride = samples.len().div_ceil(max_samples.max(1)).max(1);
            let subset: Vec<LabeledSample> = samples.iter().step_by(stride).copied().collect();
            let kernel = match kernel {
                KernelArg::Linear => Kernel::Linear,
                KernelArg::Gaussian => Kernel::Gaussian { gamma },
            };
            info!("training on {} of {} samples", subset.len(), samples.len());
            let model = train(&subset, kernel, c).map_err(input)?;
            let eval = evaluate(&model, &samples).map_err(runtime)?;
            fs::create_dir_all(&out_dir).map_err(runtime)?;
            let model_path = out_dir.join("model.json");
            model.save(&model_path).map_err(runtime)?;
            let stats_path = out_dir.join("stats.json");
            fs::write(&stats_path, serde_json::to_string_pretty(&stats).map_err(runtime)?).map_err(runtime)?;
            println!(
                "trained on {} samples ({} iterations, converged: {})",
                subset.len(),
                model.iterations,
                model.converged
            );
            println!("accuracy on all {} samples: {:.4}", eval.total(), eval.accuracy());
            println!("wrote {}", model_path.display());
            println!("wrote {}", stats_path.display());
        }
        Command::Slam {
            common,
            mode,
            frames,
            ident_rate,
        } => {
            let mut config = load_config(common.config.as_deref())?;
            if let Some(m) = mode {
                config.mode = m;
            }
            let scenario = with_rate(load_scenario(&common)?, ident_rate)?;
            let report = match frames {
                Some(path) => replay(&config, &scenario, &path, Some(&common.out_dir))?,
                None => run_slam(&config, &scenario, Some(&common.out_dir))?,
            };
            print_report(&report);
        }
        Command::Compare { common, rates } => {
            let config = load_config(common.config.as_deref())?;
            let scenario = load_scenario(&common)?;
            if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
                return Err(input(format!("ident rate {r} outside [0, 1]")));
            }
            let report = run_compare(&config, &scenario, &rates, Some(&common.out_dir))?;
            print!("{}", report.table());
            println!("wrote {}", common.out_dir.join("comparison.json").display());
        }
        Command::Evaluate {
            out_dir,
            trajectory,
            truth,
            map,
            truth_map,
            policy,
        } => {
            let pick = |p: Option<PathBuf>, name: &str| p.unwrap_or_else(|| out_dir.join(name));
            let read = |p: &Path| fs::read_to_string(p).map_err(|e| input(format!("{}: {e}", p.display())));
            let traj_path = pick(trajectory, "trajectory.csv");
            let truth_path = pick(truth, "truth.csv");
            let est = parse_points_csv(&read(&traj_path)?)?;
            let tru = parse_points_csv(&read(&truth_path)?)?;
            let est_map = read_map_csv(&pick(map, "map.csv")).map_err(input)?;
            let tru_map = read_map_csv(&pick(truth_map, "truth_map.csv")).map_err(input)?;
            let policy = match policy {
                PolicyArg::ExploredOnly => CellPolicy::ExploredOnly,
                PolicyArg::AllCells => CellPolicy::AllCells,
            };
            let score = map_metrics(&est_map, &tru_map, policy).map_err(input)?;
            let ate = ate_rmse(&est, &tru).ok();
            let doc = serde_json::json!({
                "policy": policy,
                "tp": score.counts.tp,
                "tn": score.counts.tn,
                "fp": score.counts.fp,
                "fn": score.counts.fn_,
                "accuracy": score.accuracy,
                "recall": score.recall,
                "f1": score.f1,
                "ate_rmse_cm": ate,
            });
            println!("{}", serde_json::to_string_pretty(&doc).map_err(runtime)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
