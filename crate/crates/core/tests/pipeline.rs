use std::fs;
use std::path::Path;

use range_slam::dataset::{frames_csv_string, write_frames_csv};
use range_slam::runner::{replay, run_compare, run_frames, run_slam, LocalizerMode, PipelineConfig, RunError};
use range_slam::sensor::{compute_stats, normalize};
use range_slam::sim::{self, LabelMode, Scenario};
use range_slam::svm::{train, Kernel, LabeledSample};

fn partial(rate: f64, seed: u64, laps: f64) -> Scenario {
    let mut s = Scenario::central_obstacle(rate, seed);
    s.agents[0].laps = Some(laps);
    s
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn two_lap_run_covers_every_frame() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = Scenario::central_obstacle(0.99, 0);
    let report = run_slam(&PipelineConfig::default(), &scenario, Some(dir.path())).unwrap();
    // 2 laps of a 60 m square at 2.5 m/s, sampled at 50 Hz
    assert_eq!(report.frames, 2400);
    assert_eq!(report.timings.len(), 2400);
    // Rows start once the smoothing window is warm and a first fix exists.
    let rows = read(dir.path(), "trajectory.csv").lines().count() - 1;
    assert!(rows > 2350 && rows <= 2400, "{rows} trajectory rows");
    assert_eq!(report.metrics.laps.len(), 2);
    for name in ["map.pgm", "map.csv", "evidence.csv", "truth_map.csv", "metrics.json", "timing.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let doc: serde_json::Value = serde_json::from_str(&read(dir.path(), "metrics.json")).unwrap();
    assert_eq!(doc["frames"], 2400);
    assert!(doc["f1"].as_f64().unwrap() > 0.5);
}

#[test]
fn baseline_mode_equals_zero_map_weight() {
    let scenario = partial(0.8, 4, 0.6);
    let frames = sim::run(&scenario).unwrap();
    let wls = PipelineConfig {
        mode: LocalizerMode::WlsBaseline,
        ..PipelineConfig::default()
    };
    let mut no_map = PipelineConfig::default();
    no_map.weights.rho[2] = 0.0;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_frames(&wls, &scenario, &frames, Some(a.path())).unwrap();
    run_frames(&no_map, &scenario, &frames, Some(b.path())).unwrap();
    assert_eq!(read(a.path(), "trajectory.csv"), read(b.path(), "trajectory.csv"));
    assert_eq!(read(a.path(), "evidence.csv"), read(b.path(), "evidence.csv"));
}

#[test]
fn replayed_recording_matches_live_run() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = partial(0.7, 9, 0.5);
    let frames = sim::run(&scenario).unwrap();
    let csv = dir.path().join("frames.csv");
    write_frames_csv(&csv, &frames).unwrap();

    let config = PipelineConfig::default();
    let (live, replayed) = (dir.path().join("live"), dir.path().join("replay"));
    let a = run_frames(&config, &scenario, &frames, Some(&live)).unwrap();
    let b = replay(&config, &scenario, &csv, Some(&replayed)).unwrap();
    assert_eq!(a.frames, b.frames);
    for name in ["trajectory.csv", "map.csv", "evidence.csv"] {
        assert_eq!(read(&live, name), read(&replayed, name), "{name}");
    }

    let mut tuned = config.clone();
    tuned.weights.rho = [0.5, 1.0, 2.0];
    let other = dir.path().join("tuned");
    let c = replay(&tuned, &scenario, &csv, Some(&other)).unwrap();
    assert_eq!(c.frames, a.frames);
    assert_ne!(read(&live, "trajectory.csv"), read(&other, "trajectory.csv"));
}

#[test]
fn truncated_recording_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = partial(1.0, 1, 0.1);
    let text = frames_csv_string(&sim::run(&scenario).unwrap());
    let cut = &text[..text.len() - 25];
    let path = dir.path().join("cut.csv");
    fs::write(&path, cut).unwrap();
    match replay(&PipelineConfig::default(), &scenario, &path, None) {
        Err(e @ RunError::Input(_)) => {
            assert_eq!(e.exit_code(), 1);
            assert!(e.to_string().contains(&format!("line {}", cut.lines().count())), "{e}");
        }
        other => panic!("expected input error, got {other:?}"),
    }
}

#[test]
fn filter_cadence_does_not_change_final_map_without_map_term() {
    let scenario = partial(0.8, 2, 1.0);
    let frames = sim::run(&scenario).unwrap();
    let run = |every| {
        let mut c = PipelineConfig {
            mode: LocalizerMode::WlsBaseline,
            ..PipelineConfig::default()
        };
        c.grid.filter_every = every;
        run_frames(&c, &scenario, &frames, None).unwrap().metrics
    };
    let (a, b) = (run(25), run(200));
    assert_eq!((a.tp, a.tn, a.fp, a.fn_), (b.tp, b.tn, b.fp, b.fn_));
}

#[test]
fn agents_share_one_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenario = partial(0.99, 3, 0.5);
    let mut second = scenario.agents[0].clone();
    second.waypoints.reverse();
    scenario.agents.push(second);
    let report = run_slam(&PipelineConfig::default(), &scenario, Some(dir.path())).unwrap();
    assert_eq!(report.frames, sim::run(&scenario).unwrap().len());
    let one = read(dir.path(), "trajectory.csv").lines().count();
    let two = read(dir.path(), "trajectory_agent1.csv").lines().count();
    assert!(one > 500 && two > 500);
    assert!(one - 1 + two - 1 <= report.frames);

    let config = PipelineConfig {
        agents: Some(1),
        ..PipelineConfig::default()
    };
    assert!(matches!(run_slam(&config, &scenario, None), Err(RunError::Config(_))));
}

#[test]
fn classifier_mode_runs_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let training = sim::run(&partial(1.0, 21, 1.0)).unwrap();
    let rows: Vec<_> = training
        .iter()
        .flat_map(|f| f.measurements.iter().map(|m| (m.frame, m.true_los)))
        .collect();
    let raw: Vec<_> = rows.iter().map(|(f, _)| *f).collect();
    let stats = compute_stats(&raw).unwrap();
    let samples: Vec<LabeledSample> = rows
        .iter()
        .step_by(4)
        .map(|(f, los)| LabeledSample::from_channels(&normalize(f, &stats), range_slam::svm::Label::from_los(*los)))
        .collect();
    let model = train(&samples, Kernel::Linear, 1.0).unwrap();
    let (model_path, stats_path) = (dir.path().join("model.json"), dir.path().join("stats.json"));
    model.save(&model_path).unwrap();
    fs::write(&stats_path, serde_json::to_string(&stats).unwrap()).unwrap();

    let mut scenario = partial(1.0, 22, 1.0);
    scenario.mode = LabelMode::Classifier;
    let mut config = PipelineConfig::default();
    assert!(matches!(run_slam(&config, &scenario, None), Err(RunError::Config(_))));
    config.classifier.model = Some(model_path);
    config.classifier.stats = Some(stats_path);
    let report = run_slam(&config, &scenario, None).unwrap();
    assert!(report.metrics.ident_accuracy.unwrap() > 0.9);
    assert!(report.metrics.ate_rmse_cm.unwrap() < 100.0);
}

#[test]
fn comparison_covers_rates_and_modes() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = partial(1.0, 5, 0.4);
    let report = run_compare(&PipelineConfig::default(), &scenario, &[0.9, 0.6, 0.9], Some(dir.path())).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert!(dir.path().join("comparison.json").exists());
    assert!(report.table().contains("wls-baseline"));
}

#[test]
fn shipped_files_match_builtin_defaults() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let config = PipelineConfig::load(&root.join("configs/default.toml")).unwrap();
    assert_eq!(config, PipelineConfig::default());
    let scenario = Scenario::load(&root.join("scenarios/central_obstacle.toml")).unwrap();
    assert_eq!(scenario, Scenario::central_obstacle(1.0, 0));
}
