//! Command-line contract tests: exit codes, file round trips and the CSV
//! outputs of the sweep command.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use streamsim::config::{
    DetectorConfig, DetectorKind, GenConfigFile, RunConfig, ScenarioFile, SCHEMA_VERSION,
};
use streamsim::evalkit::EvalConfig;
use streamsim::forecaster::StageCosts;
use streamsim::scene::{ObservationNoise, ScenarioConfig};
use streamsim::simrt::{DelayModel, Dist, RunLog, SchedulerParams};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamsim"))
}

fn run(args: &[&str], paths: &[&Path]) -> Output {
    let mut cmd = bin();
    let mut p = paths.iter();
    for a in args {
        if *a == "{}" {
            cmd.arg(p.next().expect("path placeholder"));
        } else {
            cmd.arg(a);
        }
    }
    cmd.output().unwrap()
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}

fn sample_gen_config() -> GenConfigFile {
    GenConfigFile {
        version: SCHEMA_VERSION,
        config: ScenarioConfig { num_tracks: 6, length: 90, ..Default::default() },
    }
}

fn sample_run_config(scenario_path: Option<String>) -> RunConfig {
    RunConfig {
        version: SCHEMA_VERSION,
        scenario_path,
        scenario_config: Some(ScenarioConfig { num_tracks: 6, length: 90, ..Default::default() }),
        detector: DetectorConfig {
            kind: DetectorKind::Cv,
            stage_costs: StageCosts { backbone: 0.02, neck: 0.01, head: 0.01 },
            kernel: None,
        },
        scheduler: SchedulerParams::default(),
        delay: DelayModel {
            d1: Dist::Constant { value: 0.005 },
            d2b: Dist::Constant { value: 0.02 },
            d2n: Dist::Constant { value: 0.01 },
            d2h: Dist::Constant { value: 0.01 },
            delay_factor: 1.0,
            drop_probability: 0.0,
            seed: 0,
        },
        noise: ObservationNoise::none(),
        eval: EvalConfig::default(),
        seed: 11,
    }
}

#[test]
fn gen_run_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let gen = write_json(dir.path(), "gen.json", &sample_gen_config());
    let scn = dir.path().join("scenario.json");
    let out = run(
        &["gen", "--config", "{}", "--seed", "5", "--out", "{}"],
        &[&gen, &scn],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = String::from_utf8_lossy(&out.stdout);
    assert!(summary.contains("6 tracks") && summary.contains("90 frames"), "{summary}");

    // the written scenario parses and validates
    let file: ScenarioFile =
        serde_json::from_str(&std::fs::read_to_string(&scn).unwrap()).unwrap();
    file.validate().unwrap();

    let cfg = write_json(
        dir.path(),
        "run.json",
        &sample_run_config(Some("scenario.json".into())),
    );
    let log_path = dir.path().join("run.jsonl");
    let out = run(&["run", "--config", "{}", "--out", "{}"], &[&cfg, &log_path]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("dispatched"));

    // the log round-trips through the line-delimited reader
    let log =
        RunLog::from_reader(std::io::BufReader::new(std::fs::File::open(&log_path).unwrap()))
            .unwrap();
    assert!(log.header().is_some());
    assert!(!log.dispatched().is_empty());

    let csv = dir.path().join("metrics.csv");
    let out = run(
        &["eval", "--log", "{}", "--scenario", "{}", "--csv", "{}"],
        &[&log_path, &scn, &csv],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(&csv).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "method,d,sAP,sAP50,sAP75,sAP_S,sAP_M,sAP_L");
    let row = lines.next().unwrap();
    assert!(row.starts_with("cv,1,"), "{row}");

    // appending keeps the header single
    let out = run(
        &["eval", "--log", "{}", "--scenario", "{}", "--csv", "{}"],
        &[&log_path, &scn, &csv],
    );
    assert_eq!(out.status.code(), Some(0));
    let table = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(table.matches("method,d,").count(), 1);
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();

    // missing config file
    let out = run(
        &["run", "--config", "{}", "--out", "{}"],
        &[&dir.path().join("nope.json"), &dir.path().join("x.jsonl")],
    );
    assert_eq!(out.status.code(), Some(2));

    // bad schema version
    let mut cfg = sample_run_config(None);
    cfg.version = 99;
    let bad = write_json(dir.path(), "bad.json", &cfg);
    let out = run(&["run", "--config", "{}", "--out", "{}"], &[&bad, &dir.path().join("x.jsonl")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));

    // unknown detector name in a sweep
    let ok = write_json(dir.path(), "ok.json", &sample_run_config(None));
    let out = run(
        &["sweep", "--config", "{}", "--delay-factors", "1", "--detectors", "warp", "--out", "{}"],
        &[&ok, &dir.path().join("sweepout")],
    );
    assert_eq!(out.status.code(), Some(2));

    // unknown flag is a usage error (clap uses exit code 2)
    let out = bin().args(["run", "--frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn truncated_log_is_rejected_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "run.json", &sample_run_config(None));
    let log_path = dir.path().join("run.jsonl");
    let out = run(&["run", "--config", "{}", "--out", "{}"], &[&cfg, &log_path]);
    assert_eq!(out.status.code(), Some(0));

    // chop the file mid-line
    let bytes = std::fs::read(&log_path).unwrap();
    let cut = dir.path().join("cut.jsonl");
    std::fs::write(&cut, &bytes[..bytes.len() * 2 / 3]).unwrap();
    let line = bytes[..bytes.len() * 2 / 3].iter().filter(|&&b| b == b'\n').count() + 1;

    let scenario = sample_run_config(None).resolve_scenario(dir.path()).unwrap();
    let scn = write_json(dir.path(), "scn.json", &ScenarioFile::new(scenario));
    let out = run(&["eval", "--log", "{}", "--scenario", "{}"], &[&cut, &scn]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("line {line}")), "stderr: {err}");
}

#[test]
fn sweep_writes_tables_and_reports_subrun_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "run.json", &sample_run_config(None));
    let out_dir = dir.path().join("tables");

    let out = run(
        &[
            "sweep", "--config", "{}", "--delay-factors", "1,4", "--offsets", "2,8",
            "--detectors", "identity,cv", "--out", "{}",
        ],
        &[&cfg, &out_dir],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let sap = std::fs::read_to_string(out_dir.join("sap.csv")).unwrap();
    assert_eq!(sap.lines().count(), 5); // header + 2 detectors x 2 factors
    assert!(sap.lines().any(|l| l.starts_with("identity,4,")));
    assert!(sap.lines().any(|l| l.starts_with("cv,1,")));

    let off = std::fs::read_to_string(out_dir.join("map_offset.csv")).unwrap();
    assert_eq!(off.lines().next().unwrap(), "method,d,mAP");
    assert_eq!(off.lines().count(), 5);

    // an offset beyond the sequence length fails that sub-run: the row says
    // so and the exit code is 1
    let out = run(
        &[
            "sweep", "--config", "{}", "--offsets", "2,500", "--detectors", "cv", "--out", "{}",
        ],
        &[&cfg, &dir.path().join("tables2")],
    );
    assert_eq!(out.status.code(), Some(1));
    let off = std::fs::read_to_string(dir.path().join("tables2/map_offset.csv")).unwrap();
    assert!(off.lines().any(|l| l == "cv,500,failed"), "{off}");
    assert!(off.lines().any(|l| l.starts_with("cv,2,") && !l.ends_with("failed")));
}

#[test]
fn run_seed_override_changes_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "run.json", &sample_run_config(None));
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let out = run(&["run", "--config", "{}", "--out", "{}", "--seed", "1"], &[&cfg, &a]);
    assert_eq!(out.status.code(), Some(0));
    let out = run(&["run", "--config", "{}", "--out", "{}", "--seed", "2"], &[&cfg, &b]);
    assert_eq!(out.status.code(), Some(0));
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
