//! Batch front door: generate scenarios, run single streaming simulations,
//! evaluate logs into metric reports, and drive delay/offset sweeps that end
//! up as CSV tables.
//!
//! Exit codes: 0 success, 1 completed with sub-run failures, 2 usage, config
//! or schema error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use streamsim::config::{
    DetectorConfig, DetectorKind, GenConfigFile, RunConfig, ScenarioFile, SCHEMA_VERSION,
};
use streamsim::error::Error;
use streamsim::evalkit::{
    map_offset, offline_offset_predictions, streaming_ap, summarize_sweep, MetricsReport,
};
use streamsim::kernels::{rasterize, GridSpec};
use streamsim::scene::Scenario;
use streamsim::simrt::{run_stream, run_sweep, Record, RunLog};

#[derive(Parser)]
#[command(name = "streamsim", version, about = "Streaming-perception simulation and evaluation testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario document from a generation config
    Gen {
        /// generation config (JSON)
        #[arg(long)]
        config: PathBuf,
        /// seed override
        #[arg(long)]
        seed: Option<u64>,
        /// output scenario path
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one streaming simulation and write its line-delimited log
    Run {
        /// run config (JSON)
        #[arg(long)]
        config: PathBuf,
        /// seed override
        #[arg(long)]
        seed: Option<u64>,
        /// output log path
        #[arg(long)]
        out: PathBuf,
        /// also dump rasterized occupancy grids of dispatched predictions
        #[arg(long)]
        dump_features: bool,
    },
    /// Evaluate a run log against its scenario
    Eval {
        /// run log path
        #[arg(long)]
        log: PathBuf,
        /// scenario document path
        #[arg(long)]
        scenario: PathBuf,
        /// optional run config whose eval section is used
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV file to append the result row to
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Cross-product sweep: (detector, delay factor) runs plus offline
    /// offset metrics, written as CSV tables
    Sweep {
        /// base run config (JSON)
        #[arg(long)]
        config: PathBuf,
        /// delay factors, e.g. 2,4,8,16
        #[arg(long, value_delimiter = ',')]
        delay_factors: Vec<f64>,
        /// offline offset values, e.g. 2,4,8,16
        #[arg(long, value_delimiter = ',')]
        offsets: Vec<u32>,
        /// detectors to sweep, e.g. identity,cv
        #[arg(long, value_delimiter = ',')]
        detectors: Vec<String>,
        /// output directory for the CSV tables
        #[arg(long)]
        out: PathBuf,
        /// worker pool size (runs stay deterministic regardless)
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// seed override
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    };
    std::process::exit(code);
}

fn dispatch(cmd: Command) -> streamsim::Result<i32> {
    match cmd {
        Command::Gen { config, seed, out } => cmd_gen(&config, seed, &out),
        Command::Run { config, seed, out, dump_features } => cmd_run(&config, seed, &out, dump_features),
        Command::Eval { log, scenario, config, csv } => cmd_eval(&log, &scenario, config.as_deref(), csv.as_deref()),
        Command::Sweep { config, delay_factors, offsets, detectors, out, workers, seed } => {
            cmd_sweep(&config, &delay_factors, &offsets, &detectors, &out, workers, seed)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> streamsim::Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfiguration(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{what} {}: {e}", path.display())))
}

fn load_run_config(path: &Path, seed: Option<u64>) -> streamsim::Result<(RunConfig, Scenario)> {
    let mut cfg: RunConfig = read_json(path, "run config")?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let base = path.parent().unwrap_or(Path::new("."));
    let scenario = cfg.resolve_scenario(base)?;
    Ok((cfg, scenario))
}

fn cmd_gen(config: &Path, seed: Option<u64>, out: &Path) -> streamsim::Result<i32> {
    let gen: GenConfigFile = read_json(config, "generation config")?;
    if gen.version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "unsupported generation config version {} (expected {SCHEMA_VERSION})",
            gen.version
        )));
    }
    let seed = seed.unwrap_or(0);
    let scenario = streamsim::scene::generate_scenario(&gen.config, seed)?;
    let file = ScenarioFile::new(scenario);
    fs::write(out, serde_json::to_string_pretty(&file)?)?;
    println!(
        "scenario: {} tracks, {} frames at {} FPS -> {}",
        file.scenario.tracks.len(),
        file.scenario.length,
        file.scenario.frame_rate,
        out.display()
    );
    Ok(0)
}

fn cmd_run(config: &Path, seed: Option<u64>, out: &Path, dump_features: bool) -> streamsim::Result<i32> {
    let (cfg, scenario) = load_run_config(config, seed)?;
    let mut model = cfg.detector.build(&scenario)?;
    let mut delay = cfg.delay;
    delay.seed = cfg.seed;
    let log = run_stream(&scenario, model.as_mut(), &cfg.scheduler, &delay, &cfg.noise, cfg.seed)?;
    {
        let mut f = std::io::BufWriter::new(fs::File::create(out)?);
        log.to_writer(&mut f)?;
        f.flush()?;
    }
    if dump_features {
        dump_feature_grids(&log, &scenario, &cfg.detector, out)?;
    }
    let mut warnings = 0u32;
    for r in &log.records {
        if let Record::RunSummary { dispatched, mean_iteration_delay, model_errors, .. } = r {
            println!(
                "dispatched {} predictions, mean realized delay {:.1} ms -> {}",
                dispatched,
                mean_iteration_delay * 1e3,
                out.display()
            );
            warnings = *model_errors;
        }
    }
    if warnings > 0 {
        eprintln!("warning: {warnings} detector errors were logged");
    }
    Ok(0)
}

/// Debug dump: rasterized occupancy grid of every dispatched prediction, as
/// an auxiliary JSONL file next to the log.
fn dump_feature_grids(
    log: &RunLog,
    scenario: &Scenario,
    detector: &DetectorConfig,
    out: &Path,
) -> streamsim::Result<()> {
    let opt = detector.kernel.unwrap_or_default();
    let grid = GridSpec {
        channels: 1,
        height: opt.grid_height,
        width: opt.grid_width,
        image_size: scenario.image_size,
    };
    let path = out.with_extension("features.jsonl");
    let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
    for p in log.dispatched() {
        let fm = rasterize(&p.detections, &grid, p.target_index)?;
        let line = serde_json::json!({
            "target": p.target_index.get(),
            "output_at": p.output_at.secs(),
            "height": fm.height,
            "width": fm.width,
            "occupancy": fm.data,
        });
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

const CSV_HEADER: &[&str] = &["method", "d", "sAP", "sAP50", "sAP75", "sAP_S", "sAP_M", "sAP_L"];

fn csv_row(report: &MetricsReport, d: f64) -> Vec<String> {
    vec![
        report.method.clone(),
        format!("{d}"),
        format!("{:.4}", report.s_ap),
        format!("{:.4}", report.s_ap50),
        format!("{:.4}", report.s_ap75),
        format!("{:.4}", report.s_ap_small),
        format!("{:.4}", report.s_ap_medium),
        format!("{:.4}", report.s_ap_large),
    ]
}

fn append_csv(path: &Path, rows: &[Vec<String>]) -> streamsim::Result<()> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(CSV_HEADER).map_err(csv_err)?;
    }
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn cmd_eval(
    log_path: &Path,
    scenario_path: &Path,
    config: Option<&Path>,
    csv: Option<&Path>,
) -> streamsim::Result<i32> {
    let file: ScenarioFile = read_json(scenario_path, "scenario")?;
    file.validate()?;
    let eval_cfg = match config {
        Some(p) => {
            let cfg: RunConfig = read_json(p, "run config")?;
            cfg.validate()?;
            cfg.eval
        }
        None => Default::default(),
    };
    let text = fs::File::open(log_path)
        .map_err(|e| Error::InvalidConfiguration(format!("cannot read log {}: {e}", log_path.display())))?;
    let log = RunLog::from_reader(std::io::BufReader::new(text))?;
    let report = streaming_ap(&log, &file.scenario, &eval_cfg)?;
    print_report(&report);
    if let Some(path) = csv {
        append_csv(path, &[csv_row(&report, report.delay_factor)])?;
    }
    Ok(0)
}

fn print_report(r: &MetricsReport) {
    println!(
        "{}: sAP {:.2}  sAP50 {:.2}  sAP75 {:.2}  S {:.2}  M {:.2}  L {:.2}",
        r.method, r.s_ap, r.s_ap50, r.s_ap75, r.s_ap_small, r.s_ap_medium, r.s_ap_large
    );
    println!(
        "  frames: {} total, {} warm-up, {} unmatched; {} predictions reused",
        r.frames_total, r.frames_warmup, r.frames_unmatched, r.predictions_reused
    );
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    config: &Path,
    delay_factors: &[f64],
    offsets: &[u32],
    detectors: &[String],
    out: &Path,
    _workers: usize,
    seed: Option<u64>,
) -> streamsim::Result<i32> {
    if delay_factors.is_empty() && offsets.is_empty() {
        return Err(Error::InvalidConfiguration(
            "sweep needs at least one of --delay-factors or --offsets".into(),
        ));
    }
    if detectors.is_empty() {
        return Err(Error::InvalidConfiguration("sweep needs --detectors".into()));
    }
    let kinds: Vec<DetectorKind> = detectors
        .iter()
        .map(|s| s.parse())
        .collect::<streamsim::Result<_>>()?;
    let (cfg, scenario) = load_run_config(config, seed)?;
    fs::create_dir_all(out)?;

    let mut failures = 0u32;
    let mut sap_rows: Vec<Vec<String>> = Vec::new();
    let mut offset_rows: Vec<Vec<String>> = Vec::new();

    for &kind in &kinds {
        let det = DetectorConfig { kind, ..cfg.detector.clone() };
        let name = format!("{kind:?}").to_lowercase();

        if !delay_factors.is_empty() {
            let mut base_delay = cfg.delay;
            base_delay.seed = cfg.seed;
            let result = run_sweep(
                &scenario,
                || det.build(&scenario).expect("detector config already validated"),
                &cfg.scheduler,
                &base_delay,
                &cfg.noise,
                delay_factors,
                &[cfg.seed],
            )
            .and_then(|logs| summarize_sweep(&logs, &scenario, &cfg.eval));
            match result {
                Ok(table) => {
                    for (d, report) in &table {
                        sap_rows.push(csv_row(report, *d));
                        println!("{name} d={d}: sAP {:.2}", report.s_ap);
                    }
                }
                Err(e) => {
                    eprintln!("sweep failed for {name}: {e}");
                    sap_rows.push(vec![name.clone(), "-".into(), "failed".into(), String::new(), String::new(), String::new(), String::new(), String::new()]);
                    failures += 1;
                }
            }
        }

        for &d in offsets {
            let result = det.build(&scenario).and_then(|mut model| {
                let preds = offline_offset_predictions(
                    &scenario,
                    model.as_mut(),
                    &cfg.noise,
                    cfg.scheduler.m_past,
                    d,
                    cfg.seed,
                )?;
                map_offset(&preds, &scenario, d, &cfg.eval)
            });
            match result {
                Ok(m) => {
                    offset_rows.push(vec![name.clone(), d.to_string(), format!("{m:.4}")]);
                    println!("{name} offset d={d}: mAP {m:.2}");
                }
                Err(e) => {
                    eprintln!("offset evaluation failed for {name} d={d}: {e}");
                    offset_rows.push(vec![name.clone(), d.to_string(), "failed".into()]);
                    failures += 1;
                }
            }
        }
    }

    if !sap_rows.is_empty() {
        append_csv(&out.join("sap.csv"), &sap_rows)?;
    }
    if !offset_rows.is_empty() {
        let path = out.join("map_offset.csv");
        let fresh = !path.exists();
        let file = fs::OpenOptions::new().create(true).append(true).open(&path)?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record(["method", "d", "mAP"]).map_err(csv_err)?;
        }
        for row in &offset_rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(if failures > 0 { 1 } else { 0 })
}
