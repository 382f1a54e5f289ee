//! Command-line surface of the engine: dataset synthesis, experiment runs,
//! verification suites and report aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use geocl::autodiff::Fault;
use geocl::checkpoint::Checkpoint;
use geocl::config::{DataSource, ExperimentConfig};
use geocl::gis::GisTrace;
use geocl::harness::stream::{load_csv, Stream};
use geocl::harness::trainer::{init_state, run_step, RunState, StepDiagnostics};
use geocl::harness::{generate_synthetic_stream, Summary};
use geocl::selfcheck::{self, Check};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "geocl", version, about = "Mixed-curvature continual learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic stream as CSV plus a manifest.
    Synth(SynthArgs),
    /// Train through a stream and write metrics, traces and a checkpoint.
    Run(RunArgs),
    /// Run the geometry, gradient and metric property suites.
    Verify(VerifyArgs),
    /// Merge completed runs into mean ± std tables and accuracy curves.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Maximum relative error accepted by the gradient checks.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, each holding a `report.json`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A validation failure: bad arguments, config or input data.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// 1 for validation errors, 2 for runtime or numerical failures.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match err.downcast_ref::<geocl::Error>() {
        Some(geocl::Error::Config(_) | geocl::Error::Csv { .. } | geocl::Error::Json(_)) => 1,
        _ => 2,
    }
}

/// Everything a run writes to `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub summary: Summary,
    pub accuracy: Vec<Vec<f64>>,
    pub aggregate: Vec<f64>,
    pub gis: Vec<GisTrace>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub wall_clock_seconds: f64,
    pub version: String,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Builds the stream a config describes.
pub fn load_stream(cfg: &ExperimentConfig) -> geocl::Result<Stream> {
    match &cfg.data {
        DataSource::Synthetic(spec) => generate_synthetic_stream(spec, cfg.seed),
        DataSource::Csv {
            path,
            classes_per_step,
            test_ratio,
        } => load_csv(path, *classes_per_step, *test_ratio, cfg.seed),
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let cfg = load_config(args.config.as_deref(), args.seed)?;
    let DataSource::Synthetic(spec) = &cfg.data else {
        return Err(Invalid("synth needs a synthetic data source".into()).into());
    };
    let stream = generate_synthetic_stream(spec, cfg.seed)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write(&args.out.join("train.csv"), &stream.to_csv(false))?;
    write(&args.out.join("test.csv"), &stream.to_csv(true))?;
    let manifest = serde_json::json!({
        "seed": cfg.seed,
        "spec": spec,
        "classes": stream.num_classes(),
        "steps": stream.len(),
        "input_dim": stream.input_dim(),
        "train_rows": stream.tasks().iter().map(|t| t.train.len()).sum::<usize>(),
        "test_rows": stream.tasks().iter().map(|t| t.test.len()).sum::<usize>(),
    });
    write(&args.out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Runs an experiment end to end; writes files when `out` is set.
pub fn execute(cfg: &ExperimentConfig, out: Option<&Path>, resume: Option<&Path>) -> anyhow::Result<(RunState, RunReport)> {
    let started = Instant::now();
    let stream = load_stream(cfg)?;
    let mut state = match resume {
        Some(p) => Checkpoint::load(p)?.restore(),
        None => init_state(cfg, stream.input_dim())?,
    };
    let mut cfg = cfg.clone();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        cfg.output_dir = Some(dir.to_path_buf());
        write(&dir.join("config.json"), &cfg.to_json())?;
    }
    while state.next_step < stream.len() {
        run_step(&cfg, &stream, &mut state, None)?;
        if let Some(dir) = out {
            Checkpoint::capture(&state).save(&dir.join("checkpoint.json"))?;
        }
    }
    let report = RunReport {
        config: cfg.clone(),
        summary: state.metrics.summary()?,
        accuracy: state.metrics.acc.clone(),
        aggregate: (0..state.metrics.steps()).map(|t| state.metrics.aggregate(t)).collect(),
        gis: state.traces.clone(),
        diagnostics: state.diagnostics.clone(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    if let Some(dir) = out {
        write(&dir.join("metrics.csv"), &state.metrics.to_csv())?;
        write(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
        write(&dir.join("gis_trace.json"), &serde_json::to_string_pretty(&report.gis)?)?;
    }
    Ok((state, report))
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

pub fn summary_table(s: &Summary) -> String {
    let af = s.average_forgetting.map_or("null".to_string(), pct);
    format!(
        "{:<32}{:>10}\n{:<32}{:>10}\n{:<32}{:>10}\n{:<32}{:>10}\n",
        "final accuracy (%)",
        pct(s.final_accuracy),
        "average accuracy (%)",
        pct(s.average_accuracy),
        "average incremental accuracy (%)",
        pct(s.average_incremental_accuracy),
        "average forgetting (%)",
        af
    )
}

pub fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = load_config(args.config.as_deref(), args.seed)?;
    let out = args.out.clone().or_else(|| cfg.output_dir.clone());
    let (_, report) = execute(&cfg, out.as_deref(), args.resume.as_deref())?;
    if !args.quiet {
        print!("{}", summary_table(&report.summary));
    }
    Ok(())
}

/// All verification checks with their outcomes.
pub fn verify_checks(args: &VerifyArgs) -> anyhow::Result<Vec<Check>> {
    let fault = args.inject_fault.then_some(Fault::CurvatureBranchSign);
    let mut checks = selfcheck::geometry_checks(args.draws, args.seed)?;
    checks.extend(selfcheck::gradient_checks(args.trials, args.seed, fault, args.tolerance)?);
    checks.extend(selfcheck::metric_checks(args.draws.min(2000), args.seed)?);
    Ok(checks)
}

pub fn cmd_verify(args: &VerifyArgs) -> anyhow::Result<()> {
    if !(args.tolerance.is_finite() && args.tolerance > 0.0) {
        return Err(Invalid("--tolerance must be positive".into()).into());
    }
    let checks = verify_checks(args)?;
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:<48} {:>12.3e}  (tolerance {:.1e})", c.name, c.value, c.tolerance);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        Ok(())
    } else {
        bail!("{} check(s) failed: {}", failed.len(), failed.join(", "))
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Config identity with the seed and output location removed.
fn variant_key(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.seed = 0;
    c.output_dir = None;
    c.name = None;
    serde_json::to_string(&c).expect("config serializes")
}

/// Stream identity for compatibility: source without the seed, plus step count.
fn stream_key(cfg: &ExperimentConfig) -> String {
    serde_json::to_string(&cfg.data).expect("data source serializes")
}

pub struct Aggregate {
    pub table_csv: String,
    pub table_txt: String,
    pub curves_csv: String,
}

pub fn aggregate(reports: &[RunReport]) -> anyhow::Result<Aggregate> {
    let Some(first) = reports.first() else {
        return Err(Invalid("report needs at least one run".into()).into());
    };
    let stream = stream_key(&first.config);
    if let Some(r) = reports.iter().find(|r| stream_key(&r.config) != stream) {
        return Err(Invalid(format!(
            "runs use different streams ({} vs {}); refusing to merge",
            r.config.name.as_deref().unwrap_or("unnamed"),
            first.config.name.as_deref().unwrap_or("unnamed")
        ))
        .into());
    }
    let mut groups: BTreeMap<usize, (String, Vec<&RunReport>)> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in reports {
        let key = variant_key(&r.config);
        let idx = order.iter().position(|k| *k == key).unwrap_or_else(|| {
            order.push(key.clone());
            order.len() - 1
        });
        let label = r.config.name.clone().unwrap_or_else(|| format!("config-{}", idx + 1));
        groups.entry(idx).or_insert_with(|| (label, Vec::new())).1.push(r);
    }
    let mut table_csv = String::from("method,runs,final_mean,final_std,aa_mean,aa_std,aia_mean,aia_std,af_mean,af_std\n");
    let mut table_txt = format!(
        "{:<24}{:>6}{:>18}{:>18}{:>18}{:>18}\n",
        "method", "runs", "final acc (%)", "avg acc (%)", "avg incr acc (%)", "avg forget (%)"
    );
    let mut curves_csv = String::from("method,step,accuracy_mean,accuracy_std\n");
    for (label, runs) in groups.values() {
        let col = |f: &dyn Fn(&Summary) -> Option<f64>| -> Option<(f64, f64)> {
            let xs: Option<Vec<f64>> = runs.iter().map(|r| f(&r.summary)).collect();
            xs.map(|v| mean_std(&v))
        };
        let cells = [
            col(&|s| Some(s.final_accuracy)),
            col(&|s| Some(s.average_accuracy)),
            col(&|s| Some(s.average_incremental_accuracy)),
            col(&|s| s.average_forgetting),
        ];
        table_csv.push_str(&format!("{label},{}", runs.len()));
        table_txt.push_str(&format!("{label:<24}{:>6}", runs.len()));
        for c in cells {
            match c {
                Some((m, s)) => {
                    table_csv.push_str(&format!(",{:.4},{:.4}", 100.0 * m, 100.0 * s));
                    table_txt.push_str(&format!("{:>18}", format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s)));
                }
                None => {
                    table_csv.push_str(",null,null");
                    table_txt.push_str(&format!("{:>18}", "null"));
                }
            }
        }
        table_csv.push('\n');
        table_txt.push('\n');
        let steps = runs.iter().map(|r| r.aggregate.len()).min().unwrap_or(0);
        for t in 0..steps {
            let xs: Vec<f64> = runs.iter().map(|r| r.aggregate[t]).collect();
            let (m, s) = mean_std(&xs);
            curves_csv.push_str(&format!("{label},{},{:.6},{:.6}\n", t + 1, m, s));
        }
    }
    Ok(Aggregate {
        table_csv,
        table_txt,
        curves_csv,
    })
}

pub fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    let reports = args
        .runs
        .iter()
        .map(|dir| {
            let path = dir.join("report.json");
            let text = std::fs::read_to_string(&path).map_err(|e| Invalid(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<RunReport>(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())).into())
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let agg = aggregate(&reports)?;
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write(&out.join("table.csv"), &agg.table_csv)?;
        write(&out.join("table.txt"), &agg.table_txt)?;
        write(&out.join("curves.csv"), &agg.curves_csv)?;
    }
    print!("{}", agg.table_txt);
    Ok(())
}

/// Parses arguments, dispatches and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(geocl::Error::Diverged { dump: Some(p), .. }) = e.downcast_ref::<geocl::Error>() {
                eprintln!("diagnostic dump: {}", p.display());
            }
            exit_code(&e)
        }
    }
}
