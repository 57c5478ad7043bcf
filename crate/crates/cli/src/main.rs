//! `tqte`: simulate experiments, compute simulation truth, and analyze
//! two-sample datasets.

mod analyze;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tqte::distribution::GridChoice;
use tqte_simlab::experiment::truth_tables;
use tqte_simlab::{run_experiment, ExperimentConfig, ExperimentReport, RunOptions, SimError};

use crate::svg::{Chart, Series};

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or input data: exit code 2.
    Config(String),
    /// Estimation failure at run time: exit code 1.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let config = e.is_config()
            || matches!(
                &e,
                SimError::Core(tqte::Error::InvalidInput(_) | tqte::Error::Row { .. } | tqte::Error::Json(_))
            );
        if config {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

const BUILTIN: [(&str, &str); 4] = [
    ("exp1", include_str!("../../../configs/exp1.json")),
    ("exp2", include_str!("../../../configs/exp2.json")),
    ("exp3", include_str!("../../../configs/exp3.json")),
    ("exp4", include_str!("../../../configs/exp4.json")),
];

#[derive(Parser, Debug)]
#[command(name = "tqte", version, about = "Surrogate-assisted transported quantile treatment effects")]
struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Source {
    /// Experiment config file.
    #[arg(long, conflicts_with = "experiment")]
    config: Option<PathBuf>,
    /// Built-in experiment: exp1, exp2, exp3 or exp4.
    #[arg(long)]
    experiment: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a Monte Carlo experiment and write per-cell and merged reports.
    Simulate {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        /// Overrides the config seed; falls back to TQTE_SEED.
        #[arg(long, env = "TQTE_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write SVG plots.
        #[arg(long)]
        svg: bool,
        /// Threshold grid: fixed:J or growing.
        #[arg(long)]
        grid: Option<GridChoice>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Multiplier-bootstrap draws for the simultaneous band.
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Reuse matching per-cell checkpoints in the output directory.
        #[arg(long)]
        resume: bool,
        /// Only run cells with this parameter value, e.g. `lambda_s=0`.
        #[arg(long = "cell")]
        cells: Vec<String>,
        /// Monte Carlo size for the ground truth.
        #[arg(long)]
        truth_draws: Option<usize>,
    },
    /// Estimate transported QTEs on a CSV dataset.
    Analyze {
        /// Analysis config file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "TQTE_SEED")]
        seed: Option<u64>,
        #[arg(long, default_value = "out/analysis")]
        out: PathBuf,
        #[arg(long)]
        svg: bool,
        #[arg(long)]
        grid: Option<GridChoice>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        bootstrap: Option<usize>,
    },
    /// Write the ground-truth table of every design cell.
    Truth {
        #[command(flatten)]
        source: Source,
        #[arg(long, env = "TQTE_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        truth_draws: Option<usize>,
    },
    /// Draw one dataset from an experiment's base law.
    Generate {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, env = "TQTE_SEED")]
        seed: Option<u64>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_experiment(source: &Source) -> Result<ExperimentConfig, CliError> {
    match (&source.config, &source.experiment) {
        (Some(path), _) => Ok(ExperimentConfig::read(path)?),
        (None, Some(id)) => {
            let text = BUILTIN
                .iter()
                .find(|(name, _)| name == id)
                .map(|(_, t)| *t)
                .ok_or_else(|| CliError::Config(format!("unknown experiment `{id}`; expected exp1..exp4")))?;
            Ok(ExperimentConfig::from_json(text, &format!("{id}.json"))?)
        }
        (None, None) => Err(CliError::Config("pass --config PATH or --experiment ID".into())),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn parse_cells(cells: &[String]) -> Result<Vec<(String, String)>, CliError> {
    cells
        .iter()
        .map(|c| {
            c.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Config(format!("--cell expects name=value, got `{c}`")))
        })
        .collect()
}

fn report_svgs(report: &ExperimentReport, dir: &Path) -> Result<(), CliError> {
    for cell in &report.cells {
        let mut methods: Vec<&str> = Vec::new();
        for r in report.rows.iter().filter(|r| r.cell == cell.id && r.metric == "rmse") {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let series = methods
            .iter()
            .map(|m| Series {
                name: m.to_string(),
                points: report
                    .rows
                    .iter()
                    .filter(|r| r.cell == cell.id && r.metric == "rmse" && r.method == *m)
                    .filter_map(|r| r.tau.map(|t| (t, r.value)))
                    .collect(),
            })
            .collect();
        let chart = Chart {
            title: format!("{} {}: RMSE", report.experiment, cell.id),
            x_label: "tau".into(),
            y_label: "RMSE of QTE".into(),
            series,
            bands: Vec::new(),
            reference: None,
        };
        let stem: String = cell
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect();
        write_text(&dir.join("svg").join(format!("{stem}.svg")), &chart.render())?;
    }
    Ok(())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            source,
            n,
            reps,
            seed,
            out,
            svg,
            grid,
            alpha,
            bootstrap,
            resume,
            cells,
            truth_draws,
        } => {
            let mut cfg = load_experiment(&source)?;
            if let Some(n) = n {
                cfg.n = n;
                cfg.axes.n.clear();
            }
            if let Some(r) = reps {
                cfg.reps = r;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(g) = grid {
                cfg.grid = g;
                cfg.axes.grid.clear();
            }
            if let Some(a) = alpha {
                cfg.inference.alpha = a;
            }
            if let Some(b) = bootstrap {
                match cfg.inference.band.as_mut() {
                    Some(band) => band.draws = b,
                    None => return Err(CliError::Config("--bootstrap needs an `inference.band` section".into())),
                }
            }
            if let Some(t) = truth_draws {
                cfg.truth.n_mc = t;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| PathBuf::from("out").join(&cfg.experiment));
            let opts = RunOptions {
                workers: cli.workers,
                out_dir: Some(out.clone()),
                resume,
                cell_filter: parse_cells(&cells)?,
            };
            let report = run_experiment(&cfg, &opts)?;
            if svg {
                report_svgs(&report, &out)?;
            }
            print!("{}", report.summary_table("rmse"));
            println!("wrote {}", out.join("report.csv").display());
            let failures = report.total_failures();
            if failures > 0 {
                for c in report.cells.iter().filter(|c| c.failures() > 0) {
                    eprintln!("cell {}: {} failed estimate(s)", c.id, c.failures());
                    for (method, msgs) in &c.errors {
                        for (msg, count) in msgs {
                            eprintln!("  {method} x{count}: {msg}");
                        }
                    }
                }
                return Err(CliError::Runtime(format!("{failures} replicate estimate(s) failed")));
            }
            Ok(())
        }
        Command::Analyze {
            config,
            seed,
            out,
            svg,
            grid,
            alpha,
            bootstrap,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            let cfg: analyze::AnalysisConfig = serde_path_to_error::deserialize(de)
                .map_err(|e| CliError::Config(format!("{}: {}: {}", config.display(), e.path(), e.inner())))?;
            let base = config.parent().unwrap_or(Path::new("."));
            let opts = analyze::AnalyzeOptions {
                out: out.clone(),
                svg,
                grid,
                alpha,
                seed,
                bootstrap,
            };
            let table = pool(cli.workers)?.install(|| analyze::run(&cfg, base, &opts))?;
            print!("{table}");
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Truth {
            source,
            seed,
            out,
            truth_draws,
        } => {
            let mut cfg = load_experiment(&source)?;
            if let Some(s) = seed {
                cfg.truth.seed = Some(s);
            }
            if let Some(t) = truth_draws {
                cfg.truth.n_mc = t;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| PathBuf::from("out").join(&cfg.experiment).join("truth"));
            let cells = cfg.cells();
            let tables = pool(cli.workers)?.install(|| truth_tables(&cfg, &cells))?;
            for (cell, table) in cells.iter().zip(&tables) {
                let path = out.join(format!("{}.csv", cell.file_stem()));
                write_text(&path, &table.to_csv_string())?;
                let mid = table.taus.iter().position(|&t| (t - 0.5).abs() < 1e-9);
                match mid {
                    Some(l) => println!("{:<40} Delta(0.5) = {:.6}", cell.id, table.delta[l]),
                    None => println!("{:<40} written", cell.id),
                }
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Generate { source, n, seed, out } => {
            let cfg = load_experiment(&source)?;
            let n = n.unwrap_or(cfg.n);
            let seed = seed.unwrap_or(cfg.seed);
            cfg.dgp.validate(cfg.nuisance.epsilon)?;
            let ds = cfg.dgp.generate(n, seed)?;
            write_text(&out, &ds.to_csv_string())?;
            println!("wrote {} ({} units)", out.display(), ds.n());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
