//! Command-line front end: full runs, ablation matrices and report merging.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use replayseg::eval::{
    ablation_table, emit_report, read_rows_csv, text_table, write_ablation_csv, write_rows_csv, ReportRow, METRICS_CSV,
    METRICS_TXT,
};
use replayseg::replay::{write_filter_audit, write_replay_manifest};
use replayseg::shapeworld::Mode;
use replayseg::trainer::{
    component_ablation, constraint_ablation, pool_sweep, run_ablation, run_experiment, threshold_ablation,
    ExperimentConfig, Method,
};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "replayseg", version, about = "Class-incremental segmentation with web replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one or more methods.
    Run {
        #[command(flatten)]
        common: Common,
        /// Method to run; repeat for several.
        #[arg(long = "method", default_value = "recall+")]
        methods: Vec<Method>,
    },
    /// Run an ablation matrix of the full pipeline.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Matrix::Components)]
        matrix: Matrix,
        /// Per-class web pool sizes for the pool matrix.
        #[arg(long, value_delimiter = ',', default_value = "100,300,500,1000")]
        pools: Vec<usize>,
    },
    /// Merge metrics CSVs and print one table.
    Report {
        /// `metrics.csv` files or directories containing one.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory for the merged `metrics.csv` and `metrics.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags below override it.
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Class-group sizes such as `4-2-2`.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    include_background: Option<bool>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Matrix {
    Components,
    Thresholds,
    Constraint,
    Pool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(p) = &self.protocol {
            c.protocol.groups = p.clone();
        }
        if let Some(m) = self.mode {
            c.protocol.mode = m;
        }
        if let Some(b) = self.include_background {
            c.eval.include_background = b;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(common: &Common, methods: &[Method]) -> Result<()> {
    let config = common.config()?;
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("config.toml"), config.to_toml())?;
    let runs = run_experiment(&config, methods)?;
    for r in &runs {
        if r.report.method == Method::WebReplay.as_str() {
            write_replay_manifest(&common.out.join("replay"), &r.state.replay)?;
            write_filter_audit(&common.out.join("filter_audit.csv"), &r.state.filter_audit)?;
        }
        if !r.report.excluded.is_empty() {
            println!("{}: classes {:?} excluded from the mean", r.report.method, r.report.excluded);
        }
    }
    let reports: Vec<_> = runs.into_iter().map(|r| r.report).collect();
    emit_report(&reports, &common.out)?;
    print!("{}", fs::read_to_string(common.out.join(METRICS_TXT))?);
    Ok(())
}

fn ablate(common: &Common, matrix: Matrix, pools: &[usize]) -> Result<()> {
    let config = common.config()?;
    let settings = match matrix {
        Matrix::Components => component_ablation(&config),
        Matrix::Thresholds => threshold_ablation(&config),
        Matrix::Constraint => constraint_ablation(&config),
        Matrix::Pool => pool_sweep(&config, pools),
    };
    let rows = run_ablation(&settings)?;
    fs::create_dir_all(&common.out)?;
    write_ablation_csv(&common.out.join("ablation.csv"), &rows)?;
    let table = ablation_table(&rows);
    fs::write(common.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn csv_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(METRICS_CSV)
    } else {
        p.to_path_buf()
    }
}

fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows: Vec<ReportRow> = Vec::new();
    for p in inputs {
        let path = csv_path(p);
        rows.extend(read_rows_csv(&path).with_context(|| format!("reading {}", path.display()))?);
    }
    if rows.is_empty() {
        bail!("no metric rows found");
    }
    let table = text_table(&rows);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_rows_csv(&dir.join(METRICS_CSV), &rows)?;
        fs::write(dir.join(METRICS_TXT), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, methods } => run(common, methods),
        Command::Ablate { common, matrix, pools } => ablate(common, *matrix, pools),
        Command::Report { inputs, out } => report(inputs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
