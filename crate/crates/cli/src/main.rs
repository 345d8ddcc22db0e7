//! `fedtpg` command line: world generation, training, evaluation, PCA
//! export and parameter sweeps.
//!
//! Exit status is 0 on success, 1 for configuration or data errors and 2 for
//! I/O errors (including unreadable or malformed files).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedtpg::eval::METRICS_HEADER;
use fedtpg::runner::{self, ExperimentConfig, Preset, SweepGrid, PCA_FILE, STORE_FILE};
use fedtpg::Error;

#[derive(Parser)]
#[command(name = "fedtpg", version, about = "Federated prompt-generation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Base profile: desk or full.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// JSON file merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `fed.rounds=50`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// fedtpg, fedcoop, coop_local, fedkgcoop or zeroshot.
    #[arg(long)]
    method: Option<String>,
    /// Sets both the run seed and the world seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut overrides = Vec::new();
        if let Some(m) = &self.method {
            overrides.push(format!("method={m}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
            overrides.push(format!("world.seed={s}"));
        }
        if let Some(d) = &self.out_dir {
            overrides.push(format!("out_dir={}", serde_json_string(&d.display().to_string())));
        }
        overrides.extend(self.set.iter().cloned());
        runner::resolve_config(Preset::from_name(&self.preset)?, self.config.as_deref(), &overrides)
    }
}

fn serde_json_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the configured world and write it as a store file.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<out_dir>/store.ftpg`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and write snapshots, metrics.csv and manifest.json.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Re-score the snapshots of a run directory and print one metrics row.
    Eval {
        run_dir: PathBuf,
        /// Also append the row to this CSV, writing the header if new.
        #[arg(long)]
        append: Option<PathBuf>,
    },
    /// Project the prompt vectors of a run directory onto three components.
    ExportPca {
        run_dir: PathBuf,
        /// Defaults to `<run_dir>/pca.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of a grid; one run directory per cell.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Classes per client, comma separated.
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        shots: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        participation: Vec<f64>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.resolve()?;
            let path = out.unwrap_or_else(|| cfg.out_dir.join(STORE_FILE));
            let store = runner::gen_data(&cfg, &path)?;
            println!("{} datasets, {} classes -> {}", store.datasets.len(), store.num_classes(), path.display());
        }
        Command::Train { cfg } => {
            let cfg = cfg.resolve()?;
            let outcome = runner::train(&cfg)?;
            println!("{METRICS_HEADER}");
            for r in &outcome.records {
                println!("{}", r.csv_line());
            }
        }
        Command::Eval { run_dir, append } => {
            let record = runner::evaluate(&run_dir)?;
            println!("{METRICS_HEADER}");
            println!("{}", record.csv_line());
            if let Some(path) = append {
                append_row(&path, &record.csv_line())?;
            }
        }
        Command::ExportPca { run_dir, out } => {
            let out = out.unwrap_or_else(|| run_dir.join(PCA_FILE));
            runner::export_pca(&run_dir, &out)?;
            println!("{}", out.display());
        }
        Command::Sweep { cfg, n, shots, participation } => {
            let cfg = cfg.resolve()?;
            let grid = SweepGrid { classes_per_client: n, shots, participation };
            for (cell, r) in runner::sweep(&cfg, &grid)? {
                println!("{} {}", cell.dir_name(), r.csv_line());
            }
        }
    }
    Ok(())
}

fn append_row(path: &std::path::Path, line: &str) -> Result<(), Error> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
