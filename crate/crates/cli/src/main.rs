use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use flcm::bootstrap::bootstrap_ci;
use flcm::config::Config;
use flcm::data::FunctionalDataset;
use flcm::flcm::fit_flcm;
use flcm::par::configure_threads;
use flcm::sim::run_study;
use flcm::solver::PenaltyFamily;
use flcm::{FlcmError, Result};

#[derive(Parser)]
#[command(name = "flcm", version, about = "Variable selection for functional linear concurrent models")]
struct Cli {
    /// Worker threads (defaults to the config value, then to every core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one penalty to a long-format CSV and report the selected covariates.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// flasso, fscad or fmcp; overrides the config.
        #[arg(long, value_parser = parse_method)]
        method: Option<PenaltyFamily>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the Monte-Carlo study described by the config.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Full study scale: 500 replicates at each of n = 100, 200, 400,
        /// written to n100/, n200/ and n400/ under --out. Takes hours.
        #[arg(long)]
        full_scale: bool,
    },
    /// Subject-level bootstrap bands for every coefficient function.
    Bootstrap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of resamples; overrides the config.
        #[arg(short = 'B', long = "resamples")]
        resamples: Option<usize>,
        #[arg(long, value_parser = parse_method)]
        method: Option<PenaltyFamily>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn parse_method(s: &str) -> std::result::Result<PenaltyFamily, String> {
    PenaltyFamily::parse(s).map_err(|e| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn load_data(path: &Path, cfg: &Config) -> Result<FunctionalDataset> {
    let file = File::open(path).map_err(|e| FlcmError::Data(format!("cannot open {}: {e}", path.display())))?;
    let data = FunctionalDataset::read_long_csv(file, &cfg.schema()?)
        .map_err(|e| FlcmError::Data(format!("{}: {e}", path.display())))?;
    if cfg.lag_window > 0 {
        data.lag_augment(cfg.lag_window)
    } else {
        Ok(data)
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn fit(data: &Path, config: Option<&Path>, method: Option<PenaltyFamily>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(m) = method {
        cfg.method = m;
    }
    let data = load_data(data, &cfg)?;
    let opts = cfg.fit_options()?;
    let result = fit_flcm(&data, &opts)?;
    fs::create_dir_all(out)?;
    for w in &result.warnings {
        log::warn!("{w}");
    }
    let summary = json!({
        "method": cfg.method,
        "selected": result.selected_names(),
        "tuning": result.tuning,
        "warnings": result.warnings,
    });
    serde_json::to_writer_pretty(create(out, "selected.json")?, &summary)?;

    let grid = opts.domain.unwrap_or(data.domain).linspace(cfg.eval_points);
    let mut w = csv::Writer::from_writer(create(out, "beta.csv")?);
    w.write_record(["t", "covariate", "estimate"])?;
    for (j, name) in result.covariate_names.iter().enumerate() {
        for &t in &grid {
            w.write_record([t.to_string(), name.clone(), result.beta(j, t).to_string()])?;
        }
    }
    w.flush()?;
    println!("selected: {}", result.selected_names().join(", "));
    Ok(())
}

fn simulate(config: Option<&Path>, out: &Path, replicates: Option<usize>, seed: Option<u64>, full_scale: bool) -> Result<()> {
    let mut cfg = load_config(config)?;
    if full_scale {
        cfg.replicates = 500;
    }
    if let Some(r) = replicates {
        cfg.replicates = r;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if !full_scale {
        return simulate_one(&cfg, out);
    }
    for n in [100, 200, 400] {
        cfg.n = n;
        println!("n = {n}");
        simulate_one(&cfg, &out.join(format!("n{n}")))?;
    }
    Ok(())
}

fn simulate_one(cfg: &Config, out: &Path) -> Result<()> {
    let sim = cfg.sim_config()?;
    let report = run_study(&sim)?;
    fs::create_dir_all(out)?;
    report.write_csv(create(out, "report.csv")?)?;
    report.write_selection_csv(create(out, "selection.csv")?)?;
    serde_json::to_writer_pretty(create(out, "summary.json")?, &report)?;
    for m in &report.methods {
        println!("{}: average model size {:.3}", m.method.label(), m.avg_model_size);
    }
    if !report.failures.is_empty() {
        eprintln!("{} replicates failed", report.failures.len());
    }
    Ok(())
}

fn bootstrap(
    data: &Path,
    config: Option<&Path>,
    resamples: Option<usize>,
    method: Option<PenaltyFamily>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(b) = resamples {
        cfg.bootstrap_replicates = b;
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    let data = load_data(data, &cfg)?;
    let res = bootstrap_ci(&data, &cfg.fit_options()?, cfg.method, &cfg.bootstrap_options()?)?;
    fs::create_dir_all(out)?;
    for (j, band) in res.bands.iter().enumerate() {
        res.write_band_csv(j, create(out, &format!("band_{}.csv", band.name))?)?;
    }
    let summary = json!({
        "method": res.method,
        "resamples": res.replicates(),
        "failures": res.failures,
        "selection_rate": res.bands.iter().map(|b| (b.name.clone(), json!(b.selection_rate))).collect::<serde_json::Map<_, _>>(),
    });
    serde_json::to_writer_pretty(create(out, "bootstrap.json")?, &summary)?;
    println!("{} resamples, {} failed", res.replicates(), res.failures.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config_threads = match &cli.command {
        Command::Fit { config, .. } | Command::Simulate { config, .. } | Command::Bootstrap { config, .. } => {
            load_config(config.as_deref())?.threads
        }
    };
    if let Some(t) = cli.threads.or(config_threads) {
        configure_threads(t)?;
    }
    match cli.command {
        Command::Fit {
            data,
            config,
            method,
            out,
        } => fit(&data, config.as_deref(), method, &out),
        Command::Simulate {
            config,
            out,
            replicates,
            seed,
            full_scale,
        } => simulate(config.as_deref(), &out, replicates, seed, full_scale),
        Command::Bootstrap {
            data,
            config,
            resamples,
            method,
            out,
        } => bootstrap(&data, config.as_deref(), resamples, method, &out),
    }
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
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
