//! Command-line front end.
//!
//! Subcommands: `simulate | sweep | kappa | fit | predict`. Every run is
//! reproducible from its flat `key = value` config file plus seeds;
//! `--dump-config` prints the effective configuration. Exit codes:
//! 0 success, 2 config error, 3 input error, 4 numerical error,
//! 5 capacity error, 6 optimizer non-convergence.

mod commands;
mod config;
mod kv;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use stgp::Error;

#[derive(Parser)]
#[command(name = "stgp", version, about = "Spatio-temporal Gaussian process modeling with an ordered-conditional likelihood approximation")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all available).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Size cap for dense desk-scale operations.
    #[arg(long, global = true)]
    desk_limit: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Observation file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Treat coordinate columns as lon/lat degrees.
    #[arg(long)]
    lonlat: bool,
    /// Running-median window (odd; 1 disables).
    #[arg(long)]
    median_window: Option<usize>,
    /// Warm-up seconds trimmed from the start of each run.
    #[arg(long)]
    warmup: Option<f64>,
    /// Log-transform values after smoothing.
    #[arg(long)]
    log_transform: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or take) sensor trajectories and simulate values on them.
    Simulate {
        /// Output observation file; a `.meta` sidecar records parameters.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Observation count for the synthetic trajectory generator.
        #[arg(long)]
        n: Option<usize>,
        /// Sensor count for the synthetic trajectory generator.
        #[arg(long)]
        sensors: Option<usize>,
        /// Campaign duration in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Simulation mode: compact | hierarchical.
        #[arg(long)]
        mode: Option<String>,
        /// Existing coordinate file to simulate on instead.
        #[arg(long)]
        traj: Option<PathBuf>,
        #[arg(long)]
        lonlat: bool,
    },
    /// Score every ordering x distance x policy configuration.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        /// Output CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated neighborhood sizes.
        #[arg(long)]
        m_list: Option<String>,
        /// Metric scale: a number, or `auto` to estimate.
        #[arg(long)]
        kappa: Option<String>,
    },
    /// Estimate the metric scale by leave-one-out IDW.
    Kappa {
        #[command(flatten)]
        data: DataArgs,
        /// Optional `key = value` output file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated candidate grid.
        #[arg(long)]
        grid: Option<String>,
        /// Subsample size.
        #[arg(long)]
        subsample: Option<usize>,
    },
    /// Maximum-likelihood fit of the covariance parameters.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// Output prefix; writes `<out>.<model>.kv` and `<out>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// classical | hierarchical | both.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        ordering: Option<String>,
        /// spatial | temporal | st.
        #[arg(long)]
        distance: Option<String>,
        /// any_sensor | same_sensor.
        #[arg(long)]
        policy: Option<String>,
        /// Conditioning-set size.
        #[arg(long)]
        m: Option<usize>,
        /// Metric scale: a number, or `auto` to estimate.
        #[arg(long)]
        kappa: Option<String>,
    },
    /// Kriging prediction on a regular space-time grid.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        /// Fit file (`.kv`) produced by the fit command.
        #[arg(long)]
        fit: Option<PathBuf>,
        /// Output grid CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        ny: Option<usize>,
        /// Number of evenly spaced time slices.
        #[arg(long)]
        nt: Option<usize>,
        /// Observations each grid node conditions on.
        #[arg(long)]
        m_pred: Option<usize>,
        /// Condition on all observations (desk scale) instead.
        #[arg(long)]
        exact: bool,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::MissingColumn(_)
        | Error::ParseRow { .. }
        | Error::EmptyInput(_)
        | Error::Domain(_)
        | Error::Input(_)
        | Error::Io(_) => 3,
        Error::Numerical(_) | Error::RankDeficient(_) => 4,
        Error::Capacity(_) => 5,
    }
}

fn apply_data_args(cfg: &mut RunConfig, args: &DataArgs) {
    if let Some(p) = &args.data {
        cfg.data = Some(p.clone());
    }
    if args.lonlat {
        cfg.lonlat = true;
    }
    if let Some(w) = args.median_window {
        cfg.median_window = w;
    }
    if let Some(w) = args.warmup {
        cfg.warmup = w;
    }
    if args.log_transform {
        cfg.log_transform = true;
    }
}

fn run(cli: &Cli) -> stgp::Result<Option<u8>> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} does not exist", path.display())));
        }
        cfg.load_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(limit) = cli.desk_limit {
        cfg.desk_limit = limit;
    }

    // Apply per-subcommand overrides before dumping, so the dump shows
    // exactly what would run.
    match &cli.command {
        Some(Command::Simulate {
            out,
            n,
            sensors,
            duration,
            mode,
            traj,
            lonlat,
        }) => {
            if let Some(p) = out {
                cfg.out = Some(p.clone());
            }
            if let Some(v) = n {
                cfg.sim_n = *v;
            }
            if let Some(v) = sensors {
                cfg.sensors = *v;
            }
            if let Some(v) = duration {
                cfg.duration = *v;
            }
            if let Some(v) = mode {
                cfg.sim_mode = v.clone();
            }
            if let Some(p) = traj {
                cfg.traj = Some(p.clone());
            }
            if *lonlat {
                cfg.lonlat = true;
            }
        }
        Some(Command::Sweep { data, out, m_list, kappa }) => {
            apply_data_args(&mut cfg, data);
            if let Some(p) = out {
                cfg.out = Some(p.clone());
            }
            if let Some(list) = m_list {
                cfg.set("m_list", list)?;
            }
            if let Some(k) = kappa {
                cfg.set("kappa", k)?;
            }
        }
        Some(Command::Kappa { data, out, grid, subsample }) => {
            apply_data_args(&mut cfg, data);
            if let Some(p) = out {
                cfg.out = Some(p.clone());
            }
            if let Some(g) = grid {
                cfg.set("kappa_grid", g)?;
            }
            if let Some(s) = subsample {
                cfg.kappa_subsample = *s;
            }
        }
        Some(Command::Fit {
            data,
            out,
            model,
            ordering,
            distance,
            policy,
            m,
            kappa,
        }) => {
            apply_data_args(&mut cfg, data);
            if let Some(p) = out {
                cfg.out = Some(p.clone());
            }
            if let Some(v) = model {
                cfg.model = v.clone();
            }
            if let Some(v) = ordering {
                cfg.ordering = v.clone();
            }
            if let Some(v) = distance {
                cfg.distance = v.clone();
            }
            if let Some(v) = policy {
                cfg.policy = v.clone();
            }
            if let Some(v) = m {
                cfg.m = *v;
            }
            if let Some(k) = kappa {
                cfg.set("kappa", k)?;
            }
        }
        Some(Command::Predict {
            data,
            fit,
            out,
            nx,
            ny,
            nt,
            m_pred,
            exact: _,
        }) => {
            apply_data_args(&mut cfg, data);
            if let Some(p) = fit {
                cfg.fit_file = Some(p.clone());
            }
            if let Some(p) = out {
                cfg.out = Some(p.clone());
            }
            if let Some(v) = nx {
                cfg.grid_nx = *v;
            }
            if let Some(v) = ny {
                cfg.grid_ny = *v;
            }
            if let Some(v) = nt {
                cfg.grid_nt = *v;
            }
            if let Some(v) = m_pred {
                cfg.m_pred = *v;
            }
        }
        None => {}
    }

    if cli.dump_config {
        print!("{}", cfg.dump());
        return Ok(Some(0));
    }

    let Some(command) = &cli.command else {
        return Err(Error::Config("no subcommand given (try --help)".into()));
    };

    if cfg.threads > 0 {
        // Ignore the error if a pool already exists (repeat invocation in
        // one process, e.g. under tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }

    match command {
        Command::Simulate { .. } => commands::cmd_simulate(&cfg)?,
        Command::Sweep { .. } => commands::cmd_sweep(&cfg)?,
        Command::Kappa { .. } => commands::cmd_kappa(&cfg)?,
        Command::Fit { .. } => {
            let converged = commands::cmd_fit(&cfg)?;
            if !converged {
                eprintln!("warning: optimizer hit the iteration cap; results flagged converged=false");
                return Ok(Some(6));
            }
        }
        Command::Predict { exact, .. } => commands::cmd_predict(&cfg, *exact)?,
    }
    Ok(None)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Some(code)) => ExitCode::from(code),
        Ok(None) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
