//! Flat `key = value` run configuration with CLI overrides.
//!
//! Every knob lives in one struct; a config file sets keys, command-line
//! flags override them, and `--dump-config` prints the effective values
//! in a form that can be fed straight back in.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use stgp::{Error, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    // io
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub fit_file: Option<PathBuf>,
    pub traj: Option<PathBuf>,
    pub lonlat: bool,

    // reproducibility and resources
    pub seed: u64,
    pub threads: usize,
    pub desk_limit: usize,

    // approximation configuration
    pub ordering: String,
    pub distance: String,
    pub policy: String,
    pub m: usize,
    pub m_list: Vec<usize>,
    pub m_pred: usize,

    // metric scale
    pub kappa: Option<f64>, // None = auto
    pub kappa_grid: Vec<f64>,
    pub kappa_subsample: usize,
    pub kappa_neighbors: usize,
    pub kappa_power: f64,

    // covariance parameters (simulation truth / optional fit init)
    pub sigma2: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub tau2: f64,
    pub gamma: f64,

    // model selection and optimizer
    pub model: String,
    pub fit_init: String, // auto | config
    pub max_iterations: usize,
    pub tolerance: f64,

    // simulation
    pub sim_mode: String,
    pub sim_n: usize,
    pub sensors: usize,
    pub duration: f64,
    pub extent: f64,
    pub speed: f64,

    // preprocessing
    pub median_window: usize,
    pub warmup: f64,
    pub log_transform: bool,

    // prediction grid
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub grid_nt: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            out: None,
            fit_file: None,
            traj: None,
            lonlat: false,
            seed: 0,
            threads: 0,
            desk_limit: stgp::DEFAULT_DESK_LIMIT,
            ordering: "maxmin".into(),
            distance: "st".into(),
            policy: "any_sensor".into(),
            m: 30,
            m_list: vec![5, 10, 20, 40],
            m_pred: 30,
            kappa: None,
            kappa_grid: stgp::default_kappa_grid(),
            kappa_subsample: 500,
            kappa_neighbors: 10,
            kappa_power: 2.0,
            sigma2: 0.026,
            theta1: 4000.0,
            theta2: 1000.0,
            tau2: 0.029,
            gamma: 0.026,
            model: "hierarchical".into(),
            fit_init: "auto".into(),
            max_iterations: 1000,
            tolerance: 1e-6,
            sim_mode: "compact".into(),
            sim_n: 3000,
            sensors: 8,
            duration: 7200.0,
            extent: 10_000.0,
            speed: 8.0,
            median_window: 1,
            warmup: 0.0,
            log_transform: false,
            grid_nx: 100,
            grid_ny: 100,
            grid_nt: 12,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse::<T>(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected a boolean, got `{value}`"))),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "fit_file" => self.fit_file = Some(PathBuf::from(value)),
            "traj" => self.traj = Some(PathBuf::from(value)),
            "lonlat" => self.lonlat = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "desk_limit" => self.desk_limit = parse(key, value)?,
            "ordering" => self.ordering = value.into(),
            "distance" => self.distance = value.into(),
            "policy" => self.policy = value.into(),
            "m" => self.m = parse(key, value)?,
            "m_list" => {
                let list: Vec<usize> = parse_list(key, value)?;
                if list.is_empty() || list.windows(2).any(|w| w[0] >= w[1]) || list[0] == 0 {
                    return Err(Error::Config(
                        "m_list must be nonempty, strictly increasing, and >= 1".into(),
                    ));
                }
                self.m_list = list;
            }
            "m_pred" => self.m_pred = parse(key, value)?,
            "kappa" => {
                self.kappa = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "kappa_grid" => self.kappa_grid = parse_list(key, value)?,
            "kappa_subsample" => self.kappa_subsample = parse(key, value)?,
            "kappa_neighbors" => self.kappa_neighbors = parse(key, value)?,
            "kappa_power" => self.kappa_power = parse(key, value)?,
            "sigma2" => self.sigma2 = parse(key, value)?,
            "theta1" => self.theta1 = parse(key, value)?,
            "theta2" => self.theta2 = parse(key, value)?,
            "tau2" => self.tau2 = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "model" => self.model = value.into(),
            "fit_init" => match value {
                "auto" | "config" => self.fit_init = value.into(),
                _ => {
                    return Err(Error::Config(format!(
                        "key `fit_init`: expected auto|config, got `{value}`"
                    )))
                }
            },
            "max_iterations" => self.max_iterations = parse(key, value)?,
            "tolerance" => self.tolerance = parse(key, value)?,
            "sim_mode" => self.sim_mode = value.into(),
            "sim_n" => self.sim_n = parse(key, value)?,
            "sensors" => self.sensors = parse(key, value)?,
            "duration" => self.duration = parse(key, value)?,
            "extent" => self.extent = parse(key, value)?,
            "speed" => self.speed = parse(key, value)?,
            "median_window" => self.median_window = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "log_transform" => self.log_transform = parse_bool(key, value)?,
            "grid_nx" => self.grid_nx = parse(key, value)?,
            "grid_ny" => self.grid_ny = parse(key, value)?,
            "grid_nt" => self.grid_nt = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Read a flat `key = value` file; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Effective configuration in reloadable form.
    pub fn dump(&self) -> String {
        let mut pairs: BTreeMap<&str, String> = BTreeMap::new();
        if let Some(p) = &self.data {
            pairs.insert("data", p.display().to_string());
        }
        if let Some(p) = &self.out {
            pairs.insert("out", p.display().to_string());
        }
        if let Some(p) = &self.fit_file {
            pairs.insert("fit_file", p.display().to_string());
        }
        if let Some(p) = &self.traj {
            pairs.insert("traj", p.display().to_string());
        }
        pairs.insert("lonlat", self.lonlat.to_string());
        pairs.insert("seed", self.seed.to_string());
        pairs.insert("threads", self.threads.to_string());
        pairs.insert("desk_limit", self.desk_limit.to_string());
        pairs.insert("ordering", self.ordering.clone());
        pairs.insert("distance", self.distance.clone());
        pairs.insert("policy", self.policy.clone());
        pairs.insert("m", self.m.to_string());
        pairs.insert(
            "m_list",
            self.m_list.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
        );
        pairs.insert("m_pred", self.m_pred.to_string());
        pairs.insert(
            "kappa",
            self.kappa.map(|k| k.to_string()).unwrap_or_else(|| "auto".into()),
        );
        pairs.insert(
            "kappa_grid",
            self.kappa_grid.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
        );
        pairs.insert("kappa_subsample", self.kappa_subsample.to_string());
        pairs.insert("kappa_neighbors", self.kappa_neighbors.to_string());
        pairs.insert("kappa_power", self.kappa_power.to_string());
        pairs.insert("sigma2", self.sigma2.to_string());
        pairs.insert("theta1", self.theta1.to_string());
        pairs.insert("theta2", self.theta2.to_string());
        pairs.insert("tau2", self.tau2.to_string());
        pairs.insert("gamma", self.gamma.to_string());
        pairs.insert("model", self.model.clone());
        pairs.insert("fit_init", self.fit_init.clone());
        pairs.insert("max_iterations", self.max_iterations.to_string());
        pairs.insert("tolerance", self.tolerance.to_string());
        pairs.insert("sim_mode", self.sim_mode.clone());
        pairs.insert("sim_n", self.sim_n.to_string());
        pairs.insert("sensors", self.sensors.to_string());
        pairs.insert("duration", self.duration.to_string());
        pairs.insert("extent", self.extent.to_string());
        pairs.insert("speed", self.speed.to_string());
        pairs.insert("median_window", self.median_window.to_string());
        pairs.insert("warmup", self.warmup.to_string());
        pairs.insert("log_transform", self.log_transform.to_string());
        pairs.insert("grid_nx", self.grid_nx.to_string());
        pairs.insert("grid_ny", self.grid_ny.to_string());
        pairs.insert("grid_nt", self.grid_nt.to_string());

        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn covariance_params(&self, kappa: f64) -> Result<stgp::CovarianceParams> {
        stgp::CovarianceParams::new(self.sigma2, self.theta1, self.theta2, self.tau2, self.gamma, kappa)
    }
}
