//! Subcommand implementations.

use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use stgp::{
    are, build_conditioning_sets, build_sigma, estimate_kappa, fit, godambe, grid_points,
    kl_divergence, load_observations, order_by, predict_exact, predict_vecchia, save_observations,
    simulate, vecchia_factor, AreAggregate, ColumnSchema, ConditioningPolicy, CovParam, Dataset,
    DistanceSpec, Error, FitConfig, FitResult, GridSpec, KappaConfig, ModelKind, OrderingKind,
    Result, SimulationMode, TrajectoryConfig,
};

use crate::config::RunConfig;
use crate::kv;

fn require_path(opt: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    opt.clone()
        .ok_or_else(|| Error::Config(format!("{what} not set (flag or config key)")))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = require_path(&cfg.data, "data path")?;
    if !path.exists() {
        return Err(Error::Input(format!("data file {} does not exist", path.display())));
    }
    let schema = if cfg.lonlat {
        ColumnSchema::lonlat()
    } else {
        ColumnSchema::default()
    };
    let ds = load_observations(&path, &schema)?;
    if cfg.median_window != 1 || cfg.warmup > 0.0 || cfg.log_transform {
        stgp::preprocess(&ds, cfg.median_window, cfg.warmup, cfg.log_transform)
    } else {
        Ok(ds)
    }
}

/// Resolve the metric scale: explicit value, or inverse-distance-weighted
/// estimation on a subsample when set to `auto`.
fn resolve_kappa(cfg: &RunConfig, ds: &Dataset) -> Result<f64> {
    if let Some(k) = cfg.kappa {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::Config(format!("kappa must be > 0, got {k}")));
        }
        return Ok(k);
    }
    let kappa_cfg = KappaConfig {
        subsample_size: cfg.kappa_subsample.min(ds.n()),
        grid: cfg.kappa_grid.clone(),
        idw_neighbors: cfg.kappa_neighbors,
        idw_power: cfg.kappa_power,
        seed: cfg.seed,
    };
    estimate_kappa(ds, &kappa_cfg)
}

fn distance_spec(cfg: &RunConfig, kappa: f64) -> Result<DistanceSpec> {
    DistanceSpec::parse(&cfg.distance, kappa)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let out = require_path(&cfg.out, "output path")?;
    let mode: SimulationMode = cfg.sim_mode.parse()?;

    let coords = match &cfg.traj {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Input(format!(
                    "trajectory file {} does not exist",
                    path.display()
                )));
            }
            let schema = if cfg.lonlat {
                ColumnSchema::lonlat()
            } else {
                ColumnSchema::default()
            };
            load_observations(path, &schema)?
        }
        None => stgp::traj::generate(&TrajectoryConfig {
            sensors: cfg.sensors,
            count: cfg.sim_n,
            duration_s: cfg.duration,
            extent_m: cfg.extent,
            speed_mps: cfg.speed,
            seed: cfg.seed,
        })?,
    };
    if coords.n() > cfg.desk_limit {
        return Err(Error::Capacity(format!(
            "simulation needs a dense factorization of n = {}; raise --desk-limit or lower sim_n",
            coords.n()
        )));
    }

    let kappa = cfg.kappa.unwrap_or(16.0);
    let prm = cfg.covariance_params(kappa)?;
    let values = simulate(&coords, &prm, None, cfg.seed, mode)?;
    let ds = coords.with_values(&values)?;
    save_observations(&ds, &out)?;

    let meta_path = out.with_extension("meta");
    let pairs = vec![
        ("n".to_string(), ds.n().to_string()),
        ("sensors".to_string(), ds.sensor_count().to_string()),
        ("duration".to_string(), format!("{}", cfg.duration)),
        ("extent".to_string(), format!("{}", cfg.extent)),
        ("speed".to_string(), format!("{}", cfg.speed)),
        ("seed".to_string(), cfg.seed.to_string()),
        ("sim_mode".to_string(), mode.to_string()),
        ("sigma2".to_string(), format!("{}", prm.sigma2)),
        ("theta1".to_string(), format!("{}", prm.theta1)),
        ("theta2".to_string(), format!("{}", prm.theta2)),
        ("tau2".to_string(), format!("{}", prm.tau2)),
        ("gamma".to_string(), format!("{}", prm.gamma)),
        ("kappa".to_string(), format!("{}", prm.kappa)),
        (
            "trajectory".to_string(),
            cfg.traj
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "synthetic".into()),
        ),
    ];
    kv::write_kv(&meta_path, &pairs)?;
    println!(
        "wrote {} ({} observations, {} sensors) and {}",
        out.display(),
        ds.n(),
        ds.sensor_count(),
        meta_path.display()
    );
    Ok(())
}

pub fn cmd_kappa(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let kappa_cfg = KappaConfig {
        subsample_size: cfg.kappa_subsample.min(ds.n()),
        grid: cfg.kappa_grid.clone(),
        idw_neighbors: cfg.kappa_neighbors,
        idw_power: cfg.kappa_power,
        seed: cfg.seed,
    };
    let kappa = estimate_kappa(&ds, &kappa_cfg)?;
    println!("kappa = {kappa}");
    if let Some(out) = &cfg.out {
        kv::write_kv(out, &[("kappa".to_string(), format!("{kappa}"))])?;
    }
    Ok(())
}

struct SweepRow {
    ordering: OrderingKind,
    distance: &'static str,
    policy: ConditioningPolicy,
    m: usize,
    kl: f64,
    ratios: Vec<f64>,
    are_sum: f64,
    are_mean: f64,
    wall_ms: f64,
}

/// All orderings x distances x policies at each neighborhood size, each
/// scored by divergence and estimation efficiency against the true
/// parameters, plus a full-conditioning control row.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let out = require_path(&cfg.out, "output path")?;
    let ds = load_dataset(cfg)?;
    let n = ds.n();
    if n > cfg.desk_limit {
        return Err(Error::Capacity(format!(
            "sweep needs dense references for n = {n}; raise --desk-limit or subsample the data"
        )));
    }
    let kappa = resolve_kappa(cfg, &ds)?;
    let truth = cfg.covariance_params(kappa)?;
    let sigma_p = build_sigma(&ds, &truth)?;

    // Gamma sits on the boundary when zero; variance ratios for it are
    // undefined there, so it drops out of the free set.
    let free: Vec<CovParam> = if truth.gamma > 0.0 {
        CovParam::ALL.to_vec()
    } else {
        CovParam::ALL
            .into_iter()
            .filter(|p| *p != CovParam::Gamma)
            .collect()
    };

    let distances = [
        DistanceSpec::Spatial,
        DistanceSpec::Temporal,
        DistanceSpec::SpatioTemporal { kappa },
    ];
    let policies = [ConditioningPolicy::AnySensor, ConditioningPolicy::SameSensor];

    let mut rows: Vec<SweepRow> = Vec::new();
    let evaluate = |perm: &stgp::Permutation,
                    ordering: OrderingKind,
                    spec: DistanceSpec,
                    policy: ConditioningPolicy,
                    m: usize|
     -> Result<SweepRow> {
        let start = Instant::now();
        let sets = build_conditioning_sets(&ds, perm, m, spec, policy);
        let factor = vecchia_factor(&ds, &truth, perm, &sets)?;
        let kl = kl_divergence(&sigma_p, &factor)?;
        let info = godambe(&ds, &truth, perm, &sets, &free, cfg.desk_limit)?;
        let efficiency = are(&info, AreAggregate::Mean)?;
        let mut ratios = vec![f64::NAN; CovParam::ALL.len()];
        for (slot, param) in CovParam::ALL.iter().enumerate() {
            if let Some(pos) = free.iter().position(|f| f == param) {
                ratios[slot] = efficiency.ratios[pos];
            }
        }
        Ok(SweepRow {
            ordering,
            distance: spec.token(),
            policy,
            m,
            kl,
            ratios,
            are_sum: efficiency.sum,
            are_mean: efficiency.mean,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    };

    for ordering in OrderingKind::ALL {
        for spec in distances {
            let perm = order_by(ordering, &ds, spec, cfg.seed);
            for policy in policies {
                for &m in &cfg.m_list {
                    rows.push(evaluate(&perm, ordering, spec, policy, m)?);
                }
            }
        }
    }
    // Full-conditioning control: the approximation is exact, so the
    // divergence must vanish and every ratio must be 1.
    {
        let spec = DistanceSpec::SpatioTemporal { kappa };
        let perm = order_by(OrderingKind::Maxmin, &ds, spec, cfg.seed);
        rows.push(evaluate(
            &perm,
            OrderingKind::Maxmin,
            spec,
            ConditioningPolicy::AnySensor,
            n - 1,
        )?);
    }

    let mut file = std::fs::File::create(&out)?;
    writeln!(
        file,
        "ordering,distance,policy,m,kl,log_kl,are_sum,are_mean,log_are_mean,\
         ratio_sigma2,ratio_theta1,ratio_theta2,ratio_tau2,ratio_gamma,wall_ms"
    )?;
    for r in &rows {
        writeln!(
            file,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            r.ordering,
            r.distance,
            r.policy,
            r.m,
            r.kl,
            r.kl.ln(),
            r.are_sum,
            r.are_mean,
            r.are_mean.ln(),
            r.ratios[0],
            r.ratios[1],
            r.ratios[2],
            r.ratios[3],
            r.ratios[4],
            r.wall_ms
        )?;
    }
    println!("wrote {} ({} rows)", out.display(), rows.len());
    Ok(())
}

fn models_requested(cfg: &RunConfig) -> Result<Vec<ModelKind>> {
    match cfg.model.as_str() {
        "both" => Ok(vec![ModelKind::Classical, ModelKind::Hierarchical]),
        other => Ok(vec![other.parse::<ModelKind>()?]),
    }
}

fn fit_one(cfg: &RunConfig, ds: &Dataset, model: ModelKind, kappa: f64) -> Result<FitResult> {
    let spec = distance_spec(cfg, kappa)?;
    let init = match cfg.fit_init.as_str() {
        "config" => Some(cfg.covariance_params(kappa)?),
        _ => None,
    };
    let fit_cfg = FitConfig {
        ordering: cfg.ordering.parse()?,
        distance: spec,
        policy: cfg.policy.parse()?,
        m: cfg.m,
        model,
        init,
        max_iterations: cfg.max_iterations,
        tolerance: cfg.tolerance,
        seed: cfg.seed,
    };
    fit(ds, &fit_cfg)
}

fn param_cell(v: f64, present: bool) -> String {
    if present {
        format!("{v:.6e}")
    } else {
        "-".to_string()
    }
}

/// Returns `true` when every requested model converged.
pub fn cmd_fit(cfg: &RunConfig) -> Result<bool> {
    let out = require_path(&cfg.out, "output path prefix")?;
    let ds = load_dataset(cfg)?;
    let kappa = resolve_kappa(cfg, &ds)?;
    let models = models_requested(cfg)?;

    let mut results = Vec::new();
    for model in models {
        let result = fit_one(cfg, &ds, model, kappa)?;
        let kv_path = PathBuf::from(format!("{}.{}.kv", out.display(), model));
        kv::write_kv(&kv_path, &kv::fit_result_pairs(&result))?;
        println!("wrote {}", kv_path.display());
        results.push(result);
    }

    // Machine-readable summary, one row per model.
    let csv_path = PathBuf::from(format!("{}.csv", out.display()));
    let p = ds.covariate_count();
    let mut file = std::fs::File::create(&csv_path)?;
    let beta_cols: Vec<String> = (0..p).map(|i| format!("beta_{i}")).collect();
    writeln!(
        file,
        "model,ordering,distance,policy,m,kappa,sigma2,theta1,theta2,tau2,gamma,loglik,iterations,converged,{}",
        beta_cols.join(",")
    )?;
    for r in &results {
        let betas: Vec<String> = r.beta.iter().map(|b| format!("{b}")).collect();
        writeln!(
            file,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.ordering,
            r.distance.token(),
            r.policy,
            r.m,
            r.params.kappa,
            r.params.sigma2,
            r.params.theta1,
            r.params.theta2,
            r.params.tau2,
            r.params.gamma,
            r.loglik,
            r.iterations,
            r.converged,
            betas.join(",")
        )?;
    }
    println!("wrote {}", csv_path.display());

    // Side-by-side parameter table.
    println!();
    println!("{:<28}{}", "parameter", results.iter().map(|r| format!("{:>16}", r.model.to_string())).collect::<String>());
    let rows: [(&str, fn(&FitResult) -> (f64, bool)); 5] = [
        ("variance sigma2", |r| (r.params.sigma2, true)),
        ("spatial range theta1 (m)", |r| (r.params.theta1, true)),
        ("temporal range theta2 (s)", |r| (r.params.theta2, true)),
        ("nugget tau2", |r| (r.params.tau2, true)),
        ("sensor offset gamma", |r| {
            (r.params.gamma, r.model == ModelKind::Hierarchical)
        }),
    ];
    for (label, extract) in rows {
        let cells: String = results
            .iter()
            .map(|r| {
                let (v, present) = extract(r);
                format!("{:>16}", param_cell(v, present))
            })
            .collect();
        println!("{label:<28}{cells}");
    }
    let ll: String = results.iter().map(|r| format!("{:>16.2}", r.loglik)).collect();
    println!("{:<28}{}", "log-likelihood", ll);

    Ok(results.iter().all(|r| r.converged))
}

pub fn cmd_predict(cfg: &RunConfig, exact: bool) -> Result<()> {
    let out = require_path(&cfg.out, "output path")?;
    let fit_path = require_path(&cfg.fit_file, "fit file")?;
    if !fit_path.exists() {
        return Err(Error::Input(format!("fit file {} does not exist", fit_path.display())));
    }
    let ds = load_dataset(cfg)?;
    let fit_result = kv::read_fit_result(&fit_path)?;
    if fit_result.beta.len() != ds.covariate_count() {
        return Err(Error::Input(format!(
            "fit has {} mean coefficients but the data carries p = {}",
            fit_result.beta.len(),
            ds.covariate_count()
        )));
    }

    let spec = GridSpec::over_dataset(&ds, cfg.grid_nx, cfg.grid_ny, cfg.grid_nt);
    let pts = grid_points(&spec, ds.covariate_count())?;
    let result = if exact {
        predict_exact(&ds, &fit_result.params, &fit_result.beta, &pts, cfg.desk_limit)?
    } else {
        let neighbor_spec = fit_result.distance;
        predict_vecchia(
            &ds,
            &fit_result.params,
            &fit_result.beta,
            &pts,
            cfg.m_pred,
            neighbor_spec,
        )?
    };

    let mut file = std::fs::File::create(&out)?;
    writeln!(file, "x,y,t,mean,variance")?;
    for (pt, (mean, var)) in pts
        .iter()
        .zip(result.mean.iter().zip(result.variance.iter()))
    {
        writeln!(file, "{},{},{},{},{}", pt.x, pt.y, pt.t, mean, var)?;
    }
    println!("wrote {} ({} rows)", out.display(), pts.len());
    Ok(())
}
