//! Flat key-value result files.
//!
//! Fit results and metadata sidecars are written as `key = value` lines
//! with shortest-round-trip float formatting, so files parse back into
//! the exact in-memory values.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use stgp::{
    ConditioningPolicy, CovarianceParams, DistanceSpec, Error, FitResult, ModelKind, OrderingKind,
    Result,
};

pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(k);
        text.push_str(" = ");
        text.push_str(v);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Input(format!(
                "{}:{}: expected `key = value`",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn fit_result_pairs(fit: &FitResult) -> Vec<(String, String)> {
    let mut pairs = vec![
        ("model".to_string(), fit.model.to_string()),
        ("ordering".to_string(), fit.ordering.to_string()),
        ("distance".to_string(), fit.distance.token().to_string()),
        ("policy".to_string(), fit.policy.to_string()),
        ("m".to_string(), fit.m.to_string()),
        ("kappa".to_string(), format!("{}", fit.params.kappa)),
        ("sigma2".to_string(), format!("{}", fit.params.sigma2)),
        ("theta1".to_string(), format!("{}", fit.params.theta1)),
        ("theta2".to_string(), format!("{}", fit.params.theta2)),
        ("tau2".to_string(), format!("{}", fit.params.tau2)),
        ("gamma".to_string(), format!("{}", fit.params.gamma)),
    ];
    for (i, b) in fit.beta.iter().enumerate() {
        pairs.push((format!("beta_{i}"), format!("{b}")));
    }
    pairs.push(("loglik".to_string(), format!("{}", fit.loglik)));
    pairs.push(("iterations".to_string(), fit.iterations.to_string()));
    pairs.push(("converged".to_string(), fit.converged.to_string()));
    pairs
}

fn required<'a>(map: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Input(format!("{}: missing key `{key}`", path.display())))
}

fn required_f64(map: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<f64> {
    required(map, key, path)?
        .parse::<f64>()
        .map_err(|_| Error::Input(format!("{}: key `{key}` is not a number", path.display())))
}

/// Parse a fit file written by [`fit_result_pairs`] back into a
/// [`FitResult`].
pub fn read_fit_result(path: &Path) -> Result<FitResult> {
    let map = read_kv(path)?;
    let kappa = required_f64(&map, "kappa", path)?;
    let params = CovarianceParams {
        sigma2: required_f64(&map, "sigma2", path)?,
        theta1: required_f64(&map, "theta1", path)?,
        theta2: required_f64(&map, "theta2", path)?,
        tau2: required_f64(&map, "tau2", path)?,
        gamma: required_f64(&map, "gamma", path)?,
        kappa,
    };
    params.validate()?;
    let mut beta = Vec::new();
    while map.contains_key(&format!("beta_{}", beta.len())) {
        beta.push(required_f64(&map, &format!("beta_{}", beta.len()), path)?);
    }
    if beta.is_empty() {
        return Err(Error::Input(format!("{}: no beta coefficients", path.display())));
    }
    let model: ModelKind = required(&map, "model", path)?.parse()?;
    let ordering: OrderingKind = required(&map, "ordering", path)?.parse()?;
    let distance = DistanceSpec::parse(required(&map, "distance", path)?, kappa)?;
    let policy: ConditioningPolicy = required(&map, "policy", path)?.parse()?;
    let m: usize = required(&map, "m", path)?
        .parse()
        .map_err(|_| Error::Input(format!("{}: key `m` is not an integer", path.display())))?;
    let iterations: usize = required(&map, "iterations", path)?
        .parse()
        .map_err(|_| Error::Input(format!("{}: key `iterations` is not an integer", path.display())))?;
    let converged = matches!(required(&map, "converged", path)?, "true" | "1");
    Ok(FitResult {
        params,
        beta: DVector::from_vec(beta),
        loglik: required_f64(&map, "loglik", path)?,
        iterations,
        converged,
        model,
        ordering,
        distance,
        policy,
        m,
    })
}
