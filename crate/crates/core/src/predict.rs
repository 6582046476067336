//! Kriging prediction at unsampled space-time points.
//!
//! The prediction target is the latent noise-free field plus the linear
//! mean: prior variance and cross-covariances exclude both the nugget
//! and the sensor offset (a new location belongs to no sensor), while
//! conditioning always uses the full observation covariance. Exact
//! prediction conditions on every observation (desk scale); the scalable
//! variant conditions each point on its nearest observations only, and
//! prediction points never condition on each other.

use nalgebra::{DMatrix, DVector};

use crate::covariance::{build_sigma, kernel, CovarianceParams};
use crate::data::{Dataset, PredictionPoint};
use crate::error::{Error, Result};
use crate::neighbors::{distance, k_nearest, DistanceSpec};
use crate::{instrument, par};

/// Predictive means and variances, aligned with the input points.
#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Latent cross-covariance between a prediction point and an observation.
fn latent_cross(pt: &PredictionPoint, rec: &crate::data::ObservationRecord, prm: &CovarianceParams) -> f64 {
    let dx = pt.x - rec.x;
    let dy = pt.y - rec.y;
    let d_s = (dx * dx + dy * dy).sqrt();
    let d_t = (pt.t - rec.t).abs();
    prm.sigma2 * (-d_s / prm.theta1 - d_t / prm.theta2).exp()
}

fn check_points(ds: &Dataset, pts: &[PredictionPoint]) -> Result<()> {
    for (i, pt) in pts.iter().enumerate() {
        if pt.covariates.len() != ds.covariate_count() {
            return Err(Error::Input(format!(
                "prediction point {i}: covariate length {} != p = {}",
                pt.covariates.len(),
                ds.covariate_count()
            )));
        }
        if !(pt.x.is_finite() && pt.y.is_finite() && pt.t.is_finite())
            || pt.covariates.iter().any(|c| !c.is_finite())
        {
            return Err(Error::Input(format!("prediction point {i} has non-finite fields")));
        }
    }
    Ok(())
}

fn clamp_variance(v: f64, at: &str) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v > -1e-9 {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!("negative predictive variance {v} at {at}")))
    }
}

fn mean_shift(pt: &PredictionPoint, beta: &DVector<f64>) -> f64 {
    pt.covariates.iter().zip(beta.iter()).map(|(c, b)| c * b).sum()
}

/// Exact Gaussian conditioning on all observations. Desk scale only.
pub fn predict_exact(
    ds: &Dataset,
    prm: &CovarianceParams,
    beta: &DVector<f64>,
    pts: &[PredictionPoint],
    desk_limit: usize,
) -> Result<PredictionResult> {
    if ds.n() > desk_limit {
        return Err(Error::Capacity(format!(
            "exact prediction on n = {} exceeds the desk limit {desk_limit}",
            ds.n()
        )));
    }
    if beta.len() != ds.covariate_count() {
        return Err(Error::Input(format!(
            "beta length {} != p = {}",
            beta.len(),
            ds.covariate_count()
        )));
    }
    check_points(ds, pts)?;
    prm.validate()?;

    let sigma = build_sigma(ds, prm)?;
    let residual = ds.values() - ds.design_matrix() * beta;
    let alpha = sigma.solve_vec(&residual);
    let n = ds.n();

    let rows = par::map_range(pts.len(), |j| -> Result<(f64, f64)> {
        let pt = &pts[j];
        let cross = DVector::from_iterator(n, ds.records().iter().map(|r| latent_cross(pt, r, prm)));
        let mean = mean_shift(pt, beta) + cross.dot(&alpha);
        let solved = sigma.solve_vec(&cross);
        let variance = clamp_variance(prm.sigma2 - cross.dot(&solved), &format!("point {j}"))?;
        Ok((mean, variance))
    });
    collect_rows(rows)
}

/// Local kriging: each point conditions on its `m_pred` nearest
/// observations under `spec`. Matches exact prediction when `m_pred >= n`.
pub fn predict_vecchia(
    ds: &Dataset,
    prm: &CovarianceParams,
    beta: &DVector<f64>,
    pts: &[PredictionPoint],
    m_pred: usize,
    spec: DistanceSpec,
) -> Result<PredictionResult> {
    if m_pred == 0 {
        return Err(Error::Input("m_pred must be >= 1".into()));
    }
    if beta.len() != ds.covariate_count() {
        return Err(Error::Input(format!(
            "beta length {} != p = {}",
            beta.len(),
            ds.covariate_count()
        )));
    }
    check_points(ds, pts)?;
    prm.validate()?;

    let n = ds.n();
    let residual = ds.values() - ds.design_matrix() * beta;
    let rows = par::map_range(pts.len(), |j| -> Result<(f64, f64)> {
        let pt = &pts[j];
        let target = pt.point();
        let neighbors = {
            let mut picked = k_nearest(
                (0..n).map(|i| (distance(ds.record(i).point(), target, spec), i)),
                m_pred,
            );
            picked.sort_unstable();
            picked
        };
        let m = neighbors.len();
        instrument::note_dense_alloc(m, m);
        let mut local = DMatrix::<f64>::zeros(m, m);
        let mut cross = DVector::<f64>::zeros(m);
        let mut resid = DVector::<f64>::zeros(m);
        for (a, &ia) in neighbors.iter().enumerate() {
            for (b, &ib) in neighbors.iter().enumerate() {
                local[(a, b)] = kernel(ds.record(ia), ds.record(ib), prm, ia == ib);
            }
            cross[a] = latent_cross(pt, ds.record(ia), prm);
            resid[a] = residual[ia];
        }
        let chol = nalgebra::Cholesky::new(local).ok_or_else(|| {
            Error::Numerical(format!("local conditioning block at point {j} is not positive definite"))
        })?;
        let weights = chol.solve(&cross);
        let mean = mean_shift(pt, beta) + weights.dot(&resid);
        let variance = clamp_variance(prm.sigma2 - cross.dot(&weights), &format!("point {j}"))?;
        Ok((mean, variance))
    });
    collect_rows(rows)
}

fn collect_rows(rows: Vec<Result<(f64, f64)>>) -> Result<PredictionResult> {
    let mut mean = Vec::with_capacity(rows.len());
    let mut variance = Vec::with_capacity(rows.len());
    for row in rows {
        let (m, v) = row?;
        mean.push(m);
        variance.push(v);
    }
    Ok(PredictionResult { mean, variance })
}

/// Regular space-time prediction grid: `nx` by `ny` points inclusive of
/// the box edges, replicated over the time slices.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
    pub t_slices: Vec<f64>,
}

impl GridSpec {
    /// Grid over the dataset's bounding box with `nt` evenly spaced time
    /// slices spanning the observed window (inclusive endpoints).
    pub fn over_dataset(ds: &Dataset, nx: usize, ny: usize, nt: usize) -> Self {
        let (x_min, x_max, y_min, y_max) = ds.bounding_box();
        let (t_min, t_max) = ds.time_span();
        let t_slices = linspace(t_min, t_max, nt);
        GridSpec {
            x_min,
            x_max,
            y_min,
            y_max,
            nx,
            ny,
            t_slices,
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.t_slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Materialize grid nodes in deterministic `(t, y, x)-major` order with
/// intercept-only covariates padded with zeros to length `p`.
pub fn grid_points(spec: &GridSpec, p: usize) -> Result<Vec<PredictionPoint>> {
    if spec.nx == 0 || spec.ny == 0 || spec.t_slices.is_empty() {
        return Err(Error::Input("grid must have nx, ny and time slices >= 1".into()));
    }
    if p == 0 {
        return Err(Error::Input("covariate length must be >= 1".into()));
    }
    let xs = linspace(spec.x_min, spec.x_max, spec.nx);
    let ys = linspace(spec.y_min, spec.y_max, spec.ny);
    let mut covariates = vec![0.0; p];
    covariates[0] = 1.0;
    let mut pts = Vec::with_capacity(spec.len());
    for &t in &spec.t_slices {
        for &y in &ys {
            for &x in &xs {
                pts.push(PredictionPoint {
                    x,
                    y,
                    t,
                    covariates: covariates.clone(),
                });
            }
        }
    }
    Ok(pts)
}
