//! Covariance model and Gaussian-process simulation.
//!
//! The observation covariance combines an exponential space-time kernel,
//! a nugget on the diagonal, and a per-sensor offset variance that is
//! marginalized into the covariance: two observations from the same
//! sensor gain an extra `gamma`, regardless of their distance,
//!
//! `cov(i, j) = sigma2 * exp(-d_s/theta1 - d_t/theta2)
//!             + tau2 * [i = j] + gamma * [sensor_i = sensor_j]`.
//!
//! Simulation offers the marginal (`Compact`) route through a Cholesky
//! factor of the full covariance, and the `Hierarchical` route that draws
//! the latent field, per-sensor offsets and nugget noise separately; the
//! two agree in distribution.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, ObservationRecord};
use crate::error::{Error, Result};
use crate::{instrument, par};

/// Covariance parameters plus the metric time scale `kappa` used when
/// space-time distances are needed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceParams {
    /// Process variance (log-units squared).
    pub sigma2: f64,
    /// Spatial range in meters.
    pub theta1: f64,
    /// Temporal range in seconds.
    pub theta2: f64,
    /// Nugget variance; strictly positive so duplicated points stay
    /// positive definite.
    pub tau2: f64,
    /// Sensor-offset variance; zero collapses to the classical model.
    pub gamma: f64,
    /// Metric time scaling in m^2/s^2.
    pub kappa: f64,
}

impl CovarianceParams {
    pub fn new(
        sigma2: f64,
        theta1: f64,
        theta2: f64,
        tau2: f64,
        gamma: f64,
        kappa: f64,
    ) -> Result<Self> {
        let prm = CovarianceParams {
            sigma2,
            theta1,
            theta2,
            tau2,
            gamma,
            kappa,
        };
        prm.validate()?;
        Ok(prm)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma2", self.sigma2),
            ("theta1", self.theta1),
            ("theta2", self.theta2),
            ("tau2", self.tau2),
            ("kappa", self.kappa),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Domain(format!(
                "gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

impl Default for CovarianceParams {
    /// Defaults representative of city-scale air-quality sensing in
    /// log-concentration units, meters and seconds.
    fn default() -> Self {
        CovarianceParams {
            sigma2: 0.026,
            theta1: 4000.0,
            theta2: 1000.0,
            tau2: 0.029,
            gamma: 0.026,
            kappa: 16.0,
        }
    }
}

/// Covariance between two observations. `same_index` marks the diagonal
/// (the nugget applies only there); the sensor term applies whenever both
/// records come from the same sensor.
pub fn kernel(
    a: &ObservationRecord,
    b: &ObservationRecord,
    prm: &CovarianceParams,
    same_index: bool,
) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let d_s = (dx * dx + dy * dy).sqrt();
    let d_t = (a.t - b.t).abs();
    let mut cov = prm.sigma2 * (-d_s / prm.theta1 - d_t / prm.theta2).exp();
    if same_index {
        cov += prm.tau2;
    }
    if a.sensor_id == b.sensor_id {
        cov += prm.gamma;
    }
    cov
}

/// A dense symmetric positive-definite covariance with its lower Cholesky
/// factor and log-determinant.
#[derive(Debug, Clone)]
pub struct CovarianceMatrix {
    matrix: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
    logdet: f64,
}

impl CovarianceMatrix {
    /// Factorize a dense symmetric matrix. On failure the error reports
    /// the order of the leading minor where positive definiteness broke.
    pub fn from_dense(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        instrument::note_dense_alloc(n, n);
        match nalgebra::Cholesky::new(matrix.clone()) {
            Some(chol) => {
                let chol_lower = chol.unpack();
                let logdet = 2.0 * (0..n).map(|i| chol_lower[(i, i)].ln()).sum::<f64>();
                Ok(CovarianceMatrix {
                    matrix,
                    chol_lower,
                    logdet,
                })
            }
            None => Err(Error::cholesky("covariance matrix", failing_minor(&matrix))),
        }
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    /// Lower-triangular Cholesky factor `L` with `L L^T = Sigma`.
    pub fn chol_lower(&self) -> &DMatrix<f64> {
        &self.chol_lower
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Solve `Sigma x = b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }

    /// Solve `Sigma X = B` column-wise.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        instrument::note_dense_alloc(b.nrows(), b.ncols());
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            let mut v = DVector::from_column_slice(col.as_slice());
            self.solve_in_place(&mut v);
            col.copy_from(&v);
        }
        x
    }

    fn solve_in_place(&self, x: &mut DVector<f64>) {
        let l = &self.chol_lower;
        l.solve_lower_triangular_mut(x);
        l.tr_solve_lower_triangular_mut(x);
    }
}

/// Locate the 1-based leading minor at which a naive Cholesky breaks;
/// only used to annotate factorization errors.
fn failing_minor(m: &DMatrix<f64>) -> usize {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d.is_finite() && d > 0.0) {
            return j + 1;
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    n
}

fn assemble(ds: &Dataset, entry: impl Fn(usize, usize) -> f64 + Sync + Send) -> DMatrix<f64> {
    let n = ds.n();
    instrument::note_dense_alloc(n, n);
    let mut data = vec![0.0f64; n * n];
    par::fill_chunks(&mut data, n, |j, col| {
        for (i, slot) in col.iter_mut().enumerate() {
            *slot = entry(i, j);
        }
    });
    DMatrix::from_vec(n, n, data)
}

/// Assemble and factorize the full observation covariance.
pub fn build_sigma(ds: &Dataset, prm: &CovarianceParams) -> Result<CovarianceMatrix> {
    prm.validate()?;
    let mat = assemble(ds, |i, j| kernel(ds.record(i), ds.record(j), prm, i == j));
    CovarianceMatrix::from_dense(mat)
}

/// Latent-process covariance `R` (no nugget, no sensor term) with a small
/// diagonal jitter so near-duplicate trajectory points stay factorizable.
fn build_latent_r(ds: &Dataset, prm: &CovarianceParams) -> Result<CovarianceMatrix> {
    let bare = CovarianceParams {
        tau2: 1.0,
        gamma: 0.0,
        ..*prm
    };
    let jitter = 1e-10 * prm.sigma2;
    let mat = assemble(ds, |i, j| {
        let mut v = kernel(ds.record(i), ds.record(j), &bare, false);
        if i == j {
            v += jitter;
        }
        v
    });
    CovarianceMatrix::from_dense(mat)
}

/// How simulated values are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimulationMode {
    /// Draw through the Cholesky factor of the marginal covariance.
    Compact,
    /// Draw latent field, sensor offsets and nugget noise separately.
    Hierarchical,
}

impl std::str::FromStr for SimulationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compact" => Ok(SimulationMode::Compact),
            "hierarchical" => Ok(SimulationMode::Hierarchical),
            other => Err(Error::Config(format!(
                "unknown simulation mode `{other}` (expected compact|hierarchical)"
            ))),
        }
    }
}

impl std::fmt::Display for SimulationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SimulationMode::Compact => "compact",
            SimulationMode::Hierarchical => "hierarchical",
        })
    }
}

/// Simulate observation values on the dataset's coordinates. Values are
/// deterministic given `(seed, mode)`; the draw order is fixed (compact:
/// n field normals; hierarchical: n field normals, then J offsets, then
/// n nugget normals) from one seeded ChaCha stream.
pub fn simulate(
    ds: &Dataset,
    prm: &CovarianceParams,
    mean: Option<&DVector<f64>>,
    seed: u64,
    mode: SimulationMode,
) -> Result<DVector<f64>> {
    prm.validate()?;
    let n = ds.n();
    if let Some(m) = mean {
        if m.len() != n {
            return Err(Error::Input(format!("mean length {} != n = {}", m.len(), n)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = match mode {
        SimulationMode::Compact => {
            let sigma = build_sigma(ds, prm)?;
            let eps = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            sigma.chol_lower() * eps
        }
        SimulationMode::Hierarchical => {
            let latent = build_latent_r(ds, prm)?;
            let eps = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let mut z = latent.chol_lower() * eps;
            let offsets: Vec<f64> = (0..ds.sensor_count())
                .map(|_| prm.gamma.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let tau = prm.tau2.sqrt();
            for (i, r) in ds.records().iter().enumerate() {
                z[i] += offsets[r.sensor_id - 1] + tau * rng.sample::<f64, _>(StandardNormal);
            }
            z
        }
    };
    if let Some(m) = mean {
        z += m;
    }
    Ok(z)
}
