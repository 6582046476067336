//! Configuration quality metrics.
//!
//! Two complementary views of how much an ordered-conditional
//! approximation loses against the true model:
//!
//! - divergence `KL[p || p~] = 1/2 [tr(Q S_p) + ln|S_p~| - ln|S_p| - n]`
//!   between the true Gaussian and the implied one, where `Q = U U^T` is
//!   the implied precision;
//! - asymptotic relative efficiency of covariance-parameter estimation,
//!   from the exact Fisher information `I_p` and the sandwich information
//!   `H J^-1 H` of the approximate score under the true model, with
//!   `J[k,l] = 1/2 tr(Q_k S_p Q_l S_p)` and
//!   `H[k,l] = 1/2 tr(Q_kl S_p) + c''_kl`, both evaluated through central
//!   finite differences of the map `theta -> (Q(theta), c(theta))`.
//!
//! Derivatives of the dense covariance itself are analytic.

use nalgebra::DMatrix;

use crate::covariance::{build_sigma, CovarianceMatrix, CovarianceParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::neighbors::ConditioningSets;
use crate::ordering::Permutation;
use crate::vecchia::{VecchiaFactor, VecchiaGeometry};
use crate::{instrument, par};

/// Relative step for the finite differences over covariance parameters.
const FD_REL_STEP: f64 = 1e-4;

/// Covariance parameters under information analysis. The metric scale
/// and mean coefficients are excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovParam {
    Sigma2,
    Theta1,
    Theta2,
    Tau2,
    Gamma,
}

impl CovParam {
    pub const ALL: [CovParam; 5] = [
        CovParam::Sigma2,
        CovParam::Theta1,
        CovParam::Theta2,
        CovParam::Tau2,
        CovParam::Gamma,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            CovParam::Sigma2 => "sigma2",
            CovParam::Theta1 => "theta1",
            CovParam::Theta2 => "theta2",
            CovParam::Tau2 => "tau2",
            CovParam::Gamma => "gamma",
        }
    }

    pub fn get(&self, prm: &CovarianceParams) -> f64 {
        match self {
            CovParam::Sigma2 => prm.sigma2,
            CovParam::Theta1 => prm.theta1,
            CovParam::Theta2 => prm.theta2,
            CovParam::Tau2 => prm.tau2,
            CovParam::Gamma => prm.gamma,
        }
    }

    pub fn with(&self, prm: &CovarianceParams, value: f64) -> CovarianceParams {
        let mut out = *prm;
        match self {
            CovParam::Sigma2 => out.sigma2 = value,
            CovParam::Theta1 => out.theta1 = value,
            CovParam::Theta2 => out.theta2 = value,
            CovParam::Tau2 => out.tau2 = value,
            CovParam::Gamma => out.gamma = value,
        }
        out
    }
}

/// Divergence of the implied Gaussian from the true one; clamps tiny
/// negative rounding residue (> -1e-9) to zero.
pub fn kl_divergence(sigma_p: &CovarianceMatrix, factor: &VecchiaFactor) -> Result<f64> {
    let n = sigma_p.n();
    if factor.n() != n {
        return Err(Error::Input(format!(
            "factor covers {} observations but the covariance has n = {}",
            factor.n(),
            n
        )));
    }
    let trace = factor.quad_trace(sigma_p.matrix());
    let kl = 0.5 * (trace + factor.logdet_implied() - sigma_p.logdet() - n as f64);
    if kl < 0.0 && kl > -1e-9 {
        Ok(0.0)
    } else {
        Ok(kl)
    }
}

/// Analytic derivative of the dense covariance with respect to one
/// parameter.
pub(crate) fn sigma_derivative(ds: &Dataset, prm: &CovarianceParams, param: CovParam) -> DMatrix<f64> {
    let n = ds.n();
    instrument::note_dense_alloc(n, n);
    let mut data = vec![0.0f64; n * n];
    let entry = |i: usize, j: usize| -> f64 {
        let (a, b) = (ds.record(i), ds.record(j));
        match param {
            CovParam::Tau2 => {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            }
            CovParam::Gamma => {
                if a.sensor_id == b.sensor_id {
                    1.0
                } else {
                    0.0
                }
            }
            _ => {
                let dx = a.x - b.x;
                let dy = a.y - b.y;
                let d_s = (dx * dx + dy * dy).sqrt();
                let d_t = (a.t - b.t).abs();
                let e = (-d_s / prm.theta1 - d_t / prm.theta2).exp();
                match param {
                    CovParam::Sigma2 => e,
                    CovParam::Theta1 => prm.sigma2 * e * d_s / (prm.theta1 * prm.theta1),
                    CovParam::Theta2 => prm.sigma2 * e * d_t / (prm.theta2 * prm.theta2),
                    _ => unreachable!(),
                }
            }
        }
    };
    par::fill_chunks(&mut data, n, |j, col| {
        for (i, slot) in col.iter_mut().enumerate() {
            *slot = entry(i, j);
        }
    });
    DMatrix::from_vec(n, n, data)
}

fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

fn exact_fisher_given(
    ds: &Dataset,
    prm: &CovarianceParams,
    sigma: &CovarianceMatrix,
    free: &[CovParam],
) -> DMatrix<f64> {
    let q = free.len();
    let solved: Vec<DMatrix<f64>> = free
        .iter()
        .map(|&p| sigma.solve_mat(&sigma_derivative(ds, prm, p)))
        .collect();
    let mut info = DMatrix::<f64>::zeros(q, q);
    for k in 0..q {
        for l in k..q {
            let v = 0.5 * trace_product(&solved[k], &solved[l]);
            info[(k, l)] = v;
            info[(l, k)] = v;
        }
    }
    info
}

/// Exact Fisher information `I[k,l] = 1/2 tr(S^-1 S_k S^-1 S_l)` over the
/// chosen free parameters, with analytic covariance derivatives.
pub fn exact_fisher(
    ds: &Dataset,
    prm: &CovarianceParams,
    free: &[CovParam],
    desk_limit: usize,
) -> Result<DMatrix<f64>> {
    check_desk(ds.n(), desk_limit, "exact Fisher information")?;
    check_free(free)?;
    let sigma = build_sigma(ds, prm)?;
    Ok(exact_fisher_given(ds, prm, &sigma, free))
}

/// Exact and sandwich information over one configuration.
#[derive(Debug, Clone)]
pub struct InformationMatrices {
    pub params: Vec<CovParam>,
    /// Exact Fisher information of the true model.
    pub exact_fisher: DMatrix<f64>,
    /// Negative expected Hessian of the approximate log-likelihood under
    /// the true model.
    pub hessian: DMatrix<f64>,
    /// Covariance of the approximate score under the true model.
    pub score_cov: DMatrix<f64>,
    /// Sandwich information `H J^-1 H`; its inverse is the asymptotic
    /// covariance of the approximate-likelihood estimator.
    pub godambe: DMatrix<f64>,
}

fn check_desk(n: usize, desk_limit: usize, what: &str) -> Result<()> {
    if n > desk_limit {
        return Err(Error::Capacity(format!(
            "{what} for n = {n} exceeds the desk limit {desk_limit}"
        )));
    }
    Ok(())
}

fn check_free(free: &[CovParam]) -> Result<()> {
    if free.is_empty() {
        return Err(Error::Input("no free parameters requested".into()));
    }
    for (i, a) in free.iter().enumerate() {
        if free[..i].contains(a) {
            return Err(Error::Input(format!("parameter {} listed twice", a.label())));
        }
    }
    Ok(())
}

/// Expected approximate log-likelihood under the true model, up to the
/// additive constant `-(n/2) ln 2 pi` which cancels in all differences.
fn expected_loglik(factor: &VecchiaFactor, sigma_p: &CovarianceMatrix) -> f64 {
    -0.5 * factor.logdet_implied() - 0.5 * factor.quad_trace(sigma_p.matrix())
}

/// Sandwich (misspecification-robust) information of the approximate
/// likelihood under the true model, together with the exact information.
///
/// The score covariance uses `J[k,l] = 1/2 tr(Q_k S_p Q_l S_p)` with
/// `Q_k` from central differences of the implied precision; the expected
/// Hessian comes from central second differences of the expected
/// approximate log-likelihood. Steps are `1e-4` relative per parameter.
pub fn godambe(
    ds: &Dataset,
    prm: &CovarianceParams,
    perm: &Permutation,
    sets: &ConditioningSets,
    free: &[CovParam],
    desk_limit: usize,
) -> Result<InformationMatrices> {
    check_desk(ds.n(), desk_limit, "sandwich information")?;
    check_free(free)?;
    prm.validate()?;
    if free.contains(&CovParam::Gamma) && prm.gamma == 0.0 {
        return Err(Error::Input(
            "gamma is on the boundary (0); drop it from the free set for information analysis"
                .into(),
        ));
    }

    let q = free.len();
    let sigma = build_sigma(ds, prm)?;
    let geometry = VecchiaGeometry::new(ds, perm, sets)?;
    let base = geometry.factor(prm)?;

    let steps: Vec<f64> = free.iter().map(|p| FD_REL_STEP * p.get(prm)).collect();
    let factor_at = |shifts: &[(usize, f64)]| -> Result<VecchiaFactor> {
        let mut shifted = *prm;
        for &(idx, delta) in shifts {
            shifted = free[idx].with(&shifted, free[idx].get(&shifted) + delta);
        }
        geometry.factor(&shifted)
    };

    let mut plus = Vec::with_capacity(q);
    let mut minus = Vec::with_capacity(q);
    for k in 0..q {
        plus.push(factor_at(&[(k, steps[k])])?);
        minus.push(factor_at(&[(k, -steps[k])])?);
    }

    // Score covariance from precision derivatives.
    let d_precision_sigma: Vec<DMatrix<f64>> = (0..q)
        .map(|k| {
            let a_plus = plus[k].precision_times_dense(sigma.matrix());
            let a_minus = minus[k].precision_times_dense(sigma.matrix());
            (a_plus - a_minus) / (2.0 * steps[k])
        })
        .collect();
    let mut score_cov = DMatrix::<f64>::zeros(q, q);
    for k in 0..q {
        for l in k..q {
            let v = 0.5 * trace_product(&d_precision_sigma[k], &d_precision_sigma[l]);
            score_cov[(k, l)] = v;
            score_cov[(l, k)] = v;
        }
    }

    // Negative expected Hessian from second differences of the expected
    // approximate log-likelihood.
    let phi0 = expected_loglik(&base, &sigma);
    let phi_plus: Vec<f64> = plus.iter().map(|f| expected_loglik(f, &sigma)).collect();
    let phi_minus: Vec<f64> = minus.iter().map(|f| expected_loglik(f, &sigma)).collect();
    let mut hessian = DMatrix::<f64>::zeros(q, q);
    for k in 0..q {
        hessian[(k, k)] = -(phi_plus[k] - 2.0 * phi0 + phi_minus[k]) / (steps[k] * steps[k]);
    }
    for k in 0..q {
        for l in (k + 1)..q {
            let pp = expected_loglik(&factor_at(&[(k, steps[k]), (l, steps[l])])?, &sigma);
            let pm = expected_loglik(&factor_at(&[(k, steps[k]), (l, -steps[l])])?, &sigma);
            let mp = expected_loglik(&factor_at(&[(k, -steps[k]), (l, steps[l])])?, &sigma);
            let mm = expected_loglik(&factor_at(&[(k, -steps[k]), (l, -steps[l])])?, &sigma);
            let v = -(pp - pm - mp + mm) / (4.0 * steps[k] * steps[l]);
            hessian[(k, l)] = v;
            hessian[(l, k)] = v;
        }
    }

    // Sandwich H J^-1 H.
    let chol_j = nalgebra::Cholesky::new(score_cov.clone()).ok_or_else(|| {
        Error::RankDeficient("score covariance is singular; configuration not identifiable".into())
    })?;
    let jinv_h = chol_j.solve(&hessian);
    let mut godambe_m = &hessian * jinv_h;
    // Symmetrize away finite-difference asymmetry.
    godambe_m = 0.5 * (&godambe_m + godambe_m.transpose());

    let fisher = exact_fisher_given(ds, prm, &sigma, free);
    Ok(InformationMatrices {
        params: free.to_vec(),
        exact_fisher: fisher,
        hessian,
        score_cov,
        godambe: godambe_m,
    })
}

/// How per-parameter variance ratios are collapsed to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AreAggregate {
    /// Sum of ratios.
    Sum,
    /// Mean of ratios, so a log score of 0 means every ratio is 1.
    Mean,
}

/// Per-parameter asymptotic variance ratios
/// `[godambe^-1]_kk / [I_p^-1]_kk` plus their aggregates.
#[derive(Debug, Clone)]
pub struct AreResult {
    pub params: Vec<CovParam>,
    pub ratios: Vec<f64>,
    pub sum: f64,
    pub mean: f64,
    /// The aggregate chosen at call time.
    pub scalar: f64,
    pub log_scalar: f64,
    pub aggregate: AreAggregate,
}

fn inverse_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(m.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::RankDeficient(format!("{what} is not positive definite")))
}

/// Asymptotic relative efficiency of the approximate-likelihood
/// estimator against the exact one, per parameter and aggregated.
pub fn are(info: &InformationMatrices, aggregate: AreAggregate) -> Result<AreResult> {
    let ginv = inverse_spd(&info.godambe, "sandwich information")?;
    let iinv = inverse_spd(&info.exact_fisher, "exact Fisher information")?;
    let q = info.params.len();
    let ratios: Vec<f64> = (0..q).map(|k| ginv[(k, k)] / iinv[(k, k)]).collect();
    let sum: f64 = ratios.iter().sum();
    let mean = sum / q as f64;
    let scalar = match aggregate {
        AreAggregate::Sum => sum,
        AreAggregate::Mean => mean,
    };
    Ok(AreResult {
        params: info.params.clone(),
        ratios,
        sum,
        mean,
        scalar,
        log_scalar: scalar.ln(),
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::simulate;
    use crate::covariance::SimulationMode;
    use crate::data::ObservationRecord;
    use crate::neighbors::{build_conditioning_sets, ConditioningPolicy, DistanceSpec};
    use crate::ordering::{order_maxmin, order_random};
    use crate::traj::{self, TrajectoryConfig};
    use crate::vecchia::{exact_loglik, implied_covariance, vecchia_factor, vecchia_loglik};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const DESK: usize = 4000;
    const ST16: DistanceSpec = DistanceSpec::SpatioTemporal { kappa: 16.0 };

    fn ds_from(points: &[(f64, f64, f64, usize)]) -> Dataset {
        let records: Vec<ObservationRecord> = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y, t, s))| ObservationRecord {
                obs_id: i,
                x,
                y,
                t,
                sensor_id: s,
                value: 0.0,
                covariates: vec![1.0],
            })
            .collect();
        Dataset::new(records, 0.0).unwrap()
    }

    fn prm(sigma2: f64, theta1: f64, theta2: f64, tau2: f64, gamma: f64) -> CovarianceParams {
        CovarianceParams::new(sigma2, theta1, theta2, tau2, gamma, 16.0).unwrap()
    }

    fn traj_ds(n: usize, sensors: usize, seed: u64) -> Dataset {
        traj::generate(&TrajectoryConfig {
            count: n,
            sensors,
            duration_s: 2400.0,
            extent_m: 4000.0,
            seed,
            ..TrajectoryConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn kl_zero_at_full_conditioning() {
        let p = prm(0.9, 800.0, 400.0, 0.3, 0.2);
        let ds = traj_ds(60, 3, 1);
        let perm = order_random(&ds, 4);
        let sets =
            build_conditioning_sets(&ds, &perm, ds.n() - 1, ST16, ConditioningPolicy::AnySensor);
        let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
        let sigma = build_sigma(&ds, &p).unwrap();
        let kl = kl_divergence(&sigma, &f).unwrap();
        assert!((0.0..1e-6).contains(&kl), "kl = {kl}");
    }

    #[test]
    fn kl_scalar_closed_form() {
        // True variance 2 against implied variance 1:
        // KL = (2 - ln 2 - 1) / 2.
        let ds = ds_from(&[(0.0, 0.0, 0.0, 1)]);
        let p_true = prm(1.5, 100.0, 100.0, 0.5, 0.0);
        let p_aprx = prm(0.6, 100.0, 100.0, 0.4, 0.0);
        let perm = order_random(&ds, 0);
        let sets = build_conditioning_sets(&ds, &perm, 1, ST16, ConditioningPolicy::AnySensor);
        let f = vecchia_factor(&ds, &p_aprx, &perm, &sets).unwrap();
        let sigma = build_sigma(&ds, &p_true).unwrap();
        let kl = kl_divergence(&sigma, &f).unwrap();
        assert_relative_eq!(kl, 0.5 * (2.0 - 2.0f64.ln() - 1.0), max_relative = 1e-12);
        assert_relative_eq!(kl, 0.153426, max_relative = 1e-5);
    }

    #[test]
    fn kl_matches_dense_oracle_and_shrinks_with_m() {
        let p = prm(1.0, 900.0, 500.0, 0.25, 0.2);
        let ds = traj_ds(80, 4, 7);
        let sigma = build_sigma(&ds, &p).unwrap();
        let perm = order_maxmin(&ds, ST16);
        let mut previous = f64::INFINITY;
        for m in [2usize, 5, 10] {
            let sets = build_conditioning_sets(&ds, &perm, m, ST16, ConditioningPolicy::AnySensor);
            let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
            let kl = kl_divergence(&sigma, &f).unwrap();

            // Dense oracle straight from the definition.
            let implied = implied_covariance(&f, DESK).unwrap();
            let qdense = implied
                .matrix()
                .clone()
                .try_inverse()
                .expect("implied covariance invertible");
            let oracle = 0.5
                * ((&qdense * sigma.matrix()).trace() + implied.logdet()
                    - sigma.logdet()
                    - ds.n() as f64);
            assert_relative_eq!(kl, oracle, max_relative = 1e-7, epsilon = 1e-9);

            assert!(kl >= 0.0);
            assert!(kl <= previous + 1e-9, "KL must not grow with M");
            previous = kl;
        }
    }

    #[test]
    fn fisher_iid_variance_information() {
        // Points far beyond the ranges, gamma = 0, negligible nugget:
        // effectively sigma2 * I, so the sigma2 information is n/(2 sigma^4).
        let n = 12;
        let pts: Vec<(f64, f64, f64, usize)> = (0..n)
            .map(|k| (1e9 * k as f64, 0.0, 1e9 * k as f64, 1))
            .collect();
        let ds = ds_from(&pts);
        let sigma2 = 0.7;
        let p = CovarianceParams::new(sigma2, 1.0, 1.0, 1e-8, 0.0, 1.0).unwrap();
        let info = exact_fisher(&ds, &p, &[CovParam::Sigma2], DESK).unwrap();
        assert_relative_eq!(
            info[(0, 0)],
            n as f64 / (2.0 * sigma2 * sigma2),
            max_relative = 1e-6
        );
    }

    #[test]
    fn fisher_matches_finite_difference_oracle() {
        let p = prm(0.8, 700.0, 350.0, 0.3, 0.15);
        let ds = traj_ds(60, 3, 3);
        let free = CovParam::ALL;
        let analytic = exact_fisher(&ds, &p, &free, DESK).unwrap();

        // Finite differences of the covariance itself.
        let sigma = build_sigma(&ds, &p).unwrap();
        let q = free.len();
        let fd_mats: Vec<DMatrix<f64>> = free
            .iter()
            .map(|&prm_k| {
                let h = 1e-5 * prm_k.get(&p).max(1e-3);
                let plus = build_sigma(&ds, &prm_k.with(&p, prm_k.get(&p) + h)).unwrap();
                let minus = build_sigma(&ds, &prm_k.with(&p, prm_k.get(&p) - h)).unwrap();
                (plus.matrix() - minus.matrix()) / (2.0 * h)
            })
            .collect();
        let solved: Vec<DMatrix<f64>> = fd_mats.iter().map(|d| sigma.solve_mat(d)).collect();
        for k in 0..q {
            for l in 0..q {
                let oracle = 0.5 * trace_product(&solved[k], &solved[l]);
                assert_relative_eq!(
                    analytic[(k, l)],
                    oracle,
                    max_relative = 1e-5,
                    epsilon = 1e-8
                );
            }
        }
    }

    #[test]
    fn fisher_doubles_on_duplicated_independent_blocks() {
        let p = prm(1.0, 400.0, 300.0, 0.3, 0.2);
        let base: Vec<(f64, f64, f64, usize)> = (0..10)
            .map(|k| (35.0 * k as f64, 10.0 * (k % 3) as f64, 25.0 * k as f64, 1 + k % 2))
            .collect();
        // Far-shifted copy with fresh sensor ids: fully independent.
        let mut doubled = base.clone();
        doubled.extend(
            base.iter()
                .map(|&(x, y, t, s)| (x + 1e9, y, t + 1e9, s + 2)),
        );
        let single = exact_fisher(&ds_from(&base), &p, &CovParam::ALL, DESK).unwrap();
        let twice = exact_fisher(&ds_from(&doubled), &p, &CovParam::ALL, DESK).unwrap();
        for k in 0..5 {
            for l in 0..5 {
                assert_relative_eq!(
                    twice[(k, l)],
                    2.0 * single[(k, l)],
                    max_relative = 1e-8,
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn information_matrices_are_psd() {
        let p = prm(0.9, 600.0, 400.0, 0.3, 0.2);
        let ds = traj_ds(50, 3, 5);
        let perm = order_maxmin(&ds, ST16);
        let sets = build_conditioning_sets(&ds, &perm, 4, ST16, ConditioningPolicy::AnySensor);
        let info = godambe(&ds, &p, &perm, &sets, &CovParam::ALL, DESK).unwrap();
        for (name, m) in [("I_p", &info.exact_fisher), ("J", &info.score_cov)] {
            // PSD via Cholesky after a tiny diagonal lift.
            let q = m.nrows();
            let lifted = m + DMatrix::<f64>::identity(q, q) * 1e-10 * m.trace();
            assert!(
                nalgebra::Cholesky::new(lifted).is_some(),
                "{name} should be positive semidefinite"
            );
        }
        // Symmetry of the sandwich.
        let g = &info.godambe;
        for k in 0..5 {
            for l in 0..5 {
                assert_relative_eq!(g[(k, l)], g[(l, k)], epsilon = 1e-9 * g[(0, 0)].abs());
            }
        }
    }

    #[test]
    fn godambe_collapses_to_fisher_at_full_conditioning() {
        let p = prm(0.8, 700.0, 450.0, 0.35, 0.25);
        let ds = traj_ds(40, 3, 11);
        let perm = order_random(&ds, 8);
        let sets =
            build_conditioning_sets(&ds, &perm, ds.n() - 1, ST16, ConditioningPolicy::AnySensor);
        let info = godambe(&ds, &p, &perm, &sets, &CovParam::ALL, DESK).unwrap();
        for k in 0..5 {
            for l in 0..5 {
                let i_kl = info.exact_fisher[(k, l)];
                let scale = info.exact_fisher[(k, k)].abs().max(info.exact_fisher[(l, l)].abs());
                assert!(
                    (info.hessian[(k, l)] - i_kl).abs() <= 1e-4 * scale,
                    "H[{k},{l}] = {} vs I = {}",
                    info.hessian[(k, l)],
                    i_kl
                );
                assert!(
                    (info.score_cov[(k, l)] - i_kl).abs() <= 1e-4 * scale,
                    "J[{k},{l}] = {} vs I = {}",
                    info.score_cov[(k, l)],
                    i_kl
                );
                assert!(
                    (info.godambe[(k, l)] - i_kl).abs() <= 1e-4 * scale,
                    "G[{k},{l}] = {} vs I = {}",
                    info.godambe[(k, l)],
                    i_kl
                );
            }
        }

        let result = are(&info, AreAggregate::Mean).unwrap();
        for r in &result.ratios {
            assert!((r - 1.0).abs() <= 1e-4, "ratio {r}");
        }
        assert!(result.log_scalar.abs() <= 1e-4);
    }

    #[test]
    fn unit_rescaling_moves_variances_by_c4() {
        let ds = traj_ds(30, 2, 17);
        let p = prm(0.9, 500.0, 300.0, 0.3, 0.2);
        let c2 = 4.0; // variance scale, i.e. data units scaled by c = 2
        let scaled = CovarianceParams::new(
            p.sigma2 * c2,
            p.theta1,
            p.theta2,
            p.tau2 * c2,
            p.gamma * c2,
            p.kappa,
        )
        .unwrap();
        let perm = order_maxmin(&ds, ST16);
        let sets = build_conditioning_sets(&ds, &perm, 4, ST16, ConditioningPolicy::AnySensor);
        let base = godambe(&ds, &p, &perm, &sets, &CovParam::ALL, DESK).unwrap();
        let moved = godambe(&ds, &scaled, &perm, &sets, &CovParam::ALL, DESK).unwrap();
        let vb = inverse_spd(&base.godambe, "g").unwrap();
        let vm = inverse_spd(&moved.godambe, "g").unwrap();
        for (k, param) in CovParam::ALL.iter().enumerate() {
            let expect = match param {
                CovParam::Sigma2 | CovParam::Tau2 | CovParam::Gamma => c2 * c2,
                _ => 1.0,
            };
            assert_relative_eq!(vm[(k, k)] / vb[(k, k)], expect, max_relative = 1e-3);
        }
    }

    #[test]
    fn are_is_invariant_to_parameter_relabeling() {
        let p = prm(0.8, 600.0, 350.0, 0.3, 0.2);
        let ds = traj_ds(40, 3, 19);
        let perm = order_maxmin(&ds, ST16);
        let sets = build_conditioning_sets(&ds, &perm, 3, ST16, ConditioningPolicy::AnySensor);
        let fwd = [CovParam::Sigma2, CovParam::Tau2, CovParam::Gamma];
        let rev = [CovParam::Gamma, CovParam::Tau2, CovParam::Sigma2];
        let a = are(
            &godambe(&ds, &p, &perm, &sets, &fwd, DESK).unwrap(),
            AreAggregate::Mean,
        )
        .unwrap();
        let b = are(
            &godambe(&ds, &p, &perm, &sets, &rev, DESK).unwrap(),
            AreAggregate::Mean,
        )
        .unwrap();
        for (i, j) in [(0usize, 2usize), (1, 1), (2, 0)] {
            assert_relative_eq!(a.ratios[i], b.ratios[j], max_relative = 1e-6);
        }
        assert_relative_eq!(a.mean, b.mean, max_relative = 1e-6);
        assert_relative_eq!(a.sum, b.sum, max_relative = 1e-6);
    }

    /// One-parameter toy: the trace-form score covariance must match the
    /// Monte-Carlo variance of the actual score, and the ARE ratio must
    /// track the Monte-Carlo relative efficiency of the two estimators.
    #[test]
    fn toy_ratio_matches_monte_carlo_relative_efficiency() {
        let p = prm(1.0, 300.0, 200.0, 0.3, 0.2);
        let ds = traj_ds(20, 2, 23);
        let perm = order_maxmin(&ds, ST16);
        let sets = build_conditioning_sets(&ds, &perm, 2, ST16, ConditioningPolicy::AnySensor);
        let free = [CovParam::Sigma2];
        let info = godambe(&ds, &p, &perm, &sets, &free, DESK).unwrap();
        let ratio = are(&info, AreAggregate::Mean).unwrap().ratios[0];

        let sigma = build_sigma(&ds, &p).unwrap();
        let geometry = VecchiaGeometry::new(&ds, &perm, &sets).unwrap();
        let n = ds.n();
        let mean = DVector::<f64>::zeros(n);
        let mut rng = ChaCha8Rng::seed_from_u64(501);

        // 1-D maximizer over ln sigma2 by golden-section search.
        let golden = |f: &dyn Fn(f64) -> f64| -> f64 {
            let (mut a, mut b) = (-2.0f64, 2.0f64);
            let inv_phi = 0.618_033_988_749_894_9_f64;
            let mut c = b - inv_phi * (b - a);
            let mut d = a + inv_phi * (b - a);
            let (mut fc, mut fd) = (f(c), f(d));
            for _ in 0..60 {
                if fc > fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - inv_phi * (b - a);
                    fc = f(c);
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + inv_phi * (b - a);
                    fd = f(d);
                }
            }
            ((a + b) / 2.0).exp()
        };

        let reps = 3000usize;
        let mut exact_hat = Vec::with_capacity(reps);
        let mut approx_hat = Vec::with_capacity(reps);
        for _ in 0..reps {
            let eps =
                DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let z = sigma.chol_lower() * eps;
            let exact_obj = |ls: f64| {
                let cand = CovParam::Sigma2.with(&p, ls.exp() * p.sigma2);
                exact_loglik(&ds, &cand, &z, &mean, DESK).unwrap()
            };
            let approx_obj = |ls: f64| {
                let cand = CovParam::Sigma2.with(&p, ls.exp() * p.sigma2);
                let f = geometry.factor(&cand).unwrap();
                vecchia_loglik(&f, &z, &mean).unwrap()
            };
            exact_hat.push(golden(&exact_obj) * p.sigma2);
            approx_hat.push(golden(&approx_obj) * p.sigma2);
        }
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let mc_ratio = var(&approx_hat) / var(&exact_hat);
        assert!(
            (mc_ratio - ratio).abs() <= 0.10 * ratio,
            "MC efficiency {mc_ratio} vs sandwich prediction {ratio}"
        );
    }

    #[test]
    fn gamma_on_boundary_is_rejected() {
        let p = prm(1.0, 300.0, 200.0, 0.3, 0.0);
        let ds = traj_ds(15, 2, 29);
        let perm = order_maxmin(&ds, ST16);
        let sets = build_conditioning_sets(&ds, &perm, 2, ST16, ConditioningPolicy::AnySensor);
        assert!(matches!(
            godambe(&ds, &p, &perm, &sets, &CovParam::ALL, DESK),
            Err(Error::Input(_))
        ));
        // Dropping gamma from the free set works.
        let free = [CovParam::Sigma2, CovParam::Theta1, CovParam::Theta2, CovParam::Tau2];
        assert!(godambe(&ds, &p, &perm, &sets, &free, DESK).is_ok());
    }
}
