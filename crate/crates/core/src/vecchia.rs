//! Approximate likelihood through ordered conditioning.
//!
//! The joint Gaussian density is replaced by a product of conditionals,
//! each conditioning only on a small set of earlier observations. For
//! ordered position `k` with conditioning positions `v(k)`,
//!
//! `b_k = Sigma[v,v]^-1 Sigma[v,k]`,
//! `d_k = Sigma[k,k] - Sigma[k,v] b_k`,
//!
//! computed from kernel evaluations only; the full covariance is never
//! formed on this path. The implied joint is a valid Gaussian whose
//! precision factors as `U U^T`, where column `k` of the sparse upper
//! triangular `U` holds `1/sqrt(d_k)` on the diagonal and
//! `-b_k/sqrt(d_k)` on its conditioning rows, and whose log-determinant
//! is `sum_k ln d_k`.
//!
//! Conditional terms are evaluated in parallel and reduced in fixed
//! order, so likelihood values are bit-stable across thread counts.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::covariance::{build_sigma, CovarianceMatrix, CovarianceParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::neighbors::ConditioningSets;
use crate::ordering::Permutation;
use crate::{instrument, par};

/// Precomputed geometry (separations and sensor flags) for one
/// `(permutation, conditioning sets)` pair, enabling cheap repeated
/// factorizations at different covariance parameters.
pub struct VecchiaGeometry {
    perm: Arc<Permutation>,
    sets: Arc<ConditioningSets>,
    blocks: Vec<GeometryBlock>,
}

/// Pairwise separations within one conditioning block. `pair_*` pack the
/// strict lower triangle of the conditioning-set block in (row-major)
/// order `(a, b), a > b`; `cross_*` relate conditioning points to the
/// target observation.
struct GeometryBlock {
    pair_ds: Vec<f64>,
    pair_dt: Vec<f64>,
    pair_same_sensor: Vec<bool>,
    cross_ds: Vec<f64>,
    cross_dt: Vec<f64>,
    cross_same_sensor: Vec<bool>,
}

fn separations(ds: &Dataset, i: usize, j: usize) -> (f64, f64, bool) {
    let (a, b) = (ds.record(i), ds.record(j));
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    (
        (dx * dx + dy * dy).sqrt(),
        (a.t - b.t).abs(),
        a.sensor_id == b.sensor_id,
    )
}

impl VecchiaGeometry {
    pub fn new(ds: &Dataset, perm: &Permutation, sets: &ConditioningSets) -> Result<Self> {
        if perm.len() != ds.n() || sets.len() != ds.n() {
            return Err(Error::Input(format!(
                "permutation ({}) and sets ({}) must both cover n = {}",
                perm.len(),
                sets.len(),
                ds.n()
            )));
        }
        let blocks = par::map_range(ds.n(), |k| {
            let target = perm.at(k);
            let members = sets.set(k);
            let m = members.len();
            let mut block = GeometryBlock {
                pair_ds: Vec::with_capacity(m * (m.saturating_sub(1)) / 2),
                pair_dt: Vec::with_capacity(m * (m.saturating_sub(1)) / 2),
                pair_same_sensor: Vec::with_capacity(m * (m.saturating_sub(1)) / 2),
                cross_ds: Vec::with_capacity(m),
                cross_dt: Vec::with_capacity(m),
                cross_same_sensor: Vec::with_capacity(m),
            };
            for (ai, &a) in members.iter().enumerate() {
                for &b in &members[..ai] {
                    let (s, t, same) = separations(ds, perm.at(a), perm.at(b));
                    block.pair_ds.push(s);
                    block.pair_dt.push(t);
                    block.pair_same_sensor.push(same);
                }
                let (s, t, same) = separations(ds, perm.at(a), target);
                block.cross_ds.push(s);
                block.cross_dt.push(t);
                block.cross_same_sensor.push(same);
            }
            block
        });
        Ok(VecchiaGeometry {
            perm: Arc::new(perm.clone()),
            sets: Arc::new(sets.clone()),
            blocks,
        })
    }

    pub fn perm(&self) -> &Permutation {
        &self.perm
    }

    pub fn sets(&self) -> &ConditioningSets {
        &self.sets
    }

    /// Factorize at the given parameters. Cost is O(n M^3); each block is
    /// independent.
    pub fn factor(&self, prm: &CovarianceParams) -> Result<VecchiaFactor> {
        prm.validate()?;
        let prior = prm.sigma2 + prm.tau2 + prm.gamma;
        let inv_t1 = 1.0 / prm.theta1;
        let inv_t2 = 1.0 / prm.theta2;
        let cov = |s: f64, t: f64, same: bool| -> f64 {
            prm.sigma2 * (-s * inv_t1 - t * inv_t2).exp() + if same { prm.gamma } else { 0.0 }
        };

        let parts = par::map_range(self.blocks.len(), |k| -> Result<(Vec<f64>, f64)> {
            let block = &self.blocks[k];
            let m = block.cross_ds.len();
            if m == 0 {
                return Ok((Vec::new(), prior));
            }
            instrument::note_dense_alloc(m, m);
            let mut c = DMatrix::<f64>::zeros(m, m);
            let mut idx = 0usize;
            for a in 0..m {
                for b in 0..a {
                    let v = cov(block.pair_ds[idx], block.pair_dt[idx], block.pair_same_sensor[idx]);
                    c[(a, b)] = v;
                    c[(b, a)] = v;
                    idx += 1;
                }
                c[(a, a)] = prior;
            }
            let cross = DVector::from_iterator(
                m,
                (0..m).map(|a| cov(block.cross_ds[a], block.cross_dt[a], block.cross_same_sensor[a])),
            );
            let chol = nalgebra::Cholesky::new(c).ok_or_else(|| {
                Error::Numerical(format!(
                    "conditioning block at ordered position {k} is not positive definite"
                ))
            })?;
            let weights = chol.solve(&cross);
            let d = prior - cross.dot(&weights);
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::Numerical(format!(
                    "conditional variance {d} at ordered position {k} is not positive"
                )));
            }
            Ok((weights.as_slice().to_vec(), d))
        });

        let mut coeffs = Vec::with_capacity(parts.len());
        let mut cond_var = Vec::with_capacity(parts.len());
        for part in parts {
            let (b, d) = part?;
            coeffs.push(b);
            cond_var.push(d);
        }
        Ok(VecchiaFactor {
            coeffs,
            cond_var,
            perm: Arc::clone(&self.perm),
            sets: Arc::clone(&self.sets),
        })
    }
}

/// Regression weights and conditional variances of the ordered
/// conditional decomposition, together with the permutation and sets that
/// define it.
#[derive(Debug, Clone)]
pub struct VecchiaFactor {
    coeffs: Vec<Vec<f64>>,
    cond_var: Vec<f64>,
    perm: Arc<Permutation>,
    sets: Arc<ConditioningSets>,
}

/// Factorize the ordered conditionals at `prm` for a one-shot evaluation.
/// For repeated factorizations over the same configuration, build a
/// [`VecchiaGeometry`] once and call [`VecchiaGeometry::factor`].
pub fn vecchia_factor(
    ds: &Dataset,
    prm: &CovarianceParams,
    perm: &Permutation,
    sets: &ConditioningSets,
) -> Result<VecchiaFactor> {
    VecchiaGeometry::new(ds, perm, sets)?.factor(prm)
}

impl VecchiaFactor {
    pub fn n(&self) -> usize {
        self.cond_var.len()
    }

    pub fn perm(&self) -> &Permutation {
        &self.perm
    }

    pub fn sets(&self) -> &ConditioningSets {
        &self.sets
    }

    /// Regression weights of ordered observation `k` on its conditioning
    /// set, aligned with `sets().set(k)`.
    pub fn coeffs(&self, k: usize) -> &[f64] {
        &self.coeffs[k]
    }

    pub fn cond_var(&self, k: usize) -> f64 {
        self.cond_var[k]
    }

    pub fn cond_vars(&self) -> &[f64] {
        &self.cond_var
    }

    /// Log-determinant of the implied covariance, `sum_k ln d_k`.
    pub fn logdet_implied(&self) -> f64 {
        self.cond_var.iter().map(|d| d.ln()).sum()
    }

    /// Apply the whitening map `v -> U^T P v`: standardized conditional
    /// residuals in ordered positions. The squared norm of the result is
    /// the quadratic form `v^T Q v` of the implied precision.
    pub(crate) fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let out = par::map_range(n, |k| {
            let vk = v[self.perm.at(k)];
            let mut acc = 0.0;
            for (w, &pos) in self.coeffs[k].iter().zip(self.sets.set(k)) {
                acc += w * v[self.perm.at(pos)];
            }
            (vk - acc) / self.cond_var[k].sqrt()
        });
        DVector::from_vec(out)
    }

    /// Trace of `Q S`, where `Q = U U^T` is the implied precision mapped
    /// to original indices. O(n M^2) in the dense symmetric `S`.
    pub(crate) fn quad_trace(&self, s: &DMatrix<f64>) -> f64 {
        let n = self.n();
        let terms = par::map_range(n, |k| {
            // Column u_k has entries -b/sqrt(d) on the set and 1/sqrt(d)
            // on the target; accumulate u_k^T S u_k.
            let members = self.sets.set(k);
            let b = &self.coeffs[k];
            let inv_sd = 1.0 / self.cond_var[k].sqrt();
            let target = self.perm.at(k);
            let mut total = s[(target, target)];
            for (i, &pi) in members.iter().enumerate() {
                let oi = self.perm.at(pi);
                let mut row = -2.0 * s[(oi, target)];
                for (j, &pj) in members.iter().enumerate() {
                    row += b[j] * s[(oi, self.perm.at(pj))];
                }
                total += b[i] * row;
            }
            total * inv_sd * inv_sd
        });
        terms.iter().sum()
    }

    /// Dense implied precision `Q = U U^T` in original index order.
    pub fn precision_matrix(&self, desk_limit: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        if n > desk_limit {
            return Err(Error::Capacity(format!(
                "dense precision for n = {n} exceeds the desk limit {desk_limit}"
            )));
        }
        instrument::note_dense_alloc(n, n);
        let mut q = DMatrix::<f64>::zeros(n, n);
        for k in 0..n {
            let members = self.sets.set(k);
            let b = &self.coeffs[k];
            let inv_d = 1.0 / self.cond_var[k];
            let target = self.perm.at(k);
            q[(target, target)] += inv_d;
            for (i, &pi) in members.iter().enumerate() {
                let oi = self.perm.at(pi);
                q[(oi, target)] -= b[i] * inv_d;
                q[(target, oi)] -= b[i] * inv_d;
                for (j, &pj) in members.iter().enumerate() {
                    q[(oi, self.perm.at(pj))] += b[i] * b[j] * inv_d;
                }
            }
        }
        Ok(q)
    }

    /// Product `Q A` of the implied precision with a dense matrix, in
    /// original index order, using the sparse factor columns; O(n^2 M).
    pub(crate) fn precision_times_dense(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        assert_eq!(a.nrows(), n, "row mismatch");
        let cols = a.ncols();
        instrument::note_dense_alloc(n, cols);

        // Row-major staging keeps the row operations contiguous.
        let mut staged = vec![0.0f64; n * cols];
        for k in 0..n {
            let src = self.perm.at(k);
            for c in 0..cols {
                staged[k * cols + c] = a[(src, c)];
            }
        }

        // rows(k) of U^T (P^T A): (row_k - sum_j b_j row_{pos_j}) / sqrt(d).
        let whitened: Vec<f64> = {
            let mut out = vec![0.0f64; n * cols];
            let out_rows = par::map_range(n, |k| {
                let mut row = staged[k * cols..(k + 1) * cols].to_vec();
                for (w, &pos) in self.coeffs[k].iter().zip(self.sets.set(k)) {
                    let other = &staged[pos * cols..(pos + 1) * cols];
                    for (r, o) in row.iter_mut().zip(other) {
                        *r -= w * o;
                    }
                }
                let inv_sd = 1.0 / self.cond_var[k].sqrt();
                for r in row.iter_mut() {
                    *r *= inv_sd;
                }
                row
            });
            for (k, row) in out_rows.into_iter().enumerate() {
                out[k * cols..(k + 1) * cols].copy_from_slice(&row);
            }
            out
        };

        // U scatter: result row j accumulates U[j,k] * whitened_k.
        let mut scattered = vec![0.0f64; n * cols];
        for k in 0..n {
            let inv_sd = 1.0 / self.cond_var[k].sqrt();
            let w_row = &whitened[k * cols..(k + 1) * cols];
            {
                let dst = &mut scattered[k * cols..(k + 1) * cols];
                for (d, w) in dst.iter_mut().zip(w_row) {
                    *d += inv_sd * w;
                }
            }
            for (b, &pos) in self.coeffs[k].iter().zip(self.sets.set(k)) {
                let coef = -b * inv_sd;
                // Split borrow: pos < k, so the slices never overlap.
                let dst = &mut scattered[pos * cols..(pos + 1) * cols];
                for (d, w) in dst.iter_mut().zip(w_row) {
                    *d += coef * w;
                }
            }
        }

        let mut out = DMatrix::<f64>::zeros(n, cols);
        for k in 0..n {
            let dst = self.perm.at(k);
            for c in 0..cols {
                out[(dst, c)] = scattered[k * cols + c];
            }
        }
        out
    }
}

/// Per-observation contributions to the approximate log-likelihood, in
/// ordered positions. Each term depends only on its own conditioning
/// block, so any term can be recomputed in isolation.
pub fn conditional_terms(
    factor: &VecchiaFactor,
    z: &DVector<f64>,
    mean: &DVector<f64>,
) -> Result<Vec<f64>> {
    let n = factor.n();
    if z.len() != n || mean.len() != n {
        return Err(Error::Input(format!(
            "z ({}) and mean ({}) must have length n = {}",
            z.len(),
            mean.len(),
            n
        )));
    }
    let r = z - mean;
    const LN_2PI: f64 = 1.8378770664093453;
    Ok(par::map_range(n, |k| {
        let rk = r[factor.perm.at(k)];
        let mut acc = 0.0;
        for (w, &pos) in factor.coeffs[k].iter().zip(factor.sets.set(k)) {
            acc += w * r[factor.perm.at(pos)];
        }
        let d = factor.cond_var[k];
        -0.5 * (LN_2PI + d.ln()) - (rk - acc).powi(2) / (2.0 * d)
    }))
}

/// Approximate log-likelihood: the fixed-order sum of the conditional
/// terms.
pub fn vecchia_loglik(
    factor: &VecchiaFactor,
    z: &DVector<f64>,
    mean: &DVector<f64>,
) -> Result<f64> {
    Ok(conditional_terms(factor, z, mean)?.iter().sum())
}

/// Dense covariance implied by the factor, `(U U^T)^-1`, mapped back to
/// original index order. Desk-scale only.
pub fn implied_covariance(factor: &VecchiaFactor, desk_limit: usize) -> Result<CovarianceMatrix> {
    let n = factor.n();
    if n > desk_limit {
        return Err(Error::Capacity(format!(
            "implied covariance for n = {n} exceeds the desk limit {desk_limit}"
        )));
    }
    let q = factor.precision_matrix(desk_limit)?;
    let chol = nalgebra::Cholesky::new(q)
        .ok_or_else(|| Error::Numerical("implied precision is not positive definite".into()))?;
    instrument::note_dense_alloc(n, n);
    let sigma = chol.inverse();
    CovarianceMatrix::from_dense(sigma)
}

/// Exact dense log-likelihood through a Cholesky factorization of the
/// full covariance. Desk-scale only; serves as the oracle for the
/// approximate path.
pub fn exact_loglik(
    ds: &Dataset,
    prm: &CovarianceParams,
    z: &DVector<f64>,
    mean: &DVector<f64>,
    desk_limit: usize,
) -> Result<f64> {
    let n = ds.n();
    if n > desk_limit {
        return Err(Error::Capacity(format!(
            "exact likelihood for n = {n} exceeds the desk limit {desk_limit}"
        )));
    }
    if z.len() != n || mean.len() != n {
        return Err(Error::Input(format!(
            "z ({}) and mean ({}) must have length n = {}",
            z.len(),
            mean.len(),
            n
        )));
    }
    let sigma = build_sigma(ds, prm)?;
    let r = z - mean;
    let alpha = sigma.solve_vec(&r);
    const LN_2PI: f64 = 1.8378770664093453;
    Ok(-0.5 * (n as f64 * LN_2PI + sigma.logdet() + r.dot(&alpha)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{kernel, simulate, SimulationMode};
    use crate::data::ObservationRecord;
    use crate::neighbors::{build_conditioning_sets, ConditioningPolicy, DistanceSpec};
    use crate::ordering::{order_maxmin, order_random, order_temporal};
    use crate::traj::{self, TrajectoryConfig};
    use approx::assert_relative_eq;
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

    fn sim_dataset(n: usize, sensors: usize, seed: u64, p: &CovarianceParams) -> Dataset {
        let ds = traj::generate(&TrajectoryConfig {
            count: n,
            sensors,
            duration_s: 3600.0,
            extent_m: 5000.0,
            seed,
            ..TrajectoryConfig::default()
        })
        .unwrap();
        let z = simulate(&ds, p, None, seed ^ 0xABCD, SimulationMode::Compact).unwrap();
        ds.with_values(&z).unwrap()
    }

    fn full_sets(ds: &Dataset, perm: &Permutation) -> ConditioningSets {
        build_conditioning_sets(ds, perm, ds.n().max(2) - 1, ST16, ConditioningPolicy::AnySensor)
    }

    #[test]
    fn first_block_is_unconditional() {
        let p = prm(1.0, 100.0, 100.0, 0.3, 0.2);
        let ds = ds_from(&[(0.0, 0.0, 0.0, 1), (10.0, 0.0, 1.0, 1)]);
        let perm = order_temporal(&ds);
        let sets = full_sets(&ds, &perm);
        let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
        assert!(f.coeffs(0).is_empty());
        assert_relative_eq!(f.cond_var(0), 1.5, max_relative = 1e-15);
    }

    #[test]
    fn duplicate_point_conditioning_matches_closed_form() {
        let p = prm(1.0, 100.0, 100.0, 0.3, 0.2);
        let ds = ds_from(&[(5.0, 5.0, 5.0, 1), (5.0, 5.0, 5.0, 1)]);
        let perm = order_temporal(&ds);
        let sets = full_sets(&ds, &perm);
        let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
        let total = p.sigma2 + p.tau2 + p.gamma;
        let off = p.sigma2 + p.gamma;
        assert_relative_eq!(f.coeffs(1)[0], off / total, max_relative = 1e-14);
        assert_relative_eq!(f.cond_var(1), total - off * off / total, max_relative = 1e-14);
    }

    #[test]
    fn full_conditioning_reconstructs_dense_covariance() {
        let p = prm(0.8, 900.0, 500.0, 0.25, 0.15);
        let ds = sim_dataset(50, 3, 1, &p);
        let perm = order_random(&ds, 5);
        let sets = full_sets(&ds, &perm);
        let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
        let implied = implied_covariance(&f, DESK).unwrap();
        let dense = build_sigma(&ds, &p).unwrap();
        for i in 0..ds.n() {
            for j in 0..ds.n() {
                assert_relative_eq!(
                    implied.get(i, j),
                    dense.get(i, j),
                    max_relative = 1e-8,
                    epsilon = 1e-10
                );
            }
        }
        assert_relative_eq!(implied.logdet(), f.logdet_implied(), epsilon = 1e-10);
    }

    #[test]
    fn single_point_loglik_is_scalar_normal() {
        let p = prm(1.0, 100.0, 100.0, 0.5, 0.25);
        let ds = ds_from(&[(0.0, 0.0, 0.0, 1)]);
        let perm = order_temporal(&ds);
        let sets = build_conditioning_sets(&ds, &perm, 1, ST16, ConditioningPolicy::AnySensor);
        let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
        let z = DVector::from_element(1, 3.0);
        let mean = DVector::from_element(1, 3.0);
        let got = vecchia_loglik(&f, &z, &mean).unwrap();
        let d0 = 1.75f64;
        assert_relative_eq!(got, -0.5 * (2.0 * std::f64::consts::PI * d0).ln(), max_relative = 1e-14);

        // Exact dense path agrees, including a nonzero residual.
        let z = DVector::from_element(1, 4.0);
        let exact = exact_loglik(&ds, &p, &z, &mean, DESK).unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI * d0).ln() - 1.0 / (2.0 * d0);
        assert_relative_eq!(exact, expect, max_relative = 1e-14);
    }

    #[test]
    fn full_conditioning_equals_dense_loglik() {
        let p = prm(0.6, 1200.0, 700.0, 0.2, 0.3);
        let ds = sim_dataset(100, 4, 2, &p);
        let z = ds.values();
        let mean = DVector::zeros(ds.n());
        let exact = exact_loglik(&ds, &p, &z, &mean, DESK).unwrap();
        for perm in [order_random(&ds, 3), order_temporal(&ds)] {
            let sets = full_sets(&ds, &perm);
            let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
            let approx_ll = vecchia_loglik(&f, &z, &mean).unwrap();
            assert_relative_eq!(approx_ll, exact, max_relative = 1e-8);
        }
    }

    #[test]
    fn independence_blocks_add_up() {
        // Two clusters far beyond both ranges, distinct sensors, gamma=0:
        // the dense log-likelihood splits into per-cluster terms.
        let p = prm(1.0, 50.0, 30.0, 0.2, 0.0);
        let mut pts = vec![];
        for k in 0..4 {
            pts.push((k as f64 * 10.0, 0.0, k as f64, 1));
        }
        for k in 0..4 {
            pts.push((1e7 + k as f64 * 10.0, 0.0, 1e7 + k as f64, 2));
        }
        let ds = ds_from(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = DVector::from_iterator(8, (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let mean = DVector::zeros(8);
        let whole = exact_loglik(&ds, &p, &z, &mean, DESK).unwrap();

        let ds_a = ds_from(&pts[..4]);
        let ds_b = ds_from(
            &pts[4..]
                .iter()
                .map(|&(x, y, t, _)| (x, y, t, 1))
                .collect::<Vec<_>>(),
        );
        let za = DVector::from_iterator(4, (0..4).map(|i| z[i]));
        let zb = DVector::from_iterator(4, (4..8).map(|i| z[i]));
        let m4 = DVector::zeros(4);
        let split = exact_loglik(&ds_a, &p, &za, &m4, DESK).unwrap()
            + exact_loglik(&ds_b, &p, &zb, &m4, DESK).unwrap();
        assert_relative_eq!(whole, split, max_relative = 1e-10);
    }

    #[test]
    fn degenerate_empty_sets_give_diagonal_model() {
        let p = prm(1.0, 100.0, 100.0, 0.5, 0.25);
        let ds = ds_from(&[(0.0, 0.0, 0.0, 1), (5.0, 0.0, 1.0, 2), (9.0, 0.0, 2.0, 3)]);
        let perm = order_temporal(&ds);
        // Hand-built empty sets for every position.
        let sets = ConditioningSets::from_raw(vec![vec![], vec![], vec![]], 1);
        let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
        let implied = implied_covariance(&f, DESK).unwrap();
        let total = 1.75;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { total } else { 0.0 };
                assert_relative_eq!(implied.get(i, j), expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn two_points_single_predecessor_is_exact() {
        let p = prm(1.1, 300.0, 200.0, 0.4, 0.2);
        let ds = ds_from(&[(0.0, 0.0, 0.0, 1), (50.0, 20.0, 9.0, 1)]);
        let perm = order_temporal(&ds);
        let sets = build_conditioning_sets(&ds, &perm, 1, ST16, ConditioningPolicy::AnySensor);
        let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
        let implied = implied_covariance(&f, DESK).unwrap();
        let dense = build_sigma(&ds, &p).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(implied.get(i, j), dense.get(i, j), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn loglik_rejects_length_mismatch() {
        let p = prm(1.0, 100.0, 100.0, 0.3, 0.0);
        let ds = ds_from(&[(0.0, 0.0, 0.0, 1), (5.0, 0.0, 1.0, 1)]);
        let perm = order_temporal(&ds);
        let sets = full_sets(&ds, &perm);
        let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
        let bad = DVector::zeros(3);
        let mean = DVector::zeros(2);
        assert!(matches!(vecchia_loglik(&f, &bad, &mean), Err(Error::Input(_))));
    }

    #[test]
    fn terms_decompose_and_resum() {
        let p = prm(0.9, 700.0, 400.0, 0.3, 0.1);
        let ds = sim_dataset(40, 3, 9, &p);
        let perm = order_maxmin(&ds, ST16);
        let sets = build_conditioning_sets(&ds, &perm, 5, ST16, ConditioningPolicy::AnySensor);
        let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
        let z = ds.values();
        let mean = DVector::zeros(ds.n());
        let terms = conditional_terms(&f, &z, &mean).unwrap();
        let total = vecchia_loglik(&f, &z, &mean).unwrap();
        assert_relative_eq!(terms.iter().sum::<f64>(), total, max_relative = 1e-15);

        // Recompute one term in isolation from the factor pieces.
        let k = 17;
        let r = &z;
        let rk = r[f.perm().at(k)];
        let mut acc = 0.0;
        for (w, &pos) in f.coeffs(k).iter().zip(f.sets().set(k)) {
            acc += w * r[f.perm().at(pos)];
        }
        let d = f.cond_var(k);
        let manual = -0.5 * (2.0 * std::f64::consts::PI * d).ln() - (rk - acc).powi(2) / (2.0 * d);
        assert_relative_eq!(manual, terms[k], max_relative = 1e-15);
    }

    #[test]
    fn normalization_via_importance_sampling() {
        // exp(loglik) must integrate to one; check on n=3 by importance
        // sampling with an independent Gaussian proposal.
        let p = prm(1.0, 200.0, 150.0, 0.4, 0.3);
        let ds = ds_from(&[(0.0, 0.0, 0.0, 1), (30.0, 10.0, 5.0, 2), (60.0, -10.0, 11.0, 1)]);
        let perm = order_temporal(&ds);
        let sets = build_conditioning_sets(&ds, &perm, 1, ST16, ConditioningPolicy::AnySensor);
        let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
        let mean = DVector::zeros(3);

        let proposal_var = 4.0_f64;
        let ln_q = |z: &DVector<f64>| -> f64 {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += -0.5 * (2.0 * std::f64::consts::PI * proposal_var).ln()
                    - z[i] * z[i] / (2.0 * proposal_var);
            }
            acc
        };
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let reps = 200_000;
        let mut weights = Vec::with_capacity(reps);
        for _ in 0..reps {
            let z = DVector::from_iterator(
                3,
                (0..3).map(|_| proposal_var.sqrt() * rng.sample::<f64, _>(StandardNormal)),
            );
            let w = (vecchia_loglik(&f, &z, &mean).unwrap() - ln_q(&z)).exp();
            weights.push(w);
        }
        let mean_w = weights.iter().sum::<f64>() / reps as f64;
        let var_w = weights.iter().map(|w| (w - mean_w).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var_w / reps as f64).sqrt();
        assert!(
            (mean_w - 1.0).abs() <= 4.0 * se,
            "importance estimate {mean_w} +- {se}"
        );

        // The determinant identity behind the same normalization.
        let implied = implied_covariance(&f, DESK).unwrap();
        assert_relative_eq!(implied.logdet(), f.logdet_implied(), epsilon = 1e-10);
    }

    #[test]
    fn precision_helpers_match_dense_algebra() {
        let p = prm(0.7, 600.0, 350.0, 0.3, 0.2);
        let ds = sim_dataset(30, 3, 12, &p);
        let perm = order_maxmin(&ds, ST16);
        let sets = build_conditioning_sets(&ds, &perm, 4, ST16, ConditioningPolicy::AnySensor);
        let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
        let q = f.precision_matrix(DESK).unwrap();

        // quad_trace against the dense product.
        let s = build_sigma(&ds, &p).unwrap();
        let direct = (&q * s.matrix()).trace();
        assert_relative_eq!(f.quad_trace(s.matrix()), direct, max_relative = 1e-11);

        // precision_times_dense against the dense product.
        let qa = f.precision_times_dense(s.matrix());
        let dense = &q * s.matrix();
        for i in 0..ds.n() {
            for j in 0..ds.n() {
                assert_relative_eq!(qa[(i, j)], dense[(i, j)], max_relative = 1e-10, epsilon = 1e-12);
            }
        }

        // whiten squared norm equals the precision quadratic form.
        let z = ds.values();
        let w = f.whiten(&z);
        let qf = (&q * &z).dot(&z);
        assert_relative_eq!(w.norm_squared(), qf, max_relative = 1e-11);
    }

    #[test]
    fn kernel_only_path_matches_dense_blocks() {
        // b_k and d_k from the factor equal the textbook conditional
        // moments computed from the dense covariance.
        let p = prm(0.9, 500.0, 250.0, 0.35, 0.15);
        let ds = sim_dataset(25, 2, 21, &p);
        let perm = order_random(&ds, 2);
        let sets = build_conditioning_sets(&ds, &perm, 3, ST16, ConditioningPolicy::AnySensor);
        let f = vecchia_factor(&ds, &p, &perm, &sets).unwrap();
        for k in [1usize, 7, 19] {
            let members = sets.set(k);
            let m = members.len();
            let mut cc = DMatrix::<f64>::zeros(m, m);
            let mut cx = DVector::<f64>::zeros(m);
            for (a, &pa) in members.iter().enumerate() {
                for (bb, &pb) in members.iter().enumerate() {
                    cc[(a, bb)] = kernel(
                        ds.record(perm.at(pa)),
                        ds.record(perm.at(pb)),
                        &p,
                        pa == pb,
                    );
                }
                cx[a] = kernel(ds.record(perm.at(pa)), ds.record(perm.at(k)), &p, false);
            }
            let b = nalgebra::Cholesky::new(cc.clone()).unwrap().solve(&cx);
            let d = kernel(ds.record(perm.at(k)), ds.record(perm.at(k)), &p, true) - cx.dot(&b);
            for (got, want) in f.coeffs(k).iter().zip(b.iter()) {
                assert_relative_eq!(got, want, max_relative = 1e-10);
            }
            assert_relative_eq!(f.cond_var(k), d, max_relative = 1e-10);
        }
    }
}
