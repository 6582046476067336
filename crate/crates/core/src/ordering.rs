//! Observation orderings.
//!
//! The approximate likelihood depends on the order in which observations
//! are processed. Six orderings are provided, each producing an explicit
//! permutation: `random`, `spatial`, `temporal`, `maxmin`, `middleout`
//! and `sensor`. All tie-breaking is by lowest `obs_id` so every ordering
//! is reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::neighbors::{distance, DistanceSpec};

/// A bijection on `0..n`; position `k` holds the observation processed
/// k-th.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n || seen[i] {
                return Err(Error::Input(format!(
                    "permutation of length {n} is not a bijection (offending index {i})"
                )));
            }
            seen[i] = true;
        }
        Ok(Permutation { order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Observation index at ordered position `k`.
    pub fn at(&self, k: usize) -> usize {
        self.order[k]
    }

    /// Inverse map: `inverse()[obs] = position of obs in the ordering`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0usize; self.order.len()];
        for (k, &i) in self.order.iter().enumerate() {
            inv[i] = k;
        }
        inv
    }
}

/// Ordering strategy token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingKind {
    Random,
    Spatial,
    Temporal,
    Maxmin,
    MiddleOut,
    Sensor,
}

impl OrderingKind {
    pub const ALL: [OrderingKind; 6] = [
        OrderingKind::Random,
        OrderingKind::Spatial,
        OrderingKind::Temporal,
        OrderingKind::Maxmin,
        OrderingKind::MiddleOut,
        OrderingKind::Sensor,
    ];
}

impl std::str::FromStr for OrderingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(OrderingKind::Random),
            "spatial" => Ok(OrderingKind::Spatial),
            "temporal" => Ok(OrderingKind::Temporal),
            "maxmin" => Ok(OrderingKind::Maxmin),
            "middleout" => Ok(OrderingKind::MiddleOut),
            "sensor" => Ok(OrderingKind::Sensor),
            other => Err(Error::Config(format!(
                "unknown ordering `{other}` (expected random|spatial|temporal|maxmin|middleout|sensor)"
            ))),
        }
    }
}

impl std::fmt::Display for OrderingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OrderingKind::Random => "random",
            OrderingKind::Spatial => "spatial",
            OrderingKind::Temporal => "temporal",
            OrderingKind::Maxmin => "maxmin",
            OrderingKind::MiddleOut => "middleout",
            OrderingKind::Sensor => "sensor",
        })
    }
}

/// Dispatch by token. `dist` feeds `maxmin`/`middleout`; `seed` feeds
/// `random`.
pub fn order_by(kind: OrderingKind, ds: &Dataset, dist: DistanceSpec, seed: u64) -> Permutation {
    match kind {
        OrderingKind::Random => order_random(ds, seed),
        OrderingKind::Spatial => order_spatial(ds),
        OrderingKind::Temporal => order_temporal(ds),
        OrderingKind::Maxmin => order_maxmin(ds, dist),
        OrderingKind::MiddleOut => order_middleout(ds, dist),
        OrderingKind::Sensor => order_sensor(ds),
    }
}

/// Uniform random permutation via a seeded Fisher-Yates shuffle.
pub fn order_random(ds: &Dataset, seed: u64) -> Permutation {
    let n = ds.n();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    Permutation { order }
}

/// Ascending by `x`, ties by `y`, then by `obs_id`.
pub fn order_spatial(ds: &Dataset) -> Permutation {
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (ds.record(a), ds.record(b));
        (ra.x, ra.y, a).partial_cmp(&(rb.x, rb.y, b)).expect("finite coordinates")
    });
    Permutation { order }
}

/// Ascending by `t`, ties by `obs_id`.
pub fn order_temporal(ds: &Dataset) -> Permutation {
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (ds.record(a), ds.record(b));
        (ra.t, a).partial_cmp(&(rb.t, b)).expect("finite time")
    });
    Permutation { order }
}

fn metric_centroid(ds: &Dataset) -> (f64, f64, f64) {
    let n = ds.n() as f64;
    let mut c = (0.0, 0.0, 0.0);
    for r in ds.records() {
        c.0 += r.x;
        c.1 += r.y;
        c.2 += r.t;
    }
    (c.0 / n, c.1 / n, c.2 / n)
}

/// Greedy max-min ordering: start at the observation closest to the
/// centroid, then repeatedly pick the observation whose minimum distance
/// to the already-chosen set is largest. Exact O(n^2).
pub fn order_maxmin(ds: &Dataset, dist: DistanceSpec) -> Permutation {
    let n = ds.n();
    let centroid = metric_centroid(ds);
    let mut first = 0usize;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let d = distance(ds.record(i).point(), centroid, dist);
        if d < best {
            best = d;
            first = i;
        }
    }

    let mut order = Vec::with_capacity(n);
    order.push(first);
    let mut selected = vec![false; n];
    selected[first] = true;
    // min_dist[i] = distance from i to the closest selected observation.
    let mut min_dist: Vec<f64> = (0..n)
        .map(|i| distance(ds.record(i).point(), ds.record(first).point(), dist))
        .collect();
    for _ in 1..n {
        let mut pick = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            if !selected[i] && min_dist[i] > best {
                best = min_dist[i];
                pick = i;
            }
        }
        selected[pick] = true;
        order.push(pick);
        let p = ds.record(pick).point();
        for i in 0..n {
            if !selected[i] {
                let d = distance(ds.record(i).point(), p, dist);
                if d < min_dist[i] {
                    min_dist[i] = d;
                }
            }
        }
    }
    Permutation { order }
}

/// Ascending by distance to the metric centroid, ties by `obs_id`.
pub fn order_middleout(ds: &Dataset, dist: DistanceSpec) -> Permutation {
    let centroid = metric_centroid(ds);
    let mut keyed: Vec<(f64, usize)> = (0..ds.n())
        .map(|i| (distance(ds.record(i).point(), centroid, dist), i))
        .collect();
    keyed.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    Permutation {
        order: keyed.into_iter().map(|(_, i)| i).collect(),
    }
}

/// Sensors ranked by their earliest observation time; within a sensor,
/// chronological order.
pub fn order_sensor(ds: &Dataset) -> Permutation {
    let mut earliest = vec![f64::INFINITY; ds.sensor_count()];
    for r in ds.records() {
        let e = &mut earliest[r.sensor_id - 1];
        if r.t < *e {
            *e = r.t;
        }
    }
    let mut rank: Vec<usize> = (0..ds.sensor_count()).collect();
    rank.sort_by(|&a, &b| (earliest[a], a).partial_cmp(&(earliest[b], b)).expect("finite t"));
    let mut sensor_rank = vec![0usize; ds.sensor_count()];
    for (pos, &s) in rank.iter().enumerate() {
        sensor_rank[s] = pos;
    }

    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (ds.record(a), ds.record(b));
        (sensor_rank[ra.sensor_id - 1], ra.t, a)
            .partial_cmp(&(sensor_rank[rb.sensor_id - 1], rb.t, b))
            .expect("finite t")
    });
    Permutation { order }
}
