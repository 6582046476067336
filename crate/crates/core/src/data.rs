//! Observation records, dataset ingestion, and preprocessing.
//!
//! Observations are spatio-temporal points `(x, y, t)` in meters/seconds,
//! each belonging to one sensor `1..=J`, carrying a measured value and a
//! covariate vector whose first entry is the intercept 1. Files are read
//! and written as UTF-8 CSV with a header row; coordinates may be given
//! either projected (`x,y`) or geographic (`lon,lat`), the latter being
//! projected onto a local tangent plane at ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Mean Earth radius in meters, used by the local projection.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// One observation: projected coordinates, time relative to the dataset
/// epoch, sensor membership data and covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub obs_id: usize,
    pub x: f64,
    pub y: f64,
    pub t: f64,
    /// Sensor index in `1..=J`, contiguous after ingestion.
    pub sensor_id: usize,
    pub value: f64,
    /// Covariate vector of length `p`; first entry is always 1.
    pub covariates: Vec<f64>,
}

impl ObservationRecord {
    /// Space-time coordinates as a tuple, for distance computations.
    pub fn point(&self) -> (f64, f64, f64) {
        (self.x, self.y, self.t)
    }
}

/// An immutable collection of observations with contiguous sensor ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<ObservationRecord>,
    sensor_count: usize,
    covariate_count: usize,
    epoch: f64,
}

impl Dataset {
    /// Validate records and build a dataset. `obs_id` must equal the record
    /// position, sensor ids must cover `1..=J`, and covariate lengths must
    /// agree across records.
    pub fn new(records: Vec<ObservationRecord>, epoch: f64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput("dataset has no records".into()));
        }
        let p = records[0].covariates.len();
        if p == 0 {
            return Err(Error::Input("records must carry at least the intercept covariate".into()));
        }
        let mut max_sensor = 0usize;
        for (i, r) in records.iter().enumerate() {
            if r.obs_id != i {
                return Err(Error::Input(format!(
                    "record at position {i} has obs_id {}; ids must be 0..n-1 in order",
                    r.obs_id
                )));
            }
            if r.covariates.len() != p {
                return Err(Error::Input(format!(
                    "obs_id {}: covariate length {} != {}",
                    i,
                    r.covariates.len(),
                    p
                )));
            }
            let all_finite = r.x.is_finite()
                && r.y.is_finite()
                && r.t.is_finite()
                && r.value.is_finite()
                && r.covariates.iter().all(|c| c.is_finite());
            if !all_finite {
                return Err(Error::Input(format!("obs_id {i}: non-finite field")));
            }
            if r.sensor_id == 0 {
                return Err(Error::Input(format!("obs_id {i}: sensor_id must be >= 1")));
            }
            max_sensor = max_sensor.max(r.sensor_id);
        }
        let mut seen = vec![false; max_sensor];
        for r in &records {
            seen[r.sensor_id - 1] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Input(format!(
                "sensor ids are not contiguous over 1..={max_sensor}"
            )));
        }
        Ok(Dataset {
            records,
            sensor_count: max_sensor,
            covariate_count: p,
            epoch,
        })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    /// Number of distinct sensors `J`.
    pub fn sensor_count(&self) -> usize {
        self.sensor_count
    }

    /// Covariate vector length `p` (including the intercept).
    pub fn covariate_count(&self) -> usize {
        self.covariate_count
    }

    /// Absolute time origin subtracted from all `t` at ingestion.
    pub fn epoch(&self) -> f64 {
        self.epoch
    }

    pub fn records(&self) -> &[ObservationRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &ObservationRecord {
        &self.records[i]
    }

    /// Observation values as a vector indexed by `obs_id`.
    pub fn values(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.records.iter().map(|r| r.value))
    }

    /// The n-by-p design matrix of covariates.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let p = self.covariate_count;
        DMatrix::from_fn(n, p, |i, j| self.records[i].covariates[j])
    }

    /// Copy of the dataset with values replaced by `values`.
    pub fn with_values(&self, values: &DVector<f64>) -> Result<Dataset> {
        if values.len() != self.n() {
            return Err(Error::Input(format!(
                "value vector length {} != n = {}",
                values.len(),
                self.n()
            )));
        }
        if let Some(k) = (0..values.len()).find(|&k| !values[k].is_finite()) {
            return Err(Error::Input(format!("replacement value at obs_id {k} is non-finite")));
        }
        let mut records = self.records.clone();
        for (r, v) in records.iter_mut().zip(values.iter()) {
            r.value = *v;
        }
        Ok(Dataset {
            records,
            sensor_count: self.sensor_count,
            covariate_count: self.covariate_count,
            epoch: self.epoch,
        })
    }

    /// Bounding box `(x_min, x_max, y_min, y_max)`.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        let mut bb = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for r in &self.records {
            bb.0 = bb.0.min(r.x);
            bb.1 = bb.1.max(r.x);
            bb.2 = bb.2.min(r.y);
            bb.3 = bb.3.max(r.y);
        }
        bb
    }

    /// Time span `(t_min, t_max)` relative to the epoch.
    pub fn time_span(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in &self.records {
            lo = lo.min(r.t);
            hi = hi.max(r.t);
        }
        (lo, hi)
    }

    /// Diagonal of the spatial bounding box.
    pub fn spatial_extent(&self) -> f64 {
        let (x0, x1, y0, y1) = self.bounding_box();
        ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt()
    }

    /// Length of the observed time window.
    pub fn temporal_extent(&self) -> f64 {
        let (lo, hi) = self.time_span();
        hi - lo
    }
}

/// A point at which predictions are requested. Prediction points carry no
/// sensor membership.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub covariates: Vec<f64>,
}

impl PredictionPoint {
    pub fn point(&self) -> (f64, f64, f64) {
        (self.x, self.y, self.t)
    }
}

/// Column names expected in an observation file.
#[derive(Debug, Clone)]
pub struct ColumnSchema {
    pub sensor: String,
    pub x: String,
    pub y: String,
    pub t: String,
    pub value: String,
    /// When set, the coordinate columns hold degrees and are projected.
    pub lonlat: bool,
    /// Projection origin `(lon, lat)`; defaults to the data centroid.
    pub origin: Option<(f64, f64)>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            sensor: "sensor_id".into(),
            x: "x".into(),
            y: "y".into(),
            t: "t".into(),
            value: "value".into(),
            lonlat: false,
            origin: None,
        }
    }
}

impl ColumnSchema {
    /// Schema for geographic input with `lon,lat` coordinate columns.
    pub fn lonlat() -> Self {
        ColumnSchema {
            x: "lon".into(),
            y: "lat".into(),
            lonlat: true,
            ..ColumnSchema::default()
        }
    }
}

/// Project geographic coordinates onto a local equirectangular tangent
/// plane about `origin = (lon0, lat0)`:
/// `x = R cos(lat0) (lon - lon0)`, `y = R (lat - lat0)` (angles in radians).
pub fn project_lonlat(lon: f64, lat: f64, origin: (f64, f64)) -> Result<(f64, f64)> {
    let (lon0, lat0) = origin;
    for (name, v, lim) in [
        ("lon", lon, 180.0),
        ("lat", lat, 90.0),
        ("origin lon", lon0, 180.0),
        ("origin lat", lat0, 90.0),
    ] {
        if !v.is_finite() || v.abs() > lim {
            return Err(Error::Domain(format!("{name} = {v} outside [-{lim}, {lim}]")));
        }
    }
    let x = EARTH_RADIUS_M * lat0.to_radians().cos() * (lon - lon0).to_radians();
    let y = EARTH_RADIUS_M * (lat - lat0).to_radians();
    Ok((x, y))
}

struct RawRow {
    sensor: String,
    x: f64,
    y: f64,
    t: f64,
    value: f64,
    covariates: Vec<f64>,
}

/// Read an observation file. Sensor labels are relabeled to contiguous
/// `1..=J` (numeric labels sort numerically, otherwise lexicographically,
/// so the relabeling does not depend on row order), records are stored in
/// `(sensor_id, t)` order with full-key tie-breaking, times are shifted to
/// the dataset epoch, and an intercept column is prepended to covariates.
pub fn load_observations<P: AsRef<Path>>(path: P, schema: &ColumnSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Input(format!("cannot read header: {e}")))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_sensor = find(&schema.sensor)?;
    let c_x = find(&schema.x)?;
    let c_y = find(&schema.y)?;
    let c_t = find(&schema.t)?;
    let c_value = find(&schema.value)?;
    let required = [c_sensor, c_x, c_y, c_t, c_value];
    let covariate_cols: Vec<usize> =
        (0..headers.len()).filter(|i| !required.contains(i)).collect();

    let mut rows: Vec<RawRow> = Vec::new();
    for (ridx, rec) in reader.records().enumerate() {
        let file_row = ridx + 2; // 1-based, after the header
        let rec = rec.map_err(|e| Error::ParseRow {
            row: file_row,
            msg: format!("malformed record: {e}"),
        })?;
        let cell = |col: usize| -> Result<f64> {
            let raw = rec.get(col).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::ParseRow {
                row: file_row,
                msg: format!("column `{}`: cannot parse `{raw}` as a number", &headers[col]),
            })
        };
        let mut covariates = Vec::with_capacity(covariate_cols.len());
        for &col in &covariate_cols {
            covariates.push(cell(col)?);
        }
        rows.push(RawRow {
            sensor: rec.get(c_sensor).unwrap_or("").to_string(),
            x: cell(c_x)?,
            y: cell(c_y)?,
            t: cell(c_t)?,
            value: cell(c_value)?,
            covariates,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("{} holds no data rows", path.display())));
    }

    // Contiguous sensor relabeling, independent of row order.
    let mut labels: Vec<String> = rows.iter().map(|r| r.sensor.clone()).collect();
    labels.sort();
    labels.dedup();
    let numeric: Option<Vec<i64>> = labels.iter().map(|l| l.parse::<i64>().ok()).collect();
    if let Some(mut nums) = numeric {
        nums.sort_unstable();
        labels = nums.iter().map(|n| n.to_string()).collect();
    }
    let sensor_index: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i + 1))
        .collect();

    // Geographic input is projected about the centroid unless an origin
    // was supplied.
    let origin = if schema.lonlat {
        Some(schema.origin.unwrap_or_else(|| {
            let n = rows.len() as f64;
            let lon0 = rows.iter().map(|r| r.x).sum::<f64>() / n;
            let lat0 = rows.iter().map(|r| r.y).sum::<f64>() / n;
            (lon0, lat0)
        }))
    } else {
        None
    };

    let epoch = rows.iter().map(|r| r.t).fold(f64::INFINITY, f64::min);
    let mut records: Vec<ObservationRecord> = Vec::with_capacity(rows.len());
    for row in rows {
        let normalized = row
            .sensor
            .parse::<i64>()
            .map(|v| v.to_string())
            .unwrap_or(row.sensor);
        let sensor_id = sensor_index[normalized.as_str()];
        let (x, y) = match origin {
            Some(o) => project_lonlat(row.x, row.y, o)?,
            None => (row.x, row.y),
        };
        let mut covariates = Vec::with_capacity(row.covariates.len() + 1);
        covariates.push(1.0);
        covariates.extend_from_slice(&row.covariates);
        records.push(ObservationRecord {
            obs_id: 0,
            x,
            y,
            t: row.t - epoch,
            sensor_id,
            value: row.value,
            covariates,
        });
    }
    records.sort_by(|a, b| {
        (a.sensor_id, a.t, a.x, a.y, a.value)
            .partial_cmp(&(b.sensor_id, b.t, b.x, b.y, b.value))
            .expect("finite fields")
    });
    for (i, r) in records.iter_mut().enumerate() {
        r.obs_id = i;
    }
    Dataset::new(records, epoch)
}

/// Write a dataset in the observation file format. Times are written as
/// absolute (`t + epoch`) and the intercept covariate is dropped, so that
/// `load_observations` reproduces the dataset exactly; floats use the
/// shortest representation that round-trips.
pub fn save_observations<P: AsRef<Path>>(ds: &Dataset, path: P) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let p = ds.covariate_count();
    let mut header = vec![
        "sensor_id".to_string(),
        "x".to_string(),
        "y".to_string(),
        "t".to_string(),
        "value".to_string(),
    ];
    for j in 1..p {
        header.push(format!("c{j}"));
    }
    writer.write_record(&header)?;
    for r in ds.records() {
        let mut row = vec![
            r.sensor_id.to_string(),
            format!("{}", r.x),
            format!("{}", r.y),
            format!("{}", r.t + ds.epoch()),
            format!("{}", r.value),
        ];
        for c in &r.covariates[1..] {
            row.push(format!("{c}"));
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-sensor preprocessing: warm-up trimming per run, centered running
/// median smoothing with truncated boundary windows, then an optional log
/// transform. A run starts at a sensor's first record or after a gap
/// larger than ten times the sensor's median sampling interval. Records
/// keep their storage order and sensors never mix.
pub fn preprocess(
    ds: &Dataset,
    median_window: usize,
    warmup_s: f64,
    log_transform: bool,
) -> Result<Dataset> {
    if median_window == 0 || median_window % 2 == 0 {
        return Err(Error::Input(format!(
            "median_window must be an odd integer >= 1, got {median_window}"
        )));
    }
    if warmup_s < 0.0 {
        return Err(Error::Input("warmup must be nonnegative".into()));
    }

    // Sensor -> record indices in time order.
    let mut by_sensor: Vec<Vec<usize>> = vec![Vec::new(); ds.sensor_count()];
    for r in ds.records() {
        by_sensor[r.sensor_id - 1].push(r.obs_id);
    }
    for idx in by_sensor.iter_mut() {
        idx.sort_by(|&a, &b| {
            let (ra, rb) = (ds.record(a), ds.record(b));
            (ra.t, a).partial_cmp(&(rb.t, b)).expect("finite t")
        });
    }

    let mut keep = vec![false; ds.n()];
    let mut new_value = vec![0.0f64; ds.n()];
    for idx in &by_sensor {
        // Gap threshold from the median sampling interval.
        let mut gaps: Vec<f64> = idx
            .windows(2)
            .map(|w| ds.record(w[1]).t - ds.record(w[0]).t)
            .collect();
        gaps.sort_by(f64::total_cmp);
        let median_gap = if gaps.is_empty() {
            0.0
        } else if gaps.len() % 2 == 1 {
            gaps[gaps.len() / 2]
        } else {
            0.5 * (gaps[gaps.len() / 2 - 1] + gaps[gaps.len() / 2])
        };
        let gap_threshold = 10.0 * median_gap;

        let mut kept: Vec<usize> = Vec::with_capacity(idx.len());
        let mut run_start = f64::NAN;
        let mut prev_t = f64::NAN;
        for &i in idx {
            let t = ds.record(i).t;
            if run_start.is_nan() || (!gaps.is_empty() && t - prev_t > gap_threshold) {
                run_start = t;
            }
            prev_t = t;
            if t - run_start >= warmup_s {
                kept.push(i);
            }
        }

        // Centered running median over the kept series, truncated at the ends.
        let half = (median_window - 1) / 2;
        let vals: Vec<f64> = kept.iter().map(|&i| ds.record(i).value).collect();
        for (pos, &i) in kept.iter().enumerate() {
            let lo = pos.saturating_sub(half);
            let hi = (pos + half).min(vals.len() - 1);
            let mut window: Vec<f64> = vals[lo..=hi].to_vec();
            window.sort_by(f64::total_cmp);
            let m = window.len();
            new_value[i] = if m % 2 == 1 {
                window[m / 2]
            } else {
                0.5 * (window[m / 2 - 1] + window[m / 2])
            };
            keep[i] = true;
        }
    }

    let mut records: Vec<ObservationRecord> = Vec::new();
    for r in ds.records() {
        if !keep[r.obs_id] {
            continue;
        }
        let mut nr = r.clone();
        nr.value = new_value[r.obs_id];
        if log_transform {
            if nr.value <= 0.0 {
                return Err(Error::Domain(format!(
                    "obs_id {}: value {} is not positive under log transform",
                    r.obs_id, nr.value
                )));
            }
            nr.value = nr.value.ln();
        }
        records.push(nr);
    }
    if records.is_empty() {
        return Err(Error::EmptyInput("preprocessing removed every record".into()));
    }

    // Sensors may disappear entirely under warm-up trimming; relabel.
    let mut present: Vec<usize> = records.iter().map(|r| r.sensor_id).collect();
    present.sort_unstable();
    present.dedup();
    let remap: BTreeMap<usize, usize> =
        present.iter().enumerate().map(|(i, &s)| (s, i + 1)).collect();
    for (i, r) in records.iter_mut().enumerate() {
        r.sensor_id = remap[&r.sensor_id];
        r.obs_id = i;
    }
    Dataset::new(records, ds.epoch())
}
