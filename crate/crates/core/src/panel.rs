//! Panel ingestion, first differencing, block fold assignment and
//! shift-share instrument construction.

use std::collections::HashMap;
use std::io::Read;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Column roles for [`load_panel`].
#[derive(Debug, Clone, Default)]
pub struct Schema {
    pub unit: String,
    pub time: String,
    pub y: String,
    pub d: String,
    pub z: Vec<String>,
    pub x: Vec<String>,
    pub cluster: Option<String>,
}

/// Long-format panel: one row per (unit, time), sorted by unit then time.
///
/// Units are ordered by first appearance in the input.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    pub unit_ids: Vec<String>,
    pub unit: Vec<usize>,
    pub time: Vec<i64>,
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    /// n × r instrument matrix.
    pub z: DMatrix<f64>,
    /// n × p covariate matrix.
    pub x: DMatrix<f64>,
    pub cluster_ids: Vec<String>,
    pub cluster: Vec<usize>,
    pub z_names: Vec<String>,
    pub x_names: Vec<String>,
    /// Rows removed because a required field was missing or non-finite.
    pub dropped_rows: usize,
}

/// Unvalidated columns handed to [`PanelDataset::new`].
#[derive(Debug, Clone, Default)]
pub struct PanelParts {
    pub unit: Vec<String>,
    pub time: Vec<i64>,
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub cluster: Option<Vec<String>>,
    pub z_names: Vec<String>,
    pub x_names: Vec<String>,
}

impl PanelDataset {
    /// Validate and sort raw columns. `z` and `x` are given column by column.
    ///
    /// Rows with a non-finite value are dropped and counted.
    pub fn new(parts: PanelParts) -> Result<PanelDataset> {
        let n = parts.unit.len();
        let r = parts.z.len();
        let p = parts.x.len();
        if r == 0 {
            return Err(Error::InvalidArgument("at least one instrument column is required".into()));
        }
        if parts.z_names.len() != r || parts.x_names.len() != p {
            return Err(Error::Dimension("column names do not match column count".into()));
        }
        let lens_ok = parts.time.len() == n
            && parts.y.len() == n
            && parts.d.len() == n
            && parts.z.iter().all(|c| c.len() == n)
            && parts.x.iter().all(|c| c.len() == n)
            && parts.cluster.as_ref().map_or(true, |c| c.len() == n);
        if !lens_ok {
            return Err(Error::Dimension("columns have different lengths".into()));
        }

        let keep: Vec<usize> = (0..n)
            .filter(|&i| {
                parts.y[i].is_finite()
                    && parts.d[i].is_finite()
                    && parts.z.iter().all(|c| c[i].is_finite())
                    && parts.x.iter().all(|c| c[i].is_finite())
            })
            .collect();
        let dropped_rows = n - keep.len();

        let mut unit_index: HashMap<&str, usize> = HashMap::new();
        let mut unit_ids = Vec::new();
        for &i in &keep {
            let u = parts.unit[i].as_str();
            if !unit_index.contains_key(u) {
                unit_index.insert(u, unit_ids.len());
                unit_ids.push(u.to_string());
            }
        }
        let mut order = keep;
        order.sort_by_key(|&i| (unit_index[parts.unit[i].as_str()], parts.time[i]));
        for w in order.windows(2) {
            if parts.unit[w[0]] == parts.unit[w[1]] && parts.time[w[0]] == parts.time[w[1]] {
                return Err(Error::DuplicateKey {
                    unit: parts.unit[w[0]].clone(),
                    time: parts.time[w[0]],
                });
            }
        }

        let m = order.len();
        let unit: Vec<usize> = order.iter().map(|&i| unit_index[parts.unit[i].as_str()]).collect();
        let mut rows_per_unit = vec![0usize; unit_ids.len()];
        for &u in &unit {
            rows_per_unit[u] += 1;
        }
        if rows_per_unit.iter().all(|&c| c < 2) {
            return Err(Error::PanelTooShort);
        }

        let raw_cluster: Vec<&str> = match &parts.cluster {
            Some(c) => order.iter().map(|&i| c[i].as_str()).collect(),
            None => order.iter().map(|&i| parts.unit[i].as_str()).collect(),
        };
        let mut cluster_index: HashMap<&str, usize> = HashMap::new();
        let mut cluster_ids = Vec::new();
        let cluster = raw_cluster
            .iter()
            .map(|&c| {
                *cluster_index.entry(c).or_insert_with(|| {
                    cluster_ids.push(c.to_string());
                    cluster_ids.len() - 1
                })
            })
            .collect();

        Ok(PanelDataset {
            unit_ids,
            unit,
            time: order.iter().map(|&i| parts.time[i]).collect(),
            y: order.iter().map(|&i| parts.y[i]).collect(),
            d: order.iter().map(|&i| parts.d[i]).collect(),
            z: DMatrix::from_fn(m, r, |i, j| parts.z[j][order[i]]),
            x: DMatrix::from_fn(m, p, |i, j| parts.x[j][order[i]]),
            cluster_ids,
            cluster,
            z_names: parts.z_names,
            x_names: parts.x_names,
            dropped_rows,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "NaN" | "nan" | "." | "null" | "NULL")
}

/// Read a comma-separated panel with a header row.
///
/// Rows with a missing y, d, z or x field are dropped and counted in
/// [`PanelDataset::dropped_rows`]. Unit, time and cluster must be present.
pub fn load_panel<R: Read>(source: R, schema: &Schema) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let unit_c = col(&schema.unit)?;
    let time_c = col(&schema.time)?;
    let y_c = col(&schema.y)?;
    let d_c = col(&schema.d)?;
    if schema.z.is_empty() {
        return Err(Error::InvalidArgument("at least one instrument column is required".into()));
    }
    let z_c = schema.z.iter().map(|s| col(s)).collect::<Result<Vec<_>>>()?;
    let x_c = schema.x.iter().map(|s| col(s)).collect::<Result<Vec<_>>>()?;
    let cl_c = schema.cluster.as_deref().map(col).transpose()?;

    let mut parts = PanelParts {
        z: vec![Vec::new(); z_c.len()],
        x: vec![Vec::new(); x_c.len()],
        cluster: cl_c.map(|_| Vec::new()),
        z_names: schema.z.clone(),
        x_names: schema.x.clone(),
        ..Default::default()
    };
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize, name: &str| -> Result<f64> {
            let s = field(c);
            if is_missing(s) {
                return Ok(f64::NAN);
            }
            s.trim().parse::<f64>().map_err(|_| Error::NonNumeric {
                column: name.to_string(),
                value: s.to_string(),
                line,
            })
        };
        let unit = field(unit_c);
        if unit.is_empty() {
            return Err(Error::InvalidArgument(format!("empty unit identifier at line {line}")));
        }
        let ts = field(time_c);
        let time = ts.trim().parse::<i64>().map_err(|_| Error::NonNumeric {
            column: schema.time.clone(),
            value: ts.to_string(),
            line,
        })?;
        parts.unit.push(unit.to_string());
        parts.time.push(time);
        parts.y.push(num(y_c, &schema.y)?);
        parts.d.push(num(d_c, &schema.d)?);
        for (k, &c) in z_c.iter().enumerate() {
            parts.z[k].push(num(c, &schema.z[k])?);
        }
        for (k, &c) in x_c.iter().enumerate() {
            parts.x[k].push(num(c, &schema.x[k])?);
        }
        if let (Some(c), Some(v)) = (cl_c, parts.cluster.as_mut()) {
            v.push(field(c).to_string());
        }
    }
    PanelDataset::new(parts)
}

/// First-differenced rows with the stacked covariate pair (X_t, X_{t−1}).
#[derive(Debug, Clone)]
pub struct DifferencedSample {
    /// Units contributing at least one row, in panel order.
    pub unit_ids: Vec<String>,
    pub unit: Vec<usize>,
    pub time: Vec<i64>,
    pub cluster_ids: Vec<String>,
    pub cluster: Vec<usize>,
    pub ytilde: Vec<f64>,
    pub dtilde: Vec<f64>,
    /// n × r.
    pub ztilde: DMatrix<f64>,
    /// n × 2p, current covariates then lagged covariates.
    pub xpair: DMatrix<f64>,
    pub z_names: Vec<String>,
    pub xpair_names: Vec<String>,
    /// Panel units that had no consecutive pair.
    pub units_without_pairs: usize,
}

impl DifferencedSample {
    pub fn n_rows(&self) -> usize {
        self.ytilde.len()
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_ids.len()
    }

    pub fn n_instruments(&self) -> usize {
        self.ztilde.ncols()
    }

    /// Row indices grouped by unit.
    pub fn rows_by_unit(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_units()];
        for (i, &u) in self.unit.iter().enumerate() {
            out[u].push(i);
        }
        out
    }
}

/// First-difference a panel, keeping only pairs of consecutive integer periods.
pub fn first_difference(data: &PanelDataset) -> Result<DifferencedSample> {
    let n = data.n_rows();
    let r = data.z.ncols();
    let p = data.x.ncols();
    let pairs: Vec<usize> = (1..n)
        .filter(|&i| data.unit[i] == data.unit[i - 1] && data.time[i] - data.time[i - 1] == 1)
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoDifferentiablePairs);
    }

    let mut unit_map: HashMap<usize, usize> = HashMap::new();
    let mut unit_ids = Vec::new();
    let mut cluster_map: HashMap<usize, usize> = HashMap::new();
    let mut cluster_ids = Vec::new();
    let mut unit = Vec::with_capacity(pairs.len());
    let mut cluster = Vec::with_capacity(pairs.len());
    for &i in &pairs {
        let u = *unit_map.entry(data.unit[i]).or_insert_with(|| {
            unit_ids.push(data.unit_ids[data.unit[i]].clone());
            unit_ids.len() - 1
        });
        unit.push(u);
        let c = *cluster_map.entry(data.cluster[i]).or_insert_with(|| {
            cluster_ids.push(data.cluster_ids[data.cluster[i]].clone());
            cluster_ids.len() - 1
        });
        cluster.push(c);
    }

    let m = pairs.len();
    let xpair = DMatrix::from_fn(m, 2 * p, |row, j| {
        let i = pairs[row];
        if j < p {
            data.x[(i, j)]
        } else {
            data.x[(i - 1, j - p)]
        }
    });
    let mut xpair_names = data.x_names.clone();
    xpair_names.extend(data.x_names.iter().map(|s| format!("{s}_lag")));

    Ok(DifferencedSample {
        units_without_pairs: data.n_units() - unit_ids.len(),
        unit_ids,
        unit,
        time: pairs.iter().map(|&i| data.time[i]).collect(),
        cluster_ids,
        cluster,
        ytilde: pairs.iter().map(|&i| data.y[i] - data.y[i - 1]).collect(),
        dtilde: pairs.iter().map(|&i| data.d[i] - data.d[i - 1]).collect(),
        ztilde: DMatrix::from_fn(m, r, |row, j| {
            let i = pairs[row];
            data.z[(i, j)] - data.z[(i - 1, j)]
        }),
        xpair,
        z_names: data.z_names.clone(),
        xpair_names,
    })
}

/// Unit-level fold assignment for cross-fitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    /// Zero-based fold of each unit.
    pub fold_of_unit: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.fold_of_unit {
            s[f] += 1;
        }
        s
    }

    /// Row indices of `fd` in each fold.
    pub fn rows(&self, fd: &DifferencedSample) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &u) in fd.unit.iter().enumerate() {
            out[self.fold_of_unit[u]].push(i);
        }
        out
    }

    /// Row indices of `fd` outside fold `k`.
    pub fn complement_rows(&self, fd: &DifferencedSample, k: usize) -> Vec<usize> {
        (0..fd.n_rows())
            .filter(|&i| self.fold_of_unit[fd.unit[i]] != k)
            .collect()
    }
}

/// Shuffle units under `seed` and deal them round-robin into `k` folds.
pub fn block_kfold(n_units: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument("K ≥ 2 required".into()));
    }
    if k > n_units {
        return Err(Error::InvalidArgument(format!(
            "K = {k} folds exceeds the number of units ({n_units})"
        )));
    }
    let mut perm: Vec<usize> = (0..n_units).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of_unit = vec![0; n_units];
    for (pos, &u) in perm.iter().enumerate() {
        fold_of_unit[u] = pos % k;
    }
    Ok(FoldAssignment { fold_of_unit, k, seed })
}

/// Shift-share instrument `Z[r,t] = Σ_c shares[r,c]·shifts[c,t] / pop[r]`.
pub fn build_shift_share(
    shares: &DMatrix<f64>,
    shifts: &DMatrix<f64>,
    pop: &[f64],
) -> Result<DMatrix<f64>> {
    if shares.ncols() != shifts.nrows() || shares.nrows() != pop.len() {
        return Err(Error::Dimension(format!(
            "shares {}×{}, shifts {}×{}, population {}",
            shares.nrows(),
            shares.ncols(),
            shifts.nrows(),
            shifts.ncols(),
            pop.len()
        )));
    }
    if let Some(r) = pop.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::InvalidArgument(format!("population of region {r} must be positive")));
    }
    if shares.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::InvalidArgument("shares must be non-negative".into()));
    }
    let mut z = shares * shifts;
    for (r, &p) in pop.iter().enumerate() {
        z.row_mut(r).unscale_mut(p);
    }
    Ok(z)
}
