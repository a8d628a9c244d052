//! Panel ingestion, missing-data filling and fit metrics.
//!
//! File formats (see `docs/data-formats.md`):
//! - data CSV: header `time,<id>,<id>,...`; one row per time instant, first
//!   column the (strictly increasing) time index, missing entries empty or
//!   `NaN`;
//! - locations CSV: header `id,<coord>,...`; one row per location, IDs
//!   matching the data header.
//!
//! Missing data is filled per location: each temporal series gets its own
//! MLM hyper-parameter fit with a mask-aware filter (no measurement update
//! where the value is missing), then the smoother mean replaces the masked
//! entries. Observed cells are never touched.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Result, StgpError};
use crate::hyper::{
    default_param_specs, FitProblem, Method, OptimizeOptions,
};
use crate::kalman::{filter_pass, smoother_pass};
use crate::kernels::TemporalKernelSpec;

/// Coordinate handling at load time.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum CoordinateScale {
    /// Use coordinates as stored (e.g. raw longitude/latitude degrees).
    #[default]
    Raw,
    /// Earth-centered earth-fixed meters divided by a unit length in meters
    /// (default 1e4, i.e. 10 km units).
    EcefMeters { unit_m: f64 },
}

#[derive(Debug, Clone)]
pub struct LoadConfig {
    pub ts: f64,
    /// Training columns; `None` means everything is training data.
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub coordinates: CoordinateScale,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self {
            ts: 1.0,
            n_train: None,
            n_test: None,
            coordinates: CoordinateScale::Raw,
        }
    }
}

/// An observation grid over `M` locations and `N + N_T` time instants.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPanel {
    /// `m x (n_train + n_test)`; missing cells hold NaN until filled.
    pub values: DMatrix<f64>,
    pub missing: DMatrix<bool>,
    pub locations: Vec<Vec<f64>>,
    pub location_ids: Vec<String>,
    pub ts: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl DataPanel {
    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_total(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_complete(&self) -> bool {
        !self.missing.iter().any(|&x| x)
    }

    pub fn train_values(&self) -> DMatrix<f64> {
        self.values.columns(0, self.n_train).into_owned()
    }

    pub fn test_values(&self) -> DMatrix<f64> {
        self.values.columns(self.n_train, self.n_test).into_owned()
    }

    fn validate(&self) -> Result<()> {
        let (m, n) = (self.values.nrows(), self.values.ncols());
        if self.missing.nrows() != m || self.missing.ncols() != n {
            return Err(StgpError::Input("mask shape mismatch".into()));
        }
        if self.locations.len() != m || self.location_ids.len() != m {
            return Err(StgpError::Input(
                "location list does not match the panel rows".into(),
            ));
        }
        if self.n_train == 0 || self.n_train + self.n_test != n {
            return Err(StgpError::Input(format!(
                "split ({}, {}) inconsistent with {} columns",
                self.n_train, self.n_test, n
            )));
        }
        for i in 0..m {
            if (0..n).all(|j| self.missing[(i, j)]) {
                return Err(StgpError::Input(format!(
                    "location {} has no observed values",
                    self.location_ids[i]
                )));
            }
        }
        Ok(())
    }
}

fn parse_err(file: &Path, line: usize, message: impl Into<String>) -> StgpError {
    StgpError::Parse {
        file: file.display().to_string(),
        line,
        message: message.into(),
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| StgpError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Location IDs, time index, value grid and missing mask of a data CSV.
pub type ParsedPanel = (Vec<String>, Vec<f64>, DMatrix<f64>, DMatrix<bool>);

/// Parses the data CSV: header of location IDs, first column a strictly
/// increasing time index, empty/NaN cells flagged missing.
pub fn parse_data_csv(text: &str, file: &Path) -> Result<ParsedPanel> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(file, 1, "empty file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 {
        return Err(parse_err(file, 1, "header needs a time column and at least one location"));
    }
    let ids: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    for (k, id) in ids.iter().enumerate() {
        if id.is_empty() {
            return Err(parse_err(file, 1, format!("empty location ID in column {}", k + 2)));
        }
        if ids[..k].contains(id) {
            return Err(parse_err(file, 1, format!("duplicate location ID `{id}`")));
        }
    }
    let m = ids.len();
    let mut times: Vec<f64> = Vec::new();
    let mut rows: Vec<(Vec<f64>, Vec<bool>)> = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = raw.split(',').map(str::trim).collect();
        if cells.len() != m + 1 {
            return Err(parse_err(
                file,
                lineno,
                format!("row has {} cells, expected {}", cells.len(), m + 1),
            ));
        }
        let t: f64 = cells[0].parse().map_err(|_| {
            parse_err(file, lineno, format!("time index `{}` is not a number", cells[0]))
        })?;
        if let Some(&prev) = times.last() {
            if !(t > prev) {
                return Err(parse_err(
                    file,
                    lineno,
                    format!("time index {t} not greater than previous {prev}"),
                ));
            }
        }
        times.push(t);
        let mut vals = Vec::with_capacity(m);
        let mut miss = Vec::with_capacity(m);
        for (k, cell) in cells[1..].iter().enumerate() {
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                vals.push(f64::NAN);
                miss.push(true);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    parse_err(
                        file,
                        lineno,
                        format!("value `{cell}` in column {} is not a number", k + 2),
                    )
                })?;
                if !v.is_finite() {
                    return Err(parse_err(
                        file,
                        lineno,
                        format!("non-finite value in column {}", k + 2),
                    ));
                }
                vals.push(v);
                miss.push(false);
            }
        }
        rows.push((vals, miss));
    }
    if rows.is_empty() {
        return Err(parse_err(file, 2, "no data rows"));
    }
    let n = rows.len();
    let values = DMatrix::from_fn(m, n, |i, j| rows[j].0[i]);
    let missing = DMatrix::from_fn(m, n, |i, j| rows[j].1[i]);
    Ok((ids, times, values, missing))
}

/// Parses the locations CSV: header, then `id,<coord>,...` rows.
pub fn parse_locations_csv(text: &str, file: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(file, 1, "empty file"))?;
    let dim = header.split(',').count().saturating_sub(1);
    if dim == 0 {
        return Err(parse_err(file, 1, "header needs an id column and coordinates"));
    }
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = raw.split(',').map(str::trim).collect();
        if cells.len() != dim + 1 {
            return Err(parse_err(
                file,
                lineno,
                format!("row has {} cells, expected {}", cells.len(), dim + 1),
            ));
        }
        let id = cells[0].to_string();
        if id.is_empty() {
            return Err(parse_err(file, lineno, "empty location ID"));
        }
        if out.iter().any(|(existing, _)| *existing == id) {
            return Err(parse_err(file, lineno, format!("duplicate location `{id}`")));
        }
        let mut coords = Vec::with_capacity(dim);
        for cell in &cells[1..] {
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(file, lineno, format!("coordinate `{cell}` is not a number"))
            })?;
            if !v.is_finite() {
                return Err(parse_err(file, lineno, "non-finite coordinate"));
            }
            coords.push(v);
        }
        out.push((id, coords));
    }
    Ok(out)
}

/// Loads and cross-validates the data/locations pair.
pub fn load_panel(data_path: &Path, locations_path: &Path, config: &LoadConfig) -> Result<DataPanel> {
    let (ids, _times, values, missing) = parse_data_csv(&read_to_string(data_path)?, data_path)?;
    let locs = parse_locations_csv(&read_to_string(locations_path)?, locations_path)?;
    if locs.len() != ids.len() {
        return Err(StgpError::Input(format!(
            "locations file has {} rows, data has {} location columns",
            locs.len(),
            ids.len()
        )));
    }
    // align locations to the data header order
    let mut locations = Vec::with_capacity(ids.len());
    for id in &ids {
        let Some((_, coords)) = locs.iter().find(|(lid, _)| lid == id) else {
            return Err(StgpError::Input(format!(
                "location `{id}` appears in the data header but not in the locations file"
            )));
        };
        let scaled = match config.coordinates {
            CoordinateScale::Raw => coords.clone(),
            CoordinateScale::EcefMeters { unit_m } => {
                coords.iter().map(|c| c / unit_m).collect()
            }
        };
        locations.push(scaled);
    }
    let n = values.ncols();
    let (n_train, n_test) = match (config.n_train, config.n_test) {
        (None, None) => (n, 0),
        (Some(tr), None) => {
            if tr > n {
                return Err(StgpError::Config(format!(
                    "--train {tr} exceeds the {n} available time instants"
                )));
            }
            (tr, n - tr)
        }
        (Some(tr), Some(te)) => {
            if tr + te != n {
                return Err(StgpError::Config(format!(
                    "--train {tr} + --test {te} != {n} time instants in the file"
                )));
            }
            (tr, te)
        }
        (None, Some(te)) => {
            if te >= n {
                return Err(StgpError::Config(format!(
                    "--test {te} leaves no training data out of {n}"
                )));
            }
            (n - te, te)
        }
    };
    let panel = DataPanel {
        values,
        missing,
        locations,
        location_ids: ids,
        ts: config.ts,
        n_train,
        n_test,
    };
    panel.validate()?;
    Ok(panel)
}

// ---------------------------------------------------------------------------
// Missing-data filling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FillOptions {
    pub grid_size: usize,
    pub optimize: OptimizeOptions,
}

impl Default for FillOptions {
    fn default() -> Self {
        Self {
            grid_size: 4,
            optimize: OptimizeOptions {
                n_starts: 3,
                ..OptimizeOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FillDiagnostic {
    pub location_id: String,
    pub filled: usize,
    pub fallback: bool,
    pub temporal: Option<TemporalKernelSpec>,
    pub sigma2: Option<f64>,
}

/// Fills missing entries location by location. Observed entries are
/// preserved bit-identically; locations whose hyper-parameter optimization
/// fails fall back to linear interpolation and are flagged.
pub fn fill_missing(
    panel: &DataPanel,
    template: &TemporalKernelSpec,
    opts: &FillOptions,
) -> Result<(DataPanel, Vec<FillDiagnostic>)> {
    panel.validate()?;
    if panel.is_complete() {
        return Ok((panel.clone(), Vec::new()));
    }
    let m = panel.m();
    type FilledRow = Option<(usize, Vec<f64>, FillDiagnostic)>;
    let results: Vec<Result<FilledRow>> = (0..m)
        .into_par_iter()
        .map(|i| fill_location(panel, template, opts, i))
        .collect();

    let mut filled = panel.clone();
    let mut diagnostics = Vec::new();
    for res in results {
        if let Some((i, row, diag)) = res? {
            for (j, value) in row.iter().enumerate() {
                if panel.missing[(i, j)] {
                    filled.values[(i, j)] = *value;
                    filled.missing[(i, j)] = false;
                }
            }
            diagnostics.push(diag);
        }
    }
    Ok((filled, diagnostics))
}

fn fill_location(
    panel: &DataPanel,
    template: &TemporalKernelSpec,
    opts: &FillOptions,
    i: usize,
) -> Result<Option<(usize, Vec<f64>, FillDiagnostic)>> {
    let n = panel.n_total();
    let observed: Vec<bool> = (0..n).map(|j| !panel.missing[(i, j)]).collect();
    let n_missing = observed.iter().filter(|&&o| !o).count();
    if n_missing == 0 {
        return Ok(None);
    }
    // masked cells get placeholders; the filter never reads them
    let y = DMatrix::from_fn(1, n, |_, j| {
        if observed[j] {
            panel.values[(i, j)]
        } else {
            0.0
        }
    });
    let obs_values: Vec<f64> = (0..n)
        .filter(|&j| observed[j])
        .map(|j| panel.values[(i, j)])
        .collect();
    let mean = obs_values.iter().sum::<f64>() / obs_values.len() as f64;
    let var = obs_values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / obs_values.len() as f64;

    let problem = FitProblem {
        method: Method::Mlm,
        template,
        locations: None,
        base_alpha: 1.0,
        fixed_sigma2: None,
        y: &y,
        ts: panel.ts,
        observed: Some(&observed),
    };
    let params = default_param_specs(template, var.max(1e-8), None, true, opts.grid_size);
    match problem.fit(&params, &opts.optimize).and_then(|fit| {
        let model = problem.build_model(&fit.temporal, None, fit.sigma2)?;
        let l = model.transform_outputs(&y)?;
        let filt = filter_pass(&model, &l, Some(&observed))?;
        let smoothed = smoother_pass(&model, &filt)?;
        Ok((fit, smoothed))
    }) {
        Ok((fit, smoothed)) => {
            let row: Vec<f64> = (0..n).map(|j| smoothed.fhat[(0, j)]).collect();
            Ok(Some((
                i,
                row,
                FillDiagnostic {
                    location_id: panel.location_ids[i].clone(),
                    filled: n_missing,
                    fallback: false,
                    temporal: Some(fit.temporal),
                    sigma2: Some(fit.sigma2),
                },
            )))
        }
        Err(_) => {
            let row = linear_interpolate(&y, &observed);
            Ok(Some((
                i,
                row,
                FillDiagnostic {
                    location_id: panel.location_ids[i].clone(),
                    filled: n_missing,
                    fallback: true,
                    temporal: None,
                    sigma2: None,
                },
            )))
        }
    }
}

/// Straight-line interpolation between observed neighbors; endpoints extend
/// the nearest observation.
fn linear_interpolate(y: &DMatrix<f64>, observed: &[bool]) -> Vec<f64> {
    let n = observed.len();
    let obs_idx: Vec<usize> = (0..n).filter(|&j| observed[j]).collect();
    let mut out = vec![0.0; n];
    for j in 0..n {
        if observed[j] {
            out[j] = y[(0, j)];
            continue;
        }
        let prev = obs_idx.iter().rev().find(|&&k| k < j);
        let next = obs_idx.iter().find(|&&k| k > j);
        out[j] = match (prev, next) {
            (Some(&a), Some(&b)) => {
                let t = (j - a) as f64 / (b - a) as f64;
                y[(0, a)] * (1.0 - t) + y[(0, b)] * t
            }
            (Some(&a), None) => y[(0, a)],
            (None, Some(&b)) => y[(0, b)],
            (None, None) => 0.0,
        };
    }
    out
}

// ---------------------------------------------------------------------------
// Fit metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    /// `fit_j` per test step; NaN where the denominator vanished.
    pub per_time_fit: Vec<f64>,
    /// Mean over the well-defined entries.
    pub avg_fit: f64,
    /// Count of NaN (constant-column) entries excluded from the average.
    pub undefined: usize,
    /// Root-mean-square residual per location over the test block.
    pub per_location_rmse: Vec<f64>,
}

/// `fit_j = 100 (1 - ||fhat_j - y_j|| / ||y_j - mean(y_j)||)` per test
/// column, averaged over the horizon.
pub fn compute_fit(predictions: &DMatrix<f64>, actual: &DMatrix<f64>) -> Result<FitReport> {
    if predictions.shape() != actual.shape() {
        return Err(StgpError::Input(format!(
            "prediction shape {:?} does not match data {:?}",
            predictions.shape(),
            actual.shape()
        )));
    }
    let (m, nt) = actual.shape();
    if nt == 0 {
        return Ok(FitReport {
            per_time_fit: Vec::new(),
            avg_fit: f64::NAN,
            undefined: 0,
            per_location_rmse: vec![0.0; m],
        });
    }
    let mut per_time = Vec::with_capacity(nt);
    let mut undefined = 0;
    for j in 0..nt {
        let y = actual.column(j);
        let f = predictions.column(j);
        let mean = y.iter().sum::<f64>() / m as f64;
        let denom = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>().sqrt();
        let num = (f - y).norm();
        if denom == 0.0 {
            per_time.push(f64::NAN);
            undefined += 1;
        } else {
            per_time.push(100.0 * (1.0 - num / denom));
        }
    }
    let defined: Vec<f64> = per_time.iter().cloned().filter(|v| v.is_finite()).collect();
    let avg = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let per_location_rmse = (0..m)
        .map(|i| {
            let sq: f64 = (0..nt)
                .map(|j| (predictions[(i, j)] - actual[(i, j)]).powi(2))
                .sum();
            (sq / nt as f64).sqrt()
        })
        .collect();
    Ok(FitReport {
        per_time_fit: per_time,
        avg_fit: avg,
        undefined,
        per_location_rmse,
    })
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

fn create_file(path: &Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| StgpError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    std::fs::File::create(path).map_err(|source| StgpError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StgpError + '_ {
    move |source| StgpError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes the panel pair in the documented CSV formats.
pub fn write_panel(panel: &DataPanel, data_path: &Path, locations_path: &Path) -> Result<()> {
    let mut f = create_file(data_path)?;
    let mut header = String::from("time");
    for id in &panel.location_ids {
        header.push(',');
        header.push_str(id);
    }
    writeln!(f, "{header}").map_err(io_err(data_path))?;
    for j in 0..panel.n_total() {
        let mut row = format!("{}", (j + 1) as f64 * panel.ts);
        for i in 0..panel.m() {
            row.push(',');
            if panel.missing[(i, j)] {
                // leave the cell empty
            } else {
                row.push_str(&format!("{}", panel.values[(i, j)]));
            }
        }
        writeln!(f, "{row}").map_err(io_err(data_path))?;
    }

    let mut f = create_file(locations_path)?;
    let dim = panel.locations.first().map_or(0, |p| p.len());
    let mut header = String::from("id");
    for k in 0..dim {
        header.push_str(&format!(",c{k}"));
    }
    writeln!(f, "{header}").map_err(io_err(locations_path))?;
    for (id, coords) in panel.location_ids.iter().zip(&panel.locations) {
        let mut row = id.clone();
        for c in coords {
            row.push_str(&format!(",{c}"));
        }
        writeln!(f, "{row}").map_err(io_err(locations_path))?;
    }
    Ok(())
}

/// Writes an `m x n` field as CSV with the panel's location IDs as header
/// and a leading time-index column starting at `t0`.
pub fn write_field_csv(
    path: &Path,
    ids: &[String],
    field: &DMatrix<f64>,
    t0: f64,
    ts: f64,
) -> Result<()> {
    let mut f = create_file(path)?;
    let mut header = String::from("time");
    for id in ids {
        header.push(',');
        header.push_str(id);
    }
    writeln!(f, "{header}").map_err(io_err(path))?;
    for j in 0..field.ncols() {
        let mut row = format!("{}", t0 + j as f64 * ts);
        for i in 0..field.nrows() {
            row.push_str(&format!(",{}", field[(i, j)]));
        }
        writeln!(f, "{row}").map_err(io_err(path))?;
    }
    Ok(())
}

/// Fill diagnostics as JSON-lines.
pub fn write_fill_diagnostics(path: &Path, diags: &[FillDiagnostic]) -> Result<()> {
    let mut f = create_file(path)?;
    for d in diags {
        let line = serde_json::to_string(d)
            .map_err(|e| StgpError::Input(format!("diagnostic serialization failed: {e}")))?;
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::TemporalKernelSpec;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("<test>")
    }

    #[test]
    fn parse_small_panel_with_missing_cell() {
        let text = "time,a,b\n1,0.5,\n2,0.7,3.1\n3,0.9,2.2\n";
        let (ids, times, values, missing) = parse_data_csv(text, &p()).unwrap();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(times, vec![1.0, 2.0, 3.0]);
        assert_eq!(missing.iter().filter(|&&x| x).count(), 1);
        assert!(missing[(1, 0)]);
        assert!(values[(1, 0)].is_nan());
        assert_eq!(values[(0, 2)], 0.9);
    }

    #[test]
    fn parse_rejects_ragged_and_nonmonotone() {
        let ragged = "time,a,b\n1,0.5\n";
        let err = parse_data_csv(ragged, &p()).unwrap_err();
        assert!(matches!(err, StgpError::Parse { line: 2, .. }), "{err}");

        let nonmono = "time,a\n2,1.0\n1,2.0\n";
        let err = parse_data_csv(nonmono, &p()).unwrap_err();
        assert!(matches!(err, StgpError::Parse { line: 3, .. }), "{err}");

        let dup = "time,a,a\n1,0.5,0.6\n";
        assert!(parse_data_csv(dup, &p()).is_err());
    }

    fn write_tmp(name: &str, text: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("stgp-pipeline-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn load_panel_cross_checks_locations() {
        let data = write_tmp("d1.csv", "time,a,b\n1,0.5,1.0\n2,0.7,1.1\n");
        let locs = write_tmp("l1.csv", "id,x,y\na,0,0\n");
        let err = load_panel(&data, &locs, &LoadConfig::default()).unwrap_err();
        assert!(matches!(err, StgpError::Input(_)), "{err}");
    }

    #[test]
    fn load_panel_scales_ecef() {
        let data = write_tmp("d2.csv", "time,a\n1,0.5\n");
        let locs = write_tmp("l2.csv", "id,x,y,z\na,12345,0,-20000\n");
        let cfg = LoadConfig {
            coordinates: CoordinateScale::EcefMeters { unit_m: 1e4 },
            ..LoadConfig::default()
        };
        let panel = load_panel(&data, &locs, &cfg).unwrap();
        assert!((panel.locations[0][0] - 1.2345).abs() < 1e-12);
        assert!((panel.locations[0][2] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn load_panel_split_validation() {
        let data = write_tmp("d3.csv", "time,a\n1,1\n2,2\n3,3\n4,4\n");
        let locs = write_tmp("l3.csv", "id,x\na,0\n");
        let cfg = LoadConfig {
            n_train: Some(3),
            n_test: Some(2),
            ..LoadConfig::default()
        };
        assert!(load_panel(&data, &locs, &cfg).is_err());
        let cfg = LoadConfig {
            n_train: Some(3),
            ..LoadConfig::default()
        };
        let panel = load_panel(&data, &locs, &cfg).unwrap();
        assert_eq!(panel.n_train, 3);
        assert_eq!(panel.n_test, 1);
    }

    fn small_panel(values: DMatrix<f64>, missing: DMatrix<bool>) -> DataPanel {
        let m = values.nrows();
        let n = values.ncols();
        DataPanel {
            values,
            missing,
            locations: (0..m).map(|i| vec![i as f64, 0.0]).collect(),
            location_ids: (0..m).map(|i| format!("s{i}")).collect(),
            ts: 1.0,
            n_train: n,
            n_test: 0,
        }
    }

    #[test]
    fn fill_on_complete_panel_is_identity() {
        let values = DMatrix::from_fn(2, 10, |i, j| ((i + j) as f64 * 0.3).sin());
        let panel = small_panel(values, DMatrix::from_element(2, 10, false));
        let template = TemporalKernelSpec::exponential(1.0, 3.0).unwrap();
        let (filled, diags) = fill_missing(&panel, &template, &FillOptions::default()).unwrap();
        assert_eq!(filled, panel);
        assert!(diags.is_empty());
    }

    #[test]
    fn fill_preserves_observed_bits_and_interpolates() {
        let n = 24;
        let mut values = DMatrix::from_fn(1, n, |_, j| (j as f64 * 0.15).sin());
        let mut missing = DMatrix::from_element(1, n, false);
        missing[(0, 10)] = true;
        values[(0, 10)] = f64::NAN;
        let panel = small_panel(values.clone(), missing);
        let template = TemporalKernelSpec::exponential(1.0, 3.0).unwrap();
        let (filled, diags) = fill_missing(&panel, &template, &FillOptions::default()).unwrap();
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].filled, 1);
        // observed cells bit-identical
        for j in 0..n {
            if j != 10 {
                assert!(filled.values[(0, j)].to_bits() == values[(0, j)].to_bits());
            }
        }
        // the series is smooth and increasing around j=10; the fill must
        // land between the neighbors
        let lo = values[(0, 9)].min(values[(0, 11)]);
        let hi = values[(0, 9)].max(values[(0, 11)]);
        let v = filled.values[(0, 10)];
        assert!(v > lo - 0.2 && v < hi + 0.2, "filled {v} far outside [{lo}, {hi}]");
        assert!(filled.is_complete());
    }

    #[test]
    fn fill_matches_dense_conditional_mean() {
        // With the hyper-parameters the fill estimated, the filled values
        // must equal the dense GP conditional mean for that location.
        let n = 18;
        let mut values = DMatrix::from_fn(1, n, |_, j| (j as f64 * 0.4).sin() * 1.3);
        let mut missing = DMatrix::from_element(1, n, false);
        for &j in &[4usize, 5, 12] {
            missing[(0, j)] = true;
            values[(0, j)] = f64::NAN;
        }
        let panel = small_panel(values, missing.clone());
        let template = TemporalKernelSpec::matern32(1.0, 3.0).unwrap();
        let (filled, diags) = fill_missing(&panel, &template, &FillOptions::default()).unwrap();
        assert!(!diags[0].fallback);
        let spec = diags[0].temporal.clone().unwrap();
        let sigma2 = diags[0].sigma2.unwrap();

        let times: Vec<f64> = (0..n).map(|j| (j + 1) as f64).collect();
        let k = spec.gram(&times).unwrap();
        let obs: Vec<usize> = (0..n).filter(|&j| !missing[(0, j)]).collect();
        let ko = DMatrix::from_fn(obs.len(), obs.len(), |a, b| k[(obs[a], obs[b])])
            + DMatrix::identity(obs.len(), obs.len()) * sigma2;
        let yobs = nalgebra::DVector::from_fn(obs.len(), |a, _| panel.values[(0, obs[a])]);
        let chol = ko.cholesky().unwrap();
        let alpha = chol.solve(&yobs);
        for &j in &[4usize, 5, 12] {
            let cross = nalgebra::DVector::from_fn(obs.len(), |a, _| k[(j, obs[a])]);
            let want = cross.dot(&alpha);
            let got = filled.values[(0, j)];
            assert!(
                (got - want).abs() < 1e-6 * want.abs().max(1.0),
                "cell {j}: {got} vs dense {want}"
            );
        }
    }

    #[test]
    fn fill_decays_to_prior_with_one_observation() {
        let n = 15;
        let mut values = DMatrix::from_element(1, n, f64::NAN);
        let mut missing = DMatrix::from_element(1, n, true);
        values[(0, 0)] = 2.0;
        missing[(0, 0)] = false;
        let panel = small_panel(values, missing);
        let template = TemporalKernelSpec::exponential(1.0, 2.0).unwrap();
        let (filled, diags) = fill_missing(&panel, &template, &FillOptions::default()).unwrap();
        // fallback or not, far from the only observation the fill must not
        // exceed it in magnitude, and the GP fill decays toward 0
        assert!(filled.values[(0, n - 1)].abs() <= 2.0 + 1e-9);
        if !diags[0].fallback {
            assert!(
                filled.values[(0, n - 1)].abs() < filled.values[(0, 1)].abs() + 1e-9,
                "fill must decay away from the observation"
            );
        }
    }

    #[test]
    fn fit_metric_values() {
        let y = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let exact = compute_fit(&y, &y).unwrap();
        assert!((exact.per_time_fit[0] - 100.0).abs() < 1e-12);

        let mean = DMatrix::from_row_slice(2, 1, &[2.0, 2.0]);
        let zero = compute_fit(&mean, &y).unwrap();
        assert!(zero.per_time_fit[0].abs() < 1e-12);

        let f = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let hand = compute_fit(&f, &y).unwrap();
        let expected = 100.0 * (1.0 - 2.0 / 2.0f64.sqrt());
        assert!((hand.per_time_fit[0] - expected).abs() < 1e-10);
        assert!((hand.per_time_fit[0] + 41.42135623730951).abs() < 1e-9);
    }

    #[test]
    fn fit_metric_constant_column_is_nan_and_excluded() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 3.0]);
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 3.0]);
        let report = compute_fit(&f, &y).unwrap();
        assert!(report.per_time_fit[0].is_nan());
        assert_eq!(report.undefined, 1);
        assert!((report.avg_fit - 100.0).abs() < 1e-12);
    }

    #[test]
    fn fit_metric_never_exceeds_100() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let y = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-2.0..2.0));
            let f = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-2.0..2.0));
            let report = compute_fit(&f, &y).unwrap();
            for v in &report.per_time_fit {
                assert!(v.is_nan() || *v <= 100.0);
            }
        }
    }

    #[test]
    fn panel_round_trip_through_files() {
        let fixture = crate::synth::sample_panel(3, 12, 4, 0.15, 11).unwrap();
        let panel = DataPanel {
            values: fixture.values.clone(),
            missing: fixture.missing.clone(),
            locations: fixture.locations.clone(),
            location_ids: fixture.location_ids.clone(),
            ts: fixture.ts,
            n_train: fixture.n_train,
            n_test: fixture.n_test,
        };
        let dir = std::env::temp_dir().join("stgp-pipeline-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let data = dir.join("rt_data.csv");
        let locs = dir.join("rt_locs.csv");
        write_panel(&panel, &data, &locs).unwrap();
        let cfg = LoadConfig {
            n_train: Some(12),
            n_test: Some(4),
            ..LoadConfig::default()
        };
        let loaded = load_panel(&data, &locs, &cfg).unwrap();
        assert_eq!(loaded.location_ids, panel.location_ids);
        assert_eq!(loaded.missing, panel.missing);
        for i in 0..panel.m() {
            for j in 0..panel.n_total() {
                if panel.missing[(i, j)] {
                    assert!(loaded.values[(i, j)].is_nan());
                } else {
                    assert_eq!(
                        loaded.values[(i, j)],
                        panel.values[(i, j)],
                        "observed values must round-trip exactly"
                    );
                }
            }
        }
        for (a, b) in loaded.locations.iter().zip(&panel.locations) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x, y);
            }
        }
    }
}
