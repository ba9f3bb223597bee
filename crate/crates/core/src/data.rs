//! Dataset ingestion, deterministic splitting and the synthetic generators
//! used by the simulation harness.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{BratError, Result};
use crate::rng::rng_from_seed;

/// Row-major feature matrix plus response vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    response: Vec<f64>,
    n_features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    column_names: Option<Vec<String>>,
}

impl Dataset {
    /// Builds a dataset from row-major features. All entries must be finite.
    pub fn new(features: Vec<f64>, n_features: usize, response: Vec<f64>) -> Result<Self> {
        if n_features == 0 {
            return Err(BratError::Data("dataset needs at least one feature".into()));
        }
        if response.is_empty() {
            return Err(BratError::Data("dataset needs at least one row".into()));
        }
        if features.len() != response.len() * n_features {
            return Err(BratError::Data(format!(
                "feature buffer has {} entries, expected {} rows x {} columns",
                features.len(),
                response.len(),
                n_features
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(BratError::Data(format!(
                "non-finite feature at row {}, column {}",
                pos / n_features,
                pos % n_features
            )));
        }
        if let Some(pos) = response.iter().position(|v| !v.is_finite()) {
            return Err(BratError::Data(format!("non-finite response at row {pos}")));
        }
        Ok(Dataset {
            features,
            response,
            n_features,
            column_names: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], response: Vec<f64>) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(BratError::Data("ragged feature rows".into()));
        }
        Dataset::new(rows.concat(), d, response)
    }

    pub fn with_column_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_features {
            return Err(BratError::Data(format!(
                "{} column names for {} features",
                names.len(),
                self.n_features
            )));
        }
        self.column_names = Some(names);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn d(&self) -> usize {
        self.n_features
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.n_features)
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut response = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            response.push(self.response[i]);
        }
        Dataset {
            features,
            response,
            n_features: self.n_features,
            column_names: self.column_names.clone(),
        }
    }

    /// Keeps only the listed feature columns.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Dataset> {
        if columns.is_empty() {
            return Err(BratError::Data("column selection is empty".into()));
        }
        if let Some(&c) = columns.iter().find(|&&c| c >= self.n_features) {
            return Err(BratError::Data(format!(
                "column {c} out of range for {} features",
                self.n_features
            )));
        }
        let mut features = Vec::with_capacity(self.n() * columns.len());
        for row in self.rows() {
            features.extend(columns.iter().map(|&c| row[c]));
        }
        let column_names = self
            .column_names
            .as_ref()
            .map(|names| columns.iter().map(|&c| names[c].clone()).collect());
        Ok(Dataset {
            features,
            response: self.response.clone(),
            n_features: columns.len(),
            column_names,
        })
    }

    /// Same features, different response.
    pub fn with_response(&self, response: Vec<f64>) -> Result<Dataset> {
        if response.len() != self.n() {
            return Err(BratError::Data(format!(
                "response has {} entries for {} rows",
                response.len(),
                self.n()
            )));
        }
        let mut out = self.clone();
        out.response = response;
        Ok(out)
    }

    /// Vertical concatenation of two datasets with the same width.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.n_features != other.n_features {
            return Err(BratError::Dimension {
                expected: self.n_features,
                got: other.n_features,
            });
        }
        let mut out = self.clone();
        out.features.extend_from_slice(&other.features);
        out.response.extend_from_slice(&other.response);
        Ok(out)
    }

    pub fn fit_minmax(&self) -> MinMaxScaler {
        let d = self.n_features;
        let mut mins = vec![f64::INFINITY; d];
        let mut maxs = vec![f64::NEG_INFINITY; d];
        for row in self.rows() {
            for (c, &v) in row.iter().enumerate() {
                mins[c] = mins[c].min(v);
                maxs[c] = maxs[c].max(v);
            }
        }
        MinMaxScaler { mins, maxs }
    }

    pub fn scaled(&self, scaler: &MinMaxScaler) -> Result<Dataset> {
        if scaler.mins.len() != self.n_features {
            return Err(BratError::Dimension {
                expected: scaler.mins.len(),
                got: self.n_features,
            });
        }
        let mut out = self.clone();
        for row in out.features.chunks_exact_mut(self.n_features) {
            scaler.transform_in_place(row);
        }
        Ok(out)
    }
}

/// Per-column min-max scaling onto `[0, 1]`. Constant columns map to 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl MinMaxScaler {
    pub fn transform_in_place(&self, row: &mut [f64]) {
        for ((v, &lo), &hi) in row.iter_mut().zip(&self.mins).zip(&self.maxs) {
            let range = hi - lo;
            *v = if range > 0.0 { (*v - lo) / range } else { 0.5 };
        }
    }
}

/// Fractions for a train / calibration / test partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub calib_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.6,
            calib_fraction: 0.2,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train_fraction", self.train_fraction),
            ("calib_fraction", self.calib_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(BratError::param(name, format!("{f} is not in (0, 1)")));
            }
        }
        let total = self.train_fraction + self.calib_fraction + self.test_fraction;
        if (total - 1.0).abs() > 1e-9 {
            return Err(BratError::param(
                "split",
                format!("fractions sum to {total}, expected 1"),
            ));
        }
        Ok(())
    }
}

/// Reads a headed, comma-separated file. `target` names the response column;
/// every other column becomes a feature.
pub fn load_csv(path: impl AsRef<Path>, target: &str, scale: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => BratError::Data(format!("cannot open {}: {e}", path.display())),
            _ => BratError::Csv(e),
        })?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let target_col = headers.iter().position(|h| h == target).ok_or_else(|| {
        BratError::Data(format!(
            "target column `{target}` not found in {}",
            path.display()
        ))
    })?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != target_col).collect();
    if feature_cols.is_empty() {
        return Err(BratError::Data("no feature columns besides the target".into()));
    }

    let mut features = Vec::new();
    let mut response = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(BratError::Data(format!(
                "row {} has {} fields, header has {}",
                row_idx + 1,
                record.len(),
                headers.len()
            )));
        }
        let parse = |c: usize| -> Result<f64> {
            let cell = &record[c];
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    BratError::Data(format!(
                        "non-numeric value `{cell}` at row {}, column `{}`",
                        row_idx + 1,
                        headers[c]
                    ))
                })
        };
        for &c in &feature_cols {
            features.push(parse(c)?);
        }
        response.push(parse(target_col)?);
    }
    if response.is_empty() {
        return Err(BratError::Data(format!("{} has no data rows", path.display())));
    }
    let names = feature_cols.iter().map(|&c| headers[c].clone()).collect();
    let ds = Dataset::new(features, feature_cols.len(), response)?.with_column_names(names)?;
    if scale {
        let scaler = ds.fit_minmax();
        ds.scaled(&scaler)
    } else {
        Ok(ds)
    }
}

/// Writes a dataset as CSV with the response in a trailing `target` column.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>, target: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = match ds.column_names() {
        Some(names) => names.to_vec(),
        None => (0..ds.d()).map(|c| format!("x{}", c + 1)).collect(),
    };
    header.push(target.to_owned());
    w.write_record(&header)?;
    for (row, y) in ds.rows().zip(ds.response()) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Index-level result of [`split_indices`].
#[derive(Clone, Debug, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub calib: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions `0..n` into train / calibration / test index sets.
///
/// Calibration and test sizes are `round(fraction * n)`; train takes the rest.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    if n < 3 {
        return Err(BratError::Data(format!("cannot split {n} rows three ways")));
    }
    let n_calib = (spec.calib_fraction * n as f64).round() as usize;
    let n_test = (spec.test_fraction * n as f64).round() as usize;
    if n_calib == 0 || n_test == 0 || n_calib + n_test >= n {
        return Err(BratError::Data(format!(
            "split of {n} rows leaves an empty part (calib {n_calib}, test {n_test})"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(spec.seed));
    let mut calib = perm[..n_calib].to_vec();
    let mut test = perm[n_calib..n_calib + n_test].to_vec();
    let mut train = perm[n_calib + n_test..].to_vec();
    train.sort_unstable();
    calib.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, calib, test })
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let idx = split_indices(ds.n(), spec)?;
    Ok((ds.subset(&idx.train), ds.subset(&idx.calib), ds.subset(&idx.test)))
}

/// `sin(2 pi x) + x^2 / 2`.
pub fn sine_quadratic(x: f64) -> f64 {
    (2.0 * PI * x).sin() + 0.5 * x * x
}

/// Friedman's benchmark mean; the fourth coordinate is inert.
pub fn friedman(x: &[f64]) -> f64 {
    10.0 * (PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 5.0 * x[4] - 10.0
}

/// Null mean for the variable-importance design.
pub fn vi_reduced_mean(x: &[f64]) -> f64 {
    4.0 * x[0] - x[1] * x[1]
}

/// Alternative mean: the null plus `w * x3`.
pub fn vi_full_mean(x: &[f64], w: f64) -> f64 {
    vi_reduced_mean(x) + w * x[2]
}

fn check_generator_args(n: usize, sigma: f64) -> Result<Normal<f64>> {
    if n == 0 {
        return Err(BratError::param("n", "must be at least 1"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(BratError::param("sigma", format!("{sigma} is not a valid noise sd")));
    }
    Normal::new(0.0, sigma).map_err(|e| BratError::param("sigma", e.to_string()))
}

fn generate(
    n: usize,
    d: usize,
    sigma: f64,
    seed: u64,
    mean: impl Fn(&[f64]) -> f64,
) -> Result<Dataset> {
    let noise = check_generator_args(n, sigma)?;
    let mut rng = rng_from_seed(seed);
    let mut features = Vec::with_capacity(n * d);
    let mut response = Vec::with_capacity(n);
    for _ in 0..n {
        let start = features.len();
        features.extend((0..d).map(|_| rng.random::<f64>()));
        let eps = noise.sample(&mut rng);
        response.push(mean(&features[start..]) + eps);
    }
    Dataset::new(features, d, response)
}

/// One-dimensional design: `x ~ U[0,1]`, `y = sin(2 pi x) + x^2/2 + N(0, sigma^2)`.
pub fn gen_sine_quadratic(n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    generate(n, 1, sigma, seed, |x| sine_quadratic(x[0]))
}

/// Five-dimensional Friedman design with Gaussian noise.
pub fn gen_friedman(n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    generate(n, 5, sigma, seed, friedman)
}

/// Variable-importance design. Both datasets share covariates and noise; the
/// full one has three features and mean `4 x1 - x2^2 + w x3`, the reduced one
/// drops `x3` and has mean `4 x1 - x2^2`.
pub fn gen_vi(n: usize, sigma: f64, w: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(BratError::param("w", format!("{w} must be nonnegative")));
    }
    let full = generate(n, 3, sigma, seed, |x| vi_full_mean(x, w))?;
    let reduced_response: Vec<f64> = full
        .rows()
        .zip(full.response())
        .map(|(x, &y)| y - w * x[2])
        .collect();
    let reduced = full.select_columns(&[0, 1])?.with_response(reduced_response)?;
    Ok((full, reduced))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_minmax_endpoints() {
        let f = write_tmp("a,y\n0,1\n10,2\n");
        let ds = load_csv(f.path(), "y", true).unwrap();
        assert_eq!(ds.row(0), &[0.0]);
        assert_eq!(ds.row(1), &[1.0]);
        assert_eq!(ds.response(), &[1.0, 2.0]);
    }

    #[test]
    fn csv_constant_column_maps_to_half() {
        let f = write_tmp("a,b,y\n3,1,0\n3,2,0\n");
        let ds = load_csv(f.path(), "y", true).unwrap();
        assert_eq!(ds.row(0)[0], 0.5);
        assert_eq!(ds.row(1)[0], 0.5);
    }

    #[test]
    fn csv_missing_target_names_column() {
        let f = write_tmp("a,b\n1,2\n");
        let err = load_csv(f.path(), "price", false).unwrap_err();
        assert!(err.to_string().contains("price"), "{err}");
    }

    #[test]
    fn csv_non_numeric_reports_location() {
        let f = write_tmp("a,y\n1,2\nfoo,3\n");
        let err = load_csv(f.path(), "y", false).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("`a`"), "{err}");
    }

    #[test]
    fn csv_missing_file() {
        let err = load_csv("/nonexistent/file.csv", "y", false).unwrap_err();
        assert!(matches!(err, BratError::Data(_)));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = gen_sine_quadratic(10, 0.1, 1).unwrap();
        let spec = SplitSpec { seed: 7, ..Default::default() };
        let (a, b, c) = split(&ds, &spec).unwrap();
        assert_eq!((a.n(), b.n(), c.n()), (6, 2, 2));
        let (a2, b2, c2) = split(&ds, &spec).unwrap();
        assert_eq!((a, b, c), (a2, b2, c2));
    }

    #[test]
    fn split_thirds_of_three() {
        let spec = SplitSpec {
            train_fraction: 1.0 / 3.0,
            calib_fraction: 1.0 / 3.0,
            test_fraction: 1.0 / 3.0,
            seed: 0,
        };
        let idx = split_indices(3, &spec).unwrap();
        assert_eq!((idx.train.len(), idx.calib.len(), idx.test.len()), (1, 1, 1));
    }

    #[test]
    fn split_rejects_two_rows() {
        assert!(split_indices(2, &SplitSpec::default()).is_err());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let spec = SplitSpec { train_fraction: 0.7, ..Default::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn generator_means() {
        assert!((sine_quadratic(0.25) - 1.03125).abs() < 1e-12);
        assert!(sine_quadratic(0.0).abs() < 1e-12);
        assert!((sine_quadratic(1.0) - 0.5).abs() < 1e-12);
        let f = friedman(&[0.5, 0.5, 0.5, 0.3, 0.0]);
        assert!((f - (10.0 * (PI / 4.0).sin() - 10.0)).abs() < 1e-12);
        assert!((f + 2.928_932_188_134_524).abs() < 1e-9);
        assert!((friedman(&[0.0, 0.9, 0.5, 0.1, 0.0]) + 10.0).abs() < 1e-12);
        assert!((friedman(&[0.5, 1.0, 1.0, 0.2, 1.0]) - 10.0).abs() < 1e-12);
        assert!((vi_full_mean(&[0.5, 1.0, 1.0], 2.0) - 3.0).abs() < 1e-12);
        assert!((vi_full_mean(&[1.0, 0.0, 0.4], 0.0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_generators_match_closed_forms() {
        let ds = gen_sine_quadratic(100, 0.0, 3).unwrap();
        for (x, y) in ds.rows().zip(ds.response()) {
            assert!((y - sine_quadratic(x[0])).abs() < 1e-12);
        }
        let ds = gen_friedman(100, 0.0, 3).unwrap();
        for (x, y) in ds.rows().zip(ds.response()) {
            assert!((y - friedman(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn vi_null_case_has_identical_responses() {
        let (full, reduced) = gen_vi(50, 0.5, 0.0, 11).unwrap();
        assert_eq!(full.d(), 3);
        assert_eq!(reduced.d(), 2);
        assert_eq!(full.response(), reduced.response());
        let (full, reduced) = gen_vi(50, 0.0, 2.0, 11).unwrap();
        for ((x, yf), yr) in full.rows().zip(full.response()).zip(reduced.response()) {
            assert!((yf - vi_full_mean(x, 2.0)).abs() < 1e-12);
            assert!((yr - vi_reduced_mean(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn generators_are_reproducible() {
        assert_eq!(gen_friedman(40, 1.0, 5).unwrap(), gen_friedman(40, 1.0, 5).unwrap());
        assert_ne!(gen_friedman(40, 1.0, 5).unwrap(), gen_friedman(40, 1.0, 6).unwrap());
    }

    #[test]
    fn features_are_in_unit_cube() {
        let ds = gen_friedman(200, 1.0, 9).unwrap();
        assert!(ds.features().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
