//! Datasets: built-in synthetic generators, CSV ingestion, standardization,
//! and train/validation/test splits.
//!
//! A [`Dataset`] is an immutable `n × d` matrix plus provenance. Running it
//! through [`standardize_and_split`] shuffles the rows, partitions them, and
//! rescales every column by the *train-split* mean and standard deviation;
//! the per-unit log-Jacobian `Σ ln(1/σ_j)` is kept so that likelihoods
//! computed on standardized data can be reported in original data units.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

use crate::error::{Error, Result};

/// Immutable data matrix with provenance.
#[derive(Clone, Debug)]
pub struct Dataset {
    data: Vec<f64>,
    n: usize,
    d: usize,
    pub provenance: String,
}

/// Column statistics captured when standardizing, plus the columns that
/// survived (zero-variance columns are dropped).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StandardizeStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Indices into the original columns for each kept column.
    pub kept_columns: Vec<usize>,
    /// `Σ ln(1/σ_j)`: add to standardized-unit log-densities to express them
    /// in original data units.
    pub log_jacobian: f64,
}

/// Row partition produced by [`standardize_and_split`].
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// A standardized dataset with disjoint splits covering all rows.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub data: Dataset,
    pub stats: StandardizeStats,
    pub splits: Splits,
}

impl Dataset {
    pub fn from_matrix(n: usize, d: usize, data: Vec<f64>, provenance: &str) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Data(format!(
                "matrix of {} values cannot be {n} x {d}",
                data.len()
            )));
        }
        Ok(Dataset { data, n, d, provenance: provenance.to_string() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rows `indices` as a flat row-major matrix.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        out
    }

    /// Column-wise concatenation of datasets with equal row counts.
    pub fn hconcat(parts: &[&Dataset], provenance: &str) -> Result<Self> {
        let n = parts.first().map_or(0, |p| p.n);
        if parts.iter().any(|p| p.n != n) {
            return Err(Error::Data("hconcat requires equal row counts".into()));
        }
        let d: usize = parts.iter().map(|p| p.d).sum();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Dataset::from_matrix(n, d, data, provenance)
    }
}

/// Equal-weight draws from `N(−mu, sigma²)` and `N(+mu, sigma²)`.
pub fn gen_gmm1d(n: usize, mu: f64, sigma: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || sigma <= 0.0 {
        return Err(Error::Data(format!("gmm1d needs n >= 1 and sigma > 0, got n={n}, sigma={sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    let data = (0..n)
        .map(|_| {
            let center = if rng.random_range(0.0..1.0) < 0.5 { -mu } else { mu };
            center + normal.sample(&mut rng)
        })
        .collect();
    Dataset::from_matrix(n, 1, data, &format!("gmm1d(n={n}, mu={mu}, sigma={sigma}, seed={seed})"))
}

/// Mixture of isotropic 2-D Gaussians: pick a center by `weights`, add
/// `N(0, sigma² I₂)`.
pub fn gen_gmm2d(
    n: usize,
    centers: &[[f64; 2]],
    sigma: f64,
    weights: &[f64],
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || centers.is_empty() || centers.len() != weights.len() {
        return Err(Error::Data(format!(
            "gmm2d needs n >= 1 and one weight per center (got {} centers, {} weights)",
            centers.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Data("gmm2d weights must be a probability vector".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let mut r: f64 = rng.random_range(0.0..1.0);
        let mut k = centers.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if r < w {
                k = i;
                break;
            }
            r -= w;
        }
        data.push(centers[k][0] + sigma * normal.sample(&mut rng));
        data.push(centers[k][1] + sigma * normal.sample(&mut rng));
    }
    Dataset::from_matrix(n, 2, data, &format!("gmm2d(n={n}, {} centers, sigma={sigma}, seed={seed})", centers.len()))
}

/// Two interleaving half-circles: moon 0 is `(cos t, sin t)` and moon 1 is
/// `(1 − cos t, 0.5 − sin t)` for `t` uniform on `[0, π]`, plus isotropic
/// `N(0, noise²)`. Odd `n` gives the extra point to moon 0.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || noise < 0.0 {
        return Err(Error::Data(format!("two_moons needs n >= 1 and noise >= 0, got n={n}, noise={noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n0 = n - n / 2;
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (cx, cy) = if i < n0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        data.push(cx + noise * normal.sample(&mut rng));
        data.push(cy + noise * normal.sample(&mut rng));
    }
    Dataset::from_matrix(n, 2, data, &format!("two_moons(n={n}, noise={noise}, seed={seed})"))
}

/// Load a CSV matrix. A header row is detected (and skipped) when every
/// token in the first row fails to parse as a number; a mixed first row is
/// data with a cell error.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    let mut header_skipped = false;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split(',').map(str::trim).collect();
        if rows.is_empty() && !header_skipped && tokens.iter().all(|t| t.parse::<f64>().is_err()) {
            header_skipped = true;
            continue;
        }
        let data_row = rows.len() + 1;
        if let Some(w) = width {
            if tokens.len() != w {
                return Err(Error::CsvParse {
                    row: data_row,
                    col: tokens.len(),
                    detail: format!(
                        "{}: ragged row with {} columns, expected {w} (line {})",
                        path.display(),
                        tokens.len(),
                        line_no + 1
                    ),
                });
            }
        } else {
            width = Some(tokens.len());
        }
        let mut row = Vec::with_capacity(tokens.len());
        for (c, tok) in tokens.iter().enumerate() {
            row.push(tok.parse::<f64>().map_err(|_| Error::CsvParse {
                row: data_row,
                col: c + 1,
                detail: format!("{}: not a number: {tok:?}", path.display()),
            })?);
        }
        rows.push(row);
    }
    let no_rows = || Error::CsvParse {
        row: 0,
        col: 0,
        detail: format!("{}: no data rows", path.display()),
    };
    let d = width.ok_or_else(no_rows)?;
    let n = rows.len();
    if n == 0 {
        return Err(no_rows());
    }
    let data = rows.into_iter().flatten().collect();
    Dataset::from_matrix(n, d, data, &path.display().to_string())
}

/// Shuffle rows, split by `fractions` (train/val/test), and rescale all
/// splits by train-split column statistics. Zero-variance columns are
/// dropped with a warning on stderr. Statistics use the population estimator.
pub fn standardize_and_split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<SplitDataset> {
    if fractions.iter().any(|&f| f <= 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("split fractions must be positive and sum to 1, got {fractions:?}")));
    }
    let (n, d) = (dataset.n, dataset.d);
    if n < 3 {
        return Err(Error::Data(format!("need at least 3 rows to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((fractions[0] * n as f64).floor() as usize).clamp(1, n - 2);
    let n_val = ((fractions[1] * n as f64).floor() as usize).clamp(1, n - n_train - 1);
    let train: Vec<usize> = order[..n_train].to_vec();
    let val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let test: Vec<usize> = order[n_train + n_val..].to_vec();

    let mut means = vec![0.0; d];
    for &i in &train {
        for (m, v) in means.iter_mut().zip(dataset.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n_train as f64;
    }
    let mut vars = vec![0.0; d];
    for &i in &train {
        for (c, v) in dataset.row(i).iter().enumerate() {
            let centered = v - means[c];
            vars[c] += centered * centered;
        }
    }
    let mut kept_columns = Vec::new();
    let mut kept_means = Vec::new();
    let mut stds = Vec::new();
    for c in 0..d {
        let std = (vars[c] / n_train as f64).sqrt();
        if std == 0.0 {
            eprintln!("warning: dropping zero-variance column {c}");
        } else {
            kept_columns.push(c);
            kept_means.push(means[c]);
            stds.push(std);
        }
    }
    if kept_columns.is_empty() {
        return Err(Error::Data("all columns have zero variance".into()));
    }
    let log_jacobian: f64 = stds.iter().map(|s| -s.ln()).sum();

    let kd = kept_columns.len();
    let mut out = Vec::with_capacity(n * kd);
    for i in 0..n {
        let row = dataset.row(i);
        for (j, &c) in kept_columns.iter().enumerate() {
            out.push((row[c] - kept_means[j]) / stds[j]);
        }
    }
    Ok(SplitDataset {
        data: Dataset::from_matrix(n, kd, out, &dataset.provenance)?,
        stats: StandardizeStats { means: kept_means, stds, kept_columns, log_jacobian },
        splits: Splits { train, val, test },
    })
}

impl StandardizeStats {
    /// Standardize rows of external data with these statistics (keeping only
    /// the surviving columns). `d_orig` is the external column count.
    pub fn apply(&self, data: &[f64], d_orig: usize) -> Result<Vec<f64>> {
        if d_orig != 0 && data.len() % d_orig != 0 {
            return Err(Error::Data("row-major data length not divisible by width".into()));
        }
        if self.kept_columns.iter().any(|&c| c >= d_orig) {
            return Err(Error::Data(format!(
                "data has {d_orig} columns but standardization expects at least {}",
                self.kept_columns.iter().max().unwrap() + 1
            )));
        }
        let n = if d_orig == 0 { 0 } else { data.len() / d_orig };
        let mut out = Vec::with_capacity(n * self.kept_columns.len());
        for i in 0..n {
            let row = &data[i * d_orig..(i + 1) * d_orig];
            for (j, &c) in self.kept_columns.iter().enumerate() {
                out.push((row[c] - self.means[j]) / self.stds[j]);
            }
        }
        Ok(out)
    }

    /// Undo standardization on kept-column rows.
    pub fn invert(&self, data: &[f64]) -> Vec<f64> {
        let kd = self.kept_columns.len();
        data.chunks(kd)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, v)| v * self.stds[j] + self.means[j])
                    .collect::<Vec<f64>>()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic_per_seed() {
        let a = gen_gmm1d(50, 2.0, 0.1, 9).unwrap();
        let b = gen_gmm1d(50, 2.0, 0.1, 9).unwrap();
        assert_eq!(a.data(), b.data());
        let c = gen_gmm2d(30, &[[0.0, 0.0], [3.0, 3.0]], 0.5, &[0.5, 0.5], 4).unwrap();
        let d = gen_gmm2d(30, &[[0.0, 0.0], [3.0, 3.0]], 0.5, &[0.5, 0.5], 4).unwrap();
        assert_eq!(c.data(), d.data());
        let e = gen_two_moons(30, 0.1, 4).unwrap();
        let f = gen_two_moons(30, 0.1, 4).unwrap();
        assert_eq!(e.data(), f.data());
    }

    #[test]
    fn single_center_gmm2d_is_a_gaussian_around_it() {
        let n = 4000;
        let ds = gen_gmm2d(n, &[[1.0, -2.0]], 1.0, &[1.0], 11).unwrap();
        let mut mean = [0.0f64; 2];
        for i in 0..n {
            mean[0] += ds.row(i)[0];
            mean[1] += ds.row(i)[1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        let bound = 3.0 / (n as f64).sqrt();
        assert!((mean[0] - 1.0).abs() < bound, "mean x {}", mean[0]);
        assert!((mean[1] + 2.0).abs() < bound, "mean y {}", mean[1]);
    }

    #[test]
    fn zero_noise_gmm2d_sits_on_the_centers() {
        let ds = gen_gmm2d(20, &[[1.0, 2.0], [-1.0, 0.5]], 0.0, &[0.3, 0.7], 5).unwrap();
        for i in 0..20 {
            let r = ds.row(i);
            let on_first = (r[0] - 1.0).abs() < 1e-12 && (r[1] - 2.0).abs() < 1e-12;
            let on_second = (r[0] + 1.0).abs() < 1e-12 && (r[1] - 0.5).abs() < 1e-12;
            assert!(on_first || on_second, "row {i} = {r:?}");
        }
    }

    #[test]
    fn noiseless_moons_satisfy_their_circle_equations() {
        let n = 100;
        let ds = gen_two_moons(n, 0.0, 3).unwrap();
        let n0 = n - n / 2;
        for i in 0..n {
            let (x, y) = (ds.row(i)[0], ds.row(i)[1]);
            if i < n0 {
                let r = (x * x + y * y).sqrt();
                assert!((r - 1.0).abs() < 1e-12, "moon-0 radius {r}");
                assert!(y >= -1e-12);
            } else {
                let dx = x - 1.0;
                let dy = y - 0.5;
                let r = (dx * dx + dy * dy).sqrt();
                assert!((r - 1.0).abs() < 1e-12, "moon-1 radius {r}");
                assert!(dy <= 1e-12);
            }
            assert!((-1.0..=2.0).contains(&x) && (-1.0..=1.5).contains(&y), "({x}, {y}) outside box");
        }
    }

    #[test]
    fn gmm1d_mean_abs_matches_quadrature() {
        let n = 10_000;
        let ds = gen_gmm1d(n, 2.0, 0.1, 13).unwrap();
        let mean_abs: f64 = ds.data().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        let spec = crate::oracle::GmmSpec::symmetric_pair(2.0, 0.1).unwrap();
        let expected = crate::oracle::gmm_mean_abs(&spec);
        assert!((mean_abs - expected).abs() < 0.01, "sample {mean_abs} vs quadrature {expected}");
    }

    #[test]
    fn coincident_components_collapse_to_one_gaussian() {
        let ds = gen_gmm1d(2000, 0.0, 0.5, 17).unwrap();
        let mean: f64 = ds.data().iter().sum::<f64>() / 2000.0;
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn csv_round_trip_and_header_detection() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("plain.csv");
        std::fs::write(&plain, "1,2\n3,4\n").unwrap();
        let ds = load_csv(&plain).unwrap();
        assert_eq!((ds.n(), ds.d()), (2, 2));
        assert_eq!(ds.data(), [1.0, 2.0, 3.0, 4.0]);

        let with_header = dir.path().join("header.csv");
        std::fs::write(&with_header, "a,b\n1,2\n").unwrap();
        let ds = load_csv(&with_header).unwrap();
        assert_eq!((ds.n(), ds.d()), (1, 2));
        assert_eq!(ds.data(), [1.0, 2.0]);
    }

    #[test]
    fn csv_errors_name_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let bad_cell = dir.path().join("bad.csv");
        std::fs::write(&bad_cell, "1,x\n").unwrap();
        let err = load_csv(&bad_cell).unwrap_err().to_string();
        assert!(err.contains("row 1") && err.contains("column 2"), "{err}");

        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "1,2\n3\n").unwrap();
        let err = load_csv(&ragged).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");

        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(load_csv(&empty).is_err());
    }

    #[test]
    fn standardization_normalizes_the_train_split() {
        let ds = gen_gmm2d(500, &[[5.0, -3.0]], 2.0, &[1.0], 21).unwrap();
        let split = standardize_and_split(&ds, [0.8, 0.1, 0.1], 0).unwrap();
        let d = split.data.d();
        for c in 0..d {
            let vals: Vec<f64> = split.splits.train.iter().map(|&i| split.data.row(i)[c]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10, "column {c} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-10, "column {c} std {}", var.sqrt());
        }
    }

    #[test]
    fn split_sizes_disjointness_and_coverage() {
        let ds = gen_gmm1d(1000, 1.0, 0.5, 2).unwrap();
        let split = standardize_and_split(&ds, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(split.splits.train.len(), 800);
        assert_eq!(split.splits.val.len(), 100);
        assert_eq!(split.splits.test.len(), 100);
        let mut seen = vec![false; 1000];
        for &i in split
            .splits
            .train
            .iter()
            .chain(&split.splits.val)
            .chain(&split.splits.test)
        {
            assert!(!seen[i], "row {i} appears twice");
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s), "some rows missing from the splits");
    }

    #[test]
    fn destandardizing_reproduces_the_original_rows() {
        let ds = gen_gmm2d(200, &[[2.0, 1.0], [-1.0, 4.0]], 1.5, &[0.4, 0.6], 31).unwrap();
        let split = standardize_and_split(&ds, [0.7, 0.15, 0.15], 3).unwrap();
        let restored = split.stats.invert(split.data.data());
        for (a, b) in restored.iter().zip(ds.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_columns_are_dropped() {
        let mut data = Vec::new();
        for i in 0..50 {
            data.push(i as f64);
            data.push(7.0);
        }
        let ds = Dataset::from_matrix(50, 2, data, "test").unwrap();
        let split = standardize_and_split(&ds, [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!(split.data.d(), 1);
        assert_eq!(split.stats.kept_columns, vec![0]);
    }

    #[test]
    fn log_jacobian_matches_the_column_scales() {
        let ds = gen_gmm2d(400, &[[0.0, 0.0]], 3.0, &[1.0], 8).unwrap();
        let split = standardize_and_split(&ds, [0.8, 0.1, 0.1], 2).unwrap();
        let expected: f64 = split.stats.stds.iter().map(|s| -s.ln()).sum();
        assert_eq!(split.stats.log_jacobian, expected);
        // both columns have scale ~3, so the correction is ~ -2 ln 3
        assert!((split.stats.log_jacobian + 2.0 * 3.0f64.ln()).abs() < 0.3);
    }

    #[test]
    fn hconcat_stacks_columns() {
        let a = gen_gmm1d(10, 1.0, 0.5, 1).unwrap();
        let b = gen_gmm1d(10, 2.0, 0.5, 2).unwrap();
        let joined = Dataset::hconcat(&[&a, &b], "pair").unwrap();
        assert_eq!((joined.n(), joined.d()), (10, 2));
        for i in 0..10 {
            assert_eq!(joined.row(i)[0], a.row(i)[0]);
            assert_eq!(joined.row(i)[1], b.row(i)[0]);
        }
    }
}
