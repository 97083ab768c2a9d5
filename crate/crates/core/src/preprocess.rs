//! Normalization, feature selection, PCA, KNN graphs and meta-cell
//! aggregation.
//!
//! Meta-cells are formed by seeded k-means over PCA scores with
//! `ceil(rows / metacell_group_size)` groups. Group expression is the mean of
//! the members' normalized rows and attributes are majority-voted per field,
//! ties going to the lexicographically smallest value.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::rng;
use crate::shard_store::{AttributeRecord, CATEGORICAL_COLUMNS};

pub const DEFAULT_TARGET_SUM: f64 = 10_000.0;
pub const DEFAULT_N_HVG: usize = 1_500;
pub const DEFAULT_N_PCS: usize = 50;

/// Above this many columns PCA switches from a dense covariance
/// eigendecomposition to power iteration with deflation.
pub const DENSE_PCA_MAX_COLS: usize = 2_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_sum: f64,
    pub n_hvg: usize,
    pub n_pcs: usize,
    pub knn_k: usize,
    pub metacell_group_size: usize,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_sum: DEFAULT_TARGET_SUM,
            n_hvg: DEFAULT_N_HVG,
            n_pcs: DEFAULT_N_PCS,
            knn_k: 15,
            metacell_group_size: 75,
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_sum.is_nan() || self.target_sum <= 0.0 {
            return Err(Error::Config("target_sum must be positive".into()));
        }
        for (name, v) in [
            ("n_hvg", self.n_hvg),
            ("n_pcs", self.n_pcs),
            ("knn_k", self.knn_k),
            ("metacell_group_size", self.metacell_group_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Feature and component counts clamped to what a `rows × cols` matrix
    /// supports: `n_hvg ≤ cols`, `n_pcs ≤ min(rows, n_hvg)`.
    pub fn effective(&self, rows: usize, cols: usize) -> (usize, usize) {
        let n_hvg = self.n_hvg.min(cols);
        let n_pcs = self.n_pcs.min(rows).min(n_hvg);
        (n_hvg, n_pcs)
    }
}

/// Scales each row to sum to `target_sum` (no log).
pub fn scale_to_total(counts: &Matrix, target_sum: f64) -> Result<Matrix> {
    let mut out = counts.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        if let Some(v) = row.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(Error::Row {
                context: "count matrix".into(),
                row: i,
                msg: format!("entry {v} is negative or not a number"),
            });
        }
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(Error::Row {
                context: "count matrix".into(),
                row: i,
                msg: "row sums to zero and cannot be normalized".into(),
            });
        }
        let s = target_sum / total;
        row.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

/// Total-count normalization followed by `log1p`.
pub fn normalize(counts: &Matrix, target_sum: f64) -> Result<Matrix> {
    let mut out = scale_to_total(counts, target_sum)?;
    out.as_mut_slice().iter_mut().for_each(|v| *v = v.ln_1p());
    Ok(out)
}

/// Per-column z-scores (population standard deviation); constant columns
/// become 0.
pub fn standardize_columns(m: &Matrix) -> Matrix {
    let n = m.rows().max(1) as f64;
    let means = m.col_means();
    let mut sd = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            sd[j] += (v - means[j]).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(f64::sqrt).collect();
    Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        if sd[j] > 0.0 {
            (m.get(i, j) - means[j]) / sd[j]
        } else {
            0.0
        }
    })
}

/// Unbiased per-column sample variance (zero for a single row).
pub fn column_variances(m: &Matrix) -> Vec<f64> {
    let n = m.rows();
    let mean = m.col_means();
    let mut var = vec![0.0; m.cols()];
    for i in 0..n {
        for (j, v) in m.row(i).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    if n > 1 {
        var.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    } else {
        var.iter_mut().for_each(|v| *v = 0.0);
    }
    var
}

/// `v` rounded to 12 significant digits, so variances that are equal up to
/// summation-order noise compare equal.
fn round_significant(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let scale = 10f64.powi(11 - v.abs().log10().floor() as i32);
    (v * scale).round() / scale
}

/// The `n` highest-variance columns, ascending. Equal variances prefer the
/// lower column index.
pub fn select_hvg(m: &Matrix, n: usize) -> Result<Vec<usize>> {
    if n > m.cols() {
        return Err(Error::Config(format!(
            "cannot select {n} variable features from {} columns",
            m.cols()
        )));
    }
    let var: Vec<f64> = column_variances(m).into_iter().map(round_significant).collect();
    let mut order: Vec<usize> = (0..m.cols()).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    let mut chosen = order[..n].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// k × cols, orthonormal rows.
    pub components: Matrix,
    /// rows × k, centered data projected on the components.
    pub scores: Matrix,
    /// Variance captured by each component, non-increasing.
    pub explained_variance: Vec<f64>,
    pub mean: Vec<f64>,
    /// Set when `k` exceeds the numerical rank and trailing components come
    /// from an orthonormal completion rather than the data.
    pub rank_deficient: bool,
}

fn centered(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mean = m.col_means();
    let mut c = m.clone();
    for i in 0..c.rows() {
        for (v, mu) in c.row_mut(i).iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    (c, mean)
}

/// Flips each component so its largest-magnitude entry is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    for &x in v.iter() {
        if x.abs() > best.abs() + 1e-12 {
            best = x;
        }
    }
    if best < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn normalize_vec(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    // twice for numerical stability
    for _ in 0..2 {
        for b in basis {
            let p = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, bi)| *x -= p * bi);
        }
    }
}

/// Completes `basis` with unit vectors orthogonal to it, drawn from the
/// standard basis in index order.
fn orthonormal_completion(basis: &mut Vec<Vec<f64>>, dim: usize, want: usize) {
    let mut e = 0;
    while basis.len() < want && e < dim {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        orthogonalize(&mut v, basis);
        if normalize_vec(&mut v) > 1e-6 {
            basis.push(v);
        }
        e += 1;
    }
}

pub fn pca(m: &Matrix, k: usize) -> Result<Pca> {
    let (rows, cols) = m.shape();
    if k == 0 || k > rows.min(cols) {
        return Err(Error::Config(format!(
            "cannot extract {k} components from a {rows}x{cols} matrix"
        )));
    }
    let (xc, mean) = centered(m);
    let denom = (rows.max(2) - 1) as f64;

    let (mut comps, mut vars) = if cols <= DENSE_PCA_MAX_COLS {
        dense_eigen(&xc, k, denom)
    } else {
        power_iteration(&xc, k, denom, 1_000, 1e-10)
    };

    let top = vars.first().copied().unwrap_or(0.0).max(0.0);
    let tol = top * 1e-10 + 1e-12;
    let rank = vars.iter().filter(|v| **v > tol).count();
    let rank_deficient = rank < k;
    if rank_deficient {
        comps.truncate(rank);
        vars.truncate(rank);
        orthonormal_completion(&mut comps, cols, k);
        vars.resize(k, 0.0);
    }
    for c in comps.iter_mut() {
        fix_sign(c);
    }

    let components = Matrix::from_rows(&comps)?;
    let scores = xc.matmul_t(&components);
    Ok(Pca {
        components,
        scores,
        explained_variance: vars.into_iter().map(|v| v.max(0.0)).collect(),
        mean,
        rank_deficient,
    })
}

fn dense_eigen(xc: &Matrix, k: usize, denom: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let cols = xc.cols();
    let mut cov = xc.t_matmul(xc);
    cov.scale(1.0 / denom);
    let dm = DMatrix::from_row_slice(cols, cols, cov.as_slice());
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let comps = order[..k]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    let vars = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
    (comps, vars)
}

/// Top-k covariance eigenpairs without forming the covariance:
/// `C v = Xcᵀ (Xc v) / (n-1)`, deflating by re-orthogonalization.
fn power_iteration(xc: &Matrix, k: usize, denom: f64, max_iter: usize, tol: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let cols = xc.cols();
    let mut rng = rng::seeded(0x5eed_0bca);
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut vars = Vec::with_capacity(k);
    let cov_apply = |v: &[f64]| -> Vec<f64> {
        let xv: Vec<f64> = (0..xc.rows()).map(|i| dot(xc.row(i), v)).collect();
        let mut out = vec![0.0; cols];
        for (i, &s) in xv.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(xc.row(i)) {
                *o += s * x;
            }
        }
        out.iter_mut().for_each(|o| *o /= denom);
        out
    };
    for _ in 0..k {
        let mut v: Vec<f64> = (0..cols).map(|_| rng::normal(&mut rng)).collect();
        orthogonalize(&mut v, &comps);
        normalize_vec(&mut v);
        let mut lambda = 0.0;
        for _ in 0..max_iter {
            let mut w = cov_apply(&v);
            orthogonalize(&mut w, &comps);
            let norm = normalize_vec(&mut w);
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            lambda = norm;
            if norm < 1e-300 || delta < tol {
                break;
            }
        }
        comps.push(v);
        vars.push(lambda);
    }
    (comps, vars)
}

/// Directed KNN adjacency: for each point its `k` nearest others by
/// Euclidean distance, nearest first, ties to the lower index.
pub fn knn_graph(points: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = points.rows();
    if k >= n {
        return Err(Error::Config(format!(
            "k_neighbors = {k} must be smaller than the number of points ({n})"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let pi = points.row(i);
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dist: f64 = pi.iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                (dist, j)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.push(d.into_iter().take(k).map(|(_, j)| j).collect());
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means (k-means++ seeding, Lloyd updates). Returns one cluster
/// label per row; labels are dense in `0..k'` with `k' ≤ k`.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iter: usize) -> Vec<usize> {
    let n = points.rows();
    if n == 0 {
        return Vec::new();
    }
    let k = k.clamp(1, n);
    let mut rng = rng::seeded(seed);
    let mut centers: Vec<Vec<f64>> = vec![points.row(rng::index(&mut rng, n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // every point coincides with a center
            rng::index(&mut rng, n)
        } else {
            let mut target = rand::Rng::gen::<f64>(&mut rng) * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centers.push(points.row(next).to_vec());
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centers.last().unwrap()));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    sq_dist(points.row(i), &centers[a])
                        .total_cmp(&sq_dist(points.row(i), &centers[b]))
                        .then(a.cmp(&b))
                })
                .unwrap();
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; points.cols()]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            sums[labels[i]].iter_mut().zip(points.row(i)).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    // relabel densely in order of first appearance
    let mut remap = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = remap.len();
            *remap.entry(l).or_insert(next)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaCell {
    pub member_rows: Vec<usize>,
    pub expression: Vec<f64>,
    pub attributes: AttributeRecord,
}

/// Most frequent present value; ties go to the lexicographically smallest.
/// `None` when no member has a value.
pub fn majority_vote<'a>(values: impl IntoIterator<Item = Option<&'a str>>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values.into_iter().flatten() {
        *counts.entry(v).or_default() += 1;
    }
    // ascending key order: a later key only wins with a strictly higher count
    counts
        .into_iter()
        .fold(None::<(&str, usize)>, |best, (k, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((k, c)),
        })
        .map(|(k, _)| k.to_string())
}

fn vote_attributes(members: &[usize], attrs: &[AttributeRecord]) -> Result<AttributeRecord> {
    let mut out = attrs[members[0]].clone();
    for col in CATEGORICAL_COLUMNS {
        let mut values = Vec::with_capacity(members.len());
        for &m in members {
            values.push(attrs[m].value(col)?);
        }
        let winner = majority_vote(values);
        out.set_value(col, winner)?;
    }
    Ok(out)
}

/// Output of the full preprocessing chain.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub normalized: Matrix,
    pub hvg: Vec<usize>,
    pub pca: Pca,
    pub metacells: Vec<MetaCell>,
}

/// normalize → HVG → PCA → seeded k-means grouping → mean expression and
/// majority-voted attributes per group.
pub fn preprocess(counts: &Matrix, attrs: &[AttributeRecord], cfg: &PreprocessConfig) -> Result<Preprocessed> {
    cfg.validate()?;
    if counts.rows() != attrs.len() {
        return Err(Error::Shape(format!(
            "{} matrix rows but {} attribute records",
            counts.rows(),
            attrs.len()
        )));
    }
    if counts.rows() == 0 {
        return Err(Error::Invalid("no cells to preprocess".into()));
    }
    let normalized = normalize(counts, cfg.target_sum)?;
    let (n_hvg, n_pcs) = cfg.effective(counts.rows(), counts.cols());
    let hvg = select_hvg(&normalized, n_hvg)?;
    let pca = pca(&normalized.select_cols(&hvg), n_pcs)?;
    let metacells = group_metacells(&normalized, &pca.scores, attrs, cfg)?;
    Ok(Preprocessed {
        normalized,
        hvg,
        pca,
        metacells,
    })
}

/// Meta-cells from already normalized rows and their PCA scores.
pub fn group_metacells(
    normalized: &Matrix,
    scores: &Matrix,
    attrs: &[AttributeRecord],
    cfg: &PreprocessConfig,
) -> Result<Vec<MetaCell>> {
    let n = normalized.rows();
    let groups = n.div_ceil(cfg.metacell_group_size);
    let labels = kmeans(scores, groups, cfg.seed, 100);
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); n_labels];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    members
        .into_iter()
        .map(|rows| {
            let mut expression = vec![0.0; normalized.cols()];
            for &r in &rows {
                expression.iter_mut().zip(normalized.row(r)).for_each(|(e, v)| *e += v);
            }
            expression.iter_mut().for_each(|e| *e /= rows.len() as f64);
            let attributes = vote_attributes(&rows, attrs)?;
            Ok(MetaCell {
                member_rows: rows,
                expression,
                attributes,
            })
        })
        .collect()
}

/// Convenience wrapper matching [`preprocess`] but returning only meta-cells.
pub fn build_metacells(counts: &Matrix, attrs: &[AttributeRecord], cfg: &PreprocessConfig) -> Result<Vec<MetaCell>> {
    preprocess(counts, attrs, cfg).map(|p| p.metacells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    #[test]
    fn standardized_columns_have_zero_mean_unit_variance() {
        let m = Matrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0], vec![8.0, 5.0]]).unwrap();
        let z = standardize_columns(&m);
        let c0 = z.column(0);
        assert!(c0.iter().sum::<f64>().abs() < 1e-12);
        assert!((c0.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert!(z.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_one_row() {
        let m = Matrix::from_rows(&[vec![1.0, 3.0, 6.0]]).unwrap();
        let out = normalize(&m, 10_000.0).unwrap();
        let expect = [1001f64.ln(), 3001f64.ln(), 6001f64.ln()];
        for (a, b) in out.row(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_single_nonzero_entry() {
        let m = Matrix::from_rows(&[vec![0.0, 10_000.0, 0.0]]).unwrap();
        let out = normalize(&m, 10_000.0).unwrap();
        assert_eq!(out.row(0), &[0.0, 10_000f64.ln_1p(), 0.0]);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        match normalize(&m, 1e4) {
            Err(Error::Row { row, .. }) => assert_eq!(row, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hvg_examples() {
        // column variances 0, 5, 2 (up to the common 1/(n-1) factor)
        let m = Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![1.0, 5f64.sqrt() * 2f64.sqrt(), 1.0 + 2.0]]).unwrap();
        assert_eq!(select_hvg(&m, 2).unwrap(), vec![1, 2]);
        let c = Matrix::from_fn(4, 3, |_, _| 7.0);
        assert_eq!(select_hvg(&c, 2).unwrap(), vec![0, 1]);
        assert!(select_hvg(&c, 4).is_err());
    }

    #[test]
    fn hvg_ties_survive_rounding_noise() {
        // same spread, different offsets: equal variance, unequal float sums
        let m = Matrix::from_fn(5, 3, |i, j| [0.7, 0.1, 3.3][j] + 0.1 * i as f64);
        assert_eq!(select_hvg(&m, 1).unwrap(), vec![0]);
        assert_eq!(select_hvg(&m, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn pca_single_axis() {
        let m = Matrix::from_fn(6, 3, |i, j| if j == 1 { i as f64 } else { 2.0 });
        let p = pca(&m, 2).unwrap();
        let c0 = p.components.row(0);
        assert!((c0[1].abs() - 1.0).abs() < 1e-9);
        assert!(c0[0].abs() < 1e-9 && c0[2].abs() < 1e-9);
        assert!(p.explained_variance[1].abs() < 1e-9);
        assert!(p.rank_deficient);
        let g = p.components.matmul_t(&p.components);
        assert!(g.max_abs_diff(&Matrix::identity(2)) < 1e-9);
    }

    #[test]
    fn pca_full_rank_reconstructs() {
        let m = synthetic::gaussian_matrix(7, 4, 3);
        let p = pca(&m, 4).unwrap();
        let mut recon = p.scores.matmul(&p.components);
        recon.add_row_vector(&p.mean);
        assert!(recon.max_abs_diff(&m) < 1e-5);
    }

    #[test]
    fn power_iteration_matches_dense_path() {
        let m = synthetic::gaussian_matrix(30, 8, 11);
        let (xc, _) = centered(&m);
        let (dc, dv) = dense_eigen(&xc, 3, 29.0);
        let (pc, pv) = power_iteration(&xc, 3, 29.0, 5_000, 1e-13);
        for k in 0..3 {
            assert!((dv[k] - pv[k]).abs() < 1e-6 * dv[0]);
            assert!((dot(&dc[k], &pc[k]).abs() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn knn_collinear() {
        let p = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(knn_graph(&p, 1).unwrap(), vec![vec![1], vec![0], vec![1]]);
        let full = knn_graph(&p, 2).unwrap();
        for (i, nb) in full.iter().enumerate() {
            assert_eq!(nb.len(), 2);
            assert!(!nb.contains(&i));
        }
        assert!(knn_graph(&p, 3).is_err());
    }

    #[test]
    fn majority_vote_rules() {
        assert_eq!(
            majority_vote([Some("male"), Some("male"), Some("female")]).as_deref(),
            Some("male")
        );
        assert_eq!(majority_vote([Some("male"), Some("female")]).as_deref(), Some("female"));
        assert_eq!(majority_vote([None, Some("b"), None]).as_deref(), Some("b"));
        assert_eq!(majority_vote([None, None]), None);
    }

    #[test]
    fn kmeans_is_deterministic_and_partitions() {
        let m = synthetic::gaussian_matrix(40, 3, 5);
        let a = kmeans(&m, 5, 9, 100);
        let b = kmeans(&m, 5, 9, 100);
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        assert!(a.iter().all(|&l| l < 5));
    }
}
