//! Fisher linear discriminant analysis.
//!
//! The generalized eigenproblem `S_b w = λ S_w w` is solved by whitening the
//! within-class scatter with its own eigendecomposition, then diagonalizing
//! the whitened between-class scatter. Output dimensions come out sorted by
//! discriminability, which is the ordering the nested cascade stages rely on.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::cascade::{normalize, Template};
use crate::error::{check_dim, Error, Result};

/// Within-class components with eigenvalue below this fraction of the total
/// scatter are dropped before whitening.
pub const WHITENING_CUTOFF: f64 = 1e-10;

/// Raw feature rows with identity labels, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    samples: Vec<f64>,
    labels: Vec<String>,
    seed: Option<u64>,
}

impl LabeledDataset {
    pub fn new(dim: usize, samples: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dataset dimension must be positive".into()));
        }
        if samples.len() != dim * labels.len() {
            return Err(Error::SizeMismatch(format!(
                "{} values for {} samples of dimension {dim}",
                samples.len(),
                labels.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("dataset has non-finite values".into()));
        }
        Ok(Self {
            dim,
            samples,
            labels,
            seed: None,
        })
    }

    /// Records the generator seed the dataset came from.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.samples
    }

    /// Sample indices grouped by label, labels in ascending order.
    pub fn classes(&self) -> Vec<(&str, Vec<usize>)> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, l) in self.labels.iter().enumerate() {
            groups.entry(l.as_str()).or_default().push(i);
        }
        groups.into_iter().collect()
    }
}

/// Largest number of discriminant directions LDA can produce.
pub fn max_output_dim(classes: usize, d_raw: usize) -> usize {
    classes.saturating_sub(1).min(d_raw)
}

/// Centering mean plus a `d_raw x d_out` projection basis.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaProjection {
    mean: Vec<f64>,
    basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl LdaProjection {
    /// Assembles a projection from its parts. `basis_row_major` holds
    /// `mean.len() * eigenvalues.len()` values.
    pub fn from_parts(mean: Vec<f64>, basis_row_major: &[f64], eigenvalues: Vec<f64>) -> Result<Self> {
        let (d_raw, d_out) = (mean.len(), eigenvalues.len());
        if d_raw == 0 || d_out == 0 {
            return Err(Error::InvalidArgument("empty projection".into()));
        }
        if basis_row_major.len() != d_raw * d_out {
            return Err(Error::SizeMismatch(format!(
                "basis has {} values, expected {d_raw} x {d_out}",
                basis_row_major.len()
            )));
        }
        if mean.iter().chain(basis_row_major).chain(&eigenvalues).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("projection has non-finite values".into()));
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) || eigenvalues.iter().any(|&v| v < -1e-9) {
            return Err(Error::InvalidArgument(
                "eigenvalues must be non-negative and non-increasing".into(),
            ));
        }
        Ok(Self {
            mean,
            basis: DMatrix::from_row_slice(d_raw, d_out, basis_row_major),
            eigenvalues,
        })
    }

    pub fn d_raw(&self) -> usize {
        self.mean.len()
    }

    pub fn d_out(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Basis entries in row-major order (`d_raw` rows of `d_out`).
    pub fn basis_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.basis.len());
        for r in 0..self.basis.nrows() {
            out.extend(self.basis.row(r).iter());
        }
        out
    }

    /// Projected coordinates before normalization.
    pub fn coordinates(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.d_raw(), x.len())?;
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self
            .basis
            .column_iter()
            .map(|col| col.iter().zip(&centered).map(|(b, c)| b * c).sum())
            .collect())
    }

    /// Projects and normalizes to unit length.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        normalize(&self.coordinates(x)?)
            .map_err(|_| Error::Normalization("projection of the sample is zero".into()))
    }

    pub fn project_template(&self, id: impl Into<String>, x: &[f64]) -> Result<Template> {
        let unit = self.project(x)?;
        Ok(Template::from_parts(id.into(), unit.iter().map(|&v| v as f32).collect()))
    }

    /// Projects many row-major samples at once with a single matrix product.
    pub fn project_rows(&self, rows: &[f64]) -> Result<Vec<Vec<f64>>> {
        let d = self.d_raw();
        if rows.len() % d != 0 {
            return Err(Error::SizeMismatch(format!(
                "{} values is not a multiple of dimension {d}",
                rows.len()
            )));
        }
        let n = rows.len() / d;
        let mut x = DMatrix::from_row_slice(n, d, rows);
        for mut row in x.row_iter_mut() {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        let z = x * &self.basis;
        z.row_iter()
            .map(|r| {
                let coords: Vec<f64> = r.iter().copied().collect();
                normalize(&coords)
                    .map_err(|_| Error::Normalization("projection of the sample is zero".into()))
            })
            .collect()
    }
}

/// Fits a `d_out`-dimensional discriminant projection.
pub fn fit_lda(data: &LabeledDataset, d_out: usize) -> Result<LdaProjection> {
    let groups = data.classes();
    let (n, d, c) = (data.len(), data.dim(), groups.len());
    if let Some((label, _)) = groups.iter().find(|(_, idx)| idx.len() < 2) {
        return Err(Error::Lda(format!("class {label:?} has a single sample")));
    }
    if n <= c {
        return Err(Error::Lda(format!("{n} samples for {c} classes")));
    }
    if d_out == 0 || d_out > max_output_dim(c, d) {
        return Err(Error::Lda(format!(
            "d_out = {d_out} but at most {} directions exist for {c} classes in {d} dims",
            max_output_dim(c, d)
        )));
    }

    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(data.sample(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut within = DMatrix::<f64>::zeros(n, d);
    let mut between = DMatrix::<f64>::zeros(c, d);
    for (ci, (_, idx)) in groups.iter().enumerate() {
        let mut class_mean = vec![0.0; d];
        for &i in idx {
            for (m, v) in class_mean.iter_mut().zip(data.sample(i)) {
                *m += v;
            }
        }
        class_mean.iter_mut().for_each(|m| *m /= idx.len() as f64);
        for &i in idx {
            for (j, (v, m)) in data.sample(i).iter().zip(&class_mean).enumerate() {
                within[(i, j)] = v - m;
            }
        }
        let w = (idx.len() as f64).sqrt();
        for (j, (cm, m)) in class_mean.iter().zip(&mean).enumerate() {
            between[(ci, j)] = w * (cm - m);
        }
    }
    let s_w = within.tr_mul(&within);
    let s_b = between.tr_mul(&between);

    let eig_w = SymmetricEigen::new(s_w);
    let total: f64 = eig_w.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::Lda("within-class scatter is zero".into()));
    }
    let kept: Vec<usize> = (0..d)
        .filter(|&i| eig_w.eigenvalues[i] > WHITENING_CUTOFF * total)
        .collect();
    if kept.len() < d_out {
        return Err(Error::Lda(format!(
            "within-class scatter has rank {} < d_out = {d_out}",
            kept.len()
        )));
    }
    let mut whiten = DMatrix::<f64>::zeros(d, kept.len());
    for (col, &i) in kept.iter().enumerate() {
        let scale = eig_w.eigenvalues[i].sqrt().recip();
        whiten.set_column(col, &(eig_w.eigenvectors.column(i) * scale));
    }

    let mut m = whiten.tr_mul(&s_b) * &whiten;
    m = (&m + m.transpose()) * 0.5;
    let eig_b = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.sort_by(|&a, &b| eig_b.eigenvalues[b].total_cmp(&eig_b.eigenvalues[a]).then(a.cmp(&b)));
    order.truncate(d_out);

    let leading = eig_b.eigenvalues[order[0]];
    if leading <= 1e-12 {
        return Err(Error::Lda("no discriminative direction: classes are indistinguishable".into()));
    }
    let mut basis = DMatrix::<f64>::zeros(d, d_out);
    let mut eigenvalues = Vec::with_capacity(d_out);
    for (col, &i) in order.iter().enumerate() {
        let mut v = &whiten * eig_b.eigenvectors.column(i);
        let pivot = v.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            v.neg_mut();
        }
        basis.set_column(col, &v);
        eigenvalues.push(eig_b.eigenvalues[i].max(0.0));
    }

    Ok(LdaProjection {
        mean,
        basis,
        eigenvalues,
    })
}
