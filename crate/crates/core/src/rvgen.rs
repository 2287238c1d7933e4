//! Random-variate generators over mixing-matrix columns: per-column
//! histogram rejection sampling, and joint multivariate normal sampling
//! through the spectral square root of the covariance.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::datamodel::Matrix;
use crate::error::{invalid, Result};
use crate::numerics::{column_mean, sample_covariance, sym_eig, RngStream};

pub const DEFAULT_BINS: usize = 20;

/// Which generator resamples the loadings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RvGeneratorKind {
    Rejection { bins: usize },
    MultivariateNormal,
}

impl RvGeneratorKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RvGeneratorKind::Rejection { bins: 0 } => Err(invalid!("bin count must be >= 1")),
            _ => Ok(()),
        }
    }

    /// Short tag used in reports and file names.
    pub fn tag(&self) -> &'static str {
        match self {
            RvGeneratorKind::Rejection { .. } => "rejection",
            RvGeneratorKind::MultivariateNormal => "mvn",
        }
    }
}

/// Equal-width normalized histogram over `[lower, upper]`.
///
/// `lower == upper` is a point mass at `lower`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPdf {
    pub lower: f64,
    pub upper: f64,
    pub masses: Vec<f64>,
}

impl HistogramPdf {
    pub fn bin_count(&self) -> usize {
        self.masses.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.lower == self.upper
    }

    pub fn bin_width(&self) -> f64 {
        (self.upper - self.lower) / self.bin_count() as f64
    }

    /// Bin holding `v`; the last bin is closed on the right. `None` outside the support.
    pub fn bin_of(&self, v: f64) -> Option<usize> {
        if !(self.lower..=self.upper).contains(&v) {
            return None;
        }
        if self.is_degenerate() {
            return Some(0);
        }
        let idx = ((v - self.lower) / self.bin_width()).floor() as usize;
        Some(idx.min(self.bin_count() - 1))
    }

    /// Height of the density at `v` (mass / bin width).
    pub fn density(&self, v: f64) -> f64 {
        match self.bin_of(v) {
            Some(b) if !self.is_degenerate() => self.masses[b] / self.bin_width(),
            Some(_) => f64::INFINITY,
            None => 0.0,
        }
    }

    /// Interval `[lo, hi)` of bin `b` (closed for the last bin).
    pub fn bin_interval(&self, b: usize) -> (f64, f64) {
        let w = self.bin_width();
        let lo = self.lower + b as f64 * w;
        let hi = if b + 1 == self.bin_count() {
            self.upper
        } else {
            self.lower + (b + 1) as f64 * w
        };
        (lo, hi)
    }

    /// Index of the bin with the largest mass (first on ties).
    pub fn mode_bin(&self) -> usize {
        self.masses
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &m)| if m > best.1 { (i, m) } else { best })
            .0
    }
}

pub fn fit_histogram(samples: &[f64], bin_count: usize) -> Result<HistogramPdf> {
    if samples.is_empty() {
        return Err(invalid!("cannot fit a histogram to zero samples"));
    }
    if bin_count == 0 {
        return Err(invalid!("bin count must be >= 1"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("histogram samples must be finite"));
    }
    let lower = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let upper = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pdf = HistogramPdf {
        lower,
        upper,
        masses: vec![0.0; bin_count],
    };
    if pdf.is_degenerate() {
        pdf.masses[0] = 1.0;
        return Ok(pdf);
    }
    let mut counts = vec![0usize; bin_count];
    for &v in samples {
        counts[pdf.bin_of(v).expect("sample inside its own range")] += 1;
    }
    let total = samples.len() as f64;
    pdf.masses = counts.iter().map(|&c| c as f64 / total).collect();
    Ok(pdf)
}

/// Draw `m` values from `pdf` by rejection against a uniform proposal on
/// its support, with the envelope set to the largest bin density.
pub fn rejection_sample(pdf: &HistogramPdf, m: usize, rng: &mut RngStream) -> Vec<f64> {
    if pdf.is_degenerate() {
        return vec![pdf.lower; m];
    }
    let max_mass = pdf.masses.iter().copied().fold(0.0, f64::max);
    let mut out = Vec::with_capacity(m);
    while out.len() < m {
        let v = rng.uniform_range(pdf.lower, pdf.upper);
        let u = rng.uniform();
        // equal widths: density ratio == mass ratio
        let bin = pdf.bin_of(v).expect("proposal inside support");
        if u * max_mass < pdf.masses[bin] {
            out.push(v);
        }
    }
    out
}

/// Mean, covariance and spectral square root of a set of row vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvnParams {
    pub mean: Array1<f64>,
    pub covariance: Matrix,
    /// `V · Λ^(1/2)` with negative eigenvalues clipped to zero.
    pub spectral_root: Matrix,
}

impl MvnParams {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_mvn(a: &Matrix) -> Result<MvnParams> {
    if a.nrows() < 2 {
        return Err(invalid!("MVN fit needs at least 2 rows, got {}", a.nrows()));
    }
    let mean = column_mean(a)?;
    let covariance = sample_covariance(a)?;
    let eig = sym_eig(&covariance)?;
    let spectral_root = &eig.eigenvectors * &eig.eigenvalues.mapv(|l| l.max(0.0).sqrt());
    Ok(MvnParams {
        mean,
        covariance,
        spectral_root,
    })
}

/// `m` rows of `mean + spectral_root · z` with `z` standard normal.
pub fn mvn_sample(params: &MvnParams, m: usize, rng: &mut RngStream) -> Matrix {
    let c = params.dim();
    let z = rng.normal_matrix(m, c);
    let mut out = z.dot(&params.spectral_root.t());
    out += &params.mean;
    out
}

/// Per-column histograms of a matrix.
pub fn fit_column_histograms(a: &Matrix, bins: usize) -> Result<Vec<HistogramPdf>> {
    a.axis_iter(Axis(1))
        .map(|col| fit_histogram(&col.to_vec(), bins))
        .collect()
}

/// `m` rows drawn column by column from independent marginal histograms.
pub fn sample_column_histograms(pdfs: &[HistogramPdf], m: usize, rng: &mut RngStream) -> Matrix {
    let mut out = Array2::zeros((m, pdfs.len()));
    for (j, pdf) in pdfs.iter().enumerate() {
        let draws = rejection_sample(pdf, m, rng);
        out.column_mut(j).assign(&Array1::from(draws));
    }
    out
}
