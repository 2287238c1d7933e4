//! FastICA factorization of a subject × feature matrix into subject
//! loadings (mixing) and feature-space sources, `X ≈ A·S + X̄`.
//!
//! Sources are independent across features: each feature (voxel) is one
//! observation of a `c`-dimensional signal. The data are centered per
//! feature, reduced to the top `c` principal axes, centered and whitened
//! across features, and unmixed by symmetric fixed-point iteration with the
//! logcosh contrast.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::datamodel::Matrix;
use crate::error::{invalid, Error, Result};
use crate::numerics::{fit_whitening, sym_eig, RngStream, WhiteningTransform};
use crate::persist::{read_json, write_json, BlobStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcaConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceInfo {
    pub iterations: usize,
    pub final_tolerance: f64,
    pub converged: bool,
}

/// Fitted factorization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaModel {
    /// n × c subject loadings.
    pub mixing: Matrix,
    /// c × m sources, unit variance across features.
    pub sources: Matrix,
    /// Per-feature mean over subjects.
    pub feature_mean: Array1<f64>,
    pub whitening: WhiteningTransform,
    /// c × c orthogonal rotation applied to the whitened signals.
    pub unmixing: Matrix,
    pub convergence: ConvergenceInfo,
}

impl IcaModel {
    pub fn components(&self) -> usize {
        self.sources.nrows()
    }

    pub fn features(&self) -> usize {
        self.sources.ncols()
    }

    /// Reconstruct arbitrary loading rows.
    pub fn reconstruct(&self, loadings: &Matrix) -> Result<Matrix> {
        reconstruct(loadings, &self.sources, &self.feature_mean)
    }

    pub(crate) fn to_manifest(&self, blobs: &BlobStore, prefix: &str) -> Result<IcaManifest> {
        let mut files = BTreeMap::new();
        let w = &self.whitening;
        let mut put = |name: &str, m: &Matrix| -> Result<()> {
            files.insert(name.to_owned(), blobs.put(&format!("{prefix}{name}"), m)?);
            Ok(())
        };
        put("mixing", &self.mixing)?;
        put("sources", &self.sources)?;
        put("unmixing", &self.unmixing)?;
        put("whitening_projection", &w.projection)?;
        put("whitening_back_projection", &w.back_projection)?;
        files.insert(
            "feature_mean".into(),
            blobs.put_vector(&format!("{prefix}feature_mean"), &self.feature_mean)?,
        );
        files.insert(
            "whitening_mean".into(),
            blobs.put_vector(&format!("{prefix}whitening_mean"), &w.mean)?,
        );
        files.insert(
            "whitening_eigenvalues".into(),
            blobs.put_vector(&format!("{prefix}whitening_eigenvalues"), &w.eigenvalues)?,
        );
        Ok(IcaManifest {
            c: self.components(),
            subjects: self.mixing.nrows(),
            features: self.features(),
            convergence: self.convergence,
            files,
        })
    }

    pub(crate) fn from_manifest(manifest: &IcaManifest, blobs: &BlobStore) -> Result<Self> {
        let file = |name: &str| {
            manifest
                .files
                .get(name)
                .ok_or_else(|| invalid!("ICA manifest lacks the {name:?} entry"))
        };
        let model = IcaModel {
            mixing: blobs.get(file("mixing")?)?,
            sources: blobs.get(file("sources")?)?,
            feature_mean: blobs.get_vector(file("feature_mean")?)?,
            whitening: WhiteningTransform {
                mean: blobs.get_vector(file("whitening_mean")?)?,
                projection: blobs.get(file("whitening_projection")?)?,
                back_projection: blobs.get(file("whitening_back_projection")?)?,
                eigenvalues: blobs.get_vector(file("whitening_eigenvalues")?)?,
            },
            unmixing: blobs.get(file("unmixing")?)?,
            convergence: manifest.convergence,
        };
        if model.mixing.dim() != (manifest.subjects, manifest.c)
            || model.sources.dim() != (manifest.c, manifest.features)
            || model.feature_mean.len() != manifest.features
        {
            return Err(invalid!("ICA blobs do not match the manifest dimensions"));
        }
        Ok(model)
    }

    /// Write `path` (JSON manifest) and its blobs.
    pub fn save(&self, path: &Path) -> Result<()> {
        let blobs = BlobStore::for_manifest(path)?;
        write_json(path, &self.to_manifest(&blobs, "")?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blobs = BlobStore::for_manifest(path)?;
        Self::from_manifest(&read_json(path)?, &blobs)
    }
}

/// On-disk description of an [`IcaModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct IcaManifest {
    pub c: usize,
    pub subjects: usize,
    pub features: usize,
    pub convergence: ConvergenceInfo,
    pub files: BTreeMap<String, String>,
}

/// `mixing · sources + feature_mean` (mean broadcast over rows).
pub fn reconstruct(mixing: &Matrix, sources: &Matrix, feature_mean: &Array1<f64>) -> Result<Matrix> {
    if mixing.ncols() != sources.nrows() || sources.ncols() != feature_mean.len() {
        return Err(invalid!(
            "shape mismatch: mixing {}x{}, sources {}x{}, feature mean {}",
            mixing.nrows(),
            mixing.ncols(),
            sources.nrows(),
            sources.ncols(),
            feature_mean.len()
        ));
    }
    let mut out = mixing.dot(sources);
    out += feature_mean;
    Ok(out)
}

/// Fit `c` independent sources.
///
/// Non-convergence is not an error: the model comes back with
/// `convergence.converged == false`.
pub fn fit_ica(x: &Matrix, c: usize, config: &IcaConfig, rng: &mut RngStream) -> Result<IcaModel> {
    let (n, m) = x.dim();
    if c < 1 || n < 2 || c > (n - 1).min(m) {
        return Err(invalid!(
            "number of sources c={c} must satisfy 1 <= c <= min(rows-1, cols) = {}",
            n.saturating_sub(1).min(m)
        ));
    }
    if config.max_iter == 0 || !(config.tol > 0.0) {
        return Err(invalid!("ICA needs max_iter >= 1 and tol > 0"));
    }

    // Subject-space principal axes: columns of `basis` are orthonormal.
    let whitening = fit_whitening(x, c)?;
    let basis = whitening.apply(x)? / (n as f64 - 1.0).sqrt();
    let centered = x - &whitening.mean;
    let reduced = basis.t().dot(&centered); // c × m

    let signal_mean = reduced.mean_axis(Axis(1)).expect("m >= 1");
    let demeaned = &reduced - &signal_mean.view().insert_axis(Axis(1));
    let cov = demeaned.dot(&demeaned.t()) / m as f64;
    let eig = sym_eig(&cov)?;
    if let Some(k) = eig.eigenvalues.iter().position(|&l| l <= 1e-12 * eig.eigenvalues[0].max(1e-300)) {
        return Err(Error::RankDeficient {
            component: k,
            eigenvalue: eig.eigenvalues[k],
        });
    }
    let sphere = eig.map_spectrum(|l| 1.0 / l.sqrt());
    let unsphere = eig.map_spectrum(f64::sqrt);
    let white = sphere.dot(&demeaned);

    let init = rng.normal_matrix(c, c);
    let mut w = symmetric_decorrelation(&init)?;
    let mut convergence = ConvergenceInfo {
        iterations: 0,
        final_tolerance: f64::INFINITY,
        converged: false,
    };
    let inv_m = 1.0 / m as f64;
    for it in 1..=config.max_iter {
        let mut g = w.dot(&white);
        let mut g_prime_mean = Array1::zeros(c);
        for (k, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
            let mut acc = 0.0;
            row.mapv_inplace(|v| {
                let t = v.tanh();
                acc += 1.0 - t * t;
                t
            });
            g_prime_mean[k] = acc * inv_m;
        }
        let update = g.dot(&white.t()) * inv_m - &(&w * &g_prime_mean.view().insert_axis(Axis(1)));
        let next = symmetric_decorrelation(&update)?;
        let lim = next
            .dot(&w.t())
            .diag()
            .iter()
            .map(|d| (d.abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = next;
        convergence.iterations = it;
        convergence.final_tolerance = lim;
        if lim < config.tol {
            convergence.converged = true;
            break;
        }
    }

    let sources = w.dot(&sphere).dot(&reduced);
    let mixing = basis.dot(&unsphere).dot(&w.t());
    Ok(IcaModel {
        mixing,
        sources,
        feature_mean: whitening.mean.clone(),
        whitening,
        unmixing: w,
        convergence,
    })
}

/// `(W Wᵀ)^(-1/2) W`.
fn symmetric_decorrelation(w: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(&w.dot(&w.t()))?;
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::Numeric("singular unmixing matrix during decorrelation".into()));
    }
    Ok(eig.map_spectrum(|l| 1.0 / l.sqrt()).dot(w))
}
