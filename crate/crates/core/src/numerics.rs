//! Shared numerical kernels: seeded random streams, column statistics,
//! symmetric eigendecomposition and PCA whitening.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Matrix;
use crate::error::{invalid, Error, Result};

/// Seeded random stream.
///
/// Backed by ChaCha8 (a counter-based generator with 256-bit key and 64-bit
/// block counter) keyed from a 64-bit seed, so a seed reproduces the exact
/// sequence on any platform. Child streams are derived from the parent's
/// *seed* and a text label, never from its current position, so
/// `split("fold/3")` yields the same child no matter how much of the parent
/// has been consumed.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `label`.
    pub fn split(&self, label: &str) -> RngStream {
        RngStream::new(derive_seed(self.seed, label))
    }

    /// Uniform draw on [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw on [lo, hi).
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw by the Marsaglia polar method.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * f);
                return u * f;
            }
        }
    }

    /// Uniform index in `0..n` (unbiased, by rejection). `n` must be nonzero.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be nonempty");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Array2::from_shape_simple_fn((rows, cols), || self.standard_normal())
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(parent: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the parent seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(parent ^ splitmix64(h))
}

/// Per-column means.
pub fn column_mean(x: &Matrix) -> Result<Array1<f64>> {
    if x.nrows() == 0 {
        return Err(invalid!("column_mean of a matrix with no rows"));
    }
    Ok(x.mean_axis(Axis(0)).expect("nonempty"))
}

/// Unbiased sample covariance of the columns of `x` (rows are observations).
pub fn sample_covariance(x: &Matrix) -> Result<Matrix> {
    let n = x.nrows();
    if n < 2 {
        return Err(invalid!("sample covariance needs at least 2 rows, got {n}"));
    }
    let mean = column_mean(x)?;
    let centered = x - &mean;
    Ok(centered.t().dot(&centered) / (n as f64 - 1.0))
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Sorted descending.
    pub eigenvalues: Array1<f64>,
    /// Column `i` is the unit eigenvector for `eigenvalues[i]`.
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    /// `V · diag(f(λ)) · Vᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let scaled = &self.eigenvectors * &self.eigenvalues.mapv(f);
        scaled.dot(&self.eigenvectors.t())
    }
}

const JACOBI_TOL: f64 = 1e-11;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Converges when the off-diagonal Frobenius norm falls below
/// `1e-11 · ‖K‖_F`; gives up after 100 sweeps.
pub fn sym_eig(k: &Matrix) -> Result<EigenDecomposition> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(invalid!("sym_eig needs a square matrix, got {}x{}", n, k.ncols()));
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("sym_eig input has non-finite entries"));
    }
    let scale = k.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let asym = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .fold(0.0_f64, |m, (i, j)| m.max((k[[i, j]] - k[[j, i]]).abs()));
    if asym > 1e-9 * scale {
        return Err(invalid!(
            "sym_eig input is not symmetric (max asymmetry {asym:e})"
        ));
    }

    let mut a: Vec<f64> = k.iter().copied().collect();
    // symmetrize
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = JACOBI_TOL * norm;

    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = norm == 0.0 || off_norm(&a) < threshold;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    a[r * n + p] = c * arp - s * arq;
                    a[r * n + q] = s * arp + c * arq;
                }
                for r in 0..n {
                    let apr = a[p * n + r];
                    let aqr = a[q * n + r];
                    a[p * n + r] = c * apr - s * aqr;
                    a[q * n + r] = s * apr + c * aqr;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    let vrp = v[r * n + p];
                    let vrq = v[r * n + q];
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
        converged = off_norm(&a) < threshold;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let eigenvalues = order.iter().map(|&i| a[i * n + i]).collect();
    let mut eigenvectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors[[r, dst]] = v[r * n + src];
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// PCA whitening onto the top `c` principal axes of the feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningTransform {
    pub mean: Array1<f64>,
    /// c × m; rows are principal axes scaled by `λ^(-1/2)`.
    pub projection: Matrix,
    /// m × c; pseudo-inverse of `projection`.
    pub back_projection: Matrix,
    /// Top `c` covariance eigenvalues, descending.
    pub eigenvalues: Array1<f64>,
}

impl WhiteningTransform {
    pub fn components(&self) -> usize {
        self.projection.nrows()
    }

    /// `(x - mean) · projectionᵀ`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.mean.len() {
            return Err(invalid!(
                "whitening expects {} columns, got {}",
                self.mean.len(),
                x.ncols()
            ));
        }
        Ok((x - &self.mean).dot(&self.projection.t()))
    }

    /// `z · back_projectionᵀ + mean`.
    pub fn invert(&self, z: &Matrix) -> Result<Matrix> {
        if z.ncols() != self.components() {
            return Err(invalid!(
                "inverse whitening expects {} columns, got {}",
                self.components(),
                z.ncols()
            ));
        }
        Ok(z.dot(&self.back_projection.t()) + &self.mean)
    }
}

/// Relative floor under which a covariance eigenvalue counts as zero.
const RANK_FLOOR: f64 = 1e-12;

/// Fit a whitening transform from the sample covariance of `x` (rows are
/// observations). Works on the n×n Gram matrix when there are more columns
/// than rows, so the m×m covariance is never formed.
pub fn fit_whitening(x: &Matrix, c: usize) -> Result<WhiteningTransform> {
    let (n, m) = x.dim();
    if n < 2 || c < 1 || c > (n - 1).min(m) {
        return Err(invalid!(
            "number of components c={c} must satisfy 1 <= c <= min(rows-1, cols) = {}",
            n.saturating_sub(1).min(m)
        ));
    }
    let mean = column_mean(x)?;
    let centered = x - &mean;
    let dof = n as f64 - 1.0;

    // `axes` is m×c with orthonormal columns; `eigenvalues` the covariance spectrum.
    let (axes, eigenvalues) = if m > n {
        let gram = centered.dot(&centered.t()) / dof;
        let eig = sym_eig(&gram)?;
        check_rank(&eig.eigenvalues, c)?;
        let lambdas = eig.eigenvalues.slice(s![..c]).to_owned();
        let u = eig.eigenvectors.slice(s![.., ..c]);
        let mut axes = centered.t().dot(&u);
        for (k, mut col) in axes.axis_iter_mut(Axis(1)).enumerate() {
            col /= (dof * lambdas[k]).sqrt();
        }
        (axes, lambdas)
    } else {
        let cov = centered.t().dot(&centered) / dof;
        let eig = sym_eig(&cov)?;
        check_rank(&eig.eigenvalues, c)?;
        (
            eig.eigenvectors.slice(s![.., ..c]).to_owned(),
            eig.eigenvalues.slice(s![..c]).to_owned(),
        )
    };

    let inv_sqrt = eigenvalues.mapv(|l| 1.0 / l.sqrt());
    let sqrt = eigenvalues.mapv(f64::sqrt);
    let projection = (&axes * &inv_sqrt).t().to_owned();
    let back_projection = &axes * &sqrt;
    Ok(WhiteningTransform {
        mean,
        projection,
        back_projection,
        eigenvalues,
    })
}

fn check_rank(eigenvalues: &Array1<f64>, c: usize) -> Result<()> {
    let floor = RANK_FLOOR * eigenvalues[0].max(1.0);
    match eigenvalues.iter().take(c).position(|&l| l <= floor) {
        Some(component) => Err(Error::RankDeficient {
            component,
            eigenvalue: eigenvalues[component],
        }),
        None => Ok(()),
    }
}

/// Frobenius norm.
pub fn frobenius(x: ArrayView2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed);
        let a = rng.normal_matrix(n, n);
        (&a + &a.t()) / 2.0
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngStream::new(99);
        let mut b = RngStream::new(99);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_ignores_parent_position() {
        let parent = RngStream::new(5);
        let mut consumed = parent.clone();
        for _ in 0..17 {
            consumed.uniform();
        }
        let mut c1 = parent.split("fold/1");
        let mut c2 = consumed.split("fold/1");
        let mut other = parent.split("fold/2");
        let a: Vec<u64> = (0..8).map(|_| c1.next_u64()).collect();
        let b: Vec<u64> = (0..8).map(|_| c2.next_u64()).collect();
        let o: Vec<u64> = (0..8).map(|_| other.next_u64()).collect();
        assert_eq!(a, b);
        assert_ne!(a, o);
    }

    #[test]
    fn polar_normals_have_unit_moments() {
        let mut rng = RngStream::new(3);
        let draws: Vec<f64> = (0..200_000).map(|_| rng.standard_normal()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn column_mean_cases() {
        assert_eq!(column_mean(&array![[1.0, 3.0], [3.0, 5.0]]).unwrap(), array![2.0, 4.0]);
        assert_eq!(column_mean(&array![[7.0, 8.0]]).unwrap(), array![7.0, 8.0]);
        assert!(column_mean(&Matrix::zeros((0, 2))).is_err());
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = sym_eig(&Matrix::eye(3)).unwrap();
        assert_eq!(e.eigenvalues, array![1.0, 1.0, 1.0]);

        let e = sym_eig(&array![[1.0, 0.0], [0.0, 4.0]]).unwrap();
        assert_eq!(e.eigenvalues, array![4.0, 1.0]);
        assert_abs_diff_eq!(e.eigenvectors[[1, 0]].abs(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.eigenvectors[[0, 1]].abs(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        let k = random_symmetric(6, 11);
        let e = sym_eig(&k).unwrap();
        let rebuilt = e.map_spectrum(|l| l);
        assert!(frobenius((&rebuilt - &k).view()) < 1e-8);

        let knorm = frobenius(k.view());
        for i in 0..6 {
            let v = e.eigenvectors.column(i);
            let resid = k.dot(&v) - &v * e.eigenvalues[i];
            assert!(resid.iter().map(|r| r * r).sum::<f64>().sqrt() <= 1e-8 * knorm);
        }
        let gram = e.eigenvectors.t().dot(&e.eigenvectors);
        assert!(frobenius((&gram - &Matrix::eye(6)).view()) < 1e-10);
        for w in e.eigenvalues.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let err = sym_eig(&array![[1.0, 2.0], [0.0, 1.0]]).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn whitening_gives_identity_covariance() {
        let mut rng = RngStream::new(21);
        let z = rng.normal_matrix(400, 2);
        let mix = array![[2.0, 0.0], [1.5, 0.5]];
        let x = z.dot(&mix.t()) + &array![10.0, -3.0];
        let w = fit_whitening(&x, 2).unwrap();
        let white = w.apply(&x).unwrap();
        let cov = sample_covariance(&white).unwrap();
        assert!(frobenius((&cov - &Matrix::eye(2)).view()) < 1e-6);
    }

    #[test]
    fn whitening_gram_route_matches_identity_covariance() {
        let mut rng = RngStream::new(4);
        let x = rng.normal_matrix(12, 300);
        let w = fit_whitening(&x, 5).unwrap();
        let cov = sample_covariance(&w.apply(&x).unwrap()).unwrap();
        assert!(frobenius((&cov - &Matrix::eye(5)).view()) < 1e-6);
    }

    #[test]
    fn whitening_round_trip_is_idempotent() {
        let mut rng = RngStream::new(8);
        let x = rng.normal_matrix(10, 40);
        let w = fit_whitening(&x, 4).unwrap();
        let z = w.apply(&x).unwrap();
        let z2 = w.apply(&w.invert(&z).unwrap()).unwrap();
        assert!(frobenius((&z2 - &z).view()) < 1e-8);
    }

    #[test]
    fn whitening_component_range() {
        let mut rng = RngStream::new(1);
        let x = rng.normal_matrix(5, 8);
        assert!(fit_whitening(&x, 5).unwrap_err().is_validation());
        assert!(fit_whitening(&x, 0).unwrap_err().is_validation());
        assert!(fit_whitening(&x, 4).is_ok());
    }

    #[test]
    fn whitening_detects_rank_deficiency() {
        let mut rng = RngStream::new(2);
        let mut x = rng.normal_matrix(10, 3);
        let dup = x.column(1).to_owned();
        x.column_mut(2).assign(&dup);
        match fit_whitening(&x, 3) {
            Err(Error::RankDeficient { component, .. }) => assert_eq!(component, 2),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }
}
