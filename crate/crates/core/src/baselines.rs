//! Classical comparison classifiers on raw features: L2 logistic
//! regression, Gaussian naive Bayes, shrinkage LDA and k-nearest
//! neighbors. Every model scores P(SZ) in [0, 1].

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::datamodel::{class_counts, Label, Matrix};
use crate::error::{invalid, Error, Result};
use crate::numerics::{sym_eig, EigenDecomposition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    LogisticRegression { l2: f64, max_iter: usize },
    GaussianNb,
    Lda { shrinkage: f64 },
    Knn { k: usize },
}

impl BaselineKind {
    /// The four comparison classifiers with their fixed defaults.
    pub fn defaults() -> [BaselineKind; 4] {
        [
            BaselineKind::LogisticRegression { l2: 1.0, max_iter: 1000 },
            BaselineKind::GaussianNb,
            BaselineKind::Lda { shrinkage: 0.5 },
            BaselineKind::Knn { k: 5 },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::LogisticRegression { .. } => "Logistic Regression",
            BaselineKind::GaussianNb => "Naive Bayes",
            BaselineKind::Lda { .. } => "LDA",
            BaselineKind::Knn { .. } => "Nearest Neighbors",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            BaselineKind::LogisticRegression { l2, max_iter } if !(l2 >= 0.0) || max_iter == 0 => {
                Err(invalid!("logistic regression needs l2 >= 0 and max_iter >= 1"))
            }
            BaselineKind::Lda { shrinkage } if !(shrinkage > 0.0 && shrinkage <= 1.0) => {
                Err(invalid!("LDA shrinkage {shrinkage} outside (0, 1]"))
            }
            BaselineKind::Knn { k: 0 } => Err(invalid!("kNN needs k >= 1")),
            _ => Ok(()),
        }
    }
}

const LR_TOL: f64 = 1e-6;
const NB_VAR_FLOOR: f64 = 1e-9;
const KNN_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineModel {
    LogisticRegression {
        weights: Array1<f64>,
        bias: f64,
        /// Objective after each accepted iteration.
        loss_trace: Vec<f64>,
    },
    GaussianNb {
        /// Indexed by [`Label::index`].
        means: [Array1<f64>; 2],
        variances: [Array1<f64>; 2],
        log_priors: [f64; 2],
    },
    Lda {
        weights: Array1<f64>,
        midpoint: Array1<f64>,
        log_prior_ratio: f64,
    },
    Knn {
        k: usize,
        x: Matrix,
        y: Vec<Label>,
    },
}

pub fn fit_baseline(kind: &BaselineKind, x: &Matrix, y: &[Label]) -> Result<BaselineModel> {
    kind.validate()?;
    if x.nrows() != y.len() {
        return Err(invalid!("{} rows but {} labels", x.nrows(), y.len()));
    }
    let (hc, sz) = class_counts(y);
    if hc < 2 || sz < 2 {
        return Err(invalid!("baselines need at least 2 subjects per class, got {hc} HC and {sz} SZ"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("features must be finite"));
    }
    Ok(match *kind {
        BaselineKind::LogisticRegression { l2, max_iter } => fit_logistic(x, y, l2, max_iter),
        BaselineKind::GaussianNb => fit_gnb(x, y),
        BaselineKind::Lda { shrinkage } => fit_lda(x, y, shrinkage)?,
        BaselineKind::Knn { k } => BaselineModel::Knn {
            k,
            x: x.clone(),
            y: y.to_vec(),
        },
    })
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean logistic loss plus `l2 / (2n) · ‖w‖²`.
fn logistic_objective(x: &Matrix, t: &Array1<f64>, w: &Array1<f64>, b: f64, l2: f64) -> f64 {
    let n = x.nrows() as f64;
    let z = x.dot(w) + b;
    let data: f64 = z.iter().zip(t).map(|(&z, &t)| softplus(z) - t * z).sum::<f64>() / n;
    data + l2 / (2.0 * n) * w.dot(w)
}

/// Gradient descent; the step is halved until the objective decreases.
fn fit_logistic(x: &Matrix, y: &[Label], l2: f64, max_iter: usize) -> BaselineModel {
    let n = x.nrows() as f64;
    let t: Array1<f64> = y.iter().map(|l| l.as_f64()).collect();
    let mut w = Array1::zeros(x.ncols());
    let mut b = 0.0;
    let mut loss = logistic_objective(x, &t, &w, b, l2);
    let mut step = 1.0;
    let mut loss_trace = vec![loss];
    for _ in 0..max_iter {
        let z = x.dot(&w) + b;
        let resid: Array1<f64> = z.iter().zip(&t).map(|(&z, &t)| sigmoid(z) - t).collect();
        let gw = x.t().dot(&resid) / n + &(&w * (l2 / n));
        let gb = resid.sum() / n;
        let gnorm = (gw.dot(&gw) + gb * gb).sqrt();
        if gnorm < LR_TOL {
            break;
        }
        let mut accepted = None;
        for _ in 0..60 {
            let w_new = &w - &(&gw * step);
            let b_new = b - step * gb;
            let new_loss = logistic_objective(x, &t, &w_new, b_new, l2);
            if new_loss < loss {
                accepted = Some((w_new, b_new, new_loss));
                break;
            }
            step *= 0.5;
        }
        let Some((w_new, b_new, new_loss)) = accepted else { break };
        let improvement = loss - new_loss;
        w = w_new;
        b = b_new;
        loss = new_loss;
        loss_trace.push(loss);
        if improvement < LR_TOL * loss.abs().max(1.0) {
            break;
        }
    }
    BaselineModel::LogisticRegression {
        weights: w,
        bias: b,
        loss_trace,
    }
}

fn class_rows(y: &[Label], class: Label) -> Vec<usize> {
    (0..y.len()).filter(|&i| y[i] == class).collect()
}

fn fit_gnb(x: &Matrix, y: &[Label]) -> BaselineModel {
    let n = y.len() as f64;
    let stats = |class: Label| {
        let rows = x.select(Axis(0), &class_rows(y, class));
        let mean = rows.mean_axis(Axis(0)).expect("class nonempty");
        let var = rows.var_axis(Axis(0), 0.0).mapv(|v| v.max(NB_VAR_FLOOR));
        let prior = (rows.nrows() as f64 / n).ln();
        (mean, var, prior)
    };
    let (m0, v0, p0) = stats(Label::Hc);
    let (m1, v1, p1) = stats(Label::Sz);
    BaselineModel::GaussianNb {
        means: [m0, m1],
        variances: [v0, v1],
        log_priors: [p0, p1],
    }
}

/// Shrinkage LDA. The pooled covariance is `(1-α)·S + α·(tr S / m)·I` and
/// is inverted through the n×n Woodbury form so the m×m matrix is never
/// built.
fn fit_lda(x: &Matrix, y: &[Label], shrinkage: f64) -> Result<BaselineModel> {
    let (n, m) = x.dim();
    let hc = class_rows(y, Label::Hc);
    let sz = class_rows(y, Label::Sz);
    let mu0 = x.select(Axis(0), &hc).mean_axis(Axis(0)).expect("nonempty");
    let mu1 = x.select(Axis(0), &sz).mean_axis(Axis(0)).expect("nonempty");
    let mut centered = x.clone();
    for (i, mut row) in centered.axis_iter_mut(Axis(0)).enumerate() {
        row -= if y[i] == Label::Sz { &mu1 } else { &mu0 };
    }
    let dof = (n - 2) as f64;
    let avg_var = (centered.iter().map(|v| v * v).sum::<f64>() / dof / m as f64).max(1e-12);
    let nu = shrinkage * avg_var;
    let diff = &mu1 - &mu0;
    let weights = if shrinkage >= 1.0 {
        &diff / nu
    } else {
        let beta = (1.0 - shrinkage) / dof;
        let mut k = centered.dot(&centered.t());
        for i in 0..n {
            k[[i, i]] += nu / beta;
        }
        let eig = sym_eig(&k)?;
        let r = centered.dot(&diff);
        let solved = solve_spd(&eig, &r)?;
        (&diff - &centered.t().dot(&solved)) / nu
    };
    let (n0, n1) = (hc.len() as f64, sz.len() as f64);
    Ok(BaselineModel::Lda {
        weights,
        midpoint: (&mu0 + &mu1) / 2.0,
        log_prior_ratio: (n1 / n0).ln(),
    })
}

fn solve_spd(eig: &EigenDecomposition, r: &Array1<f64>) -> Result<Array1<f64>> {
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::Numeric("LDA system is not positive definite".into()));
    }
    let v = &eig.eigenvectors;
    let coeffs = v.t().dot(r) / &eig.eigenvalues;
    Ok(v.dot(&coeffs))
}

impl BaselineModel {
    pub fn features(&self) -> usize {
        match self {
            BaselineModel::LogisticRegression { weights, .. } | BaselineModel::Lda { weights, .. } => weights.len(),
            BaselineModel::GaussianNb { means, .. } => means[0].len(),
            BaselineModel::Knn { x, .. } => x.ncols(),
        }
    }
}

/// P(SZ) per row of `x`.
pub fn baseline_predict_proba(model: &BaselineModel, x: &Matrix) -> Result<Array1<f64>> {
    if x.ncols() != model.features() {
        return Err(invalid!("model was fitted on {} features, got {}", model.features(), x.ncols()));
    }
    Ok(match model {
        BaselineModel::LogisticRegression { weights, bias, .. } => (x.dot(weights) + *bias).mapv(sigmoid),
        BaselineModel::GaussianNb {
            means,
            variances,
            log_priors,
        } => x
            .rows()
            .into_iter()
            .map(|row| {
                let ll = |c: usize| -> f64 {
                    log_priors[c]
                        - 0.5
                            * row
                                .iter()
                                .zip(&means[c])
                                .zip(&variances[c])
                                .map(|((&v, &mu), &var)| (2.0 * std::f64::consts::PI * var).ln() + (v - mu).powi(2) / var)
                                .sum::<f64>()
                };
                sigmoid(ll(1) - ll(0))
            })
            .collect(),
        BaselineModel::Lda {
            weights,
            midpoint,
            log_prior_ratio,
        } => (x - midpoint).dot(weights).mapv(|z| sigmoid(z + log_prior_ratio)),
        BaselineModel::Knn { k, x: train, y } => x
            .rows()
            .into_iter()
            .map(|row| {
                let mut dist: Vec<(f64, usize)> = train
                    .rows()
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| (t.iter().zip(&row).map(|(a, b)| (a - b).powi(2)).sum(), i))
                    .collect();
                // ties go to the smaller training index
                dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let k = (*k).min(dist.len());
                let votes = dist[..k].iter().filter(|(_, i)| y[*i] == Label::Sz).count();
                (votes as f64 / k as f64).clamp(KNN_CLIP, 1.0 - KNN_CLIP)
            })
            .collect(),
    })
}
