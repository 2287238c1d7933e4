use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::datamodel::{default_subject_id, Label, LabeledDataset, Matrix, MultimodalDataset};
use crate::error::{invalid, Result};
use crate::numerics::RngStream;

/// Ground-truth dataset description. Modality `i` carries its group
/// effect in source `i` (modulo `true_sources`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub n_per_class: usize,
    pub m_per_modality: Vec<usize>,
    pub true_sources: usize,
    pub effect_sizes: Vec<f64>,
    pub noise_sigma: f64,
    /// Moving-average window used to smooth the source patterns.
    pub smoothing: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_per_class: 80,
            m_per_modality: vec![2000, 2000],
            true_sources: 10,
            effect_sizes: vec![1.0, 1.5],
            noise_sigma: 1.0,
            smoothing: 15,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 || self.true_sources == 0 || self.smoothing == 0 {
            return Err(invalid!("phantom dimensions must be positive"));
        }
        if self.m_per_modality.is_empty() || self.m_per_modality.iter().any(|&m| m == 0) {
            return Err(invalid!("phantom needs at least one modality with positive feature count"));
        }
        if self.effect_sizes.len() != self.m_per_modality.len() {
            return Err(invalid!(
                "{} effect sizes for {} modalities",
                self.effect_sizes.len(),
                self.m_per_modality.len()
            ));
        }
        if self.effect_sizes.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(invalid!("effect sizes must be finite and >= 0"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid!("noise_sigma must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn modality_names(&self) -> Vec<String> {
        (0..self.m_per_modality.len())
            .map(|i| match i {
                0..=25 => ((b'A' + i as u8) as char).to_string(),
                _ => format!("M{}", i + 1),
            })
            .collect()
    }

    pub fn designated_source(&self, modality: usize) -> usize {
        modality % self.true_sources
    }
}

/// Smooth, heavy-tailed spatial patterns, each row standardized to zero
/// mean and unit variance.
fn source_patterns(k: usize, m: usize, window: usize, rng: &mut RngStream) -> Matrix {
    let mut out = Array2::zeros((k, m));
    for mut row in out.rows_mut() {
        let white: Vec<f64> = (0..m).map(|_| rng.standard_normal()).collect();
        for j in 0..m {
            let s: f64 = (0..window).map(|t| white[(j + t) % m]).sum();
            row[j] = (s / (window as f64).sqrt()).powi(3);
        }
        let mean = row.sum() / m as f64;
        row.mapv_inplace(|v| v - mean);
        let sd = (row.dot(&row) / m as f64).sqrt();
        if sd > 0.0 {
            row.mapv_inplace(|v| v / sd);
        }
    }
    out
}

pub fn phantom_generate(spec: &PhantomSpec, rng: &mut RngStream) -> Result<MultimodalDataset> {
    spec.validate()?;
    let n = 2 * spec.n_per_class;
    let labels: Vec<Label> = (0..n)
        .map(|i| if i < spec.n_per_class { Label::Hc } else { Label::Sz })
        .collect();
    let ids: Vec<String> = (0..n).map(default_subject_id).collect();
    let mut modalities = Vec::new();
    for (i, (&m, name)) in spec.m_per_modality.iter().zip(spec.modality_names()).enumerate() {
        let r = rng.split(&format!("modality/{i}"));
        let sources = source_patterns(spec.true_sources, m, spec.smoothing.min(m), &mut r.split("sources"));
        let mut lr = r.split("loadings");
        let mut loadings = lr.normal_matrix(n, spec.true_sources);
        let shift = Array1::from_elem(spec.n_per_class, spec.effect_sizes[i]);
        let k = spec.designated_source(i);
        let mut col = loadings.column_mut(k);
        let mut sz = col.slice_mut(ndarray::s![spec.n_per_class..]);
        sz += &shift;
        let mut data = loadings.dot(&sources);
        if spec.noise_sigma > 0.0 {
            let noise = r.split("noise").normal_matrix(n, m);
            data.scaled_add(spec.noise_sigma, &noise);
        }
        modalities.push((name, LabeledDataset::new(data, labels.clone(), ids.clone())?));
    }
    MultimodalDataset::new(modalities)
}
