//! Class-conditional synthetic data generator.
//!
//! ICA is fitted label-blind; the mixing rows are then split by diagnosis
//! and each class gets its own random-variate model of the loadings.
//! Synthetic subjects are `â · S + X̄` for freshly drawn loading rows `â`.
//! Batches are produced lazily, one per index, and never repeated.

use std::path::Path;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::datamodel::{class_counts, Label, LabeledDataset, Matrix};
use crate::error::{invalid, Result};
use crate::ica::{fit_ica, IcaConfig, IcaManifest, IcaModel};
use crate::persist::{read_json, write_json, BlobStore};
use crate::rvgen::{
    fit_column_histograms, fit_mvn, mvn_sample, sample_column_histograms, HistogramPdf, MvnParams,
    RvGeneratorKind,
};
use crate::numerics::RngStream;

pub const DEFAULT_SOURCES: usize = 20;

/// Fitted loading model of one diagnosis group.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassModel {
    Marginals(Vec<HistogramPdf>),
    Mvn(MvnParams),
}

impl ClassModel {
    fn fit(loadings: &Matrix, kind: RvGeneratorKind) -> Result<Self> {
        Ok(match kind {
            RvGeneratorKind::Rejection { bins } => {
                ClassModel::Marginals(fit_column_histograms(loadings, bins)?)
            }
            RvGeneratorKind::MultivariateNormal => ClassModel::Mvn(fit_mvn(loadings)?),
        })
    }

    /// `m` synthetic loading rows.
    pub fn sample(&self, m: usize, rng: &mut RngStream) -> Matrix {
        match self {
            ClassModel::Marginals(pdfs) => sample_column_histograms(pdfs, m, rng),
            ClassModel::Mvn(p) => mvn_sample(p, m, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub ica: Arc<IcaModel>,
    pub kind: RvGeneratorKind,
    pub hc_model: ClassModel,
    pub sz_model: ClassModel,
    /// `(n_HC, n_SZ)` rows the class models were fitted on.
    pub class_counts: (usize, usize),
}

/// Fit ICA on all rows of `dataset` (labels unused), then the per-class
/// loading models.
pub fn fit_generator(
    dataset: &LabeledDataset,
    c: usize,
    kind: RvGeneratorKind,
    ica_config: &IcaConfig,
    rng: &mut RngStream,
) -> Result<GeneratorModel> {
    check_classes(&dataset.labels)?;
    kind.validate()?;
    let ica = fit_ica(&dataset.data, c, ica_config, rng)?;
    let rows: Vec<usize> = (0..dataset.len()).collect();
    GeneratorModel::from_ica(Arc::new(ica), &rows, &dataset.labels, kind)
}

fn check_classes(labels: &[Label]) -> Result<()> {
    let (hc, sz) = class_counts(labels);
    if hc < 2 || sz < 2 {
        return Err(invalid!(
            "generator needs at least 2 subjects per class, got {hc} HC and {sz} SZ"
        ));
    }
    Ok(())
}

impl GeneratorModel {
    /// Class models from the mixing rows `rows` of an already fitted ICA;
    /// `labels[i]` is the label of mixing row `rows[i]`.
    pub fn from_ica(
        ica: Arc<IcaModel>,
        rows: &[usize],
        labels: &[Label],
        kind: RvGeneratorKind,
    ) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(invalid!("{} rows but {} labels", rows.len(), labels.len()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= ica.mixing.nrows()) {
            return Err(invalid!("row {bad} outside the {}-row mixing matrix", ica.mixing.nrows()));
        }
        check_classes(labels)?;
        kind.validate()?;
        let pick = |class: Label| -> Vec<usize> {
            rows.iter()
                .zip(labels)
                .filter(|(_, &l)| l == class)
                .map(|(&r, _)| r)
                .collect()
        };
        let hc_rows = pick(Label::Hc);
        let sz_rows = pick(Label::Sz);
        let hc_model = ClassModel::fit(&ica.mixing.select(Axis(0), &hc_rows), kind)?;
        let sz_model = ClassModel::fit(&ica.mixing.select(Axis(0), &sz_rows), kind)?;
        Ok(Self {
            ica,
            kind,
            hc_model,
            sz_model,
            class_counts: (hc_rows.len(), sz_rows.len()),
        })
    }

    pub fn features(&self) -> usize {
        self.ica.features()
    }

    pub fn class_model(&self, label: Label) -> &ClassModel {
        match label {
            Label::Hc => &self.hc_model,
            Label::Sz => &self.sz_model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blobs = BlobStore::for_manifest(path)?;
        let manifest = GeneratorManifest {
            kind: self.kind,
            class_counts: self.class_counts,
            ica: self.ica.to_manifest(&blobs, "ica_")?,
            hc: class_to_manifest(&self.hc_model, &blobs, "hc")?,
            sz: class_to_manifest(&self.sz_model, &blobs, "sz")?,
        };
        write_json(path, &manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blobs = BlobStore::for_manifest(path)?;
        let manifest: GeneratorManifest = read_json(path)?;
        let ica = IcaModel::from_manifest(&manifest.ica, &blobs)?;
        let c = ica.components();
        let model = Self {
            kind: manifest.kind,
            class_counts: manifest.class_counts,
            hc_model: class_from_manifest(&manifest.hc, &blobs, c)?,
            sz_model: class_from_manifest(&manifest.sz, &blobs, c)?,
            ica: Arc::new(ica),
        };
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GeneratorManifest {
    kind: RvGeneratorKind,
    class_counts: (usize, usize),
    ica: IcaManifest,
    hc: ClassManifest,
    sz: ClassManifest,
}

/// Histograms are stored as one row per column: `[lower, upper, masses...]`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
enum ClassManifest {
    Marginals { histograms: String },
    Mvn {
        mean: String,
        covariance: String,
        spectral_root: String,
    },
}

fn class_to_manifest(model: &ClassModel, blobs: &BlobStore, tag: &str) -> Result<ClassManifest> {
    Ok(match model {
        ClassModel::Marginals(pdfs) => {
            let bins = pdfs.first().map_or(0, |p| p.bin_count());
            let mut table = Matrix::zeros((pdfs.len(), bins + 2));
            for (i, p) in pdfs.iter().enumerate() {
                table[[i, 0]] = p.lower;
                table[[i, 1]] = p.upper;
                for (j, &mass) in p.masses.iter().enumerate() {
                    table[[i, j + 2]] = mass;
                }
            }
            ClassManifest::Marginals {
                histograms: blobs.put(&format!("{tag}_histograms"), &table)?,
            }
        }
        ClassModel::Mvn(p) => ClassManifest::Mvn {
            mean: blobs.put_vector(&format!("{tag}_mean"), &p.mean)?,
            covariance: blobs.put(&format!("{tag}_covariance"), &p.covariance)?,
            spectral_root: blobs.put(&format!("{tag}_spectral_root"), &p.spectral_root)?,
        },
    })
}

fn class_from_manifest(m: &ClassManifest, blobs: &BlobStore, c: usize) -> Result<ClassModel> {
    let model = match m {
        ClassManifest::Marginals { histograms } => {
            let table = blobs.get(histograms)?;
            if table.nrows() != c || table.ncols() < 3 {
                return Err(invalid!("histogram table is {}x{}, expected {c} rows", table.nrows(), table.ncols()));
            }
            ClassModel::Marginals(
                table
                    .rows()
                    .into_iter()
                    .map(|r| HistogramPdf {
                        lower: r[0],
                        upper: r[1],
                        masses: r.iter().skip(2).copied().collect(),
                    })
                    .collect(),
            )
        }
        ClassManifest::Mvn {
            mean,
            covariance,
            spectral_root,
        } => {
            let p = MvnParams {
                mean: blobs.get_vector(mean)?,
                covariance: blobs.get(covariance)?,
                spectral_root: blobs.get(spectral_root)?,
            };
            if p.mean.len() != c || p.covariance.dim() != (c, c) || p.spectral_root.dim() != (c, c) {
                return Err(invalid!("MVN parameters do not match {c} sources"));
            }
            ClassModel::Mvn(p)
        }
    };
    Ok(model)
}

/// Batch composition and stream length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub hc_per_batch: usize,
    pub sz_per_batch: usize,
    pub batches: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            hc_per_batch: 10,
            sz_per_batch: 10,
            batches: 10_000,
        }
    }
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.hc_per_batch + self.sz_per_batch
    }

    pub fn total_samples(&self) -> usize {
        self.batch_size() * self.batches
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size() == 0 || self.batches == 0 {
            return Err(invalid!("batch spec needs at least one sample per batch and one batch"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub batch_index: usize,
    /// batch_size × m reconstructed subjects.
    pub data: Matrix,
    pub labels: Vec<Label>,
    /// The synthetic loading rows behind `data`, row for row.
    pub loadings: Matrix,
}

impl SyntheticBatch {
    pub fn targets(&self) -> Array1<f64> {
        self.labels.iter().map(|l| l.as_f64()).collect()
    }
}

/// Batch `batch_index` of the stream, or `None` once the spec is exhausted.
///
/// Rows are drawn per class, reconstructed through the ICA sources and
/// shuffled within the batch.
pub fn next_batch(
    gen: &GeneratorModel,
    spec: &BatchSpec,
    batch_index: usize,
    rng: &mut RngStream,
) -> Option<SyntheticBatch> {
    if batch_index >= spec.batches {
        return None;
    }
    let hc = gen.hc_model.sample(spec.hc_per_batch, rng);
    let sz = gen.sz_model.sample(spec.sz_per_batch, rng);
    let mut order: Vec<usize> = (0..spec.batch_size()).collect();
    rng.shuffle(&mut order);
    let stacked = ndarray::concatenate(Axis(0), &[hc.view(), sz.view()]).expect("same width");
    let loadings = stacked.select(Axis(0), &order);
    let labels = order
        .iter()
        .map(|&i| if i < spec.hc_per_batch { Label::Hc } else { Label::Sz })
        .collect();
    let data = gen
        .ica
        .reconstruct(&loadings)
        .expect("class models match the ICA dimensions");
    Some(SyntheticBatch {
        batch_index,
        data,
        labels,
        loadings,
    })
}

/// Lazy single-pass stream of synthetic batches.
///
/// Batch `i` draws from the child stream `batch/i` of the stream's RNG, so
/// the sequence depends only on the seed.
pub struct GeneratorStream<'a> {
    gen: &'a GeneratorModel,
    spec: BatchSpec,
    rng: RngStream,
    next: usize,
}

pub fn generator_stream<'a>(gen: &'a GeneratorModel, spec: BatchSpec, rng: RngStream) -> GeneratorStream<'a> {
    GeneratorStream {
        gen,
        spec,
        rng,
        next: 0,
    }
}

impl GeneratorStream<'_> {
    /// Number of batches handed out so far.
    pub fn emitted(&self) -> usize {
        self.next
    }
}

impl Iterator for GeneratorStream<'_> {
    type Item = SyntheticBatch;

    fn next(&mut self) -> Option<SyntheticBatch> {
        let mut child = self.rng.split(&format!("batch/{}", self.next));
        let batch = next_batch(self.gen, &self.spec, self.next, &mut child)?;
        self.next += 1;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.spec.batches - self.next;
        (left, Some(left))
    }
}

/// Runs the stream on a producer thread feeding a bounded channel of
/// `capacity` batches. Yields the same sequence as [`generator_stream`].
pub fn spawn_stream(
    gen: Arc<GeneratorModel>,
    spec: BatchSpec,
    rng: RngStream,
    capacity: usize,
) -> impl Iterator<Item = SyntheticBatch> {
    let (tx, rx) = mpsc::sync_channel(capacity.max(1));
    thread::spawn(move || {
        for batch in generator_stream(&gen, spec, rng) {
            if tx.send(batch).is_err() {
                break; // consumer hung up
            }
        }
    });
    rx.into_iter()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::frobenius;
    use ndarray::Array2;

    /// 20 HC + 20 SZ subjects over two planted sources; SZ loadings on
    /// source 0 are shifted by `shift`.
    pub(crate) fn planted(shift: f64, seed: u64) -> (LabeledDataset, Matrix) {
        let mut rng = RngStream::new(seed);
        let m = 600;
        let sources = Array2::from_shape_simple_fn((2, m), || rng.standard_normal().powi(3));
        let mut labels = Vec::new();
        let mut loadings = Matrix::zeros((40, 2));
        for i in 0..40 {
            let label = if i < 20 { Label::Hc } else { Label::Sz };
            labels.push(label);
            loadings[[i, 0]] = rng.standard_normal() * 0.5 + if label == Label::Sz { shift } else { 0.0 };
            loadings[[i, 1]] = rng.standard_normal() * 0.5;
        }
        let data = loadings.dot(&sources) + rng.normal_matrix(40, m) * 0.01;
        let ids = (0..40).map(|i| format!("s{i}")).collect();
        (LabeledDataset::new(data, labels, ids).unwrap(), loadings)
    }

    /// Mixing column that best tracks true source 0 loadings, sign-aligned.
    fn planted_component(gen: &GeneratorModel, truth: &Matrix) -> (usize, f64) {
        let t = truth.column(0);
        let tc = &t - t.mean().unwrap();
        (0..gen.ica.components())
            .map(|k| {
                let col = gen.ica.mixing.column(k);
                let cc = &col - col.mean().unwrap();
                let r = cc.dot(&tc) / (cc.dot(&cc) * tc.dot(&tc)).sqrt();
                (k, r)
            })
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
    }

    #[test]
    fn mvn_class_means_track_planted_shift() {
        let (ds, truth) = planted(2.0, 60);
        let mut rng = RngStream::new(61);
        let gen = fit_generator(&ds, 2, RvGeneratorKind::MultivariateNormal, &IcaConfig::default(), &mut rng)
            .unwrap();
        let (k, r) = planted_component(&gen, &truth);
        assert!(r.abs() > 0.95);
        let (ClassModel::Mvn(hc), ClassModel::Mvn(sz)) = (&gen.hc_model, &gen.sz_model) else {
            panic!("expected MVN models")
        };
        // direct group means of the fitted mixing column
        let col = gen.ica.mixing.column(k);
        let hc_mean = col.iter().take(20).sum::<f64>() / 20.0;
        let sz_mean = col.iter().skip(20).sum::<f64>() / 20.0;
        assert!((hc.mean[k] - hc_mean).abs() < 1e-12);
        assert!((sz.mean[k] - sz_mean).abs() < 1e-12);

        // rescale to truth units via the regression slope of mixing on true loadings
        let t = truth.column(0);
        let tc = &t - t.mean().unwrap();
        let cc = &col - col.mean().unwrap();
        let slope = cc.dot(&tc) / tc.dot(&tc);
        let planted_gap = t.iter().skip(20).sum::<f64>() / 20.0 - t.iter().take(20).sum::<f64>() / 20.0;
        let recovered = (sz.mean[k] - hc.mean[k]) / slope;
        assert!(
            (recovered - planted_gap).abs() < 0.25 * planted_gap.abs(),
            "{recovered} vs {planted_gap}"
        );
    }

    #[test]
    fn rejection_class_modes_separate() {
        let (ds, truth) = planted(3.0, 62);
        let mut rng = RngStream::new(63);
        let gen = fit_generator(&ds, 2, RvGeneratorKind::Rejection { bins: 10 }, &IcaConfig::default(), &mut rng)
            .unwrap();
        let (k, _) = planted_component(&gen, &truth);
        let (ClassModel::Marginals(hc), ClassModel::Marginals(sz)) = (&gen.hc_model, &gen.sz_model) else {
            panic!("expected marginals")
        };
        assert_eq!(hc.len(), 2);
        let (hlo, hhi) = hc[k].bin_interval(hc[k].mode_bin());
        let (slo, shi) = sz[k].bin_interval(sz[k].mode_bin());
        assert!(hhi <= slo || shi <= hlo, "modes overlap: [{hlo},{hhi}] [{slo},{shi}]");
    }

    #[test]
    fn single_class_rejected() {
        let (mut ds, _) = planted(1.0, 64);
        ds.labels = vec![Label::Hc; 40];
        let mut rng = RngStream::new(0);
        assert!(fit_generator(&ds, 2, RvGeneratorKind::MultivariateNormal, &IcaConfig::default(), &mut rng)
            .unwrap_err()
            .is_validation());
    }

    fn small_generator(kind: RvGeneratorKind) -> GeneratorModel {
        let (ds, _) = planted(1.0, 65);
        let mut rng = RngStream::new(66);
        fit_generator(&ds, 2, kind, &IcaConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn batch_composition_and_reconstruction() {
        let gen = small_generator(RvGeneratorKind::MultivariateNormal);
        let spec = BatchSpec::default();
        let mut rng = RngStream::new(1);
        let batch = next_batch(&gen, &spec, 1234, &mut rng).unwrap();
        assert_eq!(batch.data.nrows(), 20);
        assert_eq!(class_counts(&batch.labels), (10, 10));
        let replay = gen.ica.reconstruct(&batch.loadings).unwrap();
        assert!(frobenius((&replay - &batch.data).view()) == 0.0);
        assert!(next_batch(&gen, &spec, spec.batches, &mut rng).is_none());
    }

    #[test]
    fn zero_covariance_generator_is_constant() {
        let mut gen = small_generator(RvGeneratorKind::MultivariateNormal);
        let ClassModel::Mvn(p) = &mut gen.hc_model else { unreachable!() };
        p.covariance.fill(0.0);
        p.spectral_root.fill(0.0);
        let mean_row = p.mean.clone().insert_axis(Axis(0));
        let expected = gen.ica.reconstruct(&mean_row).unwrap();
        let spec = BatchSpec { hc_per_batch: 5, sz_per_batch: 3, batches: 1 };
        let batch = next_batch(&gen, &spec, 0, &mut RngStream::new(2)).unwrap();
        for (row, label) in batch.data.rows().into_iter().zip(&batch.labels) {
            if *label == Label::Hc {
                assert_eq!(row, expected.row(0));
            }
        }
    }

    #[test]
    fn stream_counts_and_determinism() {
        let gen = small_generator(RvGeneratorKind::Rejection { bins: 8 });
        let spec = BatchSpec { hc_per_batch: 10, sz_per_batch: 10, batches: 3 };
        let a: Vec<_> = generator_stream(&gen, spec, RngStream::new(5)).collect();
        let b: Vec<_> = generator_stream(&gen, spec, RngStream::new(5)).collect();
        assert_eq!(a.len(), 3);
        assert_eq!(a.iter().map(|b| b.data.nrows()).sum::<usize>(), 60);
        assert_eq!(a, b);
        let idx: Vec<usize> = a.iter().map(|b| b.batch_index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn default_spec_totals() {
        assert_eq!(BatchSpec::default().total_samples(), 200_000);
    }

    #[test]
    fn buffered_stream_matches_sequential() {
        let gen = Arc::new(small_generator(RvGeneratorKind::MultivariateNormal));
        let spec = BatchSpec { hc_per_batch: 2, sz_per_batch: 2, batches: 25 };
        let seq: Vec<_> = generator_stream(&gen, spec, RngStream::new(8)).collect();
        let buffered: Vec<_> = spawn_stream(gen.clone(), spec, RngStream::new(8), 4).collect();
        assert_eq!(seq, buffered);
    }

    #[test]
    fn ica_ignores_labels() {
        let (ds, _) = planted(1.0, 67);
        let mut shuffled = ds.clone();
        RngStream::new(3).shuffle(&mut shuffled.labels);
        let kind = RvGeneratorKind::MultivariateNormal;
        let a = fit_generator(&ds, 2, kind, &IcaConfig::default(), &mut RngStream::new(9)).unwrap();
        let b = fit_generator(&shuffled, 2, kind, &IcaConfig::default(), &mut RngStream::new(9)).unwrap();
        assert_eq!(a.ica.sources, b.ica.sources);
        assert_ne!(a.hc_model, b.hc_model);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [RvGeneratorKind::MultivariateNormal, RvGeneratorKind::Rejection { bins: 6 }] {
            let gen = small_generator(kind);
            let path = dir.path().join(format!("gen_{}.json", kind.tag()));
            gen.save(&path).unwrap();
            assert_eq!(GeneratorModel::load(&path).unwrap(), gen);
        }
    }
}
