use mmsynth::datamodel::{Label, LabeledDataset};
use mmsynth::generator::{fit_generator, generator_stream, BatchSpec};
use mmsynth::ica::IcaConfig;
use mmsynth::rvgen::RvGeneratorKind;
use mmsynth::RngStream;
use ndarray::{Array1, Array2, Axis};

fn toy(seed: u64) -> LabeledDataset {
    let mut rng = RngStream::new(seed);
    let n = 40;
    let m = 6;
    let sources = Array2::from_shape_fn((3, m), |_| rng.standard_normal().powi(3));
    let mut loadings = rng.normal_matrix(n, 3);
    for i in n / 2..n {
        loadings[[i, 0]] += 1.5;
    }
    let labels: Vec<Label> = (0..n).map(|i| if i < n / 2 { Label::Hc } else { Label::Sz }).collect();
    let ids = (0..n).map(|i| format!("s{}", i + 1)).collect();
    LabeledDataset::new(loadings.dot(&sources) + 0.05 * rng.normal_matrix(n, m), labels, ids).unwrap()
}

#[test]
fn synthetic_hc_mean_matches_real_reconstructions() {
    let data = toy(5);
    let gen = fit_generator(
        &data,
        3,
        RvGeneratorKind::MultivariateNormal,
        &IcaConfig::default(),
        &mut RngStream::new(1),
    )
    .unwrap();
    let hc_rows: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == Label::Hc).collect();
    let real = gen.ica.reconstruct(&gen.ica.mixing.select(Axis(0), &hc_rows)).unwrap();
    let target = real.mean_axis(Axis(0)).unwrap();

    let spec = BatchSpec {
        hc_per_batch: 10,
        sz_per_batch: 10,
        batches: 1000,
    };
    let m = gen.features();
    let mut sum = Array1::<f64>::zeros(m);
    let mut sq = Array1::<f64>::zeros(m);
    let mut count = 0usize;
    for batch in generator_stream(&gen, spec, RngStream::new(2)) {
        for (row, label) in batch.data.rows().into_iter().zip(&batch.labels) {
            if *label == Label::Hc {
                sum += &row;
                sq += &row.mapv(|v| v * v);
                count += 1;
            }
        }
    }
    assert_eq!(count, 10_000);
    let mean = &sum / count as f64;
    for j in 0..m {
        let var = sq[j] / count as f64 - mean[j] * mean[j];
        let se = (var / count as f64).sqrt();
        assert!(
            (mean[j] - target[j]).abs() < 3.0 * se,
            "feature {j}: {} vs {} (se {se})",
            mean[j],
            target[j]
        );
    }
}

#[test]
fn every_batch_index_is_emitted_once_in_order() {
    let gen = fit_generator(
        &toy(6),
        3,
        RvGeneratorKind::Rejection { bins: 10 },
        &IcaConfig::default(),
        &mut RngStream::new(3),
    )
    .unwrap();
    let spec = BatchSpec {
        hc_per_batch: 2,
        sz_per_batch: 2,
        batches: 500,
    };
    let mut stream = generator_stream(&gen, spec, RngStream::new(4));
    let mut seen = Vec::new();
    for batch in stream.by_ref() {
        seen.push(batch.batch_index);
    }
    assert_eq!(seen, (0..500).collect::<Vec<_>>());
    assert_eq!(stream.emitted(), 500);
    assert!(stream.next().is_none());
}
