//! Subject × feature datasets, matrix and label file I/O, and the
//! correlation-based quality-control filter.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense row-major subject × feature matrix.
pub type Matrix = Array2<f64>;

/// Diagnosis tag. `Sz` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "HC")]
    Hc,
    #[serde(rename = "SZ")]
    Sz,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Hc => 0.0,
            Label::Sz => 1.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Hc => "HC",
            Label::Sz => "SZ",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HC" => Ok(Label::Hc),
            "SZ" => Ok(Label::Sz),
            other => Err(invalid!("unknown label token {other:?} (expected HC or SZ)")),
        }
    }
}

/// Matrix file encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    /// Headerless comma-separated text, one row per line.
    Csv,
    /// `MAT1` binary: magic, u32 LE rows, u32 LE cols, f64 LE values row-major.
    Bin,
}

impl FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(MatrixFormat::Csv),
            "bin" => Ok(MatrixFormat::Bin),
            other => Err(invalid!("unknown matrix format {other:?} (expected csv or bin)")),
        }
    }
}

impl MatrixFormat {
    /// Guess from the file extension; anything other than `.csv` is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Bin,
        }
    }
}

const MAGIC: &[u8; 4] = b"MAT1";

pub fn load_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<Matrix> {
    let path = path.as_ref();
    let m = match format {
        MatrixFormat::Csv => read_csv(path)?,
        MatrixFormat::Bin => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_bin(&bytes).map_err(|(offset, message)| Error::Parse {
                path: path.to_owned(),
                location: format!("byte {offset}"),
                message,
            })?
        }
    };
    if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
        let cols = m.ncols().max(1);
        return Err(invalid!(
            "{}: non-finite value at row {}, column {}",
            path.display(),
            pos / cols,
            pos % cols
        ));
    }
    Ok(m)
}

pub fn save_matrix(m: &Matrix, path: impl AsRef<Path>, format: MatrixFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        MatrixFormat::Bin => encode_bin(m)?,
        MatrixFormat::Csv => {
            let mut out = String::with_capacity(m.len() * 20);
            for row in m.rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
            out.into_bytes()
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_csv(path: &Path) -> Result<Matrix> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_owned(),
        location: format!("line {line}"),
        message,
    };
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let field = field.trim();
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(i + 1, format!("cannot parse {field:?} as a number")))?;
            values.push(v);
            count += 1;
        }
        match cols {
            None => cols = Some(count),
            Some(c) if c != count => {
                return Err(parse_err(i + 1, format!("expected {c} fields, found {count}")))
            }
            _ => {}
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, cols.unwrap_or(0)), values).expect("shape checked"))
}

/// Encode a matrix in the `MAT1` binary layout.
pub fn encode_bin(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.nrows()).map_err(|_| invalid!("too many rows for MAT1"))?;
    let cols = u32::try_from(m.ncols()).map_err(|_| invalid!("too many columns for MAT1"))?;
    let mut out = Vec::with_capacity(12 + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decode a `MAT1` buffer; errors carry the byte offset.
pub fn decode_bin(bytes: &[u8]) -> std::result::Result<Matrix, (usize, String)> {
    if bytes.len() < 12 {
        return Err((bytes.len(), "truncated header (need 12 bytes)".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err((0, "bad magic (expected MAT1)".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(12))
        .ok_or((4, "dimensions overflow".to_string()))?;
    if bytes.len() != expected {
        return Err((
            bytes.len().min(expected),
            format!("payload length mismatch: {rows}x{cols} needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let values = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

/// Subjects with diagnosis labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub data: Matrix,
    pub labels: Vec<Label>,
    pub subject_ids: Vec<String>,
}

impl LabeledDataset {
    pub fn new(data: Matrix, labels: Vec<Label>, subject_ids: Vec<String>) -> Result<Self> {
        if labels.len() != data.nrows() || subject_ids.len() != data.nrows() {
            return Err(invalid!(
                "dataset has {} rows but {} labels and {} subject ids",
                data.nrows(),
                labels.len(),
                subject_ids.len()
            ));
        }
        Ok(Self {
            data,
            labels,
            subject_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(n_HC, n_SZ)`.
    pub fn class_counts(&self) -> (usize, usize) {
        class_counts(&self.labels)
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            data: self.data.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            subject_ids: idx.iter().map(|&i| self.subject_ids[i].clone()).collect(),
        }
    }

    pub fn targets(&self) -> Array1<f64> {
        self.labels.iter().map(|l| l.as_f64()).collect()
    }
}

pub fn class_counts(labels: &[Label]) -> (usize, usize) {
    let sz = labels.iter().filter(|&&l| l == Label::Sz).count();
    (labels.len() - sz, sz)
}

/// Several modalities measured on the same subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    pub modalities: Vec<(String, LabeledDataset)>,
}

impl MultimodalDataset {
    pub fn new(modalities: Vec<(String, LabeledDataset)>) -> Result<Self> {
        let Some((first_name, first)) = modalities.first() else {
            return Err(invalid!("a multimodal dataset needs at least one modality"));
        };
        for (name, ds) in &modalities[1..] {
            if ds.subject_ids != first.subject_ids {
                return Err(invalid!(
                    "modality {name:?} subject ids differ from modality {first_name:?}"
                ));
            }
            if ds.labels != first.labels {
                return Err(invalid!("modality {name:?} labels differ from modality {first_name:?}"));
            }
        }
        Ok(Self { modalities })
    }

    pub fn labels(&self) -> &[Label] {
        &self.modalities[0].1.labels
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.modalities[0].1.subject_ids
    }

    pub fn names(&self) -> Vec<&str> {
        self.modalities.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.labels().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads a `subject_id,label` CSV (with header) into `(id, label)` pairs.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<(String, Label)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == "subject_id,label" => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_owned(),
                location: "line 1".into(),
                message: "expected header `subject_id,label`".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let Some((id, label)) = line.split_once(',') else {
            return Err(Error::Parse {
                path: path.to_owned(),
                location: format!("line {}", i + 1),
                message: "expected `subject_id,label`".into(),
            });
        };
        out.push((id.trim().to_owned(), label.trim().parse()?));
    }
    Ok(out)
}

pub fn save_labels(ids: &[String], labels: &[Label], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "subject_id,label")?;
        for (id, l) in ids.iter().zip(labels) {
            writeln!(w, "{id},{l}")?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Default subject id of data row `i` when no id file accompanies the data.
pub fn default_subject_id(i: usize) -> String {
    format!("s{}", i + 1)
}

/// Load a data matrix and align labels to it by subject id.
///
/// Row `i` of the data is subject `ids[i]` when an id file (one id per
/// line) is given, otherwise `s{i+1}`.
pub fn load_labeled_dataset(
    data_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    ids_path: Option<&Path>,
    format: MatrixFormat,
) -> Result<LabeledDataset> {
    let data = load_matrix(data_path, format)?;
    let ids: Vec<String> = match ids_path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect(),
        None => (0..data.nrows()).map(default_subject_id).collect(),
    };
    if ids.len() != data.nrows() {
        return Err(invalid!(
            "{} subject ids for {} data rows",
            ids.len(),
            data.nrows()
        ));
    }
    let table: HashMap<String, Label> = load_labels(labels_path)?.into_iter().collect();
    let missing: Vec<String> = ids.iter().filter(|id| !table.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::Alignment { missing });
    }
    let labels = ids.iter().map(|id| table[id]).collect();
    LabeledDataset::new(data, labels, ids)
}

/// Outcome of the correlation quality-control filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// Mean Pearson correlation of each subject with every other subject.
    pub mean_correlation: Vec<f64>,
    /// `mean(mean_correlation) - sigmas * std(mean_correlation)`, population std.
    pub threshold: f64,
    pub kept: Vec<usize>,
    /// Subjects with mean correlation strictly below the threshold.
    pub discarded: Vec<usize>,
}

/// Flags subjects whose average correlation with the rest of the sample is
/// more than `sigmas` standard deviations below the mean.
pub fn quality_control(data: &Matrix, sigmas: f64) -> Result<QualityReport> {
    let n = data.nrows();
    if n < 3 {
        return Err(invalid!("quality control needs at least 3 subjects, got {n}"));
    }
    let mut z = data.clone();
    for (i, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
        let mean = row.mean().expect("nonempty row");
        row -= mean;
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(invalid!("subject row {i} has zero variance; correlation undefined"));
        }
        row /= norm;
    }
    let corr = z.dot(&z.t());
    let mean_correlation: Vec<f64> = (0..n)
        .map(|i| (corr.row(i).sum() - corr[[i, i]]) / (n as f64 - 1.0))
        .collect();
    let mu = mean_correlation.iter().sum::<f64>() / n as f64;
    let sd = (mean_correlation.iter().map(|c| (c - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
    let threshold = mu - sigmas * sd;
    let (discarded, kept) = if sd == 0.0 {
        (Vec::new(), (0..n).collect())
    } else {
        (0..n).partition(|&i| mean_correlation[i] < threshold)
    };
    Ok(QualityReport {
        mean_correlation,
        threshold,
        kept,
        discarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use ndarray::array;
    use std::path::PathBuf;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn csv_readback() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "1,2\n3,4\n");
        assert_eq!(load_matrix(&p, MatrixFormat::Csv).unwrap(), array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn csv_accepts_scientific_notation() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "1e-3, -2.5E2\n");
        assert_eq!(load_matrix(&p, MatrixFormat::Csv).unwrap(), array![[1e-3, -250.0]]);
    }

    #[test]
    fn csv_nan_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "1,nan\n3,4\n");
        assert!(matches!(load_matrix(&p, MatrixFormat::Csv), Err(Error::Validation(_))));
    }

    #[test]
    fn csv_errors_carry_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "1,2\n3,x\n");
        match load_matrix(&p, MatrixFormat::Csv) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 2"),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "r.csv", "1,2\n3\n");
        assert!(matches!(load_matrix(&p, MatrixFormat::Csv), Err(Error::Parse { .. })));
    }

    #[test]
    fn bin_readback() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = b"MAT1".to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for _ in 0..3 {
            bytes.extend_from_slice(&0.5f64.to_le_bytes());
        }
        let p = dir.path().join("m.bin");
        fs::write(&p, bytes).unwrap();
        assert_eq!(load_matrix(&p, MatrixFormat::Bin).unwrap(), array![[0.5], [0.5], [0.5]]);
    }

    #[test]
    fn bin_truncated_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let mut bytes = encode_bin(&Matrix::eye(2)).unwrap();
        bytes.truncate(20);
        fs::write(&p, bytes).unwrap();
        match load_matrix(&p, MatrixFormat::Bin) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "byte 20"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bin_identity_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eye.bin");
        save_matrix(&Matrix::eye(3), &p, MatrixFormat::Bin).unwrap();
        assert_eq!(load_matrix(&p, MatrixFormat::Bin).unwrap(), Matrix::eye(3));
    }

    #[test]
    fn csv_random_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let mut rng = RngStream::new(77);
        let m = rng.normal_matrix(5, 4) * 1e3;
        save_matrix(&m, &p, MatrixFormat::Csv).unwrap();
        let back = load_matrix(&p, MatrixFormat::Csv).unwrap();
        for (a, b) in m.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("x.bin");
        assert!(matches!(
            save_matrix(&Matrix::eye(1), &p, MatrixFormat::Bin),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn labeled_dataset_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let data = write(dir.path(), "x.csv", "1,1\n2,2\n3,3\n4,4\n");
        let labels = write(
            dir.path(),
            "y.csv",
            "subject_id,label\ns1,HC\ns2,SZ\ns3,HC\ns4,SZ\n",
        );
        let ds = load_labeled_dataset(&data, &labels, None, MatrixFormat::Csv).unwrap();
        assert_eq!(ds.class_counts(), (2, 2));
        assert_eq!(ds.labels, vec![Label::Hc, Label::Sz, Label::Hc, Label::Sz]);

        let labels = write(dir.path(), "y2.csv", "subject_id,label\ns1,HC\ns2,SZ\ns4,SZ\n");
        match load_labeled_dataset(&data, &labels, None, MatrixFormat::Csv) {
            Err(Error::Alignment { missing }) => assert_eq!(missing, vec!["s3".to_string()]),
            other => panic!("{other:?}"),
        }

        let labels = write(
            dir.path(),
            "y3.csv",
            "subject_id,label\ns1,HC\ns2,PATIENT\ns3,HC\ns4,SZ\n",
        );
        assert!(matches!(
            load_labeled_dataset(&data, &labels, None, MatrixFormat::Csv),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn labeled_dataset_follows_id_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let data = write(dir.path(), "x.csv", "1\n2\n");
        let ids = write(dir.path(), "ids.txt", "b\na\n");
        let labels = write(dir.path(), "y.csv", "subject_id,label\na,HC\nb,SZ\n");
        let ds = load_labeled_dataset(&data, &labels, Some(&ids), MatrixFormat::Csv).unwrap();
        assert_eq!(ds.labels, vec![Label::Sz, Label::Hc]);
        assert_eq!(ds.subject_ids, vec!["b", "a"]);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / (saa * sbb).sqrt()
    }

    /// Direct double loop over subject pairs.
    fn oracle_mean_correlations(x: &Matrix) -> Vec<f64> {
        let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        (0..rows.len())
            .map(|i| {
                let others: Vec<f64> = (0..rows.len())
                    .filter(|&j| j != i)
                    .map(|j| pearson(&rows[i], &rows[j]))
                    .collect();
                others.iter().sum::<f64>() / others.len() as f64
            })
            .collect()
    }

    #[test]
    fn qc_keeps_homogeneous_rows() {
        let mut rng = RngStream::new(10);
        let base: Vec<f64> = (0..200).map(|_| rng.standard_normal()).collect();
        let x = Array2::from_shape_fn((5, 200), |(_, j)| base[j] + 0.05 * rng.standard_normal());
        let report = quality_control(&x, 2.0).unwrap();
        let oracle = oracle_mean_correlations(&x);
        for (a, b) in report.mean_correlation.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(report.discarded.is_empty());
        assert_eq!(report.kept, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn qc_discards_noise_row() {
        let mut rng = RngStream::new(12);
        let base: Vec<f64> = (0..500).map(|_| rng.standard_normal()).collect();
        let x = Array2::from_shape_fn((10, 500), |(i, j)| {
            if i == 6 {
                rng.standard_normal()
            } else {
                base[j] + 0.1 * rng.standard_normal()
            }
        });
        let oracle = oracle_mean_correlations(&x);
        assert!(oracle[6].abs() < 0.1);
        let report = quality_control(&x, 2.0).unwrap();
        assert_eq!(report.discarded, vec![6]);
        assert_eq!(report.kept.len(), 9);
    }

    #[test]
    fn qc_rejects_constant_row() {
        let x = array![[1.0, 2.0, 3.0], [5.0, 5.0, 5.0], [3.0, 1.0, 2.0]];
        let err = quality_control(&x, 2.0).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn qc_infinite_sigmas_discards_nothing() {
        let mut rng = RngStream::new(14);
        let x = rng.normal_matrix(8, 30);
        assert!(quality_control(&x, f64::INFINITY).unwrap().discarded.is_empty());
    }
}
