use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::mean_std;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucEntry {
    pub method: String,
    pub modalities: String,
    pub fold: usize,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub method: String,
    pub modalities: String,
    pub mean: f64,
    /// Sample standard deviation over folds.
    pub std: f64,
    pub folds: usize,
}

/// Which subjects each fitted component of a fold touched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub test_rows: Vec<usize>,
    /// Rows whose features entered an ICA decomposition.
    pub ica_rows: Vec<usize>,
    /// Rows whose features entered any other fitted quantity.
    pub feature_rows: Vec<usize>,
    /// Rows whose labels were used.
    pub label_rows: Vec<usize>,
}

impl FoldAudit {
    fn touches(rows: &[usize], test: &[usize]) -> bool {
        rows.iter().any(|r| test.binary_search(r).is_ok())
    }

    /// True when a test subject's label or features reached anything but ICA.
    pub fn leaks_outside_ica(&self) -> bool {
        Self::touches(&self.label_rows, &self.test_rows) || Self::touches(&self.feature_rows, &self.test_rows)
    }

    pub fn ica_saw_test(&self) -> bool {
        Self::touches(&self.ica_rows, &self.test_rows)
    }
}

/// Per-fold AUCs for every (method, modality set), kept in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub methods: Vec<String>,
    pub modality_sets: Vec<String>,
    pub entries: Vec<AucEntry>,
    pub audits: Vec<FoldAudit>,
}

impl ExperimentReport {
    /// Sorts entries by method, then modality set (both in the given
    /// order), then fold, whatever order they arrived in.
    pub fn new(methods: Vec<String>, modality_sets: Vec<String>, mut entries: Vec<AucEntry>, mut audits: Vec<FoldAudit>) -> Self {
        let pos = |list: &[String], key: &str| list.iter().position(|v| v == key).unwrap_or(usize::MAX);
        entries.sort_by(|a, b| {
            (pos(&methods, &a.method), pos(&modality_sets, &a.modalities), a.fold).cmp(&(
                pos(&methods, &b.method),
                pos(&modality_sets, &b.modalities),
                b.fold,
            ))
        });
        audits.sort_by_key(|a| a.fold);
        Self {
            methods,
            modality_sets,
            entries,
            audits,
        }
    }

    pub fn aucs(&self, method: &str, modalities: &str) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.method == method && e.modalities == modalities)
            .map(|e| e.auc)
            .collect()
    }

    pub fn summary(&self) -> Vec<AucSummary> {
        let mut out = Vec::new();
        for method in &self.methods {
            for set in &self.modality_sets {
                let values = self.aucs(method, set);
                if values.is_empty() {
                    continue;
                }
                let (mean, std) = mean_std(&values);
                out.push(AucSummary {
                    method: method.clone(),
                    modalities: set.clone(),
                    mean,
                    std,
                    folds: values.len(),
                });
            }
        }
        out
    }

    pub fn find(&self, method: &str, modalities: &str) -> Option<AucSummary> {
        self.summary()
            .into_iter()
            .find(|s| s.method == method && s.modalities == modalities)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,modalities,fold,auc\n");
        for e in &self.entries {
            writeln!(s, "{},{},{},{}", e.method, e.modalities, e.fold, e.auc).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Methods as rows, modality sets as columns, `mean ± std` cells.
    pub fn to_table(&self) -> String {
        let summary = self.summary();
        let folds = self.entries.iter().map(|e| e.fold).max().map_or(0, |f| f + 1);
        let cell = |m: &str, set: &str| {
            summary
                .iter()
                .find(|s| s.method == m && s.modalities == set)
                .map_or_else(|| "-".to_string(), |s| format!("{:.2} ± {:.2}", s.mean, s.std))
        };
        let mut rows = vec![std::iter::once("Method".to_string())
            .chain(self.modality_sets.iter().cloned())
            .collect::<Vec<_>>()];
        for m in &self.methods {
            rows.push(
                std::iter::once(m.clone())
                    .chain(self.modality_sets.iter().map(|set| cell(m, set)))
                    .collect(),
            );
        }
        let ncol = rows[0].len();
        let widths: Vec<usize> = (0..ncol)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("AUC mean ± sample standard deviation (n-1) over {folds} folds\n");
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| {
                    let pad = w - v.chars().count();
                    if c == 0 {
                        format!("{v}{}", " ".repeat(pad))
                    } else {
                        format!("{}{v}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (ncol - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }
}
