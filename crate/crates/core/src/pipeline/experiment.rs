use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::folds::{make_folds, FoldPlan};
use super::metrics::auc;
use super::phantom::{phantom_generate, PhantomSpec};
use super::report::{AucEntry, ExperimentReport, FoldAudit};
use crate::baselines::{baseline_predict_proba, fit_baseline, BaselineKind};
use crate::datamodel::{load_labeled_dataset, Label, LabeledDataset, Matrix, MatrixFormat, MultimodalDataset};
use crate::error::{invalid, Error, Result};
use crate::generator::{generator_stream, BatchSpec, GeneratorModel};
use crate::ica::{fit_ica, IcaConfig, IcaModel};
use crate::mlp::{
    fine_tune, init_mlp, predict_proba, train_online, transfer_weights, AdagradState, FineTuneOptions, MlpConfig,
    MlpModel, TrainTrace, TransferMode,
};
use crate::numerics::RngStream;
use crate::rvgen::{RvGeneratorKind, DEFAULT_BINS};

pub const METHOD_RAW: &str = "MLP raw";

/// Report label of the pre-trained MLP for a generator kind.
pub fn pretrained_method(kind: &RvGeneratorKind) -> String {
    match kind {
        RvGeneratorKind::MultivariateNormal => "MLP+MVN".into(),
        RvGeneratorKind::Rejection { .. } => "MLP+rejection".into(),
    }
}

/// One modality on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySource {
    pub name: String,
    pub data: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub ids: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<MatrixFormat>,
}

/// Network hyper-parameters shared by every MLP in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpOptions {
    pub dropout_rate: f64,
    pub l2_input: f64,
    pub l2_rest: f64,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
    pub fine_tune: FineTuneOptions,
}

impl Default for MlpOptions {
    fn default() -> Self {
        let base = MlpConfig::unimodal(1);
        Self {
            dropout_rate: base.dropout_rate,
            l2_input: base.l2_input,
            l2_rest: base.l2_rest,
            learning_rate: base.learning_rate,
            adagrad_epsilon: base.adagrad_epsilon,
            fine_tune: FineTuneOptions::default(),
        }
    }
}

impl MlpOptions {
    pub fn apply(&self, mut config: MlpConfig) -> MlpConfig {
        config.dropout_rate = self.dropout_rate;
        config.l2_input = self.l2_input;
        config.l2_rest = self.l2_rest;
        config.learning_rate = self.learning_rate;
        config.adagrad_epsilon = self.adagrad_epsilon;
        config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Data files; ignored when `phantom` is set.
    pub modalities: Vec<ModalitySource>,
    pub phantom: Option<PhantomSpec>,
    pub c: usize,
    pub rv_kinds: Vec<RvGeneratorKind>,
    pub batch_spec: BatchSpec,
    pub ica: IcaConfig,
    pub mlp: MlpOptions,
    pub transfer: TransferMode,
    /// Also train the networks from random initialization.
    pub raw_mlp: bool,
    pub baselines: Vec<BaselineKind>,
    pub folds: usize,
    pub stratified: bool,
    /// Fit ICA once on all subjects (labels unused) instead of per fold.
    pub transductive_ica: bool,
    /// Standardize MLP inputs with training-fold feature statistics.
    pub standardize: bool,
    pub seed: u64,
    pub parallel_folds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            modalities: Vec::new(),
            phantom: None,
            c: 20,
            rv_kinds: vec![
                RvGeneratorKind::MultivariateNormal,
                RvGeneratorKind::Rejection { bins: DEFAULT_BINS },
            ],
            batch_spec: BatchSpec::default(),
            ica: IcaConfig::default(),
            mlp: MlpOptions::default(),
            transfer: TransferMode::Full,
            raw_mlp: true,
            baselines: BaselineKind::defaults().to_vec(),
            folds: 8,
            stratified: true,
            transductive_ica: true,
            standardize: true,
            seed: 0,
            parallel_folds: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 {
            return Err(invalid!("c must be >= 1"));
        }
        if self.folds < 2 {
            return Err(invalid!("folds must be >= 2"));
        }
        if self.parallel_folds == 0 {
            return Err(invalid!("parallel_folds must be >= 1"));
        }
        self.batch_spec.validate()?;
        for kind in &self.rv_kinds {
            kind.validate()?;
        }
        let f = &self.mlp.fine_tune;
        if f.epochs == 0 || f.eval_every == 0 || f.batch_size == 0 {
            return Err(invalid!("epochs, eval_every and batch_size must be >= 1"));
        }
        if !(f.val_fraction > 0.0 && f.val_fraction < 1.0) {
            return Err(invalid!("validation fraction {} outside (0, 1)", f.val_fraction));
        }
        if !(self.mlp.learning_rate > 0.0) {
            return Err(invalid!("learning rate must be > 0"));
        }
        match &self.phantom {
            Some(p) => p.validate()?,
            None => {
                if self.modalities.is_empty() {
                    return Err(invalid!("no modalities configured"));
                }
                for m in &self.modalities {
                    for p in std::iter::once(&m.data).chain([&m.labels]).chain(&m.ids) {
                        if !p.exists() {
                            return Err(invalid!("modality {}: {} does not exist", m.name, p.display()));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// The configured dataset: the phantom (drawn from the `phantom` child of
/// the seed) or the modality files.
pub fn load_experiment_data(config: &ExperimentConfig) -> Result<MultimodalDataset> {
    if let Some(spec) = &config.phantom {
        return phantom_generate(spec, &mut RngStream::new(config.seed).split("phantom"));
    }
    let mut modalities = Vec::new();
    for m in &config.modalities {
        let format = m.format.unwrap_or_else(|| MatrixFormat::from_path(&m.data));
        modalities.push((m.name.clone(), load_labeled_dataset(&m.data, &m.labels, m.ids.as_deref(), format)?));
    }
    MultimodalDataset::new(modalities)
}

/// Per-feature affine map fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn identity(m: usize) -> Self {
        Self {
            mean: Array1::zeros(m),
            scale: Array1::ones(m),
        }
    }

    /// Population standard deviation; constant features keep scale 1.
    pub fn fit(x: &Matrix) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        (x - &self.mean) / &self.scale
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: MlpModel,
    pub trace: TrainTrace,
    pub generator: GeneratorModel,
}

/// Fit the generator on the training subjects and pre-train a unimodal
/// network on a single pass over its synthetic stream.
///
/// With `ica` given (fitted beforehand on any rows, labels unused) only the
/// class models are fitted here, from the mixing rows `train`. Otherwise
/// ICA is fitted on the training rows alone.
pub fn run_unimodal_pretraining(
    data: &LabeledDataset,
    train: &[usize],
    ica: Option<&Arc<IcaModel>>,
    kind: RvGeneratorKind,
    scaler: &Standardizer,
    config: &ExperimentConfig,
    rng: &RngStream,
) -> Result<Pretrained> {
    let train_labels: Vec<Label> = train.iter().map(|&i| data.labels[i]).collect();
    let generator = match ica {
        Some(ica) => GeneratorModel::from_ica(Arc::clone(ica), train, &train_labels, kind)?,
        None => {
            let x = data.data.select(Axis(0), train);
            let ica = fit_ica(&x, config.c, &config.ica, &mut rng.split("ica"))?;
            let rows: Vec<usize> = (0..train.len()).collect();
            GeneratorModel::from_ica(Arc::new(ica), &rows, &train_labels, kind)?
        }
    };
    let net = config.mlp.apply(MlpConfig::unimodal(data.data.ncols()));
    let mut model = init_mlp(&net, &mut rng.split("init"))?;
    let mut state = AdagradState::new(&model);
    let stream = generator_stream(&generator, config.batch_spec, rng.split("stream")).map(|mut b| {
        b.data = scaler.apply(&b.data);
        b
    });
    let trace = train_online(&mut model, stream, &mut state, &mut rng.split("train"))?;
    Ok(Pretrained {
        model,
        trace,
        generator,
    })
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    data: &'a MultimodalDataset,
    plan: &'a FoldPlan,
    ica: Option<Vec<Arc<IcaModel>>>,
    root: RngStream,
}

fn stage(fold: usize, name: impl Into<String>) -> impl FnOnce(Error) -> Error {
    let name = name.into();
    move |e| Error::Stage {
        fold,
        stage: name,
        source: Box::new(e),
    }
}

fn modality_set_name(names: &[&str]) -> String {
    names.join("+")
}

fn run_fold(ctx: &Context, fold: usize) -> Result<(Vec<AucEntry>, FoldAudit)> {
    let config = ctx.config;
    let rng = ctx.root.split(&format!("fold/{fold}"));
    let train = ctx.plan.train_indices(fold);
    let test = ctx.plan.test_indices(fold);
    let labels = ctx.data.labels();
    let train_labels: Vec<Label> = train.iter().map(|&i| labels[i]).collect();
    let test_labels: Vec<Label> = test.iter().map(|&i| labels[i]).collect();
    let names = ctx.data.names();
    let both = modality_set_name(&names);
    let multi = names.len() > 1;
    let mut entries = Vec::new();
    let mut push = |method: String, set: &str, value: f64| {
        entries.push(AucEntry {
            method,
            modalities: set.to_string(),
            fold,
            auc: value,
        })
    };

    let scalers: Vec<Standardizer> = ctx
        .data
        .modalities
        .iter()
        .map(|(_, d)| {
            if config.standardize {
                Standardizer::fit(&d.data.select(Axis(0), &train))
            } else {
                Standardizer::identity(d.data.ncols())
            }
        })
        .collect();
    let scaled = |rows: &[usize]| -> Vec<Matrix> {
        ctx.data
            .modalities
            .iter()
            .zip(&scalers)
            .map(|((_, d), s)| s.apply(&d.data.select(Axis(0), rows)))
            .collect()
    };
    let train_x = scaled(&train);
    let test_x = scaled(&test);
    let dims: Vec<usize> = train_x.iter().map(|x| x.ncols()).collect();
    let multi_config = config.mlp.apply(MlpConfig::multimodal(&dims));

    for kind in &config.rv_kinds {
        let method = pretrained_method(kind);
        let mut pretrained = Vec::new();
        for (i, (name, d)) in ctx.data.modalities.iter().enumerate() {
            let tag = format!("pretrain {name} {}", kind.tag());
            let r = rng.split(&format!("pretrain/{}/{i}", kind.tag()));
            let ica = ctx.ica.as_ref().map(|v| &v[i]);
            let p = run_unimodal_pretraining(d, &train, ica, *kind, &scalers[i], config, &r).map_err(stage(fold, &tag))?;
            let scores = predict_proba(&p.model, &[&test_x[i]]).map_err(stage(fold, &tag))?;
            push(method.clone(), name, auc(scores.as_slice().unwrap(), &test_labels).map_err(stage(fold, &tag))?);
            pretrained.push(p.model);
        }
        if multi {
            let tag = format!("fine-tune {both} {}", kind.tag());
            let r = rng.split(&format!("fusion/{}", kind.tag()));
            let refs: Vec<&MlpModel> = pretrained.iter().collect();
            let start = transfer_weights(&refs, &multi_config, config.transfer, &mut r.split("transfer"))
                .map_err(stage(fold, &tag))?;
            let scores = tuned_scores(&start, &train_x, &train_labels, &test_x, config, &r).map_err(stage(fold, &tag))?;
            push(method.clone(), &both, auc(scores.as_slice().unwrap(), &test_labels).map_err(stage(fold, &tag))?);
        }
    }

    if config.raw_mlp {
        for (i, name) in names.iter().enumerate() {
            let tag = format!("raw {name}");
            let r = rng.split(&format!("raw/{i}"));
            let net = config.mlp.apply(MlpConfig::unimodal(dims[i]));
            let start = init_mlp(&net, &mut r.split("init")).map_err(stage(fold, &tag))?;
            let scores = tuned_scores(&start, &train_x[i..=i], &train_labels, &test_x[i..=i], config, &r)
                .map_err(stage(fold, &tag))?;
            push(METHOD_RAW.into(), name, auc(scores.as_slice().unwrap(), &test_labels).map_err(stage(fold, &tag))?);
        }
        if multi {
            let tag = format!("raw {both}");
            let r = rng.split("raw/fusion");
            let start = init_mlp(&multi_config, &mut r.split("init")).map_err(stage(fold, &tag))?;
            let scores = tuned_scores(&start, &train_x, &train_labels, &test_x, config, &r).map_err(stage(fold, &tag))?;
            push(METHOD_RAW.into(), &both, auc(scores.as_slice().unwrap(), &test_labels).map_err(stage(fold, &tag))?);
        }
    }

    if !config.baselines.is_empty() {
        // unimodal baselines see raw features; the concatenation is standardized
        let mut views: Vec<(String, Matrix, Matrix)> = ctx
            .data
            .modalities
            .iter()
            .map(|(name, d)| {
                (
                    name.clone(),
                    d.data.select(Axis(0), &train),
                    d.data.select(Axis(0), &test),
                )
            })
            .collect();
        if multi {
            let z = |xs: &[Matrix]| {
                let v: Vec<_> = xs.iter().map(|x| x.view()).collect();
                ndarray::concatenate(Axis(1), &v).expect("same rows")
            };
            let tr = z(&train_x);
            let te = z(&test_x);
            let (tr, te) = if config.standardize {
                (tr, te)
            } else {
                let s = Standardizer::fit(&tr);
                (s.apply(&tr), s.apply(&te))
            };
            views.push((both.clone(), tr, te));
        }
        for kind in &config.baselines {
            for (set, tr, te) in &views {
                let tag = format!("{} {set}", kind.name());
                let model = fit_baseline(kind, tr, &train_labels).map_err(stage(fold, &tag))?;
                let scores = baseline_predict_proba(&model, te).map_err(stage(fold, &tag))?;
                push(kind.name().into(), set, auc(scores.as_slice().unwrap(), &test_labels).map_err(stage(fold, &tag))?);
            }
        }
    }

    let ica_rows = if ctx.ica.is_some() {
        (0..ctx.data.len()).collect()
    } else if config.rv_kinds.is_empty() {
        Vec::new()
    } else {
        train.clone()
    };
    let audit = FoldAudit {
        fold,
        test_rows: test,
        ica_rows,
        feature_rows: train.clone(),
        label_rows: train,
    };
    Ok((entries, audit))
}

fn tuned_scores(
    start: &MlpModel,
    train_x: &[Matrix],
    train_labels: &[Label],
    test_x: &[Matrix],
    config: &ExperimentConfig,
    rng: &RngStream,
) -> Result<Array1<f64>> {
    let refs: Vec<&Matrix> = train_x.iter().collect();
    let (best, _) = fine_tune(start, &refs, train_labels, &config.mlp.fine_tune, &mut rng.split("fine-tune"))?;
    let test_refs: Vec<&Matrix> = test_x.iter().collect();
    predict_proba(&best, &test_refs)
}

/// Method rows in report order for a configuration.
pub fn report_methods(config: &ExperimentConfig) -> Vec<String> {
    let mut methods: Vec<String> = config.rv_kinds.iter().map(pretrained_method).collect();
    if config.raw_mlp {
        methods.push(METHOD_RAW.into());
    }
    methods.extend(config.baselines.iter().map(|b| b.name().to_string()));
    methods.dedup();
    methods
}

/// Cross-validated comparison of every configured method on every
/// modality and on their combination.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let data = load_experiment_data(config)?;
    run_experiment_on(config, &data)
}

/// As [`run_experiment`] on an already loaded dataset.
pub fn run_experiment_on(config: &ExperimentConfig, data: &MultimodalDataset) -> Result<ExperimentReport> {
    config.validate()?;
    let root = RngStream::new(config.seed);
    let plan = make_folds(data.labels(), config.folds, config.stratified, &mut root.split("folds"))?;
    let ica = if config.transductive_ica && !config.rv_kinds.is_empty() {
        let mut models = Vec::new();
        for (i, (name, d)) in data.modalities.iter().enumerate() {
            let model = fit_ica(&d.data, config.c, &config.ica, &mut root.split(&format!("ica/{i}")))
                .map_err(|e| invalid!("ICA on {name}: {e}"))?;
            models.push(Arc::new(model));
        }
        Some(models)
    } else {
        None
    };
    let ctx = Context {
        config,
        data,
        plan: &plan,
        ica,
        root,
    };
    let results: Vec<Result<(Vec<AucEntry>, FoldAudit)>> = if config.parallel_folds > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.parallel_folds)
            .build()
            .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?;
        pool.install(|| (0..plan.k).into_par_iter().map(|f| run_fold(&ctx, f)).collect())
    } else {
        (0..plan.k).map(|f| run_fold(&ctx, f)).collect()
    };
    let mut entries = Vec::new();
    let mut audits = Vec::new();
    for r in results {
        let (e, a) = r?;
        entries.extend(e);
        audits.push(a);
    }
    let names = data.names();
    let mut sets: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    if names.len() > 1 {
        sets.push(modality_set_name(&names));
    }
    Ok(ExperimentReport::new(report_methods(config), sets, entries, audits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            phantom: Some(PhantomSpec {
                n_per_class: 12,
                m_per_modality: vec![40, 30],
                true_sources: 4,
                effect_sizes: vec![2.0, 2.0],
                noise_sigma: 0.5,
                smoothing: 3,
            }),
            c: 5,
            folds: 3,
            seed: 11,
            ..ExperimentConfig::default()
        };
        c.batch_spec.batches = 30;
        c.mlp.fine_tune.epochs = 6;
        c.mlp.fine_tune.eval_every = 2;
        c
    }

    #[test]
    fn full_grid_of_entries() {
        let report = run_experiment(&tiny()).unwrap();
        assert_eq!(
            report.methods,
            ["MLP+MVN", "MLP+rejection", "MLP raw", "Logistic Regression", "Naive Bayes", "LDA", "Nearest Neighbors"]
        );
        assert_eq!(report.modality_sets, ["A", "B", "A+B"]);
        assert_eq!(report.entries.len(), 7 * 3 * 3);
        for s in report.summary() {
            assert_eq!(s.folds, 3);
        }
        assert!(report.entries.iter().all(|e| (0.0..=1.0).contains(&e.auc)));
        for a in &report.audits {
            assert!(!a.leaks_outside_ica());
            assert!(a.ica_saw_test());
        }
    }

    #[test]
    fn deterministic_and_parallel_safe() {
        let mut c = tiny();
        c.rv_kinds = vec![RvGeneratorKind::MultivariateNormal];
        c.baselines = vec![BaselineKind::GaussianNb];
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        c.parallel_folds = 3;
        let p = run_experiment(&c).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_csv(), p.to_csv());
    }

    #[test]
    fn inductive_ica_never_sees_test_rows() {
        let mut c = tiny();
        c.transductive_ica = false;
        c.rv_kinds = vec![RvGeneratorKind::MultivariateNormal];
        c.raw_mlp = false;
        c.baselines.clear();
        let report = run_experiment(&c).unwrap();
        for a in &report.audits {
            assert!(!a.ica_saw_test());
            assert!(!a.leaks_outside_ica());
        }
    }

    #[test]
    fn stage_failure_names_fold() {
        let mut c = tiny();
        c.transductive_ica = false;
        c.c = 16; // 16 training rows per fold: too many components
        c.raw_mlp = false;
        c.baselines.clear();
        match run_experiment(&c).unwrap_err() {
            Error::Stage { fold, stage, .. } => {
                assert_eq!(fold, 0);
                assert!(stage.starts_with("pretrain A"), "{stage}");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn pretraining_step_count_and_determinism() {
        let c = ExperimentConfig {
            batch_spec: BatchSpec {
                hc_per_batch: 10,
                sz_per_batch: 10,
                batches: 100,
            },
            ..tiny()
        };
        let data = load_experiment_data(&c).unwrap();
        let d = &data.modalities[0].1;
        let train: Vec<usize> = (0..d.len()).collect();
        let scaler = Standardizer::fit(&d.data);
        let run = || {
            run_unimodal_pretraining(d, &train, None, RvGeneratorKind::MultivariateNormal, &scaler, &c, &RngStream::new(4))
                .unwrap()
        };
        let a = run();
        assert_eq!(a.trace.steps(), 100);
        assert_eq!(a.model, run().model);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.c = 0;
        assert!(c.validate().unwrap_err().is_validation());
        let c = ExperimentConfig {
            modalities: vec![ModalitySource {
                name: "A".into(),
                data: "/nonexistent/a.csv".into(),
                labels: "/nonexistent/l.csv".into(),
                ids: None,
                format: None,
            }],
            ..ExperimentConfig::default()
        };
        assert!(c.validate().unwrap_err().is_validation());
    }

    #[test]
    fn config_json_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"folds": 4, "phantom": {}}"#).unwrap();
        assert_eq!(c.folds, 4);
        assert_eq!(c.c, 20);
        assert_eq!(c.phantom, Some(PhantomSpec::default()));
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
