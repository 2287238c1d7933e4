use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmsynth::datamodel::{
    load_labeled_dataset, load_matrix, quality_control, QualityReport, save_labels, save_matrix, LabeledDataset, MatrixFormat,
    MultimodalDataset,
};
use mmsynth::generator::{fit_generator, generator_stream, BatchSpec, GeneratorModel};
use mmsynth::ica::{fit_ica, IcaConfig};
use mmsynth::mlp::{
    fine_tune, init_mlp, predict_proba, train_online, transfer_weights, AdagradState, FineTuneOptions, MlpConfig,
    MlpModel, TransferMode,
};
use mmsynth::pipeline::{auc, phantom_generate, run_experiment, ExperimentConfig, PhantomSpec};
use mmsynth::rvgen::{RvGeneratorKind, DEFAULT_BINS};
use mmsynth::{Error, Result, RngStream};

#[derive(Parser)]
#[command(name = "mmsynth", version, about = "ICA-based synthetic data and pre-trained multimodal MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom multimodal dataset with planted group effects
    Phantom(PhantomArgs),
    /// Flag subjects with low mean correlation to the rest
    Qc(QcArgs),
    /// Fit spatial ICA to a subject × feature matrix
    IcaFit(IcaFitArgs),
    /// Fit ICA plus per-class loading generators
    GenFit(GenFitArgs),
    /// Draw synthetic batches from a fitted generator
    GenSample(GenSampleArgs),
    /// Pre-train a unimodal MLP on a single pass of synthetic batches
    Pretrain(PretrainArgs),
    /// Fine-tune an MLP on real labeled data
    Train(TrainArgs),
    /// Score labeled data with a trained MLP and report the AUC
    Evaluate(EvaluateArgs),
    /// Run the cross-validated comparison and write the AUC report
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Bin,
}

impl From<FormatArg> for MatrixFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => MatrixFormat::Csv,
            FormatArg::Bin => MatrixFormat::Bin,
        }
    }
}

impl FormatArg {
    fn ext(self) -> &'static str {
        match self {
            FormatArg::Csv => "csv",
            FormatArg::Bin => "bin",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RvKindArg {
    Rejection,
    Mvn,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransferArg {
    Full,
    InputOnly,
}

impl From<TransferArg> for TransferMode {
    fn from(t: TransferArg) -> Self {
        match t {
            TransferArg::Full => TransferMode::Full,
            TransferArg::InputOnly => TransferMode::InputOnly,
        }
    }
}

fn rv_kind(kind: RvKindArg, bins: usize) -> RvGeneratorKind {
    match kind {
        RvKindArg::Rejection => RvGeneratorKind::Rejection { bins },
        RvKindArg::Mvn => RvGeneratorKind::MultivariateNormal,
    }
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct LabeledInput {
    /// Data matrix; repeat for several modalities
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// CSV with header `subject_id,label`
    #[arg(long)]
    labels: PathBuf,
    /// Subject id per data row, one per line (default s1, s2, ...)
    #[arg(long)]
    ids: Option<PathBuf>,
}

impl LabeledInput {
    fn load(&self) -> Result<MultimodalDataset> {
        let mut modalities = Vec::new();
        for (i, path) in self.data.iter().enumerate() {
            let d = load_labeled_dataset(path, &self.labels, self.ids.as_deref(), MatrixFormat::from_path(path))?;
            modalities.push((format!("m{}", i + 1), d));
        }
        MultimodalDataset::new(modalities)
    }
}

#[derive(Args)]
struct PhantomArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long, default_value_t = 80, value_parser = clap::value_parser!(u64).range(1..))]
    n_per_class: u64,
    /// Features per modality, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = [2000usize, 2000])]
    m: Vec<usize>,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    sources: u64,
    /// Group loading shift per modality, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = [1.0f64, 1.5])]
    effect_sizes: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
}

#[derive(Args)]
struct QcArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    sigmas: f64,
    /// Report JSON (standard output when absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IcaFitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    c: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = IcaConfig::default().max_iter)]
    max_iter: usize,
    #[arg(long, default_value_t = IcaConfig::default().tol)]
    tol: f64,
}

#[derive(Args)]
struct GenFitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    ids: Option<PathBuf>,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    c: u64,
    #[arg(long, value_enum, default_value = "mvn")]
    rv_kind: RvKindArg,
    #[arg(long, default_value_t = DEFAULT_BINS as u64, value_parser = clap::value_parser!(u64).range(1..))]
    bins: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    batches: u64,
    #[arg(long, default_value_t = 10)]
    hc_per_batch: usize,
    #[arg(long, default_value_t = 10)]
    sz_per_batch: usize,
}

impl BatchArgs {
    fn spec(&self) -> BatchSpec {
        BatchSpec {
            hc_per_batch: self.hc_per_batch,
            sz_per_batch: self.sz_per_batch,
            batches: self.batches as usize,
        }
    }
}

#[derive(Args)]
struct GenSampleArgs {
    #[command(flatten)]
    common: Common,
    /// Generator manifest written by gen-fit
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    batch: BatchArgs,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Generator manifest written by gen-fit
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    batch: BatchArgs,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: LabeledInput,
    /// Pre-trained unimodal networks, one per --data, to transfer from
    #[arg(long = "pretrained")]
    pretrained: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    transfer: TransferArg,
    #[arg(long, default_value_t = FineTuneOptions::default().epochs as u64, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = FineTuneOptions::default().eval_every as u64, value_parser = clap::value_parser!(u64).range(1..))]
    eval_every: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    input: LabeledInput,
    /// Per-subject scores as CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON file mirroring the experiment configuration; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the default phantom dataset instead of configured files
    #[arg(long)]
    phantom: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Report CSV
    #[arg(long)]
    out: PathBuf,
    /// Also write the aligned text table here
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    c: Option<u64>,
    /// Restrict the pre-trained methods to one generator kind
    #[arg(long, value_enum)]
    rv_kind: Option<RvKindArg>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    bins: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    batches: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    folds: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    eval_every: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    transfer: Option<TransferArg>,
    #[arg(long, action = clap::ArgAction::Set)]
    transductive_ica: Option<bool>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    parallel_folds: Option<u64>,
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("mmsynth: {}", msg.as_ref());
}

fn write_report(path: &Path, value: &QualityReport) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn check_lr(lr: Option<f64>) -> Result<()> {
    match lr {
        Some(v) if !(v > 0.0 && v.is_finite()) => Err(Error::Validation(format!("--lr must be a positive number, got {v}"))),
        _ => Ok(()),
    }
}

fn phantom(args: &PhantomArgs) -> Result<()> {
    let spec = PhantomSpec {
        n_per_class: args.n_per_class as usize,
        m_per_modality: args.m.clone(),
        true_sources: args.sources as usize,
        effect_sizes: args.effect_sizes.clone(),
        noise_sigma: args.noise,
        ..PhantomSpec::default()
    };
    spec.validate()?;
    let data = phantom_generate(&spec, &mut RngStream::new(args.common.seed))?;
    create_dir(&args.out_dir)?;
    for (name, d) in &data.modalities {
        let path = args.out_dir.join(format!("{name}.{}", args.format.ext()));
        save_matrix(&d.data, &path, args.format.into())?;
        progress(format!("wrote {}", path.display()));
    }
    save_labels(data.subject_ids(), data.labels(), args.out_dir.join("labels.csv"))
}

fn qc(args: &QcArgs) -> Result<()> {
    if !(args.sigmas >= 0.0 && args.sigmas.is_finite()) {
        return Err(Error::Validation("--sigmas must be a non-negative number".into()));
    }
    let x = load_matrix(&args.data, MatrixFormat::from_path(&args.data))?;
    let report = quality_control(&x, args.sigmas)?;
    progress(format!("{} kept, {} discarded", report.kept.len(), report.discarded.len()));
    match &args.out {
        Some(p) => write_report(p, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn ica_fit(args: &IcaFitArgs) -> Result<()> {
    let config = IcaConfig {
        max_iter: args.max_iter,
        tol: args.tol,
    };
    let x = load_matrix(&args.data, MatrixFormat::from_path(&args.data))?;
    let model = fit_ica(&x, args.c as usize, &config, &mut RngStream::new(args.common.seed))?;
    if !model.convergence.converged {
        progress(format!(
            "warning: ICA stopped after {} iterations at tolerance {:e}",
            model.convergence.iterations, model.convergence.final_tolerance
        ));
    }
    model.save(&args.out)
}

fn gen_fit(args: &GenFitArgs) -> Result<()> {
    let path = &args.data;
    let data = load_labeled_dataset(path, &args.labels, args.ids.as_deref(), MatrixFormat::from_path(path))?;
    let kind = rv_kind(args.rv_kind, args.bins as usize);
    let gen = fit_generator(
        &data,
        args.c as usize,
        kind,
        &IcaConfig::default(),
        &mut RngStream::new(args.common.seed),
    )?;
    gen.save(&args.out)
}

fn gen_sample(args: &GenSampleArgs) -> Result<()> {
    let spec = args.batch.spec();
    spec.validate()?;
    let gen = GeneratorModel::load(&args.model)?;
    create_dir(&args.out_dir)?;
    for batch in generator_stream(&gen, spec, RngStream::new(args.common.seed)) {
        let stem = format!("batch_{:05}", batch.batch_index);
        save_matrix(&batch.data, args.out_dir.join(format!("{stem}.{}", args.format.ext())), args.format.into())?;
        let ids: Vec<String> = (0..batch.labels.len()).map(|i| format!("b{}_{}", batch.batch_index, i + 1)).collect();
        save_labels(&ids, &batch.labels, args.out_dir.join(format!("{stem}.labels.csv")))?;
    }
    progress(format!("wrote {} batches", spec.batches));
    Ok(())
}

fn pretrain(args: &PretrainArgs) -> Result<()> {
    check_lr(args.lr)?;
    let spec = args.batch.spec();
    spec.validate()?;
    let gen = GeneratorModel::load(&args.model)?;
    let root = RngStream::new(args.common.seed);
    let mut config = MlpConfig::unimodal(gen.features());
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    let mut model = init_mlp(&config, &mut root.split("init"))?;
    let mut state = AdagradState::new(&model);
    let trace = train_online(
        &mut model,
        generator_stream(&gen, spec, root.split("stream")),
        &mut state,
        &mut root.split("train"),
    )?;
    if let (Some(first), Some(last)) = (trace.losses.first(), trace.losses.last()) {
        progress(format!("{} steps, loss {first:.4} -> {last:.4}", trace.steps()));
    }
    model.save(&args.out, None)
}

fn train(args: &TrainArgs) -> Result<()> {
    check_lr(args.lr)?;
    if !args.pretrained.is_empty() && args.pretrained.len() != args.input.data.len() {
        return Err(Error::Validation(format!(
            "--pretrained given {} times for {} --data inputs",
            args.pretrained.len(),
            args.input.data.len()
        )));
    }
    let data = args.input.load()?;
    let root = RngStream::new(args.common.seed);
    let dims: Vec<usize> = data.modalities.iter().map(|(_, d)| d.data.ncols()).collect();
    let mut config = if dims.len() == 1 {
        MlpConfig::unimodal(dims[0])
    } else {
        MlpConfig::multimodal(&dims)
    };
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    let start = if args.pretrained.is_empty() {
        init_mlp(&config, &mut root.split("init"))?
    } else if dims.len() == 1 {
        let mut m = MlpModel::load(&args.pretrained[0])?;
        m.config.learning_rate = config.learning_rate;
        m
    } else {
        let nets = args
            .pretrained
            .iter()
            .map(|p| MlpModel::load(p))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&MlpModel> = nets.iter().collect();
        transfer_weights(&refs, &config, args.transfer.into(), &mut root.split("transfer"))?
    };
    let options = FineTuneOptions {
        epochs: args.epochs as usize,
        eval_every: args.eval_every as usize,
        ..FineTuneOptions::default()
    };
    let inputs: Vec<&mmsynth::Matrix> = data.modalities.iter().map(|(_, d)| &d.data).collect();
    let (best, history) = fine_tune(&start, &inputs, data.labels(), &options, &mut root.split("fine-tune"))?;
    progress(format!(
        "best checkpoint at epoch {} (validation loss {:.4})",
        history.best.epoch, history.best.validation_loss
    ));
    best.save(&args.out, Some(history.best))
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let model = MlpModel::load(&args.model)?;
    let data = args.input.load()?;
    let inputs: Vec<&mmsynth::Matrix> = data.modalities.iter().map(|(_, d)| &d.data).collect();
    let scores = predict_proba(&model, &inputs)?;
    let value = auc(scores.as_slice().expect("contiguous"), data.labels())?;
    println!("auc,{value}");
    if let Some(out) = &args.out {
        let first: &LabeledDataset = &data.modalities[0].1;
        let mut text = String::from("subject_id,label,score\n");
        for ((id, label), s) in first.subject_ids.iter().zip(&first.labels).zip(scores.iter()) {
            text.push_str(&format!("{id},{label},{s}\n"));
        }
        fs::write(out, text).map_err(|e| io_error(out, e))?;
    }
    Ok(())
}

fn experiment_config(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut config: ExperimentConfig = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                location: format!("line {} column {}", e.line(), e.column()),
                message: e.to_string(),
            })?
        }
        None => ExperimentConfig::default(),
    };
    if args.phantom && config.phantom.is_none() {
        config.phantom = Some(PhantomSpec::default());
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(c) = args.c {
        config.c = c as usize;
    }
    if let Some(kind) = args.rv_kind {
        let bins = args.bins.map_or(DEFAULT_BINS, |b| b as usize);
        config.rv_kinds = vec![rv_kind(kind, bins)];
    } else if let Some(bins) = args.bins {
        for k in &mut config.rv_kinds {
            if let RvGeneratorKind::Rejection { bins: b } = k {
                *b = bins as usize;
            }
        }
    }
    if let Some(b) = args.batches {
        config.batch_spec.batches = b as usize;
    }
    if let Some(f) = args.folds {
        config.folds = f as usize;
    }
    if let Some(e) = args.epochs {
        config.mlp.fine_tune.epochs = e as usize;
    }
    if let Some(e) = args.eval_every {
        config.mlp.fine_tune.eval_every = e as usize;
    }
    check_lr(args.lr)?;
    if let Some(lr) = args.lr {
        config.mlp.learning_rate = lr;
    }
    if let Some(t) = args.transfer {
        config.transfer = t.into();
    }
    if let Some(t) = args.transductive_ica {
        config.transductive_ica = t;
    }
    if let Some(p) = args.parallel_folds {
        config.parallel_folds = p as usize;
    }
    config.validate()?;
    Ok(config)
}

fn experiment(args: &ExperimentArgs) -> Result<()> {
    let config = experiment_config(args)?;
    progress(format!("running {} folds", config.folds));
    let report = run_experiment(&config)?;
    report.write_csv(&args.out)?;
    let table = report.to_table();
    if let Some(p) = &args.table {
        fs::write(p, &table).map_err(|e| io_error(p, e))?;
    }
    print!("{table}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Qc(a) => qc(a),
        Command::IcaFit(a) => ica_fit(a),
        Command::GenFit(a) => gen_fit(a),
        Command::GenSample(a) => gen_sample(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmsynth: error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
