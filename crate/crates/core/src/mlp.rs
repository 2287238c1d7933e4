//! Sigmoid multilayer perceptrons for binary classification: a unimodal
//! network and a multimodal fusion network whose per-modality branches are
//! concatenated before the merged layers.
//!
//! Training minimizes binary cross-entropy plus per-layer L2 on the weights
//! with AdaGrad. Hidden activations use inverted dropout in training mode.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datamodel::{Label, Matrix};
use crate::error::{invalid, Error, Result};
use crate::generator::SyntheticBatch;
use crate::numerics::RngStream;
use crate::persist::{read_json, write_json, BlobStore};

/// Probability clip applied inside the logarithms of the loss.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Topology {
    Unimodal {
        input_dim: usize,
        hidden: Vec<usize>,
    },
    /// `merged_hidden[0]` is the concatenation width and must equal the sum
    /// of the branch output widths; the remaining entries are merged layers.
    Multimodal {
        branch_input_dims: Vec<usize>,
        branch_hidden: Vec<usize>,
        merged_hidden: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub topology: Topology,
    pub dropout_rate: f64,
    pub l2_input: f64,
    pub l2_rest: f64,
    pub learning_rate: f64,
    pub adagrad_epsilon: f64,
}

impl MlpConfig {
    /// Three hidden layers of 20 units.
    pub fn unimodal(input_dim: usize) -> Self {
        Self::with_topology(Topology::Unimodal {
            input_dim,
            hidden: vec![20, 20, 20],
        })
    }

    /// One 20-20-20 branch per input, merged into 40 → 20 → 1 for two branches.
    pub fn multimodal(branch_input_dims: &[usize]) -> Self {
        Self::with_topology(Topology::Multimodal {
            branch_input_dims: branch_input_dims.to_vec(),
            branch_hidden: vec![20, 20, 20],
            merged_hidden: vec![20 * branch_input_dims.len(), 20],
        })
    }

    pub fn with_topology(topology: Topology) -> Self {
        Self {
            topology,
            dropout_rate: 0.5,
            l2_input: 0.1,
            l2_rest: 0.01,
            learning_rate: 0.001,
            adagrad_epsilon: 1e-8,
        }
    }

    /// Layer widths per branch (input first) and of the merged trunk
    /// (concatenation first, output last).
    fn shape(&self) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        let (branches, trunk) = match &self.topology {
            Topology::Unimodal { input_dim, hidden } => {
                let Some(&last) = hidden.last() else {
                    return Err(invalid!("unimodal network needs at least one hidden layer"));
                };
                let mut widths = vec![*input_dim];
                widths.extend(hidden);
                (vec![widths], vec![last, 1])
            }
            Topology::Multimodal {
                branch_input_dims,
                branch_hidden,
                merged_hidden,
            } => {
                if branch_input_dims.is_empty() || branch_hidden.is_empty() || merged_hidden.is_empty() {
                    return Err(invalid!("multimodal network needs branches, branch layers and a merged layer"));
                }
                let concat = branch_hidden.last().unwrap() * branch_input_dims.len();
                if merged_hidden[0] != concat {
                    return Err(invalid!(
                        "merged width {} must equal the sum of branch output widths {concat}",
                        merged_hidden[0]
                    ));
                }
                let branches = branch_input_dims
                    .iter()
                    .map(|&d| std::iter::once(d).chain(branch_hidden.iter().copied()).collect())
                    .collect();
                let mut trunk = merged_hidden.clone();
                trunk.push(1);
                (branches, trunk)
            }
        };
        if branches.iter().flatten().chain(&trunk).any(|&w| w == 0) {
            return Err(invalid!("layer widths must be positive"));
        }
        Ok((branches, trunk))
    }

    pub fn input_dims(&self) -> Vec<usize> {
        match &self.topology {
            Topology::Unimodal { input_dim, .. } => vec![*input_dim],
            Topology::Multimodal { branch_input_dims, .. } => branch_input_dims.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// fan_in × fan_out.
    pub weights: Matrix,
    pub biases: Array1<f64>,
    pub l2_weight: f64,
}

impl LayerWeights {
    fn glorot(fan_in: usize, fan_out: usize, l2_weight: f64, rng: &mut RngStream) -> Self {
        let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weights: Array2::from_shape_simple_fn((fan_in, fan_out), || rng.uniform_range(-r, r)),
            biases: Array1::zeros(fan_out),
            l2_weight,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.dim()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weights: Matrix::zeros(self.weights.dim()),
            biases: Array1::zeros(self.biases.len()),
            l2_weight: self.l2_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub config: MlpConfig,
    /// Per-branch hidden stacks, input layer first. A unimodal net has one branch.
    pub branches: Vec<Vec<LayerWeights>>,
    /// Merged layers after concatenation; the last one is the output unit.
    pub trunk: Vec<LayerWeights>,
}

impl MlpModel {
    /// All layers, branches first (in order), then the trunk.
    pub fn layers(&self) -> impl Iterator<Item = &LayerWeights> {
        self.branches.iter().flatten().chain(self.trunk.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerWeights> {
        self.branches.iter_mut().flatten().chain(self.trunk.iter_mut())
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b[0].weights.nrows()).collect()
    }

    /// Σ l2 · ‖W‖² over all layers.
    pub fn l2_penalty(&self) -> f64 {
        self.layers()
            .map(|l| l.l2_weight * l.weights.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }
}

/// Uniform Glorot initialization with zero biases.
pub fn init_mlp(config: &MlpConfig, rng: &mut RngStream) -> Result<MlpModel> {
    let (branch_widths, trunk_widths) = config.shape()?;
    let branches = branch_widths
        .iter()
        .map(|w| {
            w.windows(2)
                .enumerate()
                .map(|(i, p)| {
                    let l2 = if i == 0 { config.l2_input } else { config.l2_rest };
                    LayerWeights::glorot(p[0], p[1], l2, rng)
                })
                .collect()
        })
        .collect();
    let trunk = trunk_widths
        .windows(2)
        .map(|p| LayerWeights::glorot(p[0], p[1], config.l2_rest, rng))
        .collect();
    Ok(MlpModel {
        config: config.clone(),
        branches,
        trunk,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Activations of one layer: sigmoid output before dropout, the dropout
/// multipliers (0 or 1/keep) if any, and the value passed on.
#[derive(Debug, Clone)]
pub struct LayerActivation {
    pub activation: Matrix,
    pub mask: Option<Matrix>,
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub branches: Vec<Vec<LayerActivation>>,
    pub concat: Matrix,
    pub trunk: Vec<LayerActivation>,
    pub probabilities: Array1<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn layer_forward(
    layer: &LayerWeights,
    input: ArrayView2<f64>,
    dropout: Option<f64>,
    rng: &mut RngStream,
) -> LayerActivation {
    let mut activation = input.dot(&layer.weights);
    activation += &layer.biases;
    activation.mapv_inplace(sigmoid);
    match dropout {
        Some(rate) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let scale = 1.0 / keep;
            let mask = Array2::from_shape_simple_fn(activation.dim(), || {
                if rng.uniform() < keep {
                    scale
                } else {
                    0.0
                }
            });
            let output = &activation * &mask;
            LayerActivation {
                activation,
                mask: Some(mask),
                output,
            }
        }
        _ => LayerActivation {
            output: activation.clone(),
            activation,
            mask: None,
        },
    }
}

fn check_inputs(model: &MlpModel, inputs: &[&Matrix]) -> Result<usize> {
    let dims = model.input_dims();
    if inputs.len() != dims.len() {
        return Err(invalid!("network has {} input branches, got {} inputs", dims.len(), inputs.len()));
    }
    let rows = inputs[0].nrows();
    for (b, (x, &d)) in inputs.iter().zip(&dims).enumerate() {
        if x.ncols() != d {
            return Err(invalid!("branch {b} expects {d} features, got {}", x.ncols()));
        }
        if x.nrows() != rows {
            return Err(invalid!("branch {b} has {} rows, branch 0 has {rows}", x.nrows()));
        }
    }
    Ok(rows)
}

/// Run the network. `rng` drives the dropout masks in training mode only.
pub fn forward(model: &MlpModel, inputs: &[&Matrix], mode: Mode, rng: &mut RngStream) -> Result<ForwardPass> {
    check_inputs(model, inputs)?;
    let dropout = match mode {
        Mode::Train => Some(model.config.dropout_rate),
        Mode::Eval => None,
    };
    let mut branches = Vec::with_capacity(model.branches.len());
    for (stack, x) in model.branches.iter().zip(inputs) {
        let mut acts: Vec<LayerActivation> = Vec::with_capacity(stack.len());
        for layer in stack {
            let input = acts.last().map_or(x.view(), |a| a.output.view());
            let act = layer_forward(layer, input, dropout, rng);
            acts.push(act);
        }
        branches.push(acts);
    }
    let outs: Vec<ArrayView2<f64>> = branches.iter().map(|b| b.last().unwrap().output.view()).collect();
    let concat = concatenate(Axis(1), &outs).expect("equal row counts");
    let mut trunk: Vec<LayerActivation> = Vec::with_capacity(model.trunk.len());
    let last = model.trunk.len() - 1;
    for (i, layer) in model.trunk.iter().enumerate() {
        let input = trunk.last().map_or(concat.view(), |a| a.output.view());
        let act = layer_forward(layer, input, if i == last { None } else { dropout }, rng);
        trunk.push(act);
    }
    let probabilities = trunk[last].output.column(0).to_owned();
    Ok(ForwardPass {
        branches,
        concat,
        trunk,
        probabilities,
    })
}

/// Eval-mode P(SZ) for each row.
pub fn predict_proba(model: &MlpModel, inputs: &[&Matrix]) -> Result<Array1<f64>> {
    // eval mode never touches the rng
    let mut rng = RngStream::new(0);
    Ok(forward(model, inputs, Mode::Eval, &mut rng)?.probabilities)
}

/// Gradients for every layer, in [`MlpModel::layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerWeights>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub data: f64,
    pub l2: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.data + self.l2
    }
}

/// Mean binary cross-entropy with probabilities clipped to
/// `[PROB_CLIP, 1 - PROB_CLIP]`.
pub fn bce(p: &Array1<f64>, y: &Array1<f64>) -> f64 {
    let n = p.len() as f64;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

fn check_targets(y: &Array1<f64>, rows: usize) -> Result<()> {
    if y.len() != rows {
        return Err(invalid!("{} targets for {rows} rows", y.len()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid!("targets must be 0 or 1"));
    }
    if rows == 0 {
        return Err(invalid!("loss over an empty batch"));
    }
    Ok(())
}

/// Loss and backpropagated gradients, through the same dropout masks as
/// the forward pass.
pub fn loss_and_grad(
    model: &MlpModel,
    inputs: &[&Matrix],
    y: &Array1<f64>,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(LossBreakdown, Gradients)> {
    let rows = check_inputs(model, inputs)?;
    check_targets(y, rows)?;
    let pass = forward(model, inputs, mode, rng)?;
    let loss = LossBreakdown {
        data: bce(&pass.probabilities, y),
        l2: model.l2_penalty(),
    };

    let n = rows as f64;
    // dL/dz at the output unit; zero where the clip is active
    let mut delta = Array2::from_shape_fn((rows, 1), |(i, _)| {
        let p = pass.probabilities[i];
        if (PROB_CLIP..=1.0 - PROB_CLIP).contains(&p) {
            (p - y[i]) / n
        } else {
            0.0
        }
    });

    let mut trunk_grads = Vec::with_capacity(model.trunk.len());
    for i in (0..model.trunk.len()).rev() {
        let layer = &model.trunk[i];
        let input = if i == 0 { pass.concat.view() } else { pass.trunk[i - 1].output.view() };
        trunk_grads.push(weight_grad(layer, input, &delta));
        let upstream = delta.dot(&layer.weights.t());
        let below = if i == 0 { None } else { Some(&pass.trunk[i - 1]) };
        delta = match below {
            Some(act) => hidden_delta(upstream, act),
            None => upstream, // gradient w.r.t. the concatenation
        };
    }
    trunk_grads.reverse();

    let mut branch_grads = Vec::with_capacity(model.branches.len());
    let mut offset = 0;
    for (b, stack) in model.branches.iter().enumerate() {
        let acts = &pass.branches[b];
        let width = acts.last().unwrap().output.ncols();
        let mut d = hidden_delta(delta.slice(s![.., offset..offset + width]).to_owned(), acts.last().unwrap());
        offset += width;
        let mut grads = Vec::with_capacity(stack.len());
        for i in (0..stack.len()).rev() {
            let input = if i == 0 { inputs[b].view() } else { acts[i - 1].output.view() };
            grads.push(weight_grad(&stack[i], input, &d));
            if i > 0 {
                d = hidden_delta(d.dot(&stack[i].weights.t()), &acts[i - 1]);
            }
        }
        grads.reverse();
        branch_grads.push(grads);
    }

    let layers = branch_grads.into_iter().flatten().chain(trunk_grads).collect();
    Ok((loss, Gradients { layers }))
}

/// Gradient w.r.t. the pre-activation of a sigmoid layer given the
/// gradient w.r.t. its (post-dropout) output.
fn hidden_delta(mut upstream: Matrix, act: &LayerActivation) -> Matrix {
    if let Some(mask) = &act.mask {
        upstream *= mask;
    }
    ndarray::Zip::from(&mut upstream)
        .and(&act.activation)
        .for_each(|u, &a| *u *= a * (1.0 - a));
    upstream
}

fn weight_grad(layer: &LayerWeights, input: ArrayView2<f64>, delta: &Matrix) -> LayerWeights {
    let mut weights = input.t().dot(delta);
    weights.scaled_add(2.0 * layer.l2_weight, &layer.weights);
    LayerWeights {
        weights,
        biases: delta.sum_axis(Axis(0)),
        l2_weight: layer.l2_weight,
    }
}

/// Per-parameter sums of squared gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub accumulators: Vec<LayerWeights>,
    pub steps: usize,
}

impl AdagradState {
    pub fn new(model: &MlpModel) -> Self {
        Self {
            accumulators: model.layers().map(LayerWeights::zeros_like).collect(),
            steps: 0,
        }
    }
}

/// `acc += g²; θ -= lr · g / (√acc + ε)`.
pub fn adagrad_step(model: &mut MlpModel, state: &mut AdagradState, grads: &Gradients) -> Result<()> {
    let lr = model.config.learning_rate;
    let eps = model.config.adagrad_epsilon;
    let count = model.layers().count();
    if grads.layers.len() != count || state.accumulators.len() != count {
        return Err(invalid!("gradient/state layout does not match the model"));
    }
    for ((layer, acc), g) in model.layers_mut().zip(&mut state.accumulators).zip(&grads.layers) {
        if layer.weights.dim() != g.weights.dim() || layer.biases.len() != g.biases.len() {
            return Err(invalid!("gradient shape does not match layer shape"));
        }
        update(&mut layer.weights, &mut acc.weights, &g.weights, lr, eps);
        update(&mut layer.biases, &mut acc.biases, &g.biases, lr, eps);
    }
    state.steps += 1;
    Ok(())
}

fn update<D: ndarray::Dimension>(
    theta: &mut ndarray::Array<f64, D>,
    acc: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    lr: f64,
    eps: f64,
) {
    ndarray::Zip::from(theta).and(acc).and(g).for_each(|t, a, &g| {
        *a += g * g;
        let denom = a.sqrt() + eps;
        if denom > 0.0 {
            *t -= lr * g / denom;
        }
    });
}

/// Record of an online training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    /// Total loss of each step, in stream order.
    pub losses: Vec<f64>,
    /// Batch index consumed at each step.
    pub batch_indices: Vec<usize>,
}

impl TrainTrace {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }
}

/// One gradient step per synthetic batch, in stream order.
pub fn train_online(
    model: &mut MlpModel,
    stream: impl IntoIterator<Item = SyntheticBatch>,
    state: &mut AdagradState,
    rng: &mut RngStream,
) -> Result<TrainTrace> {
    if model.branches.len() != 1 {
        return Err(invalid!("online training expects a single-branch network"));
    }
    let mut trace = TrainTrace::default();
    for batch in stream {
        let targets = batch.targets();
        let (loss, grads) = loss_and_grad(model, &[&batch.data], &targets, Mode::Train, rng)
            .map_err(|e| invalid!("batch {}: {e}", batch.batch_index))?;
        adagrad_step(model, state, &grads)?;
        trace.losses.push(loss.total());
        trace.batch_indices.push(batch.batch_index);
    }
    Ok(trace)
}

/// Which pre-trained layers seed the fusion branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    #[default]
    Full,
    InputOnly,
}

/// Fresh multimodal network whose branch `i` is seeded from the hidden
/// stack of `unimodal[i]`. Merged layers are newly initialized and the
/// unimodal output layers are dropped.
pub fn transfer_weights(
    unimodal: &[&MlpModel],
    multimodal: &MlpConfig,
    mode: TransferMode,
    rng: &mut RngStream,
) -> Result<MlpModel> {
    let mut model = init_mlp(multimodal, rng)?;
    if unimodal.len() != model.branches.len() {
        return Err(invalid!(
            "{} pre-trained networks for {} branches",
            unimodal.len(),
            model.branches.len()
        ));
    }
    for (b, (branch, source)) in model.branches.iter_mut().zip(unimodal).enumerate() {
        let Some(stack) = source.branches.first().filter(|_| source.branches.len() == 1) else {
            return Err(invalid!("pre-trained network for branch {b} is not unimodal"));
        };
        let count = match mode {
            TransferMode::Full => branch.len(),
            TransferMode::InputOnly => 1,
        };
        if stack.len() < count {
            return Err(invalid!("branch {b}: pre-trained network has {} hidden layers, need {count}", stack.len()));
        }
        for i in 0..count {
            if branch[i].shape() != stack[i].shape() {
                return Err(invalid!(
                    "branch {b} layer {i}: shape {:?} does not match pre-trained {:?}",
                    branch[i].shape(),
                    stack[i].shape()
                ));
            }
            branch[i].weights.assign(&stack[i].weights);
            branch[i].biases.assign(&stack[i].biases);
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneOptions {
    pub val_fraction: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub batch_size: usize,
}

impl Default for FineTuneOptions {
    fn default() -> Self {
        Self {
            val_fraction: 0.1,
            epochs: 1000,
            eval_every: 100,
            batch_size: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneHistory {
    pub checkpoints: Vec<Checkpoint>,
    pub best: Checkpoint,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Stratified split: each class contributes `round(fraction · count)`
/// validation subjects, at least one.
pub fn stratified_split(labels: &[Label], fraction: f64, rng: &mut RngStream) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid!("validation fraction {fraction} outside (0, 1)"));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [Label::Hc, Label::Sz] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(Error::Stratification(format!(
                "class {class} has {} subjects; both splits need one",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Mini-batch AdaGrad on real data with validation checkpointing; returns
/// the checkpoint with the lowest validation data loss.
pub fn fine_tune(
    model: &MlpModel,
    inputs: &[&Matrix],
    labels: &[Label],
    options: &FineTuneOptions,
    rng: &mut RngStream,
) -> Result<(MlpModel, FineTuneHistory)> {
    let rows = check_inputs(model, inputs)?;
    if rows != labels.len() {
        return Err(invalid!("{rows} rows but {} labels", labels.len()));
    }
    if options.epochs == 0 || options.eval_every == 0 || options.batch_size == 0 {
        return Err(invalid!("epochs, eval_every and batch_size must be positive"));
    }
    let (train_idx, val_idx) = stratified_split(labels, options.val_fraction, rng)?;
    let pick = |idx: &[usize]| -> Vec<Matrix> { inputs.iter().map(|x| x.select(Axis(0), idx)).collect() };
    let target = |idx: &[usize]| -> Array1<f64> { idx.iter().map(|&i| labels[i].as_f64()).collect() };
    let train_x = pick(&train_idx);
    let val_x = pick(&val_idx);
    let train_y = target(&train_idx);
    let val_y = target(&val_idx);
    let val_refs: Vec<&Matrix> = val_x.iter().collect();

    let mut current = model.clone();
    let mut state = AdagradState::new(&current);
    let mut best: Option<(Checkpoint, MlpModel)> = None;
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    for epoch in 1..=options.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(options.batch_size) {
            let xb: Vec<Matrix> = train_x.iter().map(|x| x.select(Axis(0), chunk)).collect();
            let refs: Vec<&Matrix> = xb.iter().collect();
            let yb: Array1<f64> = chunk.iter().map(|&i| train_y[i]).collect();
            let (_, grads) = loss_and_grad(&current, &refs, &yb, Mode::Train, rng)?;
            adagrad_step(&mut current, &mut state, &grads)?;
        }
        if epoch % options.eval_every == 0 || epoch == options.epochs {
            let p = predict_proba(&current, &val_refs)?;
            let cp = Checkpoint {
                epoch,
                validation_loss: bce(&p, &val_y),
            };
            checkpoints.push(cp);
            if best.as_ref().is_none_or(|(b, _)| cp.validation_loss < b.validation_loss) {
                best = Some((cp, current.clone()));
            }
        }
    }
    let (best_cp, best_model) = best.expect("at least one checkpoint");
    Ok((
        best_model,
        FineTuneHistory {
            checkpoints,
            best: best_cp,
            train_indices: train_idx,
            val_indices: val_idx,
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    config: MlpConfig,
    epoch: Option<usize>,
    validation_loss: Option<f64>,
    layers: Vec<LayerEntry>,
}

/// One blob per layer: fan_in weight rows followed by the bias row.
#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    file: String,
    l2_weight: f64,
}

fn layer_names(model: &MlpModel) -> Vec<String> {
    let mut names = Vec::new();
    for (b, stack) in model.branches.iter().enumerate() {
        names.extend((0..stack.len()).map(|i| format!("layer_{b}_{i}")));
    }
    names.extend((0..model.trunk.len()).map(|i| format!("layer_merged_{i}")));
    names
}

impl MlpModel {
    pub fn save(&self, path: &Path, checkpoint: Option<Checkpoint>) -> Result<()> {
        let blobs = BlobStore::for_manifest(path)?;
        let mut layers = Vec::new();
        for (name, layer) in layer_names(self).into_iter().zip(self.layers()) {
            let packed = concatenate(Axis(0), &[layer.weights.view(), layer.biases.view().insert_axis(Axis(0))])
                .expect("same width");
            let file = blobs.put(&name, &packed)?;
            layers.push(LayerEntry {
                name,
                file,
                l2_weight: layer.l2_weight,
            });
        }
        write_json(
            path,
            &CheckpointManifest {
                config: self.config.clone(),
                epoch: checkpoint.map(|c| c.epoch),
                validation_loss: checkpoint.map(|c| c.validation_loss),
                layers,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let blobs = BlobStore::for_manifest(path)?;
        let manifest: CheckpointManifest = read_json(path)?;
        // a throwaway init gives the expected layout and shapes
        let mut model = init_mlp(&manifest.config, &mut RngStream::new(0))?;
        let names = layer_names(&model);
        if manifest.layers.len() != names.len() {
            return Err(invalid!("checkpoint has {} layers, topology needs {}", manifest.layers.len(), names.len()));
        }
        for ((layer, entry), name) in model.layers_mut().zip(&manifest.layers).zip(&names) {
            if &entry.name != name {
                return Err(invalid!("checkpoint layer {} where {name} was expected", entry.name));
            }
            let packed = blobs.get(&entry.file)?;
            let (fan_in, fan_out) = layer.shape();
            if packed.dim() != (fan_in + 1, fan_out) {
                return Err(invalid!("{name}: blob is {:?}, expected {:?}", packed.dim(), (fan_in + 1, fan_out)));
            }
            layer.weights.assign(&packed.slice(s![..fan_in, ..]));
            layer.biases.assign(&packed.row(fan_in));
            layer.l2_weight = entry.l2_weight;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn zero_model(config: &MlpConfig) -> MlpModel {
        let mut m = init_mlp(config, &mut RngStream::new(0)).unwrap();
        for l in m.layers_mut() {
            l.weights.fill(0.0);
        }
        m
    }

    #[test]
    fn unimodal_shapes() {
        let m = init_mlp(&MlpConfig::unimodal(100), &mut RngStream::new(1)).unwrap();
        let shapes: Vec<_> = m.layers().map(|l| l.shape()).collect();
        assert_eq!(shapes, vec![(100, 20), (20, 20), (20, 20), (20, 1)]);
        let l2: Vec<_> = m.layers().map(|l| l.l2_weight).collect();
        assert_eq!(l2, vec![0.1, 0.01, 0.01, 0.01]);
    }

    #[test]
    fn multimodal_shapes() {
        let m = init_mlp(&MlpConfig::multimodal(&[100, 100]), &mut RngStream::new(1)).unwrap();
        for b in &m.branches {
            let shapes: Vec<_> = b.iter().map(|l| l.shape()).collect();
            assert_eq!(shapes, vec![(100, 20), (20, 20), (20, 20)]);
            assert_eq!(b[0].l2_weight, 0.1);
        }
        let trunk: Vec<_> = m.trunk.iter().map(|l| l.shape()).collect();
        assert_eq!(trunk, vec![(40, 20), (20, 1)]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = MlpConfig::unimodal(30);
        let a = init_mlp(&cfg, &mut RngStream::new(7)).unwrap();
        let b = init_mlp(&cfg, &mut RngStream::new(7)).unwrap();
        assert_eq!(a, b);
        let r = (6.0f64 / 50.0).sqrt();
        assert!(a.branches[0][0].weights.iter().all(|w| w.abs() <= r));
        assert!(a.layers().all(|l| l.biases.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn bad_topology_rejected() {
        let cfg = MlpConfig::with_topology(Topology::Multimodal {
            branch_input_dims: vec![10, 10],
            branch_hidden: vec![20],
            merged_hidden: vec![30, 20],
        });
        assert!(init_mlp(&cfg, &mut RngStream::new(0)).unwrap_err().is_validation());
        let mut cfg = MlpConfig::unimodal(4);
        cfg.dropout_rate = 1.0;
        assert!(init_mlp(&cfg, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn zero_weights_give_half() {
        let m = zero_model(&MlpConfig::unimodal(5));
        let x = RngStream::new(2).normal_matrix(4, 5);
        assert!(predict_proba(&m, &[&x]).unwrap().iter().all(|&p| p == 0.5));
    }

    fn hand_net() -> MlpModel {
        let mut cfg = MlpConfig::with_topology(Topology::Unimodal {
            input_dim: 2,
            hidden: vec![2],
        });
        cfg.dropout_rate = 0.0;
        let mut m = init_mlp(&cfg, &mut RngStream::new(0)).unwrap();
        for l in m.layers_mut() {
            l.weights.fill(1.0);
        }
        m
    }

    #[test]
    fn hand_computed_forward() {
        let s2 = 1.0 / (1.0 + (-2.0f64).exp());
        let expected = 1.0 / (1.0 + (-2.0 * s2).exp());
        let p = predict_proba(&hand_net(), &[&array![[1.0, 1.0]]]).unwrap();
        assert_abs_diff_eq!(p[0], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.8534, epsilon = 1e-4);
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let mut cfg = MlpConfig::unimodal(6);
        cfg.dropout_rate = 0.0;
        let m = init_mlp(&cfg, &mut RngStream::new(3)).unwrap();
        let x = RngStream::new(4).normal_matrix(5, 6);
        let train = forward(&m, &[&x], Mode::Train, &mut RngStream::new(5)).unwrap();
        let eval = predict_proba(&m, &[&x]).unwrap();
        assert_eq!(train.probabilities, eval);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = init_mlp(&MlpConfig::unimodal(6), &mut RngStream::new(3)).unwrap();
        assert!(predict_proba(&m, &[&Matrix::zeros((2, 5))]).unwrap_err().is_validation());
    }

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        assert!(bce(&array![1.0, 0.0], &array![1.0, 0.0]) <= 1e-6);
    }

    #[test]
    fn zero_net_loss_is_ln2() {
        let m = zero_model(&MlpConfig::unimodal(3));
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.0, 1.0]];
        let (loss, _) = loss_and_grad(&m, &[&x], &array![0.0, 1.0], Mode::Eval, &mut RngStream::new(0)).unwrap();
        assert_abs_diff_eq!(loss.data, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(loss.l2, 0.0);
    }

    #[test]
    fn loss_decomposes() {
        let m = init_mlp(&MlpConfig::unimodal(4), &mut RngStream::new(9)).unwrap();
        let x = RngStream::new(10).normal_matrix(6, 4);
        let y = array![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let (loss, _) = loss_and_grad(&m, &[&x], &y, Mode::Eval, &mut RngStream::new(0)).unwrap();
        let data = bce(&predict_proba(&m, &[&x]).unwrap(), &y);
        let mut l2 = 0.0;
        for l in m.layers() {
            for w in l.weights.iter() {
                l2 += l.l2_weight * w * w;
            }
        }
        assert_abs_diff_eq!(loss.data, data, epsilon = 1e-15);
        assert_abs_diff_eq!(loss.l2, l2, epsilon = 1e-12);
        assert_abs_diff_eq!(loss.total(), data + l2, epsilon = 1e-12);
    }

    #[test]
    fn bad_targets_rejected() {
        let m = init_mlp(&MlpConfig::unimodal(2), &mut RngStream::new(0)).unwrap();
        let x = Matrix::zeros((2, 2));
        assert!(loss_and_grad(&m, &[&x], &array![0.0, 0.5], Mode::Eval, &mut RngStream::new(0))
            .unwrap_err()
            .is_validation());
    }

    #[test]
    fn adagrad_zero_gradient_is_noop() {
        let mut m = init_mlp(&MlpConfig::unimodal(3), &mut RngStream::new(1)).unwrap();
        let before = m.clone();
        let mut state = AdagradState::new(&m);
        let zeros = Gradients {
            layers: m.layers().map(LayerWeights::zeros_like).collect(),
        };
        adagrad_step(&mut m, &mut state, &zeros).unwrap();
        assert_eq!(m, before);
    }

    fn single_weight_model(lr: f64, eps: f64) -> MlpModel {
        let mut cfg = MlpConfig::with_topology(Topology::Unimodal {
            input_dim: 1,
            hidden: vec![1],
        });
        cfg.learning_rate = lr;
        cfg.adagrad_epsilon = eps;
        let mut m = init_mlp(&cfg, &mut RngStream::new(0)).unwrap();
        for l in m.layers_mut() {
            l.weights.fill(0.0);
        }
        m
    }

    #[test]
    fn adagrad_first_step_analytic() {
        let mut m = single_weight_model(0.1, 0.0);
        let mut state = AdagradState::new(&m);
        let mut g = Gradients {
            layers: m.layers().map(LayerWeights::zeros_like).collect(),
        };
        g.layers[0].weights[[0, 0]] = 2.0;
        adagrad_step(&mut m, &mut state, &g).unwrap();
        assert_eq!(state.accumulators[0].weights[[0, 0]], 4.0);
        assert_abs_diff_eq!(m.branches[0][0].weights[[0, 0]], -0.1, epsilon = 1e-15);

        // a second identical gradient moves less
        let before = m.branches[0][0].weights[[0, 0]];
        adagrad_step(&mut m, &mut state, &g).unwrap();
        let second = (m.branches[0][0].weights[[0, 0]] - before).abs();
        assert!(second < 0.1);
        assert_eq!(state.accumulators[0].weights[[0, 0]], 8.0);
    }

    #[test]
    fn online_training_counts_steps() {
        let mut m = init_mlp(&MlpConfig::unimodal(3), &mut RngStream::new(1)).unwrap();
        let before = m.clone();
        let mut state = AdagradState::new(&m);
        let trace = train_online(&mut m, Vec::new(), &mut state, &mut RngStream::new(0)).unwrap();
        assert_eq!(trace.steps(), 0);
        assert_eq!(m, before);

        let batches: Vec<SyntheticBatch> = (0..3)
            .map(|i| SyntheticBatch {
                batch_index: i,
                data: RngStream::new(i as u64).normal_matrix(4, 3),
                labels: vec![Label::Hc, Label::Sz, Label::Hc, Label::Sz],
                loadings: Matrix::zeros((4, 1)),
            })
            .collect();
        let trace = train_online(&mut m, batches, &mut state, &mut RngStream::new(0)).unwrap();
        assert_eq!(trace.steps(), 3);
        assert_eq!(state.steps, 3);
        assert_eq!(trace.batch_indices, vec![0, 1, 2]);
    }

    #[test]
    fn online_training_reports_bad_batch() {
        let mut m = init_mlp(&MlpConfig::unimodal(3), &mut RngStream::new(1)).unwrap();
        let mut state = AdagradState::new(&m);
        let batch = |i, cols| SyntheticBatch {
            batch_index: i,
            data: Matrix::zeros((2, cols)),
            labels: vec![Label::Hc, Label::Sz],
            loadings: Matrix::zeros((2, 1)),
        };
        let err = train_online(&mut m, vec![batch(0, 3), batch(1, 4)], &mut state, &mut RngStream::new(0))
            .unwrap_err()
            .to_string();
        assert!(err.contains("batch 1"), "{err}");
    }

    #[test]
    fn transfer_copies_branches() {
        let a = init_mlp(&MlpConfig::unimodal(5), &mut RngStream::new(1)).unwrap();
        let b = init_mlp(&MlpConfig::unimodal(7), &mut RngStream::new(2)).unwrap();
        let cfg = MlpConfig::multimodal(&[5, 7]);
        let full = transfer_weights(&[&a, &b], &cfg, TransferMode::Full, &mut RngStream::new(3)).unwrap();
        assert_eq!(full.branches[0], a.branches[0]);
        assert_eq!(full.branches[1], b.branches[0]);

        let partial = transfer_weights(&[&a, &b], &cfg, TransferMode::InputOnly, &mut RngStream::new(3)).unwrap();
        assert_eq!(partial.branches[0][0], a.branches[0][0]);
        assert_ne!(partial.branches[0][1], a.branches[0][1]);

        let err = transfer_weights(&[&b, &a], &cfg, TransferMode::Full, &mut RngStream::new(3)).unwrap_err();
        assert!(err.to_string().contains("branch 0 layer 0"), "{err}");
    }

    #[test]
    fn stratified_split_errors_on_tiny_class() {
        let labels = vec![Label::Hc, Label::Hc, Label::Hc, Label::Sz];
        assert!(matches!(
            stratified_split(&labels, 0.1, &mut RngStream::new(0)),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = init_mlp(&MlpConfig::multimodal(&[4, 3]), &mut RngStream::new(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        m.save(&path, Some(Checkpoint { epoch: 100, validation_loss: 0.5 })).unwrap();
        assert!(dir.path().join("net.layer_merged_1.bin").exists());
        assert!(dir.path().join("net.layer_1_2.bin").exists());
        assert_eq!(MlpModel::load(&path).unwrap(), m);
    }
}
