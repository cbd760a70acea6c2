//! Multilayer perceptrons: construction, inference, gradients, SGD training,
//! and a binary on-disk format.
//!
//! A [`Model`] owns its parameters as plain tensors. Every numeric query —
//! predictions, losses, input gradients, parameter gradients — runs through
//! the reverse-mode [`Graph`], so there is exactly one implementation of the
//! forward math to trust. Training rebinds parameters into a single cached
//! graph per model, which keeps the hot loop allocation-light.

use std::io::Read;
use std::path::Path;

use crate::data::{LabeledDataset, Target, Targets};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::SplitMix64;
use crate::scalar::{pairwise_mean, Scalar};
use crate::tensor::Tensor;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// max(x, 0). Piecewise linear; has kinks.
    Relu,
    /// Logistic function. Smooth everywhere.
    Sigmoid,
}

/// What the output layer means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Single scalar output trained with squared error.
    Regression,
    /// Logit vector trained with cross-entropy over its softmax.
    Classification,
}

/// Architecture of a multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    /// Input dimensionality.
    pub input_dim: usize,
    /// Hidden layer widths, in order. May be empty for a linear model.
    pub hidden: Vec<usize>,
    /// Output dimensionality: 1 for regression, class count for classification.
    pub output_dim: usize,
    /// Hidden-layer nonlinearity.
    pub activation: Activation,
    /// Output head.
    pub head: Head,
}

impl MlpSpec {
    /// Checks dimensional sanity.
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be at least 1".into()));
        }
        if let Some(l) = self.hidden.iter().position(|&w| w == 0) {
            return Err(Error::InvalidConfig(format!(
                "hidden layer {l} has width 0"
            )));
        }
        match self.head {
            Head::Regression if self.output_dim != 1 => Err(Error::InvalidConfig(format!(
                "regression head requires output_dim 1, got {}",
                self.output_dim
            ))),
            Head::Classification if self.output_dim < 2 => Err(Error::InvalidConfig(format!(
                "classification head requires output_dim >= 2, got {}",
                self.output_dim
            ))),
            _ => Ok(()),
        }
    }

    /// `(fan_in, fan_out)` pairs for every weight layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    /// Total parameter count (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(fi, fo)| fi * fo + fo).sum()
    }
}

/// A multilayer perceptron with concrete parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S: Scalar> {
    spec: MlpSpec,
    /// Weight matrices, each shaped `[fan_out, fan_in]`.
    weights: Vec<Tensor<S>>,
    /// Bias vectors, each shaped `[fan_out]`.
    biases: Vec<Tensor<S>>,
}

/// Cached computation graph for one architecture.
///
/// Leaves exist for the input, every parameter tensor, and (for regression)
/// the target; binding fresh tensors re-runs the same structure.
struct Tape<S: Scalar> {
    graph: Graph<S>,
    input: NodeId,
    weights: Vec<NodeId>,
    biases: Vec<NodeId>,
    /// Pre-activation node per hidden layer, for kink detection.
    preacts: Vec<NodeId>,
    /// Raw model output: `[1]` for regression, logits `[C]` for classification.
    output: NodeId,
    /// Classification: the log-softmax vector node.
    log_probs: Option<NodeId>,
    /// Classification: scalar node `log p_c` per class.
    log_prob_picks: Vec<NodeId>,
    /// Classification: scalar node `-log p_c` per class (the loss for label c).
    class_losses: Vec<NodeId>,
    /// Regression: target leaf, shaped `[1]`.
    target: Option<NodeId>,
    /// Regression: scalar node `(f(x) - y)^2`.
    reg_loss: Option<NodeId>,
}

fn build_tape<S: Scalar>(spec: &MlpSpec) -> Tape<S> {
    let mut g: Graph<S> = Graph::new();
    let input = g.leaf("input");
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut preacts = Vec::new();

    // Node ids come straight from this graph, so the op constructors cannot
    // fail; unwrap via expect to keep that invariant loud.
    let ok = "freshly created node ids are valid";
    let mut h = input;
    let n_layers = spec.hidden.len() + 1;
    for l in 0..n_layers {
        let w = g.leaf(format!("weight[{l}]"));
        let b = g.leaf(format!("bias[{l}]"));
        let wx = g.matvec(w, h).expect(ok);
        let pre = g.add(wx, b).expect(ok);
        weights.push(w);
        biases.push(b);
        if l + 1 < n_layers {
            preacts.push(pre);
            h = match spec.activation {
                Activation::Relu => g.relu(pre).expect(ok),
                Activation::Sigmoid => g.sigmoid(pre).expect(ok),
            };
        } else {
            h = pre;
        }
    }
    let output = h;

    let mut tape = Tape {
        graph: g,
        input,
        weights,
        biases,
        preacts,
        output,
        log_probs: None,
        log_prob_picks: Vec::new(),
        class_losses: Vec::new(),
        target: None,
        reg_loss: None,
    };

    match spec.head {
        Head::Regression => {
            let target = tape.graph.leaf("target");
            let diff = tape.graph.sub(output, target).expect(ok);
            let sq = tape.graph.square(diff).expect(ok);
            tape.reg_loss = Some(tape.graph.sum(sq).expect(ok));
            tape.target = Some(target);
        }
        Head::Classification => {
            let ls = tape.graph.log_softmax(output).expect(ok);
            for c in 0..spec.output_dim {
                let pick = tape.graph.pick(ls, c).expect(ok);
                tape.log_prob_picks.push(pick);
                tape.class_losses.push(tape.graph.neg(pick).expect(ok));
            }
            tape.log_probs = Some(ls);
        }
    }
    tape
}

impl<S: Scalar> Tape<S> {
    /// Runs forward with the model's current parameters bound in.
    fn forward(&mut self, model: &Model<S>, x: &[S], target_value: Option<S>) -> Result<()> {
        let mut bindings = Vec::with_capacity(2 * model.weights.len() + 2);
        bindings.push((self.input, Tensor::vector(x.to_vec())));
        for (id, w) in self.weights.iter().zip(&model.weights) {
            bindings.push((*id, w.clone()));
        }
        for (id, b) in self.biases.iter().zip(&model.biases) {
            bindings.push((*id, b.clone()));
        }
        if let Some(t) = self.target {
            // Regression tapes always need the target bound; prediction-only
            // callers bind zero, which the loss nodes simply ignore.
            bindings.push((
                t,
                Tensor::vector(vec![target_value.unwrap_or_else(S::zero)]),
            ));
        }
        self.graph.forward(&bindings)
    }

    /// Scalar loss node for a target, checking head compatibility.
    fn loss_node(&self, spec: &MlpSpec, target: &Target<S>) -> Result<NodeId> {
        match (spec.head, target) {
            (Head::Regression, Target::Value(_)) => Ok(self.reg_loss.expect("regression tape")),
            (Head::Classification, Target::Label(c)) => {
                if *c >= spec.output_dim {
                    return Err(Error::InvalidConfig(format!(
                        "label {c} out of range for {} classes",
                        spec.output_dim
                    )));
                }
                Ok(self.class_losses[*c])
            }
            (Head::Regression, Target::Label(_)) => Err(Error::InvalidConfig(
                "regression model given a class label target".into(),
            )),
            (Head::Classification, Target::Value(_)) => Err(Error::InvalidConfig(
                "classification model given a real-valued target".into(),
            )),
        }
    }
}

impl<S: Scalar> Model<S> {
    /// Assembles a model from explicit parameter tensors, validating shapes.
    pub fn from_parts(
        spec: MlpSpec,
        weights: Vec<Tensor<S>>,
        biases: Vec<Tensor<S>>,
    ) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if weights.len() != dims.len() || biases.len() != dims.len() {
            return Err(Error::InvalidConfig(format!(
                "architecture has {} layers but {} weight and {} bias tensors were given",
                dims.len(),
                weights.len(),
                biases.len()
            )));
        }
        for (l, ((fan_in, fan_out), (w, b))) in
            dims.iter().zip(weights.iter().zip(&biases)).enumerate()
        {
            if w.shape() != [*fan_out, *fan_in] {
                return Err(Error::InvalidConfig(format!(
                    "layer {l} weights have shape {:?}, expected [{fan_out}, {fan_in}]",
                    w.shape()
                )));
            }
            if b.shape() != [*fan_out] {
                return Err(Error::InvalidConfig(format!(
                    "layer {l} bias has shape {:?}, expected [{fan_out}]",
                    b.shape()
                )));
            }
        }
        Ok(Model {
            spec,
            weights,
            biases,
        })
    }

    /// The architecture.
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Weight tensors, input layer first.
    pub fn weights(&self) -> &[Tensor<S>] {
        &self.weights
    }

    /// Bias tensors, input layer first.
    pub fn biases(&self) -> &[Tensor<S>] {
        &self.biases
    }

    fn check_input(&self, x: &[S], op: &str) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::shape(
                op,
                format!(
                    "model expects input dimension {}, got {}",
                    self.spec.input_dim,
                    x.len()
                ),
            ));
        }
        Ok(())
    }

    /// Raw model output: the prediction `[1]` for regression, logits for
    /// classification.
    pub fn predict(&self, x: &[S]) -> Result<Vec<S>> {
        self.check_input(x, "predict")?;
        let mut tape = build_tape(&self.spec);
        tape.forward(self, x, None)?;
        Ok(tape.graph.value(tape.output)?.values().to_vec())
    }

    /// Scalar prediction of a regression model.
    pub fn predict_scalar(&self, x: &[S]) -> Result<S> {
        if self.spec.head != Head::Regression {
            return Err(Error::InvalidConfig(
                "predict_scalar requires a regression model".into(),
            ));
        }
        Ok(self.predict(x)?[0])
    }

    /// Log class probabilities of a classification model.
    pub fn log_probs(&self, x: &[S]) -> Result<Vec<S>> {
        if self.spec.head != Head::Classification {
            return Err(Error::InvalidConfig(
                "log_probs requires a classification model".into(),
            ));
        }
        self.check_input(x, "log_probs")?;
        let mut tape = build_tape(&self.spec);
        tape.forward(self, x, None)?;
        Ok(tape
            .graph
            .value(tape.log_probs.expect("classification tape"))?
            .values()
            .to_vec())
    }

    /// Class probabilities (softmax of the logits).
    pub fn probs(&self, x: &[S]) -> Result<Vec<S>> {
        Ok(self.log_probs(x)?.into_iter().map(|l| l.exp()).collect())
    }

    /// Per-example loss: squared error for regression, cross-entropy for
    /// classification.
    pub fn loss(&self, x: &[S], target: &Target<S>) -> Result<S> {
        self.check_input(x, "loss")?;
        let mut tape = build_tape(&self.spec);
        let node = tape.loss_node(&self.spec, target)?;
        let y = match target {
            Target::Value(v) => Some(*v),
            Target::Label(_) => None,
        };
        tape.forward(self, x, y)?;
        tape.graph.value(node)?.item()
    }

    /// Gradient of the per-example loss with respect to the input.
    pub fn input_gradient(&self, x: &[S], target: &Target<S>) -> Result<Vec<S>> {
        self.check_input(x, "input_gradient")?;
        let mut tape = build_tape(&self.spec);
        let node = tape.loss_node(&self.spec, target)?;
        let y = match target {
            Target::Value(v) => Some(*v),
            Target::Label(_) => None,
        };
        tape.forward(self, x, y)?;
        tape.graph.backward(node)?;
        Ok(tape.graph.gradient(tape.input)?.into_values())
    }

    /// Gradient of the scalar prediction with respect to the input
    /// (regression models only).
    pub fn output_gradient(&self, x: &[S]) -> Result<Vec<S>> {
        if self.spec.head != Head::Regression {
            return Err(Error::InvalidConfig(
                "output_gradient requires a regression model".into(),
            ));
        }
        self.check_input(x, "output_gradient")?;
        let mut tape = build_tape(&self.spec);
        tape.forward(self, x, None)?;
        tape.graph.backward(tape.output)?;
        Ok(tape.graph.gradient(tape.input)?.into_values())
    }

    /// Gradient of `log p(class | x)` with respect to the input
    /// (classification models only).
    pub fn logprob_gradient(&self, x: &[S], class: usize) -> Result<Vec<S>> {
        if self.spec.head != Head::Classification {
            return Err(Error::InvalidConfig(
                "logprob_gradient requires a classification model".into(),
            ));
        }
        if class >= self.spec.output_dim {
            return Err(Error::InvalidConfig(format!(
                "class {class} out of range for {} classes",
                self.spec.output_dim
            )));
        }
        self.check_input(x, "logprob_gradient")?;
        let mut tape = build_tape(&self.spec);
        tape.forward(self, x, None)?;
        tape.graph.backward(tape.log_prob_picks[class])?;
        Ok(tape.graph.gradient(tape.input)?.into_values())
    }

    /// Which side of zero each hidden pre-activation sits on.
    ///
    /// Two inputs with equal patterns see the same locally-linear region of
    /// a relu network, so a Taylor expansion between them has no kink error.
    /// Smooth (sigmoid) networks have no kinks; their pattern is empty.
    pub fn activation_pattern(&self, x: &[S]) -> Result<Vec<bool>> {
        self.check_input(x, "activation_pattern")?;
        if self.spec.activation == Activation::Sigmoid {
            return Ok(Vec::new());
        }
        let mut tape = build_tape(&self.spec);
        tape.forward(self, x, None)?;
        let mut pattern = Vec::new();
        for pre in &tape.preacts {
            for &v in tape.graph.value(*pre)?.values() {
                pattern.push(v > S::zero());
            }
        }
        Ok(pattern)
    }

    /// All parameters flattened into one vector: per layer, weights
    /// row-major then biases.
    pub fn flat_params(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.spec.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.values());
            out.extend_from_slice(b.values());
        }
        out
    }

    /// Replaces all parameters from a flat vector laid out as
    /// [`Model::flat_params`] produces.
    pub fn set_flat_params(&mut self, params: &[S]) -> Result<()> {
        if params.len() != self.spec.param_count() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                self.spec.param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wl = w.len();
            w.values_mut().copy_from_slice(&params[offset..offset + wl]);
            offset += wl;
            let bl = b.len();
            b.values_mut().copy_from_slice(&params[offset..offset + bl]);
            offset += bl;
        }
        Ok(())
    }

    /// True when every parameter is finite.
    pub fn params_finite(&self) -> bool {
        self.weights.iter().all(Tensor::all_finite) && self.biases.iter().all(Tensor::all_finite)
    }
}

/// Initialises a model with uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
///
/// Each layer draws from its own substream of the seed, so the initial
/// parameters of layer `l` do not depend on the widths of other layers.
pub fn build_mlp<S: Scalar>(spec: &MlpSpec, seed: u64) -> Result<Model<S>> {
    spec.validate()?;
    let init = SplitMix64::new(seed).stream(0);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let mut rng = init.stream(l as u64);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<S> = (0..fan_in * fan_out)
            .map(|_| S::from_f64_lit(rng.uniform(-bound, bound)))
            .collect();
        let b: Vec<S> = (0..fan_out)
            .map(|_| S::from_f64_lit(rng.uniform(-bound, bound)))
            .collect();
        weights.push(Tensor::matrix(fan_out, fan_in, w)?);
        biases.push(Tensor::vector(b));
    }
    Model::from_parts(spec.clone(), weights, biases)
}

/// Hyperparameters for plain stochastic gradient descent.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Full passes over the training data.
    pub epochs: usize,
    /// SGD step size.
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 0.01,
        }
    }
}

impl TrainConfig {
    /// Checks hyperparameter sanity.
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Checks that the dataset matches the architecture before training starts.
fn check_compat<S: Scalar>(spec: &MlpSpec, data: &LabeledDataset<S>) -> Result<()> {
    if data.feature_dim() != spec.input_dim {
        return Err(Error::InvalidConfig(format!(
            "model expects input dimension {} but data has {}",
            spec.input_dim,
            data.feature_dim()
        )));
    }
    match (spec.head, data.targets()) {
        (Head::Regression, Targets::Values(_)) => Ok(()),
        (Head::Classification, Targets::Labels { n_classes, .. }) => {
            if *n_classes != spec.output_dim {
                Err(Error::InvalidConfig(format!(
                    "model has {} outputs but data has {} classes",
                    spec.output_dim, n_classes
                )))
            } else {
                Ok(())
            }
        }
        (Head::Regression, Targets::Labels { .. }) => Err(Error::InvalidConfig(
            "regression model cannot train on class labels".into(),
        )),
        (Head::Classification, Targets::Values(_)) => Err(Error::InvalidConfig(
            "classification model cannot train on real-valued targets".into(),
        )),
    }
}

/// Trains a freshly initialised model by single-example SGD.
///
/// The run is a pure function of `(spec, data, cfg, seed)`: initialisation
/// and the per-epoch shuffle both derive from the seed, and every reduction
/// uses a fixed order. Epochs whose mean loss goes non-finite abort with
/// [`Error::TrainingDiverged`].
pub fn train<S: Scalar>(
    spec: &MlpSpec,
    data: &LabeledDataset<S>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Model<S>> {
    train_with_hook(spec, data, cfg, seed, |_, _, _| Ok(None))
}

/// [`train`] with a per-example input hook, the seam adversarial training
/// plugs into.
///
/// Right before each SGD step the hook sees the *current* model, the clean
/// example, and its target, and may return a replacement input (`None`
/// keeps the original, bit for bit). Everything else — initialisation,
/// shuffle order, update arithmetic — is identical to [`train`], so a hook
/// that always returns `None` reproduces clean training exactly.
pub fn train_with_hook<S: Scalar, F>(
    spec: &MlpSpec,
    data: &LabeledDataset<S>,
    cfg: &TrainConfig,
    seed: u64,
    mut hook: F,
) -> Result<Model<S>>
where
    F: FnMut(&Model<S>, &[S], &Target<S>) -> Result<Option<Vec<S>>>,
{
    cfg.validate()?;
    check_compat(spec, data)?;
    let mut model = build_mlp(spec, seed)?;
    let mut shuffle_rng = SplitMix64::new(seed).stream(1);
    let mut tape = build_tape(&spec.clone());
    let lr = S::from_f64_lit(cfg.learning_rate);

    for epoch in 0..cfg.epochs {
        let order = shuffle_rng.shuffle_indices(data.len());
        let mut losses = Vec::with_capacity(data.len());
        for &i in &order {
            let x = data.feature(i);
            let target = data.target(i);
            let replacement = hook(&model, x, &target)?;
            let x_used: &[S] = replacement.as_deref().unwrap_or(x);
            let node = tape.loss_node(spec, &target)?;
            let y = match target {
                Target::Value(v) => Some(v),
                Target::Label(_) => None,
            };
            tape.forward(&model, x_used, y)?;
            tape.graph.backward(node)?;
            losses.push(tape.graph.value(node)?.item()?);

            for (l, id) in tape.weights.iter().enumerate() {
                let g = tape.graph.gradient(*id)?;
                for (w, gv) in model.weights[l].values_mut().iter_mut().zip(g.values()) {
                    *w -= lr * *gv;
                }
            }
            for (l, id) in tape.biases.iter().enumerate() {
                let g = tape.graph.gradient(*id)?;
                for (b, gv) in model.biases[l].values_mut().iter_mut().zip(g.values()) {
                    *b -= lr * *gv;
                }
            }
        }
        let mean_loss = pairwise_mean(&losses);
        if !mean_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
    }
    if !model.params_finite() {
        return Err(Error::TrainingDiverged {
            epoch: cfg.epochs.saturating_sub(1),
        });
    }
    Ok(model)
}

// ---- binary model format ----------------------------------------------------
//
// Layout, all integers little-endian:
//   magic   4 bytes  "BVML"
//   version u32      currently 1
//   activation u32   0 = relu, 1 = sigmoid
//   head    u32      0 = regression, 1 = classification
//   input_dim  u32
//   output_dim u32
//   hidden count u32, then one u32 per hidden width
//   parameters: f64 bit patterns, per layer weights row-major then biases
//
// Parameters are stored as exact f64 bit patterns, so a save/load cycle is
// bit-identical for f64 models (and exact for f32, which embeds in f64).

const MODEL_MAGIC: &[u8; 4] = b"BVML";
const MODEL_VERSION: u32 = 1;

fn activation_tag(a: Activation) -> u32 {
    match a {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
    }
}

fn head_tag(h: Head) -> u32 {
    match h {
        Head::Regression => 0,
        Head::Classification => 1,
    }
}

/// Incremental reader over a model byte buffer with contextual errors.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                "model file",
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        let mut arr = [0u8; 8];
        arr.copy_from_slice(b);
        Ok(f64::from_le_bytes(arr))
    }
}

impl<S: Scalar> Model<S> {
    /// Serialises the model to its binary format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&activation_tag(self.spec.activation).to_le_bytes());
        out.extend_from_slice(&head_tag(self.spec.head).to_le_bytes());
        out.extend_from_slice(&(self.spec.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.spec.output_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.spec.hidden.len() as u32).to_le_bytes());
        for &h in &self.spec.hidden {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        for p in self.flat_params() {
            let v = p.to_f64().expect("scalar converts to f64");
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a model from its binary format.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let magic = c.take(4, "magic")?;
        if magic != MODEL_MAGIC {
            return Err(Error::format(
                "model file",
                format!("bad magic {magic:02x?}, expected {MODEL_MAGIC:02x?}"),
            ));
        }
        let version = c.u32("version")?;
        if version != MODEL_VERSION {
            return Err(Error::format(
                "model file",
                format!("unsupported version {version}, expected {MODEL_VERSION}"),
            ));
        }
        let activation = match c.u32("activation")? {
            0 => Activation::Relu,
            1 => Activation::Sigmoid,
            t => {
                return Err(Error::format(
                    "model file",
                    format!("unknown activation tag {t}"),
                ))
            }
        };
        let head = match c.u32("head")? {
            0 => Head::Regression,
            1 => Head::Classification,
            t => return Err(Error::format("model file", format!("unknown head tag {t}"))),
        };
        let input_dim = c.u32("input_dim")? as usize;
        let output_dim = c.u32("output_dim")? as usize;
        let n_hidden = c.u32("hidden layer count")? as usize;
        let mut hidden = Vec::with_capacity(n_hidden);
        for l in 0..n_hidden {
            hidden.push(c.u32(&format!("hidden width {l}"))? as usize);
        }
        let spec = MlpSpec {
            input_dim,
            hidden,
            output_dim,
            activation,
            head,
        };
        spec.validate()
            .map_err(|e| Error::format("model file", e.to_string()))?;

        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let mut w = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in * fan_out {
                let v = c.f64(&format!("layer {l} weights"))?;
                if !v.is_finite() {
                    return Err(Error::format(
                        "model file",
                        format!("non-finite parameter in layer {l} weights"),
                    ));
                }
                w.push(S::from_f64_lit(v));
            }
            let mut b = Vec::with_capacity(fan_out);
            for _ in 0..fan_out {
                let v = c.f64(&format!("layer {l} bias"))?;
                if !v.is_finite() {
                    return Err(Error::format(
                        "model file",
                        format!("non-finite parameter in layer {l} bias"),
                    ));
                }
                b.push(S::from_f64_lit(v));
            }
            weights.push(Tensor::matrix(fan_out, fan_in, w)?);
            biases.push(Tensor::vector(b));
        }
        if c.pos != bytes.len() {
            return Err(Error::format(
                "model file",
                format!("{} trailing bytes after parameters", bytes.len() - c.pos),
            ));
        }
        Model::from_parts(spec, weights, biases)
    }

    /// Writes the binary format to a file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Reads a model from a file in the binary format.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Model::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_linear_regression, LinearTaskConfig};
    use crate::finite_diff::{check_gradient, FiniteDiffConfig};

    fn reg_spec() -> MlpSpec {
        MlpSpec {
            input_dim: 2,
            hidden: vec![8],
            output_dim: 1,
            activation: Activation::Sigmoid,
            head: Head::Regression,
        }
    }

    fn cls_spec() -> MlpSpec {
        MlpSpec {
            input_dim: 3,
            hidden: vec![6],
            output_dim: 3,
            activation: Activation::Sigmoid,
            head: Head::Classification,
        }
    }

    #[test]
    fn spec_validation_catches_bad_dimensions() {
        let mut s = reg_spec();
        s.input_dim = 0;
        assert!(s.validate().is_err());

        let mut s = reg_spec();
        s.hidden = vec![4, 0];
        assert!(s.validate().is_err());

        let mut s = reg_spec();
        s.output_dim = 2;
        assert!(s.validate().unwrap_err().to_string().contains("regression"));

        let mut s = cls_spec();
        s.output_dim = 1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn initialisation_is_seeded_and_bounded() {
        let a = build_mlp::<f64>(&reg_spec(), 5).unwrap();
        let b = build_mlp::<f64>(&reg_spec(), 5).unwrap();
        assert_eq!(a, b);
        let c = build_mlp::<f64>(&reg_spec(), 6).unwrap();
        assert_ne!(a, c);

        // Layer 0 has fan_in 2, layer 1 fan_in 8.
        for (l, bound) in [(0usize, 1.0 / 2f64.sqrt()), (1, 1.0 / 8f64.sqrt())] {
            for &w in a.weights()[l].values() {
                assert!(w.abs() <= bound, "layer {l} weight {w} exceeds {bound}");
            }
        }
    }

    #[test]
    fn predict_matches_hand_rolled_forward() {
        // 1-2-1 sigmoid regression net with tiny explicit parameters.
        let spec = MlpSpec {
            input_dim: 1,
            hidden: vec![2],
            output_dim: 1,
            activation: Activation::Sigmoid,
            head: Head::Regression,
        };
        let model = Model::from_parts(
            spec,
            vec![
                Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap(),
                Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap(),
            ],
            vec![Tensor::vector(vec![0.1, -0.2]), Tensor::vector(vec![0.25])],
        )
        .unwrap();

        let x = 0.8;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let h0 = sig(0.5 * x + 0.1);
        let h1 = sig(-x - 0.2);
        let expected = 2.0 * h0 + 3.0 * h1 + 0.25;
        let got = model.predict_scalar(&[x]).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn probabilities_form_a_distribution() {
        let model = build_mlp::<f64>(&cls_spec(), 3).unwrap();
        let p = model.probs(&[0.2, -0.4, 1.0]).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v > 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn input_gradients_agree_with_central_differences() {
        let fd = FiniteDiffConfig::default();

        let m = build_mlp::<f64>(&reg_spec(), 11).unwrap();
        let x = [0.3, -0.6];
        let target = Target::Value(0.7);
        let analytic = m.input_gradient(&x, &target).unwrap();
        let f = |v: &[f64]| m.loss(v, &target).unwrap();
        let worst = check_gradient(&f, &x, &analytic, &fd).unwrap();
        assert!(worst < 1e-6, "regression loss gradient error {worst}");

        let m = build_mlp::<f64>(&cls_spec(), 12).unwrap();
        let x = [0.5, 0.1, -0.9];
        let target = Target::Label(2);
        let analytic = m.input_gradient(&x, &target).unwrap();
        let f = |v: &[f64]| m.loss(v, &target).unwrap();
        let worst = check_gradient(&f, &x, &analytic, &fd).unwrap();
        assert!(worst < 1e-6, "cross-entropy gradient error {worst}");
    }

    #[test]
    fn output_and_logprob_gradients_agree_with_central_differences() {
        let fd = FiniteDiffConfig::default();

        let m = build_mlp::<f64>(&reg_spec(), 21).unwrap();
        let x = [0.4, 0.9];
        let analytic = m.output_gradient(&x).unwrap();
        let f = |v: &[f64]| m.predict_scalar(v).unwrap();
        assert!(check_gradient(&f, &x, &analytic, &fd).unwrap() < 1e-6);

        let m = build_mlp::<f64>(&cls_spec(), 22).unwrap();
        let x = [0.0, 0.3, -0.3];
        for class in 0..3 {
            let analytic = m.logprob_gradient(&x, class).unwrap();
            let f = |v: &[f64]| m.log_probs(v).unwrap()[class];
            assert!(check_gradient(&f, &x, &analytic, &fd).unwrap() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_exact_negation_of_logprob_gradient() {
        let m = build_mlp::<f64>(&cls_spec(), 33).unwrap();
        let x = [1.2, -0.5, 0.05];
        for class in 0..3 {
            let ce = m.input_gradient(&x, &Target::Label(class)).unwrap();
            let lp = m.logprob_gradient(&x, class).unwrap();
            for (a, b) in ce.iter().zip(&lp) {
                // Bit-exact negation, not just approximate.
                assert_eq!(a.to_bits(), (-b).to_bits());
            }
        }
    }

    #[test]
    fn param_count_and_flat_roundtrip() {
        let spec = reg_spec();
        assert_eq!(spec.param_count(), 2 * 8 + 8 + 8 + 1);
        let mut m = build_mlp::<f64>(&spec, 9).unwrap();
        let flat = m.flat_params();
        assert_eq!(flat.len(), spec.param_count());
        let mut changed = flat.clone();
        changed[0] += 1.0;
        m.set_flat_params(&changed).unwrap();
        assert_eq!(m.flat_params(), changed);
        assert!(m.set_flat_params(&changed[1..]).is_err());
    }

    #[test]
    fn activation_pattern_tracks_preactivation_signs() {
        let spec = MlpSpec {
            input_dim: 1,
            hidden: vec![2],
            output_dim: 1,
            activation: Activation::Relu,
            head: Head::Regression,
        };
        // Hidden pre-activations are x - 1 and -x: at x = 2 the pattern is
        // [true, false]; at x = 0.5 it is [false, false] (note -0.5 < 0).
        let model = Model::from_parts(
            spec,
            vec![
                Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap(),
                Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(),
            ],
            vec![Tensor::vector(vec![-1.0, 0.0]), Tensor::vector(vec![0.0])],
        )
        .unwrap();
        assert_eq!(model.activation_pattern(&[2.0]).unwrap(), vec![true, false]);
        assert_eq!(
            model.activation_pattern(&[0.5]).unwrap(),
            vec![false, false]
        );

        let smooth = build_mlp::<f64>(&reg_spec(), 1).unwrap();
        assert!(smooth.activation_pattern(&[0.0, 0.0]).unwrap().is_empty());
    }

    #[test]
    fn training_fits_a_linear_function_and_is_bit_reproducible() {
        let cfg = LinearTaskConfig {
            n: 200,
            dim: 2,
            noise_half_width: 0.0,
            ..Default::default()
        };
        let (data, task) = gen_linear_regression::<f64>(&cfg, 17).unwrap();
        let spec = MlpSpec {
            input_dim: 2,
            hidden: vec![16],
            output_dim: 1,
            activation: Activation::Relu,
            head: Head::Regression,
        };
        let train_cfg = TrainConfig {
            epochs: 60,
            learning_rate: 0.05,
        };
        let m1 = train(&spec, &data, &train_cfg, 7).unwrap();
        let m2 = train(&spec, &data, &train_cfg, 7).unwrap();
        assert_eq!(m1, m2, "same seed must reproduce the same parameters");

        let mut sq = 0.0;
        for i in 0..data.len() {
            let err = m1.predict_scalar(data.feature(i)).unwrap() - task.eval(data.feature(i));
            sq += err * err;
        }
        let mse = sq / data.len() as f64;
        assert!(mse < 1e-3, "trained MSE too high: {mse}");
    }

    #[test]
    fn divergent_training_reports_the_epoch() {
        let cfg = LinearTaskConfig {
            n: 50,
            ..Default::default()
        };
        let (data, _) = gen_linear_regression::<f64>(&cfg, 2).unwrap();
        let spec = reg_spec();
        let bad = TrainConfig {
            epochs: 30,
            learning_rate: 1e12,
        };
        match train(&spec, &data, &bad, 1) {
            Err(Error::TrainingDiverged { epoch }) => assert!(epoch < 30),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn training_rejects_mismatched_data() {
        let cfg = LinearTaskConfig {
            n: 10,
            ..Default::default()
        };
        let (data, _) = gen_linear_regression::<f64>(&cfg, 2).unwrap();
        let mut cls = cls_spec();
        cls.input_dim = data.feature_dim();
        let err = train(&cls, &data, &TrainConfig::default(), 0).unwrap_err();
        assert!(err.to_string().contains("real-valued targets"), "{err}");

        let mut spec = reg_spec();
        spec.input_dim = 5;
        let err = train(&spec, &data, &TrainConfig::default(), 0).unwrap_err();
        assert!(err.to_string().contains("input dimension"), "{err}");
    }

    #[test]
    fn model_serialisation_roundtrips_bit_exactly() {
        for spec in [reg_spec(), cls_spec()] {
            let model = build_mlp::<f64>(&spec, 77).unwrap();
            let bytes = model.to_bytes();
            assert_eq!(&bytes[..4], b"BVML");
            let back = Model::<f64>::from_bytes(&bytes).unwrap();
            assert_eq!(model.spec(), back.spec());
            let (a, b) = (model.flat_params(), back.flat_params());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(bytes, back.to_bytes());
        }
    }

    #[test]
    fn model_parser_rejects_malformed_files() {
        let model = build_mlp::<f64>(&reg_spec(), 1).unwrap();
        let good = model.to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = Model::<f64>::from_bytes(&bad_magic).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        let err = Model::<f64>::from_bytes(&bad_version).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        let truncated = &good[..good.len() - 3];
        let err = Model::<f64>::from_bytes(truncated).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut trailing = good.clone();
        trailing.push(0);
        let err = Model::<f64>::from_bytes(&trailing).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");

        let mut bad_tag = good;
        bad_tag[8] = 7;
        let err = Model::<f64>::from_bytes(&bad_tag).unwrap_err();
        assert!(err.to_string().contains("activation"), "{err}");
    }

    #[test]
    fn save_and_load_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bvml");
        let model = build_mlp::<f64>(&cls_spec(), 123).unwrap();
        model.save(&path).unwrap();
        let back = Model::<f64>::load(&path).unwrap();
        assert_eq!(model, back);

        let err = Model::<f64>::load(dir.path().join("missing.bvml")).unwrap_err();
        assert!(err.to_string().contains("missing.bvml"), "{err}");
    }
}
